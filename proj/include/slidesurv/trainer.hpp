#pragma once

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "slidesurv/data_io.hpp"
#include "slidesurv/model.hpp"
#include "slidesurv/types.hpp"

namespace slidesurv {

// Adam with decoupled weight decay. Decay applies only to entries flagged
// for it (weight matrices; biases, norms and anchors are exempt).
template <class Scalar>
class AdamW {
public:
    AdamW(Scalar lr, Scalar weight_decay)
        : lr_(lr), weight_decay_(weight_decay) {}

    void step(ParamStore<Scalar>& params, const std::vector<MatX<Scalar>>& grads) {
        if (static_cast<int>(grads.size()) != params.size())
            throw std::invalid_argument("AdamW::step: gradient count mismatch");
        if (m_.empty()) {
            m_.resize(grads.size());
            v_.resize(grads.size());
            for (std::size_t i = 0; i < grads.size(); ++i) {
                m_[i] = MatX<Scalar>::Zero(grads[i].rows(), grads[i].cols());
                v_[i] = MatX<Scalar>::Zero(grads[i].rows(), grads[i].cols());
            }
        }
        ++step_;
        const Scalar bc1 = Scalar(1) - std::pow(beta1_, static_cast<Scalar>(step_));
        const Scalar bc2 = Scalar(1) - std::pow(beta2_, static_cast<Scalar>(step_));
        for (int i = 0; i < params.size(); ++i) {
            auto& e = params[i];
            if (!e.trainable) continue;
            const auto idx = static_cast<std::size_t>(i);
            m_[idx] = beta1_ * m_[idx] + (Scalar(1) - beta1_) * grads[idx];
            v_[idx] = (beta2_ * v_[idx].array() +
                       (Scalar(1) - beta2_) * grads[idx].array().square())
                          .matrix();
            const MatX<Scalar> update =
                ((m_[idx].array() / bc1) / ((v_[idx].array() / bc2).sqrt() + eps_)).matrix();
            e.value -= lr_ * update;
            if (e.decay && weight_decay_ > Scalar(0)) e.value -= lr_ * weight_decay_ * e.value;
        }
    }

private:
    Scalar lr_;
    Scalar weight_decay_;
    Scalar beta1_ = Scalar(0.9);
    Scalar beta2_ = Scalar(0.999);
    Scalar eps_ = Scalar(1e-8);
    long step_ = 0;
    std::vector<MatX<Scalar>> m_;
    std::vector<MatX<Scalar>> v_;
};

struct TrainOptions {
    int epochs = 20;
    double learning_rate = 2e-4;
    double weight_decay = 1e-3;
    std::uint64_t seed = 1;
};

struct EpochStats {
    double mean_loss = 0.0;
    double mean_nll = 0.0;
    int floored = 0;
    int fallbacks = 0;
};

// Batch size is one slide: one gradient step per slide, epoch order
// reshuffled from the run seed.
template <class Scalar>
std::vector<EpochStats> train_model(SurvivalModel<Scalar>& model,
                                    const std::vector<SlideBag<Scalar>>& bags,
                                    const std::vector<SurvivalLabel>& labels,
                                    const TrainOptions& opts) {
    if (bags.empty() || bags.size() != labels.size())
        throw std::invalid_argument("train_model: bags and labels must align");
    AdamW<Scalar> optimizer(static_cast<Scalar>(opts.learning_rate),
                            static_cast<Scalar>(opts.weight_decay));
    Rng run_rng(opts.seed);
    std::vector<EpochStats> log;
    std::vector<int> order(bags.size());
    std::iota(order.begin(), order.end(), 0);
    ad::Tape<Scalar> tape;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        Rng epoch_rng = run_rng.child(static_cast<std::uint64_t>(epoch));
        epoch_rng.shuffle(order);
        EpochStats stats;
        for (int idx : order) {
            const auto& bag = bags[static_cast<std::size_t>(idx)];
            const auto& lbl = labels[static_cast<std::size_t>(idx)];
            tape.clear();
            Rng step_rng = epoch_rng.child(static_cast<std::uint64_t>(idx) + 101);
            auto fwd = model.loss_forward(tape, bag.features, bag.coords, lbl.time, lbl.event,
                                          /*training=*/true, step_rng);
            stats.mean_loss += ad::scalar_value(fwd.total);
            stats.mean_nll += ad::scalar_value(fwd.nll);
            stats.floored += fwd.floored ? 1 : 0;
            stats.fallbacks += fwd.selection_fallback ? 1 : 0;
            optimizer.step(model.params(), model.gradients(tape, fwd.total));
        }
        stats.mean_loss /= static_cast<double>(bags.size());
        stats.mean_nll /= static_cast<double>(bags.size());
        log.push_back(stats);
    }
    return log;
}

}  // namespace slidesurv
