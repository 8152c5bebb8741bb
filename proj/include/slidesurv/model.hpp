#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slidesurv/attention.hpp"
#include "slidesurv/autodiff.hpp"
#include "slidesurv/graph.hpp"
#include "slidesurv/params.hpp"
#include "slidesurv/selection.hpp"
#include "slidesurv/special.hpp"
#include "slidesurv/survival.hpp"
#include "slidesurv/types.hpp"

namespace slidesurv {

struct ModelConfig {
    int feature_dim = 0;       // required
    int selector_hidden = 256;
    int heads = 8;
    int knn = 10;
    int cluster_size = 64;
    int clusters = 0;          // 0: derive as ceil(m / cluster_size)
    int gmm_components = 100;
    int experts = 2;
    int pool_hidden = 128;     // d_a
    int encoder_hidden = 128;
    int encoder_out = 128;     // d_e
    int kmeans_max_iters = 100;
    double quantile = 0.25;
    double dropout = 0.1;
    double lambda_div = 0.01;
    double lambda_ent = 0.01;
    double time_scale = 365.0;       // observed times are divided by this
    bool dynamic_filtering = true;   // off reproduces the "w/o dynamic filtering" arm
    bool cluster_attention = true;   // off reproduces the "w/o cluster attention" arm

    void validate() const {
        if (feature_dim < 1) throw std::invalid_argument("config: feature_dim required");
        if (heads < 1 || feature_dim % heads != 0)
            throw std::invalid_argument("config: heads must divide feature_dim");
        if (!(quantile >= 0.0 && quantile < 1.0))
            throw std::invalid_argument("config: quantile must be in [0, 1)");
        if (experts < 1 || experts > 2)
            throw std::invalid_argument("config: experts must be 1 or 2");
        if (gmm_components < 1) throw std::invalid_argument("config: gmm_components >= 1");
        if (knn < 1) throw std::invalid_argument("config: knn >= 1");
        if (cluster_size < 1 && clusters < 1)
            throw std::invalid_argument("config: need cluster_size or clusters");
        if (!(dropout >= 0.0 && dropout < 1.0))
            throw std::invalid_argument("config: dropout must be in [0, 1)");
        if (!(time_scale > 0.0)) throw std::invalid_argument("config: time_scale must be > 0");
        if (selector_hidden < 1 || pool_hidden < 1 || encoder_hidden < 1 || encoder_out < 1)
            throw std::invalid_argument("config: hidden sizes must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"feature_dim", c.feature_dim},
                       {"selector_hidden", c.selector_hidden},
                       {"heads", c.heads},
                       {"knn", c.knn},
                       {"cluster_size", c.cluster_size},
                       {"clusters", c.clusters},
                       {"gmm_components", c.gmm_components},
                       {"experts", c.experts},
                       {"pool_hidden", c.pool_hidden},
                       {"encoder_hidden", c.encoder_hidden},
                       {"encoder_out", c.encoder_out},
                       {"kmeans_max_iters", c.kmeans_max_iters},
                       {"quantile", c.quantile},
                       {"dropout", c.dropout},
                       {"lambda_div", c.lambda_div},
                       {"lambda_ent", c.lambda_ent},
                       {"time_scale", c.time_scale},
                       {"dynamic_filtering", c.dynamic_filtering},
                       {"cluster_attention", c.cluster_attention}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("feature_dim").get_to(c.feature_dim);
    j.at("selector_hidden").get_to(c.selector_hidden);
    j.at("heads").get_to(c.heads);
    j.at("knn").get_to(c.knn);
    j.at("cluster_size").get_to(c.cluster_size);
    j.at("clusters").get_to(c.clusters);
    j.at("gmm_components").get_to(c.gmm_components);
    j.at("experts").get_to(c.experts);
    j.at("pool_hidden").get_to(c.pool_hidden);
    j.at("encoder_hidden").get_to(c.encoder_hidden);
    j.at("encoder_out").get_to(c.encoder_out);
    j.at("kmeans_max_iters").get_to(c.kmeans_max_iters);
    j.at("quantile").get_to(c.quantile);
    j.at("dropout").get_to(c.dropout);
    j.at("lambda_div").get_to(c.lambda_div);
    j.at("lambda_ent").get_to(c.lambda_ent);
    j.at("time_scale").get_to(c.time_scale);
    j.at("dynamic_filtering").get_to(c.dynamic_filtering);
    j.at("cluster_attention").get_to(c.cluster_attention);
}

template <class Scalar>
class SurvivalModel {
public:
    // t_min / t_max: observed time range of the training fold (original
    // units), used to seed the shared GMM anchors.
    SurvivalModel(const ModelConfig& cfg, std::uint64_t init_seed, double t_min, double t_max)
        : cfg_(cfg), t_min_(t_min), t_max_(t_max) {
        cfg_.validate();
        if (!(t_min > 0.0) || t_max < t_min)
            throw std::invalid_argument("model: invalid time range");
        Rng rng(init_seed);
        init_params(rng, t_min / cfg_.time_scale, t_max / cfg_.time_scale);
    }

    // Observed time range (original units) of the fold the model was
    // initialized on; kept in the checkpoint for prediction grids.
    double t_min() const { return t_min_; }
    double t_max() const { return t_max_; }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<Scalar>& params() { return params_; }
    const ParamStore<Scalar>& params() const { return params_; }

    struct Forward {
        ad::Var<Scalar> total;
        ad::Var<Scalar> nll;
        ad::Var<Scalar> diversity;
        ad::Var<Scalar> gate_entropy;
        bool floored = false;
        bool selection_fallback = false;
        int selected = 0;
        int clusters_used = 0;
    };

    // Builds the full loss graph for one slide on the given tape.
    Forward loss_forward(ad::Tape<Scalar>& tape, const MatX<Scalar>& features,
                         const MatX<Scalar>& coords, double time, int event, bool training,
                         Rng& rng) const {
        if (!(time > 0.0)) throw std::invalid_argument("loss_forward: time must be > 0");
        Bound b = bind(tape);
        Pooled pooled = pooled_forward(tape, b, features, coords, training, rng);
        SurvivalLossTerms<Scalar> terms = survival_loss(
            encode(pooled.z, b.moe), b.moe, static_cast<Scalar>(time / cfg_.time_scale), event,
            static_cast<Scalar>(cfg_.lambda_div), static_cast<Scalar>(cfg_.lambda_ent));
        Forward out;
        out.total = terms.total;
        out.nll = terms.nll;
        out.diversity = terms.diversity;
        out.gate_entropy = terms.gate_entropy;
        out.floored = terms.floored;
        out.selection_fallback = pooled.selection_fallback;
        out.selected = pooled.selected;
        out.clusters_used = pooled.clusters_used;
        return out;
    }

    // Gradient of the loss for every parameter, aligned with params() order.
    std::vector<MatX<Scalar>> gradients(ad::Tape<Scalar>& tape, ad::Var<Scalar> loss) const {
        tape.backward(loss);
        std::vector<MatX<Scalar>> grads;
        grads.reserve(bound_ids_.size());
        for (int id : bound_ids_) grads.push_back(tape.grad(ad::Var<Scalar>{&tape, id}));
        return grads;
    }

    // Deterministic eval-mode density for curve prediction. Times passed to
    // the returned evaluator are in original units.
    MixtureDensity<Scalar> predict_density(const MatX<Scalar>& features,
                                           const MatX<Scalar>& coords) const {
        ad::Tape<Scalar> tape;
        Bound b = bind(tape);
        Rng rng(0x5eed);  // eval path consumes randomness only in k-means seeding
        Pooled pooled = pooled_forward(tape, b, features, coords, /*training=*/false, rng);
        return extract_density(encode(pooled.z, b.moe), b.moe);
    }

    double time_scale() const { return cfg_.time_scale; }

    // SPF at original-unit time t for a previously extracted density.
    Scalar spf_at(const MixtureDensity<Scalar>& d, double t) const {
        return d.spf(static_cast<Scalar>(t / cfg_.time_scale));
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::json j;
        j["format"] = "slidesurv.checkpoint";
        j["version"] = 1;
        j["config"] = cfg_;
        j["time_range"] = {t_min_, t_max_};
        j["params"] = params_to_json(params_);
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
        out << j.dump(1) << "\n";
    }

    static SurvivalModel load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
        nlohmann::json j;
        in >> j;
        if (j.value("format", std::string{}) != "slidesurv.checkpoint")
            throw std::runtime_error("not a checkpoint file: " + path.string());
        if (j.value("version", 0) != 1)
            throw std::runtime_error("unsupported checkpoint version in " + path.string());
        ModelConfig cfg = j.at("config").get<ModelConfig>();
        const auto range = j.at("time_range").get<std::vector<double>>();
        if (range.size() != 2) throw std::runtime_error("checkpoint: bad time_range");
        SurvivalModel model(cfg, /*init_seed=*/0, range[0], range[1]);
        params_from_json(j.at("params"), model.params_);
        return model;
    }

private:
    struct Bound {
        SelectorParams<Scalar> selector;
        ad::Var<Scalar> fusion_logits;  // 2 x 1
        MhsaParams<Scalar> intra;
        MhsaParams<Scalar> inter;
        PoolParams<Scalar> pool;
        MoeVars<Scalar> moe;
    };

    struct Pooled {
        ad::Var<Scalar> z;  // 1 x d
        bool selection_fallback = false;
        int selected = 0;
        int clusters_used = 0;
    };

    void init_params(Rng& rng, double t_min_scaled, double t_max_scaled) {
        const int d = cfg_.feature_dim;
        const int dh = d / cfg_.heads;
        auto xavier = [&rng](int rows, int cols) {
            MatX<Scalar> m(rows, cols);
            const double std = std::sqrt(2.0 / (rows + cols));
            for (Eigen::Index i = 0; i < m.size(); ++i)
                m.data()[i] = static_cast<Scalar>(rng.normal() * std);
            return m;
        };
        auto zeros = [](int rows, int cols) { return MatX<Scalar>::Zero(rows, cols); };
        auto ones = [](int rows, int cols) { return MatX<Scalar>::Ones(rows, cols); };

        params_.add("selector.w1", xavier(d, cfg_.selector_hidden));
        params_.add("selector.b1", zeros(1, cfg_.selector_hidden), true, false);
        params_.add("selector.w2", xavier(cfg_.selector_hidden, 1));
        params_.add("selector.b2", zeros(1, 1), true, false);

        MatX<Scalar> fusion(2, 1);
        fusion(0, 0) = static_cast<Scalar>(std::log(0.8));
        fusion(1, 0) = static_cast<Scalar>(std::log(0.2));
        params_.add("fusion.logits", fusion, true, false);

        for (const char* block : {"intra", "inter"}) {
            const std::string prefix(block);
            for (int h = 0; h < cfg_.heads; ++h) {
                const std::string hp = prefix + ".head" + std::to_string(h);
                params_.add(hp + ".wq", xavier(d, dh));
                params_.add(hp + ".wk", xavier(d, dh));
                params_.add(hp + ".wv", xavier(d, dh));
            }
            params_.add(prefix + ".wo", xavier(d, d));
            params_.add(prefix + ".ln_gamma", ones(1, d), true, false);
            params_.add(prefix + ".ln_beta", zeros(1, d), true, false);
        }

        params_.add("pool.wh", xavier(d, cfg_.pool_hidden));
        params_.add("pool.wa", xavier(cfg_.pool_hidden, 1));

        params_.add("moe.enc.w1", xavier(d, cfg_.encoder_hidden));
        params_.add("moe.enc.b1", zeros(1, cfg_.encoder_hidden), true, false);
        params_.add("moe.enc.w2", xavier(cfg_.encoder_hidden, cfg_.encoder_out));
        params_.add("moe.enc.b2", zeros(1, cfg_.encoder_out), true, false);

        // Shared anchors: means linearly spaced over the transformed observed
        // range, stddev anchors sized so softplus gives roughly range / K.
        const int k = cfg_.gmm_components;
        const double y_min = inverse_softplus(t_min_scaled);
        const double y_max = inverse_softplus(t_max_scaled);
        const double range = std::max(y_max - y_min, 1.0);
        MatX<Scalar> p_mu(k, 1);
        for (int i = 0; i < k; ++i)
            p_mu(i, 0) = static_cast<Scalar>(
                y_min + (k == 1 ? 0.5 : static_cast<double>(i) / (k - 1)) * (y_max - y_min));
        const double sigma_target = std::max(range / k, 0.05);
        MatX<Scalar> p_sigma =
            MatX<Scalar>::Constant(k, 1, static_cast<Scalar>(inverse_softplus(sigma_target)));
        params_.add("moe.p_mu", p_mu, true, false);
        params_.add("moe.p_sigma", p_sigma, true, false);

        for (int e = 0; e < cfg_.experts; ++e) {
            const std::string ep = "moe.e" + std::to_string(e);
            MatX<Scalar> w_mu = MatX<Scalar>::Identity(k, k);
            MatX<Scalar> w_sigma = MatX<Scalar>::Identity(k, k);
            for (Eigen::Index i = 0; i < w_mu.size(); ++i) {
                w_mu.data()[i] += static_cast<Scalar>(0.01 * rng.normal());
                w_sigma.data()[i] += static_cast<Scalar>(0.01 * rng.normal());
            }
            params_.add(ep + ".w_mu", w_mu, true, false);
            params_.add(ep + ".w_sigma", w_sigma, true, false);
            params_.add(ep + ".lam_w", xavier(cfg_.encoder_out, k));
            params_.add(ep + ".lam_b", zeros(1, k), true, false);
        }
        params_.add("moe.gate.w", xavier(cfg_.encoder_out, cfg_.experts));
    }

    Bound bind(ad::Tape<Scalar>& tape) const {
        bound_ids_.clear();
        std::vector<ad::Var<Scalar>> vars = bind_params(tape, params_);
        for (const auto& v : vars) bound_ids_.push_back(v.id);
        auto get = [&](const std::string& name) {
            const int i = params_.find(name);
            if (i < 0) throw std::logic_error("unbound parameter " + name);
            return vars[static_cast<std::size_t>(i)];
        };
        Bound b;
        b.selector = {get("selector.w1"), get("selector.b1"), get("selector.w2"),
                      get("selector.b2")};
        b.fusion_logits = get("fusion.logits");
        for (const char* block : {"intra", "inter"}) {
            const std::string prefix(block);
            MhsaParams<Scalar>& m = prefix == "intra" ? b.intra : b.inter;
            for (int h = 0; h < cfg_.heads; ++h) {
                const std::string hp = prefix + ".head" + std::to_string(h);
                m.wq.push_back(get(hp + ".wq"));
                m.wk.push_back(get(hp + ".wk"));
                m.wv.push_back(get(hp + ".wv"));
            }
            m.wo = get(prefix + ".wo");
            m.ln_gamma = get(prefix + ".ln_gamma");
            m.ln_beta = get(prefix + ".ln_beta");
            m.dropout_rate = static_cast<Scalar>(cfg_.dropout);
        }
        b.pool = {get("pool.wh"), get("pool.wa")};
        b.moe.enc_w1 = get("moe.enc.w1");
        b.moe.enc_b1 = get("moe.enc.b1");
        b.moe.enc_w2 = get("moe.enc.w2");
        b.moe.enc_b2 = get("moe.enc.b2");
        b.moe.p_mu = get("moe.p_mu");
        b.moe.p_sigma = get("moe.p_sigma");
        for (int e = 0; e < cfg_.experts; ++e) {
            const std::string ep = "moe.e" + std::to_string(e);
            b.moe.experts.push_back({get(ep + ".w_mu"), get(ep + ".w_sigma"),
                                     get(ep + ".lam_w"), get(ep + ".lam_b")});
        }
        b.moe.gate_w = get("moe.gate.w");
        return b;
    }

    // Shared front half: selection, clustering, attention, pooling.
    Pooled pooled_forward(ad::Tape<Scalar>& tape, const Bound& b, const MatX<Scalar>& features,
                          const MatX<Scalar>& coords, bool training, Rng& rng) const {
        using namespace ad;
        if (features.rows() < 1 || features.cols() != cfg_.feature_dim)
            throw std::invalid_argument("forward: feature matrix does not match config");
        if (coords.rows() != features.rows() || coords.cols() != 2)
            throw std::invalid_argument("forward: coords must be n x 2");
        Var<Scalar> x = tape.constant(features);

        Pooled out;
        Var<Scalar> p_sel, p_rem;
        IndexList i_sel;
        if (cfg_.dynamic_filtering) {
            Var<Scalar> logits = score_patches(x, b.selector);
            const Scalar tau =
                quantile_threshold<Scalar>(logits.value(), static_cast<Scalar>(cfg_.quantile));
            Var<Scalar> weighted = rowscale(x, logits);
            SelectionResult<Scalar> sel =
                split_patches(weighted, logits, tau, static_cast<Scalar>(cfg_.quantile));
            p_sel = sel.p_sel;
            p_rem = sel.p_rem;
            i_sel = sel.i_sel;
            out.selection_fallback = sel.fallback;
        } else {
            p_sel = x;
            i_sel.resize(static_cast<std::size_t>(features.rows()));
            for (std::size_t i = 0; i < i_sel.size(); ++i) i_sel[i] = static_cast<int>(i);
        }
        out.selected = static_cast<int>(i_sel.size());

        Var<Scalar> p_final;
        if (cfg_.cluster_attention) {
            const auto m_sel = static_cast<int>(i_sel.size());
            MatX<Scalar> coords_sel(m_sel, 2);
            for (int i = 0; i < m_sel; ++i) coords_sel.row(i) = coords.row(i_sel[i]);
            // clustering runs on detached values
            NormalizedInputs<Scalar> norm = normalize_inputs(p_sel.value(), coords_sel);
            const auto [w_morph, w_spatial] = fusion_weights(
                b.fusion_logits.value()(0, 0), b.fusion_logits.value()(1, 0));
            std::vector<IndexList> groups;
            if (m_sel >= 2) {
                MatX<Scalar> sim =
                    fused_similarity(norm.features, norm.coords, w_morph, w_spatial);
                KnnGraph<Scalar> graph = build_knn_graph(sim, cfg_.knn);
                const int n_clusters = cluster_count(m_sel, cfg_.cluster_size, cfg_.clusters);
                Clustering<Scalar> clus = graph_guided_kmeans(
                    graph, norm.features, n_clusters, rng, cfg_.kmeans_max_iters);
                groups = cluster_index_groups(clus.labels, clus.num_clusters);
            } else {
                groups.push_back(IndexList{0});
            }
            out.clusters_used = static_cast<int>(groups.size());
            std::vector<Var<Scalar>> clusters;
            clusters.reserve(groups.size());
            for (const IndexList& g : groups) clusters.push_back(gather_rows(p_sel, g));
            std::vector<Var<Scalar>> refined =
                intra_cluster_attention(clusters, b.intra, training, rng);
            Var<Scalar> reps = cluster_representatives(refined);
            Var<Scalar> refined_reps = inter_cluster_attention(reps, b.inter, training, rng);
            p_final = integrate_features(refined, refined_reps, p_rem);
        } else {
            out.clusters_used = 0;
            if (p_rem.valid() && p_rem.rows() > 0)
                p_final = concat_rows<Scalar>({p_sel, p_rem});
            else
                p_final = p_sel;
        }
        out.z = gated_attention_pool(p_final, b.pool);
        return out;
    }

    ModelConfig cfg_;
    double t_min_ = 1.0;
    double t_max_ = 1.0;
    ParamStore<Scalar> params_;
    mutable std::vector<int> bound_ids_;
};

}  // namespace slidesurv
