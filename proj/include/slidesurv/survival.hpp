#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "slidesurv/autodiff.hpp"
#include "slidesurv/special.hpp"
#include "slidesurv/types.hpp"

// Mixture-density survival head: per-expert Gaussian mixtures over
// softplus-transformed time, a learned gate over experts, the TPDF/CDP/SPF
// evaluation functions, and the censored training objective.

namespace slidesurv {

inline constexpr double kLogFloorEps = 1e-8;   // floor inside logs of probabilities
inline constexpr double kEntropyEps = 1e-8;    // epsilon inside the gate entropy log

// |dy/dt| of y = g^{-1}(t) for g(y) = log(1+e^y): equals 1/(1 - e^{-t}).
template <class Scalar>
Scalar time_jacobian(Scalar t) {
    if (!(t > Scalar(0))) throw std::domain_error("time_jacobian: t must be > 0");
    return Scalar(1) / (-std::expm1(-t));
}

template <class Scalar>
Scalar log_time_jacobian(Scalar t) {
    if (!(t > Scalar(0))) throw std::domain_error("log_time_jacobian: t must be > 0");
    return -std::log(-std::expm1(-t));
}

// ---- value-level density (curve evaluation; pure, thread-safe) ----

template <class Scalar>
struct ExpertDensity {
    MatX<Scalar> lambda;  // K x 1, simplex
    MatX<Scalar> mu;      // K x 1
    MatX<Scalar> sigma;   // K x 1, positive
};

template <class Scalar>
struct MixtureDensity {
    std::vector<ExpertDensity<Scalar>> experts;
    MatX<Scalar> gate;  // E x 1, simplex

    Scalar log_tpdf_expert(Scalar t, std::size_t e) const {
        const ExpertDensity<Scalar>& ex = experts.at(e);
        const Scalar y = inverse_softplus(t);
        const auto k = ex.lambda.rows();
        std::vector<Scalar> terms(static_cast<std::size_t>(k));
        for (Eigen::Index i = 0; i < k; ++i)
            terms[static_cast<std::size_t>(i)] =
                std::log(ex.lambda(i, 0)) + log_normal_pdf(y, ex.mu(i, 0), ex.sigma(i, 0));
        return log_time_jacobian(t) + log_sum_exp(terms);
    }

    Scalar tpdf_expert(Scalar t, std::size_t e) const { return std::exp(log_tpdf_expert(t, e)); }

    Scalar cdp_expert(Scalar t, std::size_t e) const {
        const ExpertDensity<Scalar>& ex = experts.at(e);
        const Scalar y = inverse_softplus(t);
        Scalar acc = Scalar(0);
        for (Eigen::Index i = 0; i < ex.lambda.rows(); ++i)
            acc += ex.lambda(i, 0) * normal_cdf((y - ex.mu(i, 0)) / ex.sigma(i, 0));
        return acc;
    }

    Scalar spf_expert(Scalar t, std::size_t e) const { return Scalar(1) - cdp_expert(t, e); }

    Scalar tpdf(Scalar t) const {
        Scalar acc = Scalar(0);
        for (std::size_t e = 0; e < experts.size(); ++e)
            acc += gate(static_cast<Eigen::Index>(e), 0) * tpdf_expert(t, e);
        return acc;
    }

    Scalar cdp(Scalar t) const {
        Scalar acc = Scalar(0);
        for (std::size_t e = 0; e < experts.size(); ++e)
            acc += gate(static_cast<Eigen::Index>(e), 0) * cdp_expert(t, e);
        return acc;
    }

    Scalar spf(Scalar t) const { return Scalar(1) - cdp(t); }
};

// ---- tape-level head (training objective) ----

template <class Scalar>
struct ExpertVars {
    ad::Var<Scalar> w_mu;     // K x K
    ad::Var<Scalar> w_sigma;  // K x K
    ad::Var<Scalar> lam_w;    // d_e x K
    ad::Var<Scalar> lam_b;    // 1 x K
};

template <class Scalar>
struct MoeVars {
    ad::Var<Scalar> enc_w1;  // d x h_e
    ad::Var<Scalar> enc_b1;  // 1 x h_e
    ad::Var<Scalar> enc_w2;  // h_e x d_e
    ad::Var<Scalar> enc_b2;  // 1 x d_e
    ad::Var<Scalar> p_mu;    // K x 1 shared anchors
    ad::Var<Scalar> p_sigma; // K x 1 shared anchors
    std::vector<ExpertVars<Scalar>> experts;
    ad::Var<Scalar> gate_w;  // d_e x E
};

// Shared encoder phi: Linear -> GELU -> Linear.
template <class Scalar>
ad::Var<Scalar> encode(ad::Var<Scalar> z, const MoeVars<Scalar>& p) {
    using namespace ad;
    Var<Scalar> h = gelu(add_rowvec(matmul(z, p.enc_w1), p.enc_b1));
    return add_rowvec(matmul(h, p.enc_w2), p.enc_b2);  // 1 x d_e
}

template <class Scalar>
struct ExpertGmmVars {
    ad::Var<Scalar> log_lambda;  // K x 1
    ad::Var<Scalar> mu;          // K x 1
    ad::Var<Scalar> sigma;       // K x 1
};

// lambda from the expert's softmax head on the encoding; mu and sigma from
// the shared anchors through the expert transforms.
template <class Scalar>
ExpertGmmVars<Scalar> expert_gmm(ad::Var<Scalar> enc, const MoeVars<Scalar>& p, std::size_t e) {
    using namespace ad;
    const ExpertVars<Scalar>& ex = p.experts.at(e);
    ExpertGmmVars<Scalar> out;
    out.log_lambda =
        transpose(log_softmax_rows(add_rowvec(matmul(enc, ex.lam_w), ex.lam_b)));  // K x 1
    out.mu = matmul(ex.w_mu, p.p_mu);
    out.sigma = softplus_op(matmul(ex.w_sigma, p.p_sigma));
    return out;
}

// 1 x E log gate probabilities, G = softmax(W_g . phi(z)).
template <class Scalar>
ad::Var<Scalar> gate_log_probs(ad::Var<Scalar> enc, const MoeVars<Scalar>& p) {
    return ad::log_softmax_rows(ad::matmul(enc, p.gate_w));
}

// log N(y | mu_i, sigma_i) as a K x 1 tape expression.
template <class Scalar>
ad::Var<Scalar> log_normal_pdf_vec(Scalar y, ad::Var<Scalar> mu, ad::Var<Scalar> sigma) {
    using namespace ad;
    Var<Scalar> z = div(add_const(neg(mu), y), sigma);
    Var<Scalar> quad = scale(mul(z, z), Scalar(-0.5));
    return add_const(sub(quad, log_op(sigma)), Scalar(-kHalfLog2Pi));
}

// log TPDF(t | z, e) = log|dy/dt| + LSE_i(log lambda_i + log N(y|mu_i, sigma_i)).
template <class Scalar>
ad::Var<Scalar> log_tpdf_expert(Scalar t, const ExpertGmmVars<Scalar>& gmm) {
    using namespace ad;
    Var<Scalar> inner = add(gmm.log_lambda, log_normal_pdf_vec(inverse_softplus(t), gmm.mu,
                                                               gmm.sigma));  // K x 1
    Var<Scalar> lse = logsumexp_rows(transpose(inner));                      // 1 x 1
    return add_const(lse, log_time_jacobian(t));
}

// SPF(t | z, e) = sum_i lambda_i * Phi((mu_i - y) / sigma_i), in [0, 1].
template <class Scalar>
ad::Var<Scalar> spf_expert(Scalar t, const ExpertGmmVars<Scalar>& gmm) {
    using namespace ad;
    const Scalar y = inverse_softplus(t);
    Var<Scalar> z = div(add_const(gmm.mu, -y), gmm.sigma);
    Var<Scalar> tail = normal_cdf_op(z);
    return sum(mul(exp_op(gmm.log_lambda), tail));
}

template <class Scalar>
struct SurvivalLossTerms {
    ad::Var<Scalar> nll;
    ad::Var<Scalar> diversity;
    ad::Var<Scalar> gate_entropy;
    ad::Var<Scalar> total;
    bool floored = false;  // the censored log hit the epsilon floor
};

// Full objective for one slide:
//   L = -c log TPDF(t|z) - (1-c) log SPF(t|z) + l_div ||mu1 - mu2||^2
//       + l_ent * (-sum_e G_e log(G_e + eps))
template <class Scalar>
SurvivalLossTerms<Scalar> survival_loss(ad::Var<Scalar> enc, const MoeVars<Scalar>& p, Scalar t,
                                        int event, Scalar lambda_div, Scalar lambda_ent) {
    using namespace ad;
    if (!(t > Scalar(0))) throw std::domain_error("survival_loss: observed time must be > 0");
    if (event != 0 && event != 1)
        throw std::invalid_argument("survival_loss: event indicator must be 0 or 1");
    const std::size_t n_experts = p.experts.size();

    std::vector<ExpertGmmVars<Scalar>> gmms;
    gmms.reserve(n_experts);
    for (std::size_t e = 0; e < n_experts; ++e) gmms.push_back(expert_gmm(enc, p, e));
    Var<Scalar> gate_log = gate_log_probs(enc, p);  // 1 x E
    Var<Scalar> gate_probs = exp_op(gate_log);

    SurvivalLossTerms<Scalar> out;
    if (event == 1) {
        std::vector<Var<Scalar>> per_expert;
        per_expert.reserve(n_experts);
        for (std::size_t e = 0; e < n_experts; ++e)
            per_expert.push_back(log_tpdf_expert(t, gmms[e]));
        Var<Scalar> stacked = concat_cols(per_expert);                   // 1 x E
        Var<Scalar> log_mix = logsumexp_rows(add(gate_log, stacked));    // 1 x 1
        out.nll = neg(log_mix);
    } else {
        std::vector<Var<Scalar>> per_expert;
        per_expert.reserve(n_experts);
        for (std::size_t e = 0; e < n_experts; ++e)
            per_expert.push_back(spf_expert(t, gmms[e]));
        Var<Scalar> stacked = concat_cols(per_expert);                   // 1 x E
        Var<Scalar> mixed = sum(mul(gate_probs, stacked));
        out.floored = scalar_value(mixed) < Scalar(kLogFloorEps);
        out.nll = neg(log_op(clamp_min(mixed, Scalar(kLogFloorEps))));
    }

    if (n_experts >= 2) {
        Var<Scalar> d = sub(gmms[0].mu, gmms[1].mu);
        out.diversity = sum(mul(d, d));
    } else {
        out.diversity = enc.tape->scalar_constant(Scalar(0));
    }
    Var<Scalar> glog = log_op(add_const(gate_probs, Scalar(kEntropyEps)));
    out.gate_entropy = neg(sum(mul(gate_probs, glog)));

    out.total = add(out.nll, add(scale(out.diversity, lambda_div),
                                 scale(out.gate_entropy, lambda_ent)));
    return out;
}

// Extracts plain density values from the tape for curve evaluation.
template <class Scalar>
MixtureDensity<Scalar> extract_density(ad::Var<Scalar> enc, const MoeVars<Scalar>& p) {
    MixtureDensity<Scalar> d;
    for (std::size_t e = 0; e < p.experts.size(); ++e) {
        ExpertGmmVars<Scalar> g = expert_gmm(enc, p, e);
        ExpertDensity<Scalar> ed;
        ed.lambda = g.log_lambda.value().array().exp().matrix();
        ed.mu = g.mu.value();
        ed.sigma = g.sigma.value();
        d.experts.push_back(std::move(ed));
    }
    d.gate = gate_log_probs(enc, p).value().array().exp().matrix().transpose();
    return d;
}

}  // namespace slidesurv
