#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "slidesurv/autodiff.hpp"
#include "slidesurv/types.hpp"

// Intra-cluster MHSA, cluster representatives, inter-cluster MHSA, feature
// integration, and AMIL-style gated attention pooling.

namespace slidesurv {

template <class Scalar>
struct MhsaParams {
    std::vector<ad::Var<Scalar>> wq;  // per head, d x (d/h)
    std::vector<ad::Var<Scalar>> wk;
    std::vector<ad::Var<Scalar>> wv;
    ad::Var<Scalar> wo;               // d x d
    ad::Var<Scalar> ln_gamma;         // 1 x d
    ad::Var<Scalar> ln_beta;          // 1 x d
    Scalar dropout_rate = Scalar(0.1);
};

// One residual MHSA block: LayerNorm(x + Dropout(MHSA(x))).
template <class Scalar>
ad::Var<Scalar> mhsa_block(ad::Var<Scalar> x, const MhsaParams<Scalar>& p, bool training,
                           Rng& rng) {
    using namespace ad;
    const auto heads = p.wq.size();
    if (heads == 0 || p.wk.size() != heads || p.wv.size() != heads)
        throw std::invalid_argument("mhsa_block: inconsistent head params");
    const Scalar inv_sqrt_dh =
        Scalar(1) / std::sqrt(static_cast<Scalar>(p.wq[0].cols()));
    std::vector<Var<Scalar>> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t j = 0; j < heads; ++j) {
        Var<Scalar> q = matmul(x, p.wq[j]);
        Var<Scalar> k = matmul(x, p.wk[j]);
        Var<Scalar> v = matmul(x, p.wv[j]);
        Var<Scalar> attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_dh));
        head_outputs.push_back(matmul(attn, v));
    }
    Var<Scalar> mhsa = matmul(concat_cols(head_outputs), p.wo);
    Var<Scalar> res = add(x, dropout(mhsa, p.dropout_rate, training, rng));
    return layer_norm_rows(res, p.ln_gamma, p.ln_beta);
}

// Applies the shared intra-cluster block to every cluster.
template <class Scalar>
std::vector<ad::Var<Scalar>> intra_cluster_attention(const std::vector<ad::Var<Scalar>>& clusters,
                                                     const MhsaParams<Scalar>& p, bool training,
                                                     Rng& rng) {
    std::vector<ad::Var<Scalar>> refined;
    refined.reserve(clusters.size());
    for (ad::Var<Scalar> c : clusters) {
        if (c.rows() < 1) throw std::invalid_argument("intra_cluster_attention: empty cluster");
        refined.push_back(mhsa_block(c, p, training, rng));
    }
    return refined;
}

// Stacks the per-cluster mean rows into a C x d matrix.
template <class Scalar>
ad::Var<Scalar> cluster_representatives(const std::vector<ad::Var<Scalar>>& clusters) {
    if (clusters.empty())
        throw std::invalid_argument("cluster_representatives: no clusters");
    std::vector<ad::Var<Scalar>> means;
    means.reserve(clusters.size());
    for (ad::Var<Scalar> c : clusters) means.push_back(ad::mean_rows(c));
    return ad::concat_rows(means);
}

template <class Scalar>
ad::Var<Scalar> inter_cluster_attention(ad::Var<Scalar> reps, const MhsaParams<Scalar>& p,
                                        bool training, Rng& rng) {
    return mhsa_block(reps, p, training, rng);
}

// P_hat = Concat(C_1'..C_C') + mean(R') broadcast over rows, then the
// task-irrelevant rows are appended: P_final = Concat(P_hat, P_rem).
template <class Scalar>
ad::Var<Scalar> integrate_features(const std::vector<ad::Var<Scalar>>& refined_clusters,
                                   ad::Var<Scalar> refined_reps, ad::Var<Scalar> p_rem) {
    using namespace ad;
    Var<Scalar> stacked = concat_rows(refined_clusters);
    Var<Scalar> global = mean_rows(refined_reps);  // 1 x d
    Var<Scalar> p_hat = add_rowvec(stacked, global);
    if (p_rem.valid() && p_rem.rows() > 0) return concat_rows<Scalar>({p_hat, p_rem});
    return p_hat;
}

template <class Scalar>
struct PoolParams {
    ad::Var<Scalar> wh;  // d x d_a
    ad::Var<Scalar> wa;  // d_a x 1
};

// AMIL gated pooling: alpha = softmax(W_a . tanh(W_h x_i)), z = sum alpha_i x_i.
template <class Scalar>
ad::Var<Scalar> gated_attention_pool(ad::Var<Scalar> p_final, const PoolParams<Scalar>& p) {
    using namespace ad;
    if (p_final.rows() < 1) throw std::invalid_argument("gated_attention_pool: empty input");
    Var<Scalar> scores = matmul(tanh_op(matmul(p_final, p.wh)), p.wa);  // N x 1
    Var<Scalar> alpha = softmax_rows(transpose(scores));               // 1 x N
    return matmul(alpha, p_final);                                     // 1 x d
}

// Attention weights only (eval/introspection path).
template <class Scalar>
MatX<Scalar> pooling_weights(ad::Var<Scalar> p_final, const PoolParams<Scalar>& p) {
    using namespace ad;
    Var<Scalar> scores = matmul(tanh_op(matmul(p_final, p.wh)), p.wa);
    return softmax_rows(transpose(scores)).value();
}

}  // namespace slidesurv
