#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "slidesurv/rng.hpp"
#include "slidesurv/types.hpp"

// Fused morphological + spatial k-NN graph over selected patches and the
// graph-guided k-means partition. Everything here operates on plain values;
// graph construction and cluster assignments are excluded from
// differentiation.

namespace slidesurv {

inline constexpr double kGraphEps = 1e-6;

template <class Scalar>
struct NormalizedInputs {
    MatX<Scalar> features;  // z-scored per dimension, then L2 row-normalized
    MatX<Scalar> coords;    // z-scored per dimension
};

template <class Scalar>
NormalizedInputs<Scalar> normalize_inputs(const MatX<Scalar>& p_sel, const MatX<Scalar>& coords) {
    if (p_sel.rows() < 1) throw std::invalid_argument("normalize_inputs: empty input");
    if (coords.rows() != p_sel.rows() || coords.cols() != 2)
        throw std::invalid_argument("normalize_inputs: coords must be rows(P) x 2");
    const Scalar eps = Scalar(kGraphEps);
    auto zscore = [eps](const MatX<Scalar>& m) {
        MatX<Scalar> out(m.rows(), m.cols());
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const Scalar mu = m.col(j).mean();
            const Scalar sd = std::sqrt((m.col(j).array() - mu).square().mean());
            out.col(j) = ((m.col(j).array() - mu) / (sd + eps)).matrix();
        }
        return out;
    };
    NormalizedInputs<Scalar> res;
    res.features = zscore(p_sel);
    for (Eigen::Index i = 0; i < res.features.rows(); ++i) {
        const Scalar norm = res.features.row(i).norm();
        if (norm > eps) res.features.row(i) /= norm;
    }
    res.coords = zscore(coords);
    return res;
}

// S = w_morph * (Xn Xn^T) + w_spatial * exp(-D / sigma_D), sigma_D = std(D) + eps.
template <class Scalar>
MatX<Scalar> fused_similarity(const MatX<Scalar>& x_norm, const MatX<Scalar>& coords_norm,
                              Scalar w_morph, Scalar w_spatial) {
    const Eigen::Index m = x_norm.rows();
    if (coords_norm.rows() != m)
        throw std::invalid_argument("fused_similarity: row mismatch");
    MatX<Scalar> s_morph = x_norm * x_norm.transpose();
    MatX<Scalar> dist(m, m);
    for (Eigen::Index i = 0; i < m; ++i) {
        dist(i, i) = Scalar(0);
        for (Eigen::Index j = i + 1; j < m; ++j) {
            const Scalar d = (coords_norm.row(i) - coords_norm.row(j)).norm();
            dist(i, j) = d;
            dist(j, i) = d;
        }
    }
    const Scalar mu = dist.mean();
    const Scalar sigma_d = std::sqrt((dist.array() - mu).square().mean()) + Scalar(kGraphEps);
    MatX<Scalar> s_spatial = (-dist.array() / sigma_d).exp().matrix();
    return w_morph * s_morph + w_spatial * s_spatial;
}

// Softmax over the two raw fusion logits -> (w_morph, w_spatial).
template <class Scalar>
std::pair<Scalar, Scalar> fusion_weights(Scalar raw_morph, Scalar raw_spatial) {
    const Scalar m = std::max(raw_morph, raw_spatial);
    const Scalar em = std::exp(raw_morph - m), es = std::exp(raw_spatial - m);
    return {em / (em + es), es / (em + es)};
}

template <class Scalar>
struct KnnGraph {
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> neighbors;  // m x k
    MatX<Scalar> weights;                                                           // m x k
    int k = 0;
    bool degenerate = false;  // single-node graph, no neighbors
};

// Per-row top-k neighbors by similarity, self excluded, ties broken by lower
// index. Row weights follow S_ij / (sum_j S_ij + eps); negative similarities
// are clamped to zero so the weights stay a (sub)stochastic convex set, and a
// row whose clamped mass vanishes falls back to uniform weights.
template <class Scalar>
KnnGraph<Scalar> build_knn_graph(const MatX<Scalar>& S, int k) {
    const auto m = static_cast<int>(S.rows());
    if (S.cols() != m) throw std::invalid_argument("build_knn_graph: S must be square");
    KnnGraph<Scalar> g;
    if (m < 2) {
        g.k = 0;
        g.degenerate = true;
        g.neighbors.resize(std::max(m, 0), 0);
        g.weights.resize(std::max(m, 0), 0);
        return g;
    }
    if (k < 1) throw std::invalid_argument("build_knn_graph: k must be >= 1");
    k = std::min(k, m - 1);
    g.k = k;
    g.neighbors.resize(m, k);
    g.weights.resize(m, k);
    std::vector<int> order;
    order.reserve(static_cast<std::size_t>(m - 1));
    for (int i = 0; i < m; ++i) {
        order.clear();
        for (int j = 0; j < m; ++j)
            if (j != i) order.push_back(j);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (S(i, a) != S(i, b)) return S(i, a) > S(i, b);
            return a < b;
        });
        Scalar total = Scalar(0);
        for (int j = 0; j < k; ++j) {
            g.neighbors(i, j) = order[static_cast<std::size_t>(j)];
            total += std::max(S(i, g.neighbors(i, j)), Scalar(0));
        }
        if (total > Scalar(0)) {
            for (int j = 0; j < k; ++j)
                g.weights(i, j) =
                    std::max(S(i, g.neighbors(i, j)), Scalar(0)) / (total + Scalar(kGraphEps));
        } else {
            g.weights.row(i).setConstant(Scalar(1) / static_cast<Scalar>(k));
        }
    }
    return g;
}

// One aggregation step of the row-stochastic k-NN operator:
// X_smooth[i] = sum_j w_ij * X[neighbor_ij].
template <class Scalar>
MatX<Scalar> smooth_features(const KnnGraph<Scalar>& g, const MatX<Scalar>& x) {
    if (g.degenerate || g.k == 0) return x;
    MatX<Scalar> out = MatX<Scalar>::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (int j = 0; j < g.k; ++j) out.row(i) += g.weights(i, j) * x.row(g.neighbors(i, j));
    return out;
}

template <class Scalar>
struct Clustering {
    std::vector<int> labels;            // size m, values in [0, C)
    MatX<Scalar> centroids;             // C x d
    int num_clusters = 0;
    Scalar sse = Scalar(0);             // within-cluster sum of squared distances
    std::vector<Scalar> sse_history;    // objective after each assignment step
};

namespace detail {

template <class Scalar>
int nearest_centroid(const MatX<Scalar>& x, Eigen::Index row, const MatX<Scalar>& centroids,
                     Scalar* dist_out = nullptr) {
    int best = 0;
    Scalar best_d = std::numeric_limits<Scalar>::max();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
        const Scalar d = (x.row(row) - centroids.row(c)).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    if (dist_out) *dist_out = best_d;
    return best;
}

}  // namespace detail

// Lloyd k-means with k-means++ seeding. Runs to an assignment fixpoint or
// max_iters; empty clusters are reseeded to the point farthest from its own
// centroid. Deterministic for a given rng state.
template <class Scalar>
Clustering<Scalar> kmeans(const MatX<Scalar>& x, int num_clusters, Rng& rng,
                          int max_iters = 100) {
    const auto m = static_cast<int>(x.rows());
    if (num_clusters < 1 || num_clusters > m)
        throw std::invalid_argument("kmeans: need 1 <= C <= number of points");
    Clustering<Scalar> res;
    res.num_clusters = num_clusters;
    res.centroids.resize(num_clusters, x.cols());

    // k-means++ seeding
    std::vector<Scalar> d2(static_cast<std::size_t>(m), std::numeric_limits<Scalar>::max());
    int first = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(m)));
    res.centroids.row(0) = x.row(first);
    for (int c = 1; c < num_clusters; ++c) {
        Scalar total = Scalar(0);
        for (int i = 0; i < m; ++i) {
            const Scalar d = (x.row(i) - res.centroids.row(c - 1)).squaredNorm();
            d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], d);
            total += d2[static_cast<std::size_t>(i)];
        }
        int pick = 0;
        if (total > Scalar(0)) {
            const Scalar r = static_cast<Scalar>(rng.uniform()) * total;
            Scalar acc = Scalar(0);
            pick = m - 1;
            for (int i = 0; i < m; ++i) {
                acc += d2[static_cast<std::size_t>(i)];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(m)));
        }
        res.centroids.row(c) = x.row(pick);
    }

    res.labels.assign(static_cast<std::size_t>(m), 0);
    std::vector<int> counts(static_cast<std::size_t>(num_clusters), 0);
    for (int iter = 0; iter < max_iters; ++iter) {
        // assignment
        bool changed = false;
        Scalar sse = Scalar(0);
        std::fill(counts.begin(), counts.end(), 0);
        for (int i = 0; i < m; ++i) {
            Scalar d = Scalar(0);
            const int c = detail::nearest_centroid(x, i, res.centroids, &d);
            if (c != res.labels[static_cast<std::size_t>(i)]) changed = true;
            res.labels[static_cast<std::size_t>(i)] = c;
            counts[static_cast<std::size_t>(c)]++;
            sse += d;
        }
        // reseed empty clusters to the point farthest from its own centroid
        for (int c = 0; c < num_clusters; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) continue;
            int far_i = 0;
            Scalar far_d = Scalar(-1);
            for (int i = 0; i < m; ++i) {
                const int li = res.labels[static_cast<std::size_t>(i)];
                if (counts[static_cast<std::size_t>(li)] <= 1) continue;
                const Scalar d = (x.row(i) - res.centroids.row(li)).squaredNorm();
                if (d > far_d) {
                    far_d = d;
                    far_i = i;
                }
            }
            const int old = res.labels[static_cast<std::size_t>(far_i)];
            counts[static_cast<std::size_t>(old)]--;
            res.labels[static_cast<std::size_t>(far_i)] = c;
            counts[static_cast<std::size_t>(c)] = 1;
            res.centroids.row(c) = x.row(far_i);
            changed = true;
        }
        // recompute sse against current centroids after any reseeding
        sse = Scalar(0);
        for (int i = 0; i < m; ++i)
            sse += (x.row(i) - res.centroids.row(res.labels[static_cast<std::size_t>(i)]))
                       .squaredNorm();
        res.sse_history.push_back(sse);
        res.sse = sse;
        if (!changed && iter > 0) break;
        // update
        MatX<Scalar> sums = MatX<Scalar>::Zero(num_clusters, x.cols());
        for (int i = 0; i < m; ++i)
            sums.row(res.labels[static_cast<std::size_t>(i)]) += x.row(i);
        for (int c = 0; c < num_clusters; ++c)
            if (counts[static_cast<std::size_t>(c)] > 0)
                res.centroids.row(c) =
                    sums.row(c) / static_cast<Scalar>(counts[static_cast<std::size_t>(c)]);
        if (!changed) break;
    }
    // final objective against the final centroids (update step never raises it)
    Scalar final_sse = Scalar(0);
    for (int i = 0; i < m; ++i)
        final_sse +=
            (x.row(i) - res.centroids.row(res.labels[static_cast<std::size_t>(i)])).squaredNorm();
    res.sse = final_sse;
    res.sse_history.push_back(final_sse);
    return res;
}

// Chooses the cluster count: explicit when given, else ceil(m / cluster_size),
// clamped to [1, m].
inline int cluster_count(int m, int cluster_size, int explicit_clusters = 0) {
    if (explicit_clusters > 0) {
        if (explicit_clusters > m)
            throw std::invalid_argument("cluster_count: C exceeds number of points");
        return explicit_clusters;
    }
    if (cluster_size < 1) throw std::invalid_argument("cluster_count: cluster_size must be >= 1");
    const int c = (m + cluster_size - 1) / cluster_size;
    return std::max(1, std::min(c, m));
}

// Graph-guided k-means: clusters the graph-smoothed features.
template <class Scalar>
Clustering<Scalar> graph_guided_kmeans(const KnnGraph<Scalar>& g, const MatX<Scalar>& x_norm,
                                       int num_clusters, Rng& rng, int max_iters = 100) {
    return kmeans(smooth_features(g, x_norm), num_clusters, rng, max_iters);
}

// Groups row indices by cluster label, clusters ordered by label, indices in
// original order within each cluster.
inline std::vector<IndexList> cluster_index_groups(const std::vector<int>& labels,
                                                   int num_clusters) {
    std::vector<IndexList> groups(static_cast<std::size_t>(num_clusters));
    for (std::size_t i = 0; i < labels.size(); ++i)
        groups[static_cast<std::size_t>(labels[i])].push_back(static_cast<int>(i));
    return groups;
}

}  // namespace slidesurv
