#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "slidesurv/graph.hpp"
#include "slidesurv/rng.hpp"

using namespace slidesurv;

namespace {

Matd random_matrix(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
    Matd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
    return m;
}

// Exhaustive best 2-partition by SSE (points to cluster means).
double best_two_partition_sse(const Matd& x, std::vector<int>* best_labels = nullptr) {
    const int m = static_cast<int>(x.rows());
    double best = std::numeric_limits<double>::max();
    for (int mask = 1; mask < (1 << m) - 1; ++mask) {
        Matd c0 = Matd::Zero(1, x.cols()), c1 = Matd::Zero(1, x.cols());
        int n0 = 0, n1 = 0;
        for (int i = 0; i < m; ++i) {
            if (mask & (1 << i)) {
                c1 += x.row(i);
                ++n1;
            } else {
                c0 += x.row(i);
                ++n0;
            }
        }
        c0 /= n0;
        c1 /= n1;
        double sse = 0.0;
        for (int i = 0; i < m; ++i)
            sse += (x.row(i) - ((mask & (1 << i)) ? c1 : c0)).squaredNorm();
        if (sse < best) {
            best = sse;
            if (best_labels) {
                best_labels->assign(static_cast<std::size_t>(m), 0);
                for (int i = 0; i < m; ++i)
                    (*best_labels)[static_cast<std::size_t>(i)] = (mask & (1 << i)) ? 1 : 0;
            }
        }
    }
    return best;
}

}  // namespace

TEST_CASE("normalize_inputs zeroes constant columns and unit-norms rows") {
    Matd p(3, 3);
    p << 1, 5, 2, 2, 5, 4, 3, 5, 6;  // column 1 constant
    Matd coords(3, 2);
    coords << 0, 0, 1, 1, 2, 2;
    auto norm = normalize_inputs<double>(p, coords);
    for (int i = 0; i < 3; ++i) CHECK(norm.features(i, 1) == 0.0);
    for (int i = 0; i < 3; ++i) {
        const double n = norm.features.row(i).norm();
        CHECK((n == doctest::Approx(1.0).epsilon(1e-12) || n == 0.0));
    }
    // coords z-scored per dimension: mean 0
    CHECK(std::abs(norm.coords.col(0).mean()) < 1e-12);
    CHECK(std::abs(norm.coords.col(1).mean()) < 1e-12);
}

TEST_CASE("normalize_inputs on the two-patch identity example") {
    Matd p(2, 2);
    p << 1, 0, 0, 1;
    Matd coords(2, 2);
    coords << 0, 0, 1, 1;
    auto norm = normalize_inputs<double>(p, coords);
    const double r = std::sqrt(0.5);
    CHECK(norm.features(0, 0) == doctest::Approx(r).epsilon(1e-9));
    CHECK(norm.features(0, 1) == doctest::Approx(-r).epsilon(1e-9));
    CHECK(norm.features(1, 0) == doctest::Approx(-r).epsilon(1e-9));
    CHECK(norm.features(1, 1) == doctest::Approx(r).epsilon(1e-9));
}

TEST_CASE("fusion weights initialize to 0.8 / 0.2 and stay on the simplex") {
    const auto [wm, ws] = fusion_weights(std::log(0.8), std::log(0.2));
    CHECK(wm == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(ws == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(wm + ws == doctest::Approx(1.0).epsilon(1e-12));
    const auto [a, b] = fusion_weights(1.7, -0.3);
    CHECK(a > 0.0);
    CHECK(b > 0.0);
    CHECK(a + b == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("identical patches at identical coordinates have similarity one") {
    Matd x(2, 3);
    x << 0.5, 0.5, 0.7071, 0.5, 0.5, 0.7071;
    Matd coords = Matd::Zero(2, 2);
    // rows already unit-norm; zero distance means spatial term is exp(0) = 1
    Matd s = fused_similarity<double>(x, coords, 0.8, 0.2);
    CHECK(s(0, 1) == doctest::Approx(0.8 * x.row(0).squaredNorm() + 0.2).epsilon(1e-6));
    CHECK(s(1, 0) == s(0, 1));
}

TEST_CASE("fused similarity matches a direct evaluation on a 3-point set") {
    Rng rng(21);
    Matd feats = random_matrix(rng, 3, 4);
    Matd coords = random_matrix(rng, 3, 2, 0.0, 100.0);
    auto norm = normalize_inputs<double>(feats, coords);
    const double wm = 0.65, ws = 0.35;
    const Matd s = fused_similarity<double>(norm.features, norm.coords, wm, ws);

    // independent evaluation
    Matd dist(3, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            dist(i, j) = (norm.coords.row(i) - norm.coords.row(j)).norm();
    const double mu = dist.mean();
    const double sd = std::sqrt((dist.array() - mu).square().mean()) + 1e-6;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            const double morph = norm.features.row(i).dot(norm.features.row(j));
            const double spatial = std::exp(-dist(i, j) / sd);
            CHECK(s(i, j) == doctest::Approx(wm * morph + ws * spatial).epsilon(1e-6));
        }
    }
    // symmetry
    CHECK((s - s.transpose()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("single-point similarity degenerates gracefully") {
    Matd x(1, 3);
    x << 1, 0, 0;
    Matd coords = Matd::Zero(1, 2);
    const Matd s = fused_similarity<double>(x, coords, 0.8, 0.2);
    CHECK(s(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("knn graph keeps the argmax neighbor with weight near one for k=1") {
    Matd s(3, 3);
    s << 1.0, 0.9, 0.1, 0.9, 1.0, 0.2, 0.1, 0.2, 1.0;
    auto g = build_knn_graph<double>(s, 1);
    CHECK(g.k == 1);
    CHECK(g.neighbors(0, 0) == 1);
    CHECK(g.neighbors(1, 0) == 0);
    CHECK(g.neighbors(2, 0) == 1);
    for (int i = 0; i < 3; ++i) CHECK(g.weights(i, 0) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("dense knn rows are row-stochastic") {
    Rng rng(22);
    Matd s = random_matrix(rng, 6, 6, 0.05, 1.0);
    s = ((s + s.transpose()) / 2.0).eval();
    auto g = build_knn_graph<double>(s, 5);  // k = m-1
    for (int i = 0; i < 6; ++i) {
        CHECK(std::abs(g.weights.row(i).sum() - 1.0) < 1e-6);
        CHECK(g.weights.row(i).minCoeff() >= 0.0);
        for (int j = 0; j < g.k; ++j) CHECK(g.neighbors(i, j) != i);
    }
}

TEST_CASE("knn neighbor sets match a full-sort oracle") {
    Rng rng(23);
    const int m = 9, k = 4;
    Matd s = random_matrix(rng, m, m, -0.5, 1.0);
    auto g = build_knn_graph<double>(s, k);
    for (int i = 0; i < m; ++i) {
        std::vector<int> order;
        for (int j = 0; j < m; ++j)
            if (j != i) order.push_back(j);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (s(i, a) != s(i, b)) return s(i, a) > s(i, b);
            return a < b;
        });
        for (int j = 0; j < k; ++j) CHECK(g.neighbors(i, j) == order[static_cast<std::size_t>(j)]);
    }
}

TEST_CASE("k larger than m-1 is clamped and tiny graphs are flagged") {
    Matd s = Matd::Ones(3, 3);
    auto g = build_knn_graph<double>(s, 10);
    CHECK(g.k == 2);
    Matd single = Matd::Ones(1, 1);
    auto g1 = build_knn_graph<double>(single, 10);
    CHECK(g1.degenerate);
    CHECK(g1.k == 0);
}

TEST_CASE("kmeans recovers two well-separated pairs") {
    Matd x(4, 2);
    x << 0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0;
    Rng rng(31);
    auto c = kmeans<double>(x, 2, rng);
    CHECK(c.labels[0] == c.labels[1]);
    CHECK(c.labels[2] == c.labels[3]);
    CHECK(c.labels[0] != c.labels[2]);
    std::vector<int> oracle_labels;
    const double oracle = best_two_partition_sse(x, &oracle_labels);
    CHECK(c.sse == doctest::Approx(oracle).epsilon(1e-9));
}

TEST_CASE("kmeans with C = m puts each point in its own cluster") {
    Rng rng(32);
    Matd x = random_matrix(rng, 5, 3);
    auto c = kmeans<double>(x, 5, rng);
    std::vector<int> sorted = c.labels;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4});
    CHECK(c.sse == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("identical points exercise the empty-cluster reseed path") {
    Matd x = Matd::Ones(6, 3);
    Rng rng(33);
    auto c = kmeans<double>(x, 2, rng);
    CHECK(c.sse == 0.0);
    std::vector<int> counts(2, 0);
    for (int l : c.labels) counts[static_cast<std::size_t>(l)]++;
    CHECK(counts[0] > 0);
    CHECK(counts[1] > 0);  // reseed guarantees both clusters nonempty
}

TEST_CASE("lloyd objective is nonincreasing and deterministic per seed") {
    Rng data_rng(34);
    for (int trial = 0; trial < 25; ++trial) {
        const int m = 8 + static_cast<int>(data_rng.uniform_index(40));
        const int c = 1 + static_cast<int>(data_rng.uniform_index(5));
        Matd x = random_matrix(data_rng, m, 4, -3.0, 3.0);
        Rng r1(1000 + static_cast<std::uint64_t>(trial));
        auto a = kmeans<double>(x, std::min(c, m), r1);
        for (std::size_t i = 1; i < a.sse_history.size(); ++i)
            CHECK(a.sse_history[i] <= a.sse_history[i - 1] * (1.0 + 1e-12) + 1e-12);
        Rng r2(1000 + static_cast<std::uint64_t>(trial));
        auto b = kmeans<double>(x, std::min(c, m), r2);
        CHECK(a.labels == b.labels);
        CHECK(a.sse == b.sse);
    }
}

TEST_CASE("cluster_count derives ceil(m / cluster_size) and validates explicit C") {
    CHECK(cluster_count(130, 64) == 3);
    CHECK(cluster_count(64, 64) == 1);
    CHECK(cluster_count(5, 64) == 1);
    CHECK(cluster_count(100, 64, 7) == 7);
    CHECK_THROWS_AS(cluster_count(5, 64, 9), std::invalid_argument);
}

TEST_CASE("graph smoothing mixes neighbor features by graph weight") {
    Matd s(3, 3);
    s << 1.0, 0.9, 0.1, 0.9, 1.0, 0.2, 0.1, 0.2, 1.0;
    auto g = build_knn_graph<double>(s, 1);
    Matd x(3, 2);
    x << 1, 0, 0, 1, 5, 5;
    const Matd sm = smooth_features(g, x);
    // each row becomes its single neighbor's row scaled by the weight
    CHECK(sm(0, 1) == doctest::Approx(g.weights(0, 0) * 1.0).epsilon(1e-12));
    CHECK(sm(1, 0) == doctest::Approx(g.weights(1, 0) * 1.0).epsilon(1e-12));
}

TEST_CASE("cluster index groups preserve original order per cluster") {
    std::vector<int> labels{1, 0, 1, 0, 0};
    auto groups = cluster_index_groups(labels, 2);
    CHECK(groups[0] == IndexList{1, 3, 4});
    CHECK(groups[1] == IndexList{0, 2});
}
