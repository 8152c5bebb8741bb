#include <doctest.h>

#include <cmath>
#include <vector>

#include "slidesurv/attention.hpp"
#include "slidesurv/rng.hpp"

using namespace slidesurv;
using ad::Tape;
using ad::Var;

namespace {

Matd random_matrix(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
    Matd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
    return m;
}

struct PlainMhsa {
    std::vector<Matd> wq, wk, wv;
    Matd wo, gamma, beta;
};

PlainMhsa make_plain(Rng& rng, int d, int heads) {
    PlainMhsa p;
    const int dh = d / heads;
    for (int h = 0; h < heads; ++h) {
        p.wq.push_back(random_matrix(rng, d, dh, -0.5, 0.5));
        p.wk.push_back(random_matrix(rng, d, dh, -0.5, 0.5));
        p.wv.push_back(random_matrix(rng, d, dh, -0.5, 0.5));
    }
    p.wo = random_matrix(rng, d, d, -0.5, 0.5);
    p.gamma = random_matrix(rng, 1, d, 0.8, 1.2);
    p.beta = random_matrix(rng, 1, d, -0.2, 0.2);
    return p;
}

MhsaParams<double> bind_mhsa(Tape<double>& tape, const PlainMhsa& p, double dropout = 0.0) {
    MhsaParams<double> m;
    for (std::size_t h = 0; h < p.wq.size(); ++h) {
        m.wq.push_back(tape.leaf(p.wq[h], true));
        m.wk.push_back(tape.leaf(p.wk[h], true));
        m.wv.push_back(tape.leaf(p.wv[h], true));
    }
    m.wo = tape.leaf(p.wo, true);
    m.ln_gamma = tape.leaf(p.gamma, true);
    m.ln_beta = tape.leaf(p.beta, true);
    m.dropout_rate = dropout;
    return m;
}

// Direct evaluation of the residual MHSA block, eval mode.
Matd plain_mhsa_block(const Matd& x, const PlainMhsa& p) {
    const int d = static_cast<int>(x.cols());
    const int heads = static_cast<int>(p.wq.size());
    const int dh = d / heads;
    Matd concat(x.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const Matd q = x * p.wq[static_cast<std::size_t>(h)];
        const Matd k = x * p.wk[static_cast<std::size_t>(h)];
        const Matd v = x * p.wv[static_cast<std::size_t>(h)];
        Matd scores = q * k.transpose() / std::sqrt(static_cast<double>(dh));
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
            const double mx = scores.row(i).maxCoeff();
            scores.row(i) = (scores.row(i).array() - mx).exp().matrix();
            scores.row(i) /= scores.row(i).sum();
        }
        concat.middleCols(h * dh, dh) = scores * v;
    }
    Matd res = x + concat * p.wo;
    Matd out(res.rows(), d);
    for (Eigen::Index i = 0; i < res.rows(); ++i) {
        const double mu = res.row(i).mean();
        const double var = (res.row(i).array() - mu).square().mean();
        out.row(i) =
            (((res.row(i).array() - mu) / std::sqrt(var + 1e-5)) * p.gamma.row(0).array() +
             p.beta.row(0).array())
                .matrix();
    }
    return out;
}

}  // namespace

TEST_CASE("singleton cluster attention reduces to a 1x1 softmax") {
    Rng rng(51);
    const int d = 8, heads = 4;
    PlainMhsa plain = make_plain(rng, d, heads);
    Tape<double> tape;
    auto params = bind_mhsa(tape, plain);
    Matd x = random_matrix(rng, 1, d);
    Rng drop(0);
    const Matd got = mhsa_block(tape.leaf(x, false), params, false, drop).value();
    CHECK(got.rows() == 1);
    // direct: attention over one key is 1, so MHSA(x) = concat(V_h) * Wo
    const Matd expect = plain_mhsa_block(x, plain);
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("identical patches produce identical refined rows") {
    Rng rng(52);
    const int d = 8, heads = 2;
    PlainMhsa plain = make_plain(rng, d, heads);
    Tape<double> tape;
    auto params = bind_mhsa(tape, plain);
    Matd x(2, d);
    x.row(0) = random_matrix(rng, 1, d);
    x.row(1) = x.row(0);
    Rng drop(0);
    const Matd got = mhsa_block(tape.leaf(x, false), params, false, drop).value();
    CHECK((got.row(0) - got.row(1)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mhsa block matches a direct evaluation on a random cluster") {
    Rng rng(53);
    const int d = 12, heads = 4;
    PlainMhsa plain = make_plain(rng, d, heads);
    Tape<double> tape;
    auto params = bind_mhsa(tape, plain);
    Matd x = random_matrix(rng, 3, d);
    Rng drop(0);
    const Matd got = mhsa_block(tape.leaf(x, false), params, false, drop).value();
    const Matd expect = plain_mhsa_block(x, plain);
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("attention is permutation-equivariant in eval mode") {
    Rng rng(54);
    const int d = 8, heads = 2, n = 5;
    PlainMhsa plain = make_plain(rng, d, heads);
    Tape<double> tape;
    auto params = bind_mhsa(tape, plain);
    Matd x = random_matrix(rng, n, d);
    Matd perm(n, d);
    std::vector<int> p{3, 1, 4, 0, 2};
    for (int i = 0; i < n; ++i) perm.row(i) = x.row(p[static_cast<std::size_t>(i)]);
    Rng drop(0);
    const Matd base = mhsa_block(tape.leaf(x, false), params, false, drop).value();
    const Matd shuffled = mhsa_block(tape.leaf(perm, false), params, false, drop).value();
    for (int i = 0; i < n; ++i)
        CHECK((shuffled.row(i) - base.row(p[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() <
              1e-10);
}

TEST_CASE("cluster representatives are arithmetic means") {
    Rng rng(55);
    Tape<double> tape;
    Matd a = random_matrix(rng, 4, 6);
    Matd ident = Matd::Ones(3, 6) * 0.37;
    Matd anti(2, 6);
    anti.row(0) = random_matrix(rng, 1, 6);
    anti.row(1) = -anti.row(0);
    std::vector<Var<double>> clusters{tape.leaf(ident, false), tape.leaf(anti, false),
                                      tape.leaf(a, false)};
    const Matd reps = cluster_representatives(clusters).value();
    CHECK(reps.rows() == 3);
    CHECK((reps.row(0).array() - 0.37).abs().maxCoeff() < 1e-12);
    CHECK(reps.row(1).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((reps.row(2) - a.colwise().mean()).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("feature integration broadcasts the global vector and appends the remainder") {
    Rng rng(56);
    Tape<double> tape;
    const int d = 5;
    Matd c1 = random_matrix(rng, 3, d);
    Matd c2 = random_matrix(rng, 2, d);
    Matd reps = random_matrix(rng, 2, d);
    Matd rem = random_matrix(rng, 4, d);
    std::vector<Var<double>> clusters{tape.leaf(c1, false), tape.leaf(c2, false)};
    Var<double> r = tape.leaf(reps, false);
    Var<double> p_rem = tape.leaf(rem, false);
    const Matd got = integrate_features(clusters, r, p_rem).value();
    CHECK(got.rows() == 3 + 2 + 4);
    const Matd global = reps.colwise().mean();
    for (int i = 0; i < 3; ++i)
        CHECK((got.row(i) - (c1.row(i) + global)).cwiseAbs().maxCoeff() < 1e-12);
    for (int i = 0; i < 2; ++i)
        CHECK((got.row(3 + i) - (c2.row(i) + global)).cwiseAbs().maxCoeff() < 1e-12);
    for (int i = 0; i < 4; ++i)
        CHECK((got.row(5 + i) - rem.row(i)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero representatives leave the stacked clusters unchanged") {
    Rng rng(57);
    Tape<double> tape;
    Matd c1 = random_matrix(rng, 3, 4);
    std::vector<Var<double>> clusters{tape.leaf(c1, false)};
    Var<double> r = tape.leaf(Matd::Zero(2, 4), false);
    Var<double> none;  // invalid: no remainder
    const Matd got = integrate_features(clusters, r, none).value();
    CHECK((got - c1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gated attention pooling is a convex combination") {
    Rng rng(58);
    Tape<double> tape;
    const int d = 6, da = 3;
    PoolParams<double> pool{tape.leaf(random_matrix(rng, d, da), true),
                            tape.leaf(random_matrix(rng, da, 1), true)};

    SUBCASE("single row returns that row") {
        Matd x = random_matrix(rng, 1, d);
        const Matd z = gated_attention_pool(tape.leaf(x, false), pool).value();
        CHECK((z - x).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("identical rows return that row") {
        Matd x = Matd::Ones(7, d) * -0.93;
        const Matd z = gated_attention_pool(tape.leaf(x, false), pool).value();
        CHECK((z.array() + 0.93).abs().maxCoeff() < 1e-12);
    }
    SUBCASE("random rows match the softmax-weighted-sum oracle") {
        Matd x = random_matrix(rng, 5, d);
        const Matd z = gated_attention_pool(tape.leaf(x, false), pool).value();
        Matd scores(5, 1);
        for (int i = 0; i < 5; ++i) {
            Matd h = (x.row(i) * pool.wh.value()).array().tanh().matrix();
            scores(i, 0) = (h * pool.wa.value())(0, 0);
        }
        const double mx = scores.maxCoeff();
        Matd alpha = (scores.array() - mx).exp().matrix();
        alpha /= alpha.sum();
        Matd expect = Matd::Zero(1, d);
        for (int i = 0; i < 5; ++i) expect += alpha(i, 0) * x.row(i);
        CHECK((z - expect).cwiseAbs().maxCoeff() < 1e-6);
    }
    SUBCASE("pooling is permutation-invariant") {
        Matd x = random_matrix(rng, 6, d);
        Matd perm(6, d);
        std::vector<int> p{5, 0, 3, 1, 4, 2};
        for (int i = 0; i < 6; ++i) perm.row(i) = x.row(p[static_cast<std::size_t>(i)]);
        const Matd a = gated_attention_pool(tape.leaf(x, false), pool).value();
        const Matd b = gated_attention_pool(tape.leaf(perm, false), pool).value();
        CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("pooling weights are a simplex") {
    Rng rng(59);
    Tape<double> tape;
    PoolParams<double> pool{tape.leaf(random_matrix(rng, 4, 3), false),
                            tape.leaf(random_matrix(rng, 3, 1), false)};
    const Matd alpha = pooling_weights(tape.leaf(random_matrix(rng, 8, 4), false), pool);
    CHECK(alpha.cols() == 8);
    CHECK(alpha.minCoeff() >= 0.0);
    CHECK(std::abs(alpha.sum() - 1.0) < 1e-6);
}
