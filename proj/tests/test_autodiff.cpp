#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "slidesurv/autodiff.hpp"
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

// Central finite differences against the tape gradient for a scalar loss
// built from the given leaves. The builder must be deterministic.
using LossBuilder = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

void check_gradients(const std::vector<Matd>& inputs, const LossBuilder& build,
                     double tol = 1e-4, double h = 1e-5) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const Matd& m : inputs) vars.push_back(tape.leaf(m, true));
    Var<double> loss = build(tape, vars);
    tape.backward(loss);
    std::vector<Matd> grads;
    for (auto v : vars) grads.push_back(tape.grad(v));

    auto eval = [&](const std::vector<Matd>& pert) {
        Tape<double> t2;
        std::vector<Var<double>> vs;
        for (const Matd& m : pert) vs.push_back(t2.leaf(m, false));
        return ad::scalar_value(build(t2, vs));
    };
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (Eigen::Index j = 0; j < inputs[i].size(); ++j) {
            std::vector<Matd> plus = inputs, minus = inputs;
            plus[i].data()[j] += h;
            minus[i].data()[j] -= h;
            const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
            const double ad_g = grads[i].data()[j];
            const double denom = std::max({std::abs(fd), std::abs(ad_g), 1e-6});
            CAPTURE(i);
            CAPTURE(j);
            CHECK(std::abs(fd - ad_g) / denom < tol);
        }
    }
}

// Scalar head that weights every output entry differently, so gradients of
// all entries are exercised.
Var<double> weighted_sum(Tape<double>& t, Var<double> out, Rng rng) {
    Matd w(out.rows(), out.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(0.5, 1.5);
    return ad::sum(ad::mul(out, t.constant(w)));
}

}  // namespace

TEST_CASE("backward on linear and quadratic identities") {
    Tape<double> tape;
    Matd p(3, 1);
    p << 1.0, 2.0, 3.0;
    Var<double> v = tape.leaf(p, true);
    tape.backward(ad::sum(v));
    CHECK(tape.grad(v) == Matd::Ones(3, 1));

    Tape<double> t2;
    Matd q(2, 1);
    q << 1.0, 2.0;
    Var<double> w = t2.leaf(q, true);
    t2.backward(ad::sum(ad::mul(w, w)));
    Matd expect(2, 1);
    expect << 2.0, 4.0;
    CHECK(t2.grad(w) == expect);
}

TEST_CASE("untouched parameters receive zero gradients") {
    Tape<double> tape;
    Var<double> used = tape.leaf(Matd::Ones(2, 2), true);
    Var<double> unused = tape.leaf(Matd::Ones(3, 1), true);
    tape.backward(ad::sum(used));
    CHECK(tape.grad(unused) == Matd::Zero(3, 1));
}

TEST_CASE("backward rejects non-scalar losses") {
    Tape<double> tape;
    Var<double> v = tape.leaf(Matd::Ones(2, 2), true);
    CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);
}

TEST_CASE("non-finite values are an error state") {
    Tape<double> tape;
    Matd bad(1, 1);
    bad << std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(tape.leaf(bad), std::runtime_error);

    Matd negative(2, 1);
    negative << -1.0, 2.0;
    Var<double> v = tape.leaf(negative, true);
    CHECK_THROWS_AS(ad::log_op(v), std::runtime_error);  // log of a negative is NaN
}

TEST_CASE("shape mismatches are rejected") {
    Tape<double> tape;
    Var<double> a = tape.leaf(Matd::Ones(2, 3), true);
    Var<double> b = tape.leaf(Matd::Ones(3, 2), true);
    CHECK_THROWS_AS(ad::add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(ad::mul(a, b), std::invalid_argument);
    CHECK_THROWS_AS(ad::matmul(a, a), std::invalid_argument);
}

TEST_CASE("elementwise and structural ops pass finite-difference checks") {
    Rng rng(42);
    const Matd a = random_matrix(rng, 3, 4);
    const Matd b = random_matrix(rng, 3, 4, 0.5, 2.0);  // positive, for div/log
    const Matd row = random_matrix(rng, 1, 4);
    const Matd col = random_matrix(rng, 3, 1, 0.2, 1.0);

    check_gradients({a, b}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::add(v[0], v[1]), Rng(1));
    });
    check_gradients({a, b}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::sub(v[0], v[1]), Rng(2));
    });
    check_gradients({a, b}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::mul(v[0], v[1]), Rng(3));
    });
    check_gradients({a, b}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::div(v[0], v[1]), Rng(4));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::neg(v[0]), Rng(5));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::scale(v[0], 2.5), Rng(6));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::add_const(v[0], -0.75), Rng(7));
    });
    check_gradients({a, row}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::add_rowvec(v[0], v[1]), Rng(8));
    });
    check_gradients({a, col}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::rowscale(v[0], v[1]), Rng(9));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::transpose(v[0]), Rng(10));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::mean_rows(v[0]), Rng(11));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::gather_rows(v[0], IndexList{2, 0, 2}), Rng(12));
    });
}

TEST_CASE("matmul and concatenation pass finite-difference checks") {
    Rng rng(43);
    const Matd a = random_matrix(rng, 3, 4);
    const Matd b = random_matrix(rng, 4, 2);
    const Matd c = random_matrix(rng, 2, 4);
    const Matd d = random_matrix(rng, 3, 2);

    check_gradients({a, b}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::matmul(v[0], v[1]), Rng(20));
    });
    check_gradients({a, c}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::concat_rows<double>({v[0], v[1]}), Rng(21));
    });
    check_gradients({a, d}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::concat_cols<double>({v[0], v[1]}), Rng(22));
    });
}

TEST_CASE("nonlinearities pass finite-difference checks") {
    Rng rng(44);
    const Matd a = random_matrix(rng, 3, 4, -2.0, 2.0);
    const Matd pos = random_matrix(rng, 3, 4, 0.2, 3.0);

    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::sigmoid(v[0]), Rng(30));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::tanh_op(v[0]), Rng(31));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::gelu(v[0]), Rng(32));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::softplus_op(v[0]), Rng(33));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::exp_op(v[0]), Rng(34));
    });
    check_gradients({pos}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::log_op(v[0]), Rng(35));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::normal_cdf_op(v[0]), Rng(36));
    });
    // keep entries away from the clamp kink
    check_gradients({pos}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::clamp_min(v[0], 0.1), Rng(37));
    });
}

TEST_CASE("row-structured ops pass finite-difference checks") {
    Rng rng(45);
    const Matd a = random_matrix(rng, 4, 5, -2.0, 2.0);
    const Matd gamma = random_matrix(rng, 1, 5, 0.5, 1.5);
    const Matd beta = random_matrix(rng, 1, 5);

    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::softmax_rows(v[0]), Rng(40));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::log_softmax_rows(v[0]), Rng(41));
    });
    check_gradients({a}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::logsumexp_rows(v[0]), Rng(42));
    });
    check_gradients({a, gamma, beta}, [](Tape<double>& t, auto& v) {
        return weighted_sum(t, ad::layer_norm_rows(v[0], v[1], v[2]), Rng(43));
    }, 2e-4);
}

TEST_CASE("composite network matches finite differences") {
    Rng rng(46);
    const Matd x = random_matrix(rng, 5, 6);
    const Matd w1 = random_matrix(rng, 6, 8);
    const Matd b1 = random_matrix(rng, 1, 8);
    const Matd w2 = random_matrix(rng, 8, 6);
    const Matd gamma = random_matrix(rng, 1, 6, 0.5, 1.5);
    const Matd beta = random_matrix(rng, 1, 6);

    check_gradients({x, w1, b1, w2, gamma, beta}, [](Tape<double>& t, auto& v) {
        using namespace ad;
        Var<double> h = gelu(add_rowvec(matmul(v[0], v[1]), v[2]));
        Var<double> y = layer_norm_rows(matmul(h, v[3]), v[4], v[5]);
        Var<double> s = softmax_rows(y);
        Var<double> z = sigmoid(softplus_op(s));
        return weighted_sum(t, z, Rng(50));
    }, 5e-4);
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
    Rng rng(47);
    Tape<double> tape;
    Var<double> v = tape.leaf(random_matrix(rng, 6, 9, -5.0, 5.0), false);
    const Matd y = ad::softmax_rows(v).value();
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        CHECK(y.row(i).minCoeff() >= 0.0);
        CHECK(std::abs(y.row(i).sum() - 1.0) < 1e-6);
    }
}

TEST_CASE("layer norm output is standardized before the affine map") {
    Rng rng(48);
    Tape<double> tape;
    Var<double> v = tape.leaf(random_matrix(rng, 5, 16, -3.0, 3.0), false);
    Var<double> gamma = tape.leaf(Matd::Ones(1, 16), false);
    Var<double> beta = tape.leaf(Matd::Zero(1, 16), false);
    const Matd y = ad::layer_norm_rows(v, gamma, beta).value();
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        CHECK(std::abs(y.row(i).mean()) < 1e-6);
        const double var = (y.row(i).array() - y.row(i).mean()).square().mean();
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("activation fixed points") {
    Tape<double> tape;
    Matd z = Matd::Zero(1, 1);
    Var<double> v = tape.leaf(z, false);
    CHECK(ad::gelu(v).value()(0, 0) == 0.0);
    CHECK(ad::sigmoid(v).value()(0, 0) == 0.5);
}

TEST_CASE("inverted dropout preserves scale in training and is identity in eval") {
    Tape<double> tape;
    Var<double> v = tape.leaf(Matd::Ones(200, 50), true);
    Rng rng(7);
    const Matd train_out = ad::dropout(v, 0.3, true, rng).value();
    // kept entries are scaled by 1/(1-p); empirical mean stays near 1
    CHECK(std::abs(train_out.mean() - 1.0) < 0.02);
    for (Eigen::Index i = 0; i < train_out.size(); ++i) {
        const double x = train_out.data()[i];
        CHECK((x == 0.0 || x == doctest::Approx(1.0 / 0.7)));
    }
    Rng rng2(7);
    const Matd eval_out = ad::dropout(v, 0.3, false, rng2).value();
    CHECK(eval_out == Matd::Ones(200, 50));
}

TEST_CASE("dropout gradient equals its mask scaling") {
    Tape<double> tape;
    Var<double> v = tape.leaf(Matd::Ones(10, 10), true);
    Rng rng(9);
    Var<double> out = ad::dropout(v, 0.4, true, rng);
    tape.backward(ad::sum(out));
    CHECK(tape.grad(v) == out.value());  // input is all ones, grad == mask/(1-p)
}
