#include <doctest.h>

#include <cmath>
#include <limits>

#include "slidesurv/special.hpp"

using namespace slidesurv;

TEST_CASE("normal_cdf matches high-precision reference values") {
    CHECK(normal_cdf(0.0) == doctest::Approx(0.5).epsilon(1e-15));
    // reference computed with a 30-digit erf evaluation
    CHECK(normal_cdf(1.96) == doctest::Approx(0.975002104851779565).epsilon(1e-14));
    CHECK(normal_cdf(-1.96) == doctest::Approx(1.0 - 0.975002104851779565).epsilon(1e-14));
    CHECK(normal_cdf(-40.0) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(normal_cdf(40.0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("normal_cdf symmetry and monotonicity") {
    double prev = -1.0;
    for (double x = -8.0; x <= 8.0; x += 0.37) {
        const double p = normal_cdf(x);
        CHECK(p >= prev);
        CHECK(std::abs(p + normal_cdf(-x) - 1.0) < 1e-12);
        prev = p;
    }
}

TEST_CASE("inverse_softplus round trips and stays stable for large t") {
    CHECK(inverse_softplus(std::log(2.0)) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::abs(inverse_softplus(50.0) - 50.0) < 1e-12);
    for (double t : {0.1, 0.01, 1.0, 5.0, 31.0, 100.0, 700.0}) {
        const double y = inverse_softplus(t);
        CHECK(softplus(y) == doctest::Approx(t).epsilon(1e-10));
    }
    // reference for t = 0.1 from the independent oracle
    CHECK(inverse_softplus(0.1) == doctest::Approx(-2.2521684610440908).epsilon(1e-12));
    CHECK_THROWS_AS(inverse_softplus(0.0), std::domain_error);
    CHECK_THROWS_AS(inverse_softplus(-1.0), std::domain_error);
}

TEST_CASE("softplus is strictly increasing and positive") {
    double prev = softplus(-40.0);
    CHECK(prev > 0.0);
    for (double x = -39.0; x <= 40.0; x += 1.0) {
        const double y = softplus(x);
        CHECK(y > prev);
        prev = y;
    }
}

TEST_CASE("log_sum_exp basics") {
    CHECK(log_sum_exp(std::vector<double>{0.0, 0.0}) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(log_sum_exp(std::vector<double>{3.25}) == doctest::Approx(3.25).epsilon(1e-15));
    CHECK(log_sum_exp(std::vector<double>{1000.0, 1000.0}) ==
          doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
    CHECK_THROWS_AS(log_sum_exp(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("log_sum_exp is shift invariant") {
    std::vector<double> v{-3.0, 0.5, 2.25, 1.0};
    const double base = log_sum_exp(v);
    for (double& x : v) x += 123.5;
    CHECK(log_sum_exp(v) == doctest::Approx(base + 123.5).epsilon(1e-12));
}

TEST_CASE("log_sum_exp on an Eigen column") {
    Matd v(3, 1);
    v << 1.0, 2.0, 3.0;
    const double expect = 3.0 + std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
    CHECK(log_sum_exp<double>(v) == doctest::Approx(expect).epsilon(1e-14));
}
