#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "slidesurv/types.hpp"

namespace slidesurv {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178032973640562;  // 0.5*log(2*pi)
inline constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;  // 1/sqrt(2*pi)
inline constexpr double kSqrt2 = 1.4142135623730950488016887242097;

// Standard normal CDF. Total function, exact symmetry Phi(x)+Phi(-x)=1 up to
// rounding of erfc.
template <class Scalar>
Scalar normal_cdf(Scalar x) {
    return Scalar(0.5) * std::erfc(-x / Scalar(kSqrt2));
}

template <class Scalar>
Scalar normal_pdf(Scalar x) {
    return Scalar(kInvSqrt2Pi) * std::exp(Scalar(-0.5) * x * x);
}

template <class Scalar>
Scalar log_normal_pdf(Scalar x, Scalar mean, Scalar stddev) {
    const Scalar z = (x - mean) / stddev;
    return Scalar(-0.5) * z * z - std::log(stddev) - Scalar(kHalfLog2Pi);
}

// softplus(x) = log(1 + e^x), overflow-safe on both tails.
template <class Scalar>
Scalar softplus(Scalar x) {
    if (x > Scalar(0)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

// Inverse of softplus: y with log(1+e^y) = t. Defined for t > 0 only.
// Uses log(expm1(t)) for small t and the t + log1p(-e^-t) form past t = 30,
// where expm1 would lose the subtraction entirely.
template <class Scalar>
Scalar inverse_softplus(Scalar t) {
    if (!(t > Scalar(0))) throw std::domain_error("inverse_softplus: t must be > 0");
    if (t > Scalar(30)) return t + std::log1p(-std::exp(-t));
    return std::log(std::expm1(t));
}

// log sum_i exp(v_i) with the usual max shift.
template <class Scalar>
Scalar log_sum_exp(const Eigen::Ref<const MatX<Scalar>>& v) {
    if (v.size() == 0) throw std::invalid_argument("log_sum_exp: empty input");
    const Scalar m = v.maxCoeff();
    if (!std::isfinite(m)) return m;  // all -inf stays -inf
    Scalar acc = Scalar(0);
    for (Eigen::Index i = 0; i < v.rows(); ++i)
        for (Eigen::Index j = 0; j < v.cols(); ++j) acc += std::exp(v(i, j) - m);
    return m + std::log(acc);
}

template <class Scalar>
Scalar log_sum_exp(const std::vector<Scalar>& v) {
    if (v.empty()) throw std::invalid_argument("log_sum_exp: empty input");
    Scalar m = v[0];
    for (Scalar x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    Scalar acc = Scalar(0);
    for (Scalar x : v) acc += std::exp(x - m);
    return m + std::log(acc);
}

}  // namespace slidesurv
