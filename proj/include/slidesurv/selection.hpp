#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "slidesurv/autodiff.hpp"
#include "slidesurv/types.hpp"

// Patch scoring, adaptive quantile thresholding and the split into
// task-relevant / task-irrelevant patch sets.

namespace slidesurv {

template <class Scalar>
struct SelectorParams {
    ad::Var<Scalar> w1;  // d x h
    ad::Var<Scalar> b1;  // 1 x h
    ad::Var<Scalar> w2;  // h x 1
    ad::Var<Scalar> b2;  // 1 x 1
};

// logits = sigmoid(W2 . GELU(W1 . X + b1) + b2), one score per patch in (0,1).
template <class Scalar>
ad::Var<Scalar> score_patches(ad::Var<Scalar> X, const SelectorParams<Scalar>& p) {
    using namespace ad;
    if (X.rows() < 1) throw std::invalid_argument("score_patches: empty feature matrix");
    if (X.cols() != p.w1.rows())
        throw std::invalid_argument("score_patches: feature dim does not match W1");
    Var<Scalar> h = gelu(add_rowvec(matmul(X, p.w1), p.b1));
    Var<Scalar> s = add_rowvec(matmul(h, p.w2), p.b2);
    return sigmoid(s);  // N x 1
}

// Linear-interpolation quantile (position q*(N-1) on the sorted array).
template <class Scalar>
Scalar quantile_threshold(const MatX<Scalar>& logits, Scalar q) {
    if (logits.size() < 1) throw std::invalid_argument("quantile_threshold: empty input");
    if (!(q >= Scalar(0) && q < Scalar(1)))
        throw std::invalid_argument("quantile_threshold: q must be in [0, 1)");
    std::vector<Scalar> v(logits.data(), logits.data() + logits.size());
    std::sort(v.begin(), v.end());
    const Scalar pos = q * static_cast<Scalar>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const Scalar frac = pos - static_cast<Scalar>(lo);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

template <class Scalar>
struct SelectionResult {
    ad::Var<Scalar> p_sel;   // m_sel x d
    ad::Var<Scalar> p_rem;   // m_rem x d (may have zero rows)
    IndexList i_sel;
    IndexList i_rem;
    ad::Var<Scalar> logits;  // N x 1
    Scalar tau = Scalar(0);
    bool fallback = false;   // strict-comparison split was empty; kept first ceil((1-q)N)
};

// Splits the (importance-weighted) rows of P by logits > tau, preserving the
// original order inside each part. When the strict comparison selects
// nothing (all-tied logits), falls back to the first ceil((1-q) * N) rows.
template <class Scalar>
SelectionResult<Scalar> split_patches(ad::Var<Scalar> P, ad::Var<Scalar> logits, Scalar tau,
                                      Scalar q) {
    if (P.rows() != logits.rows() || logits.cols() != 1)
        throw std::invalid_argument("split_patches: logits must be rows(P) x 1");
    const MatX<Scalar>& lv = logits.value();
    const auto n = static_cast<int>(lv.rows());
    SelectionResult<Scalar> res;
    res.logits = logits;
    res.tau = tau;
    for (int i = 0; i < n; ++i)
        (lv(i, 0) > tau ? res.i_sel : res.i_rem).push_back(i);
    if (res.i_sel.empty()) {
        res.fallback = true;
        res.i_sel.clear();
        res.i_rem.clear();
        const int keep = std::min<int>(
            n, static_cast<int>(std::ceil((Scalar(1) - q) * static_cast<Scalar>(n))));
        for (int i = 0; i < n; ++i) (i < keep ? res.i_sel : res.i_rem).push_back(i);
    }
    res.p_sel = ad::gather_rows(P, res.i_sel);
    res.p_rem = ad::gather_rows(P, res.i_rem);
    return res;
}

}  // namespace slidesurv
