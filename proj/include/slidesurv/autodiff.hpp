#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "slidesurv/rng.hpp"
#include "slidesurv/special.hpp"
#include "slidesurv/types.hpp"

// Tape-based reverse-mode AD over dense matrices. Vectors are n x 1 (or
// 1 x n) matrices, scalars are 1 x 1. A tape owns all nodes created through
// it; ops are free functions returning lightweight Var handles. One tape is
// confined to a single thread for the duration of a forward/backward pass.

namespace slidesurv::ad {

template <class Scalar>
class Tape;

template <class Scalar>
struct Var {
    Tape<Scalar>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const MatX<Scalar>& value() const { return tape->value(*this); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

template <class Scalar>
class Tape {
public:
    // When set, every op validates that its output is finite and throws
    // otherwise. On by default.
    bool check_finite = true;

    Var<Scalar> leaf(MatX<Scalar> v, bool requires_grad = false) {
        validate_finite(v, "leaf");
        nodes_.push_back(Node{std::move(v), {}, nullptr, requires_grad});
        return Var<Scalar>{this, static_cast<int>(nodes_.size() - 1)};
    }

    Var<Scalar> constant(MatX<Scalar> v) { return leaf(std::move(v), false); }

    Var<Scalar> scalar_constant(Scalar v) {
        MatX<Scalar> m(1, 1);
        m(0, 0) = v;
        return constant(std::move(m));
    }

    int next_id() const { return static_cast<int>(nodes_.size()); }

    Var<Scalar> record(MatX<Scalar> value, bool requires_grad, std::function<void()> backprop) {
        validate_finite(value, "op output");
        nodes_.push_back(Node{std::move(value), {}, requires_grad ? std::move(backprop) : nullptr,
                              requires_grad});
        return Var<Scalar>{this, static_cast<int>(nodes_.size() - 1)};
    }

    const MatX<Scalar>& value(Var<Scalar> v) const { return nodes_.at(v.id).value; }

    bool requires_grad(Var<Scalar> v) const { return nodes_.at(v.id).requires_grad; }

    // Gradient of the last backward() w.r.t. v; zero matrix if untouched.
    MatX<Scalar> grad(Var<Scalar> v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.size() == 0) return MatX<Scalar>::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    // Grad of a node during the reverse sweep; only valid inside backprop
    // closures, where backward() guarantees it is non-empty.
    const MatX<Scalar>& sweep_grad(int id) const { return nodes_.at(id).grad; }

    void accumulate(int id, const MatX<Scalar>& g) {
        Node& n = nodes_.at(id);
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) n.grad = MatX<Scalar>::Zero(n.value.rows(), n.value.cols());
        n.grad += g;
    }

    // Reverse sweep from a scalar loss. Visits every node at most once, in
    // reverse creation order (a valid topological order for define-by-run).
    void backward(Var<Scalar> loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
        Node& l = nodes_.at(loss.id);
        if (l.value.rows() != 1 || l.value.cols() != 1)
            throw std::invalid_argument("backward: loss must be scalar (1x1)");
        if (!l.value.allFinite()) throw std::runtime_error("backward: non-finite loss");
        for (Node& n : nodes_) n.grad.resize(0, 0);
        l.grad = MatX<Scalar>::Ones(1, 1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backprop && n.grad.size() != 0) n.backprop();
        }
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        MatX<Scalar> value;
        MatX<Scalar> grad;  // lazily sized on first accumulation
        std::function<void()> backprop;
        bool requires_grad = false;
    };

    void validate_finite(const MatX<Scalar>& v, const char* where) const {
        if (check_finite && !v.allFinite())
            throw std::runtime_error(std::string("tape: non-finite values in ") + where);
    }

    std::vector<Node> nodes_;
};

namespace detail {

template <class Scalar>
Tape<Scalar>& same_tape(Var<Scalar> a, Var<Scalar> b) {
    if (a.tape != b.tape || a.tape == nullptr)
        throw std::invalid_argument("op: operands from different tapes");
    return *a.tape;
}

template <class Scalar>
void require_same_shape(Var<Scalar> a, Var<Scalar> b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- arithmetic ----

template <class Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "add");
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int oid = t.next_id();
    return t.record(t.value(a) + t.value(b), rg, [&t, a, b, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        t.accumulate(a.id, g);
        t.accumulate(b.id, g);
    });
}

template <class Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "sub");
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int oid = t.next_id();
    return t.record(t.value(a) - t.value(b), rg, [&t, a, b, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        t.accumulate(a.id, g);
        t.accumulate(b.id, -g);
    });
}

template <class Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "mul");
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int oid = t.next_id();
    return t.record(t.value(a).cwiseProduct(t.value(b)), rg, [&t, a, b, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        t.accumulate(a.id, g.cwiseProduct(t.value(b)));
        t.accumulate(b.id, g.cwiseProduct(t.value(a)));
    });
}

template <class Scalar>
Var<Scalar> div(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "div");
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int oid = t.next_id();
    return t.record(t.value(a).cwiseQuotient(t.value(b)), rg, [&t, a, b, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        const MatX<Scalar>& bv = t.value(b);
        t.accumulate(a.id, g.cwiseQuotient(bv));
        t.accumulate(b.id,
                     -g.cwiseProduct(t.value(a)).cwiseQuotient(bv.cwiseProduct(bv)));
    });
}

template <class Scalar>
Var<Scalar> neg(Var<Scalar> a) {
    Tape<Scalar>& t = *a.tape;
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(-t.value(a), rg, [&t, a, oid] { t.accumulate(a.id, -t.sweep_grad(oid)); });
}

template <class Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar c) {
    Tape<Scalar>& t = *a.tape;
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(t.value(a) * c, rg,
                    [&t, a, c, oid] { t.accumulate(a.id, t.sweep_grad(oid) * c); });
}

template <class Scalar>
Var<Scalar> add_const(Var<Scalar> a, Scalar c) {
    Tape<Scalar>& t = *a.tape;
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record((t.value(a).array() + c).matrix(), rg,
                    [&t, a, oid] { t.accumulate(a.id, t.sweep_grad(oid)); });
}

// a: n x d, b: 1 x d, added to every row.
template <class Scalar>
Var<Scalar> add_rowvec(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape(a, b);
    if (b.rows() != 1 || b.cols() != a.cols())
        throw std::invalid_argument("add_rowvec: b must be 1 x cols(a)");
    MatX<Scalar> out = t.value(a);
    out.rowwise() += t.value(b).row(0);
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, b, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        t.accumulate(a.id, g);
        t.accumulate(b.id, g.colwise().sum());
    });
}

// a: n x d scaled per row by s: n x 1 (c_ij = a_ij * s_i).
template <class Scalar>
Var<Scalar> rowscale(Var<Scalar> a, Var<Scalar> s) {
    Tape<Scalar>& t = detail::same_tape(a, s);
    if (s.cols() != 1 || s.rows() != a.rows())
        throw std::invalid_argument("rowscale: s must be rows(a) x 1");
    MatX<Scalar> out =
        (t.value(a).array().colwise() * t.value(s).col(0).array()).matrix();
    const bool rg = t.requires_grad(a) || t.requires_grad(s);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, s, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        t.accumulate(a.id, (g.array().colwise() * t.value(s).col(0).array()).matrix());
        t.accumulate(s.id, g.cwiseProduct(t.value(a)).rowwise().sum());
    });
}

template <class Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape(a, b);
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions disagree");
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int oid = t.next_id();
    return t.record(t.value(a) * t.value(b), rg, [&t, a, b, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        t.accumulate(a.id, g * t.value(b).transpose());
        t.accumulate(b.id, t.value(a).transpose() * g);
    });
}

template <class Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
    Tape<Scalar>& t = *a.tape;
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(t.value(a).transpose(), rg,
                    [&t, a, oid] { t.accumulate(a.id, t.sweep_grad(oid).transpose()); });
}

// ---- reductions / reshaping ----

template <class Scalar>
Var<Scalar> sum(Var<Scalar> a) {
    Tape<Scalar>& t = *a.tape;
    MatX<Scalar> out(1, 1);
    out(0, 0) = t.value(a).sum();
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, oid] {
        const Scalar g = t.sweep_grad(oid)(0, 0);
        t.accumulate(a.id, MatX<Scalar>::Constant(a.rows(), a.cols(), g));
    });
}

template <class Scalar>
Var<Scalar> mean_rows(Var<Scalar> a) {
    Tape<Scalar>& t = *a.tape;
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(a.rows());
    MatX<Scalar> out = t.value(a).colwise().sum() * inv_n;
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, inv_n, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        t.accumulate(a.id, (g * inv_n).replicate(a.rows(), 1));
    });
}

template <class Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    Tape<Scalar>& t = *parts[0].tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts[0].cols();
    for (Var<Scalar> p : parts) {
        if (p.tape != &t) throw std::invalid_argument("concat_rows: mixed tapes");
        if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.rows();
    }
    MatX<Scalar> out(rows, cols);
    bool rg = false;
    Eigen::Index r = 0;
    for (Var<Scalar> p : parts) {
        out.middleRows(r, p.rows()) = t.value(p);
        r += p.rows();
        rg = rg || t.requires_grad(p);
    }
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, parts, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        Eigen::Index r = 0;
        for (Var<Scalar> p : parts) {
            t.accumulate(p.id, g.middleRows(r, p.rows()));
            r += p.rows();
        }
    });
}

template <class Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    Tape<Scalar>& t = *parts[0].tape;
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts[0].rows();
    for (Var<Scalar> p : parts) {
        if (p.tape != &t) throw std::invalid_argument("concat_cols: mixed tapes");
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.cols();
    }
    MatX<Scalar> out(rows, cols);
    bool rg = false;
    Eigen::Index c = 0;
    for (Var<Scalar> p : parts) {
        out.middleCols(c, p.cols()) = t.value(p);
        c += p.cols();
        rg = rg || t.requires_grad(p);
    }
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, parts, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        Eigen::Index c = 0;
        for (Var<Scalar> p : parts) {
            t.accumulate(p.id, g.middleCols(c, p.cols()));
            c += p.cols();
        }
    });
}

template <class Scalar>
Var<Scalar> gather_rows(Var<Scalar> a, IndexList idx) {
    Tape<Scalar>& t = *a.tape;
    MatX<Scalar> out(static_cast<Eigen::Index>(idx.size()), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a.rows())
            throw std::invalid_argument("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = t.value(a).row(idx[i]);
    }
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, idx = std::move(idx), oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        MatX<Scalar> ga = MatX<Scalar>::Zero(a.rows(), a.cols());
        for (std::size_t i = 0; i < idx.size(); ++i)
            ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
        t.accumulate(a.id, ga);
    });
}

// ---- elementwise nonlinearities ----

namespace detail {

template <class Scalar, class Fwd, class Bwd>
Var<Scalar> unary_op(Var<Scalar> a, Fwd fwd, Bwd bwd_factor) {
    Tape<Scalar>& t = *a.tape;
    MatX<Scalar> out = t.value(a).unaryExpr(fwd);
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, bwd_factor, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        t.accumulate(a.id, g.cwiseProduct(t.value(a).unaryExpr(bwd_factor)));
    });
}

}  // namespace detail

template <class Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
    auto f = [](Scalar x) {
        return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x))
                              : std::exp(x) / (Scalar(1) + std::exp(x));
    };
    return detail::unary_op<Scalar>(a, f, [f](Scalar x) {
        const Scalar s = f(x);
        return s * (Scalar(1) - s);
    });
}

template <class Scalar>
Var<Scalar> tanh_op(Var<Scalar> a) {
    return detail::unary_op<Scalar>(
        a, [](Scalar x) { return std::tanh(x); },
        [](Scalar x) {
            const Scalar y = std::tanh(x);
            return Scalar(1) - y * y;
        });
}

// Exact GELU, x * Phi(x); shares the erf implementation with normal_cdf.
template <class Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
    return detail::unary_op<Scalar>(
        a, [](Scalar x) { return x * normal_cdf(x); },
        [](Scalar x) { return normal_cdf(x) + x * normal_pdf(x); });
}

template <class Scalar>
Var<Scalar> softplus_op(Var<Scalar> a) {
    return detail::unary_op<Scalar>(
        a, [](Scalar x) { return softplus(x); },
        [](Scalar x) {
            return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x))
                                  : std::exp(x) / (Scalar(1) + std::exp(x));
        });
}

template <class Scalar>
Var<Scalar> exp_op(Var<Scalar> a) {
    return detail::unary_op<Scalar>(a, [](Scalar x) { return std::exp(x); },
                                    [](Scalar x) { return std::exp(x); });
}

template <class Scalar>
Var<Scalar> log_op(Var<Scalar> a) {
    return detail::unary_op<Scalar>(a, [](Scalar x) { return std::log(x); },
                                    [](Scalar x) { return Scalar(1) / x; });
}

template <class Scalar>
Var<Scalar> normal_cdf_op(Var<Scalar> a) {
    return detail::unary_op<Scalar>(a, [](Scalar x) { return normal_cdf(x); },
                                    [](Scalar x) { return normal_pdf(x); });
}

// max(x, floor); gradient is blocked where the floor engages.
template <class Scalar>
Var<Scalar> clamp_min(Var<Scalar> a, Scalar floor) {
    return detail::unary_op<Scalar>(
        a, [floor](Scalar x) { return x < floor ? floor : x; },
        [floor](Scalar x) { return x < floor ? Scalar(0) : Scalar(1); });
}

// ---- row-structured ops ----

template <class Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
    Tape<Scalar>& t = *a.tape;
    MatX<Scalar> out = t.value(a);
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        row = (row.array() - row.maxCoeff()).exp().matrix();
        row /= row.sum();
    }
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        const MatX<Scalar>& y = t.value(Var<Scalar>{&t, oid});
        MatX<Scalar> ga(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            const Scalar dot = g.row(i).cwiseProduct(y.row(i)).sum();
            ga.row(i) = y.row(i).cwiseProduct(g.row(i)) - dot * y.row(i);
        }
        t.accumulate(a.id, ga);
    });
}

template <class Scalar>
Var<Scalar> log_softmax_rows(Var<Scalar> a) {
    Tape<Scalar>& t = *a.tape;
    MatX<Scalar> out = t.value(a);
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        const Scalar m = row.maxCoeff();
        const Scalar lse = m + std::log((row.array() - m).exp().sum());
        row = (row.array() - lse).matrix();
    }
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        const MatX<Scalar>& y = t.value(Var<Scalar>{&t, oid});
        MatX<Scalar> ga(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            const Scalar gsum = g.row(i).sum();
            ga.row(i) = g.row(i) - gsum * y.row(i).array().exp().matrix();
        }
        t.accumulate(a.id, ga);
    });
}

// Per-row log sum exp; n x d -> n x 1.
template <class Scalar>
Var<Scalar> logsumexp_rows(Var<Scalar> a) {
    Tape<Scalar>& t = *a.tape;
    if (a.cols() < 1) throw std::invalid_argument("logsumexp_rows: empty rows");
    MatX<Scalar> out(a.rows(), 1);
    const MatX<Scalar>& av = t.value(a);
    for (Eigen::Index i = 0; i < av.rows(); ++i) {
        const Scalar m = av.row(i).maxCoeff();
        out(i, 0) = m + std::log((av.row(i).array() - m).exp().sum());
    }
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, oid] {
        const MatX<Scalar>& g = t.sweep_grad(oid);
        const MatX<Scalar>& y = t.value(Var<Scalar>{&t, oid});
        const MatX<Scalar>& av = t.value(a);
        MatX<Scalar> ga(av.rows(), av.cols());
        for (Eigen::Index i = 0; i < av.rows(); ++i)
            ga.row(i) = g(i, 0) * (av.row(i).array() - y(i, 0)).exp().matrix();
        t.accumulate(a.id, ga);
    });
}

// Per-row layer normalization with affine parameters gamma, beta (1 x d).
template <class Scalar>
Var<Scalar> layer_norm_rows(Var<Scalar> a, Var<Scalar> gamma, Var<Scalar> beta,
                            Scalar eps = Scalar(1e-5)) {
    Tape<Scalar>& t = *a.tape;
    if (gamma.rows() != 1 || gamma.cols() != a.cols() || beta.rows() != 1 ||
        beta.cols() != a.cols())
        throw std::invalid_argument("layer_norm_rows: affine params must be 1 x cols(a)");
    const MatX<Scalar>& av = t.value(a);
    const Eigen::Index n = av.rows(), d = av.cols();
    MatX<Scalar> xhat(n, d);
    MatX<Scalar> inv_std(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar mu = av.row(i).mean();
        const Scalar var = (av.row(i).array() - mu).square().mean();
        const Scalar is = Scalar(1) / std::sqrt(var + eps);
        inv_std(i, 0) = is;
        xhat.row(i) = (av.row(i).array() - mu) * is;
    }
    MatX<Scalar> out(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        out.row(i) = xhat.row(i).cwiseProduct(t.value(gamma).row(0)) + t.value(beta).row(0);
    const bool rg = t.requires_grad(a) || t.requires_grad(gamma) || t.requires_grad(beta);
    const int oid = t.next_id();
    return t.record(std::move(out), rg,
                    [&t, a, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
                     oid] {
                        const MatX<Scalar>& g = t.sweep_grad(oid);
                        const Eigen::Index rows = xhat.rows(), cols = xhat.cols();
                        t.accumulate(beta.id, g.colwise().sum());
                        t.accumulate(gamma.id, g.cwiseProduct(xhat).colwise().sum());
                        MatX<Scalar> ga(rows, cols);
                        for (Eigen::Index i = 0; i < rows; ++i) {
                            const MatX<Scalar> gy =
                                g.row(i).cwiseProduct(t.value(gamma).row(0));
                            const Scalar m1 = gy.mean();
                            const Scalar m2 = gy.cwiseProduct(xhat.row(i)).mean();
                            ga.row(i) =
                                inv_std(i, 0) *
                                (gy.array() - m1 - xhat.row(i).array() * m2).matrix();
                        }
                        t.accumulate(a.id, ga);
                    });
}

// Inverted dropout: scales kept entries by 1/(1-rate) during training and is
// the identity in eval mode.
template <class Scalar>
Var<Scalar> dropout(Var<Scalar> a, Scalar rate, bool training, Rng& rng) {
    Tape<Scalar>& t = *a.tape;
    if (rate < Scalar(0) || rate >= Scalar(1))
        throw std::invalid_argument("dropout: rate must be in [0, 1)");
    if (!training || rate == Scalar(0)) {
        const bool rg = t.requires_grad(a);
        const int oid = t.next_id();
        return t.record(t.value(a), rg,
                        [&t, a, oid] { t.accumulate(a.id, t.sweep_grad(oid)); });
    }
    MatX<Scalar> mask(a.rows(), a.cols());
    const Scalar keep = Scalar(1) - rate;
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
        for (Eigen::Index j = 0; j < mask.cols(); ++j)
            mask(i, j) = rng.uniform() < static_cast<double>(rate) ? Scalar(0) : Scalar(1) / keep;
    MatX<Scalar> out = t.value(a).cwiseProduct(mask);
    const bool rg = t.requires_grad(a);
    const int oid = t.next_id();
    return t.record(std::move(out), rg, [&t, a, mask = std::move(mask), oid] {
        t.accumulate(a.id, t.sweep_grad(oid).cwiseProduct(mask));
    });
}

// Scalar value of a 1 x 1 Var.
template <class Scalar>
Scalar scalar_value(Var<Scalar> v) {
    const MatX<Scalar>& m = v.value();
    if (m.rows() != 1 || m.cols() != 1)
        throw std::invalid_argument("scalar_value: not a 1x1 tensor");
    return m(0, 0);
}

}  // namespace slidesurv::ad
