#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "treat/errors.hpp"

namespace treat {

namespace detail {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

/// Pass-local gradient buffers used by one backward sweep. Persistent .grad
/// accumulates across sweeps; this table never leaks between them.
using GradTable = std::unordered_map<const TensorNode*, std::vector<double>>;

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty means absent
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(const std::vector<double>&, GradTable&)> backward_fn;
};

inline thread_local bool grad_mode_enabled = true;

inline std::size_t shape_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline std::vector<double>& pass_grad(GradTable& table, const NodePtr& node) {
    auto& buf = table[node.get()];
    if (buf.empty()) buf.assign(node->data.size(), 0.0);
    return buf;
}

/// Order-independent sum: addends are sorted by value before accumulation, so
/// the result does not depend on how the inputs were ordered. Attention uses
/// this to make pooling over a set of video embeddings bit-exactly
/// permutation invariant.
inline double canonical_sum(std::vector<double>& scratch) {
    std::sort(scratch.begin(), scratch.end());
    double acc = 0.0;
    for (double v : scratch) acc += v;
    return acc;
}

}  // namespace detail

/// Disables graph recording for the current thread while alive. Evaluation
/// paths use this so forward passes do not retain activations.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
    ~NoGradGuard() { detail::grad_mode_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Dense row-major f64 tensor participating in reverse-mode autodiff.
/// A Tensor is a shared handle to its node; copies alias the same storage.
/// Data is immutable once a node feeds a recorded graph, except for leaf
/// parameters which the optimizer updates between graph lifetimes.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false) {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (std::size_t d : shape)
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + detail::shape_str(shape));
        if (detail::shape_size(shape) != data.size())
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             detail::shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
        std::vector<double> d(detail::shape_size(shape), value);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor ones(std::vector<std::size_t> shape, bool requires_grad = false) {
        return full(std::move(shape), 1.0, requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data({1, 1}, {value}, requires_grad);
    }

    /// 1 x n row vector.
    static Tensor row(std::vector<double> values, bool requires_grad = false) {
        return from_data({1, values.size()}, std::move(values), requires_grad);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false) {
        return from_data({rows, cols}, std::move(values), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }

    std::size_t rows() const {
        require_rank2("rows()");
        return node_->shape[0];
    }
    std::size_t cols() const {
        require_rank2("cols()");
        return node_->shape[1];
    }

    double item() const {
        if (size() != 1) throw ValueError("item() requires a single-element tensor, got " + detail::shape_str(shape()));
        return node_->data[0];
    }
    double at(std::size_t i) const { return node_->data.at(i); }
    double at(std::size_t i, std::size_t j) const {
        require_rank2("at(i,j)");
        return node_->data[i * node_->shape[1] + j];
    }

    const std::vector<double>& values() const { return node_->data; }
    /// Mutable storage access; for leaf initialization and optimizer updates.
    std::vector<double>& values() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (node_->grad.empty()) throw ValueError("gradient absent; run backward first");
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    Tensor clone_detached() const { return from_data(node_->shape, node_->data, false); }

    const detail::NodePtr& impl() const { return node_; }

private:
    void require_rank2(const char* what) const {
        if (node_->shape.size() != 2)
            throw ShapeError(std::string(what) + " requires a rank-2 tensor, got " + detail::shape_str(shape()));
    }

    detail::NodePtr node_;
};

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!grad_mode_enabled) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void attach(Tensor& out, std::vector<NodePtr> parents,
                   std::function<void(const std::vector<double>&, GradTable&)> fn) {
    out.impl()->requires_grad = true;
    out.impl()->parents = std::move(parents);
    out.impl()->backward_fn = std::move(fn);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward operations. Each records a backward rule when grad mode is on and
// any input requires grad; outputs of recorded ops require grad themselves.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul requires rank-2 tensors, got " + detail::shape_str(a.shape()) + " and " +
                         detail::shape_str(b.shape()));
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
        }
    Tensor c = Tensor::matrix(m, n, std::move(out));
    if (detail::should_record({&a, &b})) {
        auto an = a.impl(), bn = b.impl();
        detail::attach(c, {an, bn}, [an, bn, m, k, n](const std::vector<double>& g, detail::GradTable& t) {
            if (an->requires_grad) {
                auto& ga = detail::pass_grad(t, an);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bn->data[p * n + j];
                        ga[i * k + p] += acc;
                    }
            }
            if (bn->requires_grad) {
                auto& gb = detail::pass_grad(t, bn);
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < m; ++i) acc += an->data[i * k + p] * g[i * n + j];
                        gb[p * n + j] += acc;
                    }
            }
        });
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose requires a rank-2 tensor, got " + detail::shape_str(a.shape()));
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
    Tensor c = Tensor::matrix(n, m, std::move(out));
    if (detail::should_record({&a})) {
        auto an = a.impl();
        detail::attach(c, {an}, [an, m, n](const std::vector<double>& g, detail::GradTable& t) {
            if (!an->requires_grad) return;
            auto& ga = detail::pass_grad(t, an);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return c;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    Tensor c = Tensor::from_data(a.shape(), std::move(out));
    if (detail::should_record({&a, &b})) {
        auto an = a.impl(), bn = b.impl();
        detail::attach(c, {an, bn}, [an, bn](const std::vector<double>& g, detail::GradTable& t) {
            if (an->requires_grad) {
                auto& ga = detail::pass_grad(t, an);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = detail::pass_grad(t, bn);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    Tensor c = Tensor::from_data(a.shape(), std::move(out));
    if (detail::should_record({&a, &b})) {
        auto an = a.impl(), bn = b.impl();
        detail::attach(c, {an, bn}, [an, bn](const std::vector<double>& g, detail::GradTable& t) {
            if (an->requires_grad) {
                auto& ga = detail::pass_grad(t, an);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = detail::pass_grad(t, bn);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    Tensor c = Tensor::from_data(a.shape(), std::move(out));
    if (detail::should_record({&a, &b})) {
        auto an = a.impl(), bn = b.impl();
        detail::attach(c, {an, bn}, [an, bn](const std::vector<double>& g, detail::GradTable& t) {
            if (an->requires_grad) {
                auto& ga = detail::pass_grad(t, an);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                auto& gb = detail::pass_grad(t, bn);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
            }
        });
    }
    return c;
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.values()[i];
    Tensor r = Tensor::from_data(a.shape(), std::move(out));
    if (detail::should_record({&a})) {
        auto an = a.impl();
        detail::attach(r, {an}, [an, c](const std::vector<double>& g, detail::GradTable& t) {
            if (!an->requires_grad) return;
            auto& ga = detail::pass_grad(t, an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
    }
    return r;
}

/// x (m x d) plus a row vector of d entries added to every row.
inline Tensor add_row_broadcast(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2) throw ShapeError("add_row_broadcast: x must be rank-2, got " + detail::shape_str(x.shape()));
    if (b.size() != x.cols())
        throw ShapeError("add_row_broadcast: bias size " + std::to_string(b.size()) + " vs row width " +
                         std::to_string(x.cols()));
    const std::size_t m = x.rows(), d = x.cols();
    std::vector<double> out(m * d);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.values()[i * d + j] + b.values()[j];
    Tensor c = Tensor::matrix(m, d, std::move(out));
    if (detail::should_record({&x, &b})) {
        auto xn = x.impl(), bn = b.impl();
        detail::attach(c, {xn, bn}, [xn, bn, m, d](const std::vector<double>& g, detail::GradTable& t) {
            if (xn->requires_grad) {
                auto& gx = detail::pass_grad(t, xn);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = detail::pass_grad(t, bn);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
            }
        });
    }
    return c;
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    Tensor c = Tensor::from_data(a.shape(), std::move(out));
    if (detail::should_record({&a})) {
        auto an = a.impl();
        detail::attach(c, {an}, [an](const std::vector<double>& g, detail::GradTable& t) {
            if (!an->requires_grad) return;
            auto& ga = detail::pass_grad(t, an);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (an->data[i] > 0.0) ga[i] += g[i];
        });
    }
    return c;
}

namespace detail {
inline double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}
}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(a.values()[i]);
    Tensor c = Tensor::from_data(a.shape(), std::move(out));
    if (detail::should_record({&a})) {
        auto an = a.impl();
        std::vector<double> s = c.values();
        detail::attach(c, {an}, [an, s = std::move(s)](const std::vector<double>& g, detail::GradTable& t) {
            if (!an->requires_grad) return;
            auto& ga = detail::pass_grad(t, an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
        });
    }
    return c;
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    Tensor c = Tensor::scalar(acc);
    if (detail::should_record({&a})) {
        auto an = a.impl();
        detail::attach(c, {an}, [an](const std::vector<double>& g, detail::GradTable& t) {
            if (!an->requires_grad) return;
            auto& ga = detail::pass_grad(t, an);
            for (double& v : ga) v += g[0];
        });
    }
    return c;
}

inline Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.size());
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    Tensor c = Tensor::scalar(acc / n);
    if (detail::should_record({&a})) {
        auto an = a.impl();
        detail::attach(c, {an}, [an, n](const std::vector<double>& g, detail::GradTable& t) {
            if (!an->requires_grad) return;
            auto& ga = detail::pass_grad(t, an);
            for (double& v : ga) v += g[0] / n;
        });
    }
    return c;
}

/// Concatenates tensors along their last dimension. Rank-1 inputs concatenate
/// into a longer rank-1 tensor; rank-2 inputs must share a row count.
inline Tensor concat_last_dim(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValueError("concat_last_dim: no inputs");
    const std::size_t rank = parts.front().rank();
    if (rank != 1 && rank != 2)
        throw ShapeError("concat_last_dim supports rank-1/2 tensors, got " +
                         detail::shape_str(parts.front().shape()));
    const std::size_t m = rank == 2 ? parts.front().shape()[0] : 1;
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat_last_dim: mixed ranks");
        if (rank == 2 && p.shape()[0] != m)
            throw ShapeError("concat_last_dim: row counts differ, " + detail::shape_str(parts.front().shape()) +
                             " vs " + detail::shape_str(p.shape()));
        total += p.shape().back();
    }
    std::vector<double> out(m * total);
    std::size_t col0 = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.shape().back();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * total + col0 + j] = p.values()[i * w + j];
        col0 += w;
    }
    Tensor c =
        rank == 1 ? Tensor::from_data({total}, std::move(out)) : Tensor::from_data({m, total}, std::move(out));
    bool record = detail::grad_mode_enabled &&
                  std::any_of(parts.begin(), parts.end(), [](const Tensor& p) { return p.requires_grad(); });
    if (record) {
        std::vector<detail::NodePtr> nodes;
        std::vector<std::size_t> widths;
        for (const Tensor& p : parts) {
            nodes.push_back(p.impl());
            widths.push_back(p.shape().back());
        }
        auto parents = nodes;
        detail::attach(c, std::move(parents),
                       [nodes, widths, m, total](const std::vector<double>& g, detail::GradTable& t) {
                           std::size_t col0 = 0;
                           for (std::size_t k = 0; k < nodes.size(); ++k) {
                               const std::size_t w = widths[k];
                               if (nodes[k]->requires_grad) {
                                   auto& gp = detail::pass_grad(t, nodes[k]);
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + col0 + j];
                               }
                               col0 += w;
                           }
                       });
    }
    return c;
}

inline Tensor concat_last_dim(const Tensor& a, const Tensor& b) { return concat_last_dim(std::vector<Tensor>{a, b}); }

/// Row-wise softmax with per-row max subtraction. Row sums are accumulated in
/// value order, so the output is invariant to how equal-valued entries were
/// arranged by the caller.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows requires a rank-2 tensor, got " + detail::shape_str(x.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    std::vector<double> scratch(n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = x.values().data() + i * n;
        double mx = xi[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(xi[j] - mx);
            scratch[j] = out[i * n + j];
        }
        const double denom = detail::canonical_sum(scratch);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= denom;
    }
    Tensor c = Tensor::matrix(m, n, std::move(out));
    if (detail::should_record({&x})) {
        auto xn = x.impl();
        std::vector<double> s = c.values();
        detail::attach(c, {xn}, [xn, s = std::move(s), m, n](const std::vector<double>& g, detail::GradTable& t) {
            if (!xn->requires_grad) return;
            auto& gx = detail::pass_grad(t, xn);
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * s[i * n + j];
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += s[i * n + j] * (g[i * n + j] - dot);
            }
        });
    }
    return c;
}

/// Per-row layer normalization over the last dimension with affine output
/// gamma * x_hat + beta. Uses biased variance and the given epsilon.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() != 2) throw ShapeError("layer_norm requires a rank-2 tensor, got " + detail::shape_str(x.shape()));
    const std::size_t m = x.rows(), d = x.cols();
    if (d < 2) throw ValueError("layer_norm requires vectors of width >= 2, got width " + std::to_string(d));
    if (gamma.size() != d || beta.size() != d)
        throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(d) + " entries, got " +
                         std::to_string(gamma.size()) + " and " + std::to_string(beta.size()));
    std::vector<double> out(m * d), xhat(m * d), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = x.values().data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xi[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[i] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (xi[j] - mu) * inv;
            out[i * d + j] = gamma.values()[j] * xhat[i * d + j] + beta.values()[j];
        }
    }
    Tensor c = Tensor::matrix(m, d, std::move(out));
    if (detail::should_record({&x, &gamma, &beta})) {
        auto xn = x.impl(), gn = gamma.impl(), bn = beta.impl();
        detail::attach(c, {xn, gn, bn},
                       [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
                        d](const std::vector<double>& g, detail::GradTable& t) {
                           if (bn->requires_grad) {
                               auto& gb = detail::pass_grad(t, bn);
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                           }
                           if (gn->requires_grad) {
                               auto& gg = detail::pass_grad(t, gn);
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                           }
                           if (xn->requires_grad) {
                               auto& gx = detail::pass_grad(t, xn);
                               std::vector<double> h(d);
                               for (std::size_t i = 0; i < m; ++i) {
                                   double mean_h = 0.0, mean_hx = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       h[j] = g[i * d + j] * gn->data[j];
                                       mean_h += h[j];
                                       mean_hx += h[j] * xhat[i * d + j];
                                   }
                                   mean_h /= static_cast<double>(d);
                                   mean_hx /= static_cast<double>(d);
                                   for (std::size_t j = 0; j < d; ++j)
                                       gx[i * d + j] += inv_std[i] * (h[j] - mean_h - xhat[i * d + j] * mean_hx);
                               }
                           }
                       });
    }
    return c;
}

/// Standardizes all entries to zero mean, unit variance. The denominator is
/// sqrt(max(var, eps)): for non-degenerate inputs the map is exactly
/// invariant under positive affine transforms of the input, and degenerate
/// (near-constant) inputs stay finite.
inline Tensor standardize(const Tensor& x, double eps) {
    const std::size_t n = x.size();
    double mu = 0.0;
    for (double v : x.values()) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x.values()) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    const bool live = var > eps;
    const double denom = std::sqrt(live ? var : eps);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = (x.values()[i] - mu) / denom;
    Tensor c = Tensor::from_data(x.shape(), std::move(out));
    if (detail::should_record({&x})) {
        auto xn = x.impl();
        std::vector<double> y = c.values();
        detail::attach(c, {xn},
                       [xn, y = std::move(y), denom, live, n](const std::vector<double>& g, detail::GradTable& t) {
                           if (!xn->requires_grad) return;
                           auto& gx = detail::pass_grad(t, xn);
                           double mean_g = 0.0, mean_gy = 0.0;
                           for (std::size_t i = 0; i < n; ++i) {
                               mean_g += g[i];
                               mean_gy += g[i] * y[i];
                           }
                           mean_g /= static_cast<double>(n);
                           mean_gy /= static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                               double v = g[i] - mean_g;
                               if (live) v -= y[i] * mean_gy;
                               gx[i] += v / denom;
                           }
                       });
    }
    return c;
}

/// Pools rows of `rows` (L x d) with the weights (1 x L): out_j = sum_l w_l *
/// rows_lj. Per-coordinate sums are order-canonicalized, so permuting the
/// rows together with their weights reproduces the output bit-exactly.
inline Tensor weighted_rowsum(const Tensor& weights, const Tensor& rows) {
    if (weights.rank() != 2 || weights.rows() != 1)
        throw ShapeError("weighted_rowsum: weights must be 1xL, got " + detail::shape_str(weights.shape()));
    if (rows.rank() != 2 || rows.rows() != weights.cols())
        throw ShapeError("weighted_rowsum: rows " + detail::shape_str(rows.shape()) + " vs weights " +
                         detail::shape_str(weights.shape()));
    const std::size_t L = rows.rows(), d = rows.cols();
    std::vector<double> out(d);
    std::vector<double> scratch(L);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t l = 0; l < L; ++l) scratch[l] = weights.values()[l] * rows.values()[l * d + j];
        out[j] = detail::canonical_sum(scratch);
    }
    Tensor c = Tensor::matrix(1, d, std::move(out));
    if (detail::should_record({&weights, &rows})) {
        auto wn = weights.impl(), rn = rows.impl();
        detail::attach(c, {wn, rn}, [wn, rn, L, d](const std::vector<double>& g, detail::GradTable& t) {
            if (wn->requires_grad) {
                auto& gw = detail::pass_grad(t, wn);
                for (std::size_t l = 0; l < L; ++l) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < d; ++j) acc += g[j] * rn->data[l * d + j];
                    gw[l] += acc;
                }
            }
            if (rn->requires_grad) {
                auto& gr = detail::pass_grad(t, rn);
                for (std::size_t l = 0; l < L; ++l)
                    for (std::size_t j = 0; j < d; ++j) gr[l * d + j] += wn->data[l] * g[j];
            }
        });
    }
    return c;
}

/// Mean binary cross-entropy on logits: mean_i softplus(-z_i) + (1-y_i) z_i,
/// evaluated in the overflow-free arrangement. Labels must be exactly 0 or 1.
inline Tensor bce_with_logits(const Tensor& z, const Tensor& y) {
    detail::check_same_shape(z, y, "bce_with_logits");
    const std::size_t n = z.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double yi = y.values()[i];
        if (yi != 0.0 && yi != 1.0)
            throw ValueError("bce_with_logits: label at index " + std::to_string(i) + " is " + std::to_string(yi) +
                             ", expected 0 or 1");
        const double zi = z.values()[i];
        acc += std::max(zi, 0.0) - yi * zi + std::log1p(std::exp(-std::abs(zi)));
    }
    Tensor c = Tensor::scalar(acc / static_cast<double>(n));
    if (detail::should_record({&z, &y})) {
        auto zn = z.impl(), yn = y.impl();
        detail::attach(c, {zn, yn}, [zn, yn, n](const std::vector<double>& g, detail::GradTable& t) {
            if (zn->requires_grad) {
                auto& gz = detail::pass_grad(t, zn);
                for (std::size_t i = 0; i < n; ++i)
                    gz[i] += g[0] * (detail::stable_sigmoid(zn->data[i]) - yn->data[i]) / static_cast<double>(n);
            }
            if (yn->requires_grad) {
                auto& gy = detail::pass_grad(t, yn);
                for (std::size_t i = 0; i < n; ++i) gy[i] += g[0] * (-zn->data[i]) / static_cast<double>(n);
            }
        });
    }
    return c;
}

/// Class-weighted variant; loss = sum_i w_i l_i / sum_i w_i with w_i chosen
/// by the sample's label.
inline Tensor bce_with_logits_weighted(const Tensor& z, const Tensor& y, double w_neg, double w_pos) {
    detail::check_same_shape(z, y, "bce_with_logits_weighted");
    if (w_neg <= 0.0 || w_pos <= 0.0) throw ValueError("bce_with_logits_weighted: class weights must be positive");
    const std::size_t n = z.size();
    double acc = 0.0, wsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double yi = y.values()[i];
        if (yi != 0.0 && yi != 1.0)
            throw ValueError("bce_with_logits_weighted: label at index " + std::to_string(i) + " is " +
                             std::to_string(yi) + ", expected 0 or 1");
        const double zi = z.values()[i];
        const double wi = yi == 1.0 ? w_pos : w_neg;
        acc += wi * (std::max(zi, 0.0) - yi * zi + std::log1p(std::exp(-std::abs(zi))));
        wsum += wi;
    }
    Tensor c = Tensor::scalar(acc / wsum);
    if (detail::should_record({&z, &y})) {
        auto zn = z.impl(), yn = y.impl();
        detail::attach(c, {zn, yn}, [zn, yn, n, w_neg, w_pos, wsum](const std::vector<double>& g, detail::GradTable& t) {
            if (!zn->requires_grad) return;
            auto& gz = detail::pass_grad(t, zn);
            for (std::size_t i = 0; i < n; ++i) {
                const double wi = yn->data[i] == 1.0 ? w_pos : w_neg;
                gz[i] += g[0] * wi * (detail::stable_sigmoid(zn->data[i]) - yn->data[i]) / wsum;
            }
        });
    }
    return c;
}

/// Per-sample two-class reading of a scalar logit: LayerNorm of [z, 0] over
/// the class axis, first component. Closed form (z/2) / sqrt(z^2/4 + eps).
inline Tensor two_class_logit_norm(const Tensor& z, double eps) {
    const std::size_t n = z.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = 0.5 * z.values()[i];
        out[i] = a / std::sqrt(a * a + eps);
    }
    Tensor c = Tensor::from_data(z.shape(), std::move(out));
    if (detail::should_record({&z})) {
        auto zn = z.impl();
        detail::attach(c, {zn}, [zn, eps, n](const std::vector<double>& g, detail::GradTable& t) {
            if (!zn->requires_grad) return;
            auto& gz = detail::pass_grad(t, zn);
            for (std::size_t i = 0; i < n; ++i) {
                const double a = 0.5 * zn->data[i];
                gz[i] += g[i] * 0.5 * eps / std::pow(a * a + eps, 1.5);
            }
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// The recorded computation linearized so that every operation's inputs come
/// before it. Built from the graph a forward pass recorded; running it
/// backwards visits each node exactly once.
class Tape {
public:
    static Tape from(const Tensor& root) {
        Tape tape;
        tape.root_ = root.impl();
        std::unordered_set<const detail::TensorNode*> visited;
        struct Frame {
            detail::NodePtr node;
            std::size_t next = 0;
        };
        std::vector<Frame> stack;
        stack.push_back({tape.root_});
        visited.insert(tape.root_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.node->parents.size()) {
                detail::NodePtr p = f.node->parents[f.next++];
                if (p->requires_grad && !visited.count(p.get())) {
                    visited.insert(p.get());
                    stack.push_back({std::move(p)});
                }
            } else {
                tape.order_.push_back(f.node);
                stack.pop_back();
            }
        }
        return tape;
    }

    /// Topological order: inputs before the operations that consume them.
    const std::vector<detail::NodePtr>& order() const { return order_; }

    /// Seeds the root with d(root)/d(root) = 1, sweeps the tape in reverse
    /// and accumulates the pass gradients into each requires-grad tensor.
    void backward() {
        if (root_->data.size() != 1)
            throw ValueError("backward requires a scalar loss, got " + detail::shape_str(root_->shape));
        detail::GradTable table;
        table[root_.get()] = {1.0};
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::TensorNode* n = it->get();
            if (!n->backward_fn) continue;
            auto found = table.find(n);
            if (found == table.end()) continue;
            n->backward_fn(found->second, table);
        }
        for (const auto& sp : order_) {
            detail::TensorNode* n = sp.get();
            if (!n->requires_grad) continue;
            auto found = table.find(n);
            if (found == table.end()) continue;
            if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
            for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += found->second[i];
        }
    }

private:
    detail::NodePtr root_;
    std::vector<detail::NodePtr> order_;
};

/// Reverse-mode sweep from a scalar loss. Repeated calls accumulate into the
/// same grad buffers; tensors not reachable from the loss keep their
/// gradients absent.
inline void backward(const Tensor& loss) { Tape::from(loss).backward(); }

}  // namespace treat
