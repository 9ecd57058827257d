#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
// Every graph describes a single sample; batches are handled by the callers,
// which sum per-sample losses before calling backward().

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace m3face::ag {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// A named trainable tensor. `grad` is mutable so that const forward passes
/// can still accumulate gradients into the parameters they read.
struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
    mutable std::vector<double> grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Shape s) : name(std::move(n)), shape(std::move(s)), value(numel(shape), 0.0) {}

    std::size_t size() const { return value.size(); }
    void zero_grad() const { grad.assign(value.size(), 0.0); }
};

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// Disables graph construction for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const Param* param = nullptr;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var constant(Shape shape, std::vector<double> value) {
        if (numel(shape) != value.size())
            throw std::invalid_argument("Var::constant: shape " + shape_str(shape) + " does not match data size");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(value);
        return Var(std::move(n));
    }

    static Var zeros(Shape shape) {
        const auto count = numel(shape);
        return constant(std::move(shape), std::vector<double>(count, 0.0));
    }

    /// Leaf that reads a parameter; gradients flow back into `p.grad` when
    /// the parameter is trainable and grad mode is on.
    static Var param(const Param& p) {
        auto n = std::make_shared<Node>();
        n->shape = p.shape;
        n->value = p.value;
        n->param = &p;
        n->requires_grad = p.trainable && grad_enabled();
        return Var(std::move(n));
    }

    /// Leaf that is itself a differentiation target (e.g. an input probe).
    static Var leaf(Shape shape, std::vector<double> value) {
        Var v = constant(std::move(shape), std::move(value));
        v.node_->requires_grad = grad_enabled();
        return v;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    const std::vector<double>& value() const { return node_->value; }
    std::vector<double>& mutable_value() { return node_->value; }
    const std::vector<double>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    double item() const {
        if (size() != 1) throw std::logic_error("Var::item on non-scalar " + shape_str(shape()));
        return node_->value[0];
    }
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Builds a result node. `fn` receives the finished node and must push the
/// gradient of `node.grad` into its parents' `grad` (already allocated).
inline Var make_result(Shape shape, std::vector<double> value, std::vector<Var> inputs,
                       std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any && grad_enabled()) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::move(fn);
    }
    return Var(std::move(n));
}

/// Runs reverse accumulation from a scalar and adds leaf gradients into the
/// parameters they came from.
inline void backward(const Var& root, double seed = 1.0) {
    if (root.size() != 1) throw std::logic_error("backward: root must be a scalar");
    if (!root.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->ensure_grad();
    root.node()->grad[0] += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
        if (n->param) {
            auto& g = n->param->grad;
            if (g.size() != n->grad.size()) g.assign(n->grad.size(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n->grad[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Eigen views

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline MapMat as_mat(std::vector<double>& v, int rows, int cols) { return MapMat(v.data(), rows, cols); }
inline CMapMat as_mat(const std::vector<double>& v, int rows, int cols) { return CMapMat(v.data(), rows, cols); }

inline void require(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
        for (auto& p : n.parents)
            if (p->requires_grad)
                for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    });
}

inline Var sub(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            if (pa->requires_grad) pa->grad[i] += n.grad[i];
            if (pb->requires_grad) pb->grad[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            if (pa->requires_grad) pa->grad[i] += n.grad[i] * pb->value[i];
            if (pb->requires_grad) pb->grad[i] += n.grad[i] * pa->value[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    std::vector<double> out(a.value());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [s](Node& n) {
        auto& p = n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += s * n.grad[i];
    });
}

/// Adds a constant tensor (no gradient to `c`).
inline Var add_const(const Var& a, const std::vector<double>& c) {
    require(a.size() == c.size(), "add_const: size mismatch");
    std::vector<double> out(a.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
    return make_result(a.shape(), std::move(out), {a}, [](Node& n) {
        auto& p = n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    });
}

inline Var detach(const Var& a) { return Var::constant(a.shape(), a.value()); }

inline Var silu(const Var& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.value()[i];
        out[i] = x / (1.0 + std::exp(-x));
    }
    return make_result(a.shape(), std::move(out), {a}, [](Node& n) {
        auto& p = n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double x = p->value[i];
            const double s = 1.0 / (1.0 + std::exp(-x));
            p->grad[i] += n.grad[i] * (s + x * s * (1.0 - s));
        }
    });
}

inline Var relu(const Var& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.value()[i]);
    return make_result(a.shape(), std::move(out), {a}, [](Node& n) {
        auto& p = n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (p->value[i] > 0.0) p->grad[i] += n.grad[i];
    });
}

inline Var tanh(const Var& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.value()[i]);
    return make_result(a.shape(), std::move(out), {a}, [](Node& n) {
        auto& p = n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    return make_result({1}, {s}, {a}, [](Node& n) {
        auto& p = n.parents[0];
        for (auto& g : p->grad) g += n.grad[0];
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Mean squared error against a constant target.
inline Var mse(const Var& a, const std::vector<double>& target) {
    require(a.size() == target.size(), "mse: size mismatch");
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = a.value()[i] - target[i];
        s += d * d;
    }
    return make_result({1}, {s * inv}, {a}, [target, inv](Node& n) {
        auto& p = n.parents[0];
        for (std::size_t i = 0; i < target.size(); ++i) p->grad[i] += n.grad[0] * 2.0 * inv * (p->value[i] - target[i]);
    });
}

/// Sum of squared differences between two variables.
inline Var sq_dist(const Var& a, const Var& b) {
    Var d = sub(a, b);
    return sum(mul(d, d));
}

/// Mean cross-entropy of rows of `logits` [n,K] against `targets`, only over
/// rows where `active` is true. With no active rows the loss is defined as 0.
inline Var cross_entropy(const Var& logits, const std::vector<int>& targets, const std::vector<bool>& active) {
    const int rows = logits.dim(0), k = logits.dim(1);
    require(static_cast<int>(targets.size()) == rows && static_cast<int>(active.size()) == rows,
            "cross_entropy: target count mismatch");
    int count = 0;
    for (bool b : active) count += b ? 1 : 0;
    std::vector<double> probs(logits.size(), 0.0);
    double total = 0.0;
    for (int r = 0; r < rows; ++r) {
        if (!active[r]) continue;
        require(targets[r] >= 0 && targets[r] < k, "cross_entropy: target out of range");
        const double* row = logits.value().data() + static_cast<std::size_t>(r) * k;
        const double mx = *std::max_element(row, row + k);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double lz = std::log(z) + mx;
        total += lz - row[targets[r]];
        for (int j = 0; j < k; ++j) probs[static_cast<std::size_t>(r) * k + j] = std::exp(row[j] - lz);
    }
    const double inv = count > 0 ? 1.0 / count : 0.0;
    return make_result({1}, {total * inv}, {logits}, [probs = std::move(probs), targets, active, inv, rows, k](Node& n) {
        auto& p = n.parents[0];
        const double g = n.grad[0] * inv;
        for (int r = 0; r < rows; ++r) {
            if (!active[r]) continue;
            for (int j = 0; j < k; ++j) {
                const std::size_t idx = static_cast<std::size_t>(r) * k + j;
                p->grad[idx] += g * (probs[idx] - (j == targets[r] ? 1.0 : 0.0));
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& a, Shape shape) {
    require(numel(shape) == a.size(), "reshape: element count mismatch");
    return make_result(std::move(shape), a.value(), {a}, [](Node& n) {
        auto& p = n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    });
}

inline Var transpose(const Var& a) {
    require(a.shape().size() == 2, "transpose: expects a matrix");
    const int r = a.dim(0), c = a.dim(1);
    std::vector<double> out(a.size());
    as_mat(out, c, r) = as_mat(a.value(), r, c).transpose();
    return make_result({c, r}, std::move(out), {a}, [r, c](Node& n) {
        auto& p = n.parents[0];
        as_mat(p->grad, r, c) += as_mat(n.grad, c, r).transpose();
    });
}

/// Columns [start, start+len) of a matrix.
inline Var slice_cols(const Var& a, int start, int len) {
    const int r = a.dim(0), c = a.dim(1);
    require(start >= 0 && len >= 0 && start + len <= c, "slice_cols: range out of bounds");
    std::vector<double> out(static_cast<std::size_t>(r) * len);
    as_mat(out, r, len) = as_mat(a.value(), r, c).middleCols(start, len);
    return make_result({r, len}, std::move(out), {a}, [r, c, start, len](Node& n) {
        auto& p = n.parents[0];
        as_mat(p->grad, r, c).middleCols(start, len) += as_mat(n.grad, r, len);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: empty");
    const int r = parts[0].dim(0);
    int c = 0;
    for (const auto& p : parts) {
        require(p.dim(0) == r, "concat_cols: row mismatch");
        c += p.dim(1);
    }
    std::vector<double> out(static_cast<std::size_t>(r) * c);
    int off = 0;
    for (const auto& p : parts) {
        as_mat(out, r, c).middleCols(off, p.dim(1)) = as_mat(p.value(), r, p.dim(1));
        off += p.dim(1);
    }
    std::vector<int> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1));
    return make_result({r, c}, std::move(out), parts, [r, c, widths](Node& n) {
        int o = 0;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            auto& p = n.parents[i];
            if (p->requires_grad) as_mat(p->grad, r, widths[i]) += as_mat(n.grad, r, c).middleCols(o, widths[i]);
            o += widths[i];
        }
    });
}

/// Concatenates [C1,H,W] and [C2,H,W] along channels.
inline Var concat_channels(const Var& a, const Var& b) {
    require(a.shape().size() == 3 && b.shape().size() == 3 && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
            "concat_channels: spatial mismatch");
    std::vector<double> out(a.value());
    out.insert(out.end(), b.value().begin(), b.value().end());
    const std::size_t na = a.size();
    return make_result({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out), {a, b}, [na](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->requires_grad)
            for (std::size_t i = 0; i < na; ++i) pa->grad[i] += n.grad[i];
        if (pb->requires_grad)
            for (std::size_t i = 0; i < pb->grad.size(); ++i) pb->grad[i] += n.grad[na + i];
    });
}

/// Rows of `table` [V,E] selected by `ids`.
inline Var gather_rows(const Var& table, const std::vector<int>& ids) {
    const int v = table.dim(0), e = table.dim(1);
    std::vector<double> out(ids.size() * static_cast<std::size_t>(e));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && ids[i] < v, "gather_rows: id out of range");
        std::copy_n(table.value().begin() + static_cast<std::ptrdiff_t>(ids[i]) * e, e,
                    out.begin() + static_cast<std::ptrdiff_t>(i) * e);
    }
    return make_result({static_cast<int>(ids.size()), e}, std::move(out), {table}, [ids, e](Node& n) {
        auto& p = n.parents[0];
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < e; ++j)
                p->grad[static_cast<std::size_t>(ids[i]) * e + j] += n.grad[i * static_cast<std::size_t>(e) + j];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
            "matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& node) {
        auto& pa = node.parents[0];
        auto& pb = node.parents[1];
        auto g = as_mat(node.grad, m, n);
        if (pa->requires_grad) as_mat(pa->grad, m, k).noalias() += g * as_mat(pb->value, k, n).transpose();
        if (pb->requires_grad) as_mat(pb->grad, k, n).noalias() += as_mat(pa->value, m, k).transpose() * g;
    });
}

/// x[n,c] + bias[c] broadcast over rows.
inline Var add_row_bias(const Var& x, const Var& bias) {
    const int r = x.dim(0), c = x.dim(1);
    require(static_cast<int>(bias.size()) == c, "add_row_bias: bias size mismatch");
    std::vector<double> out(x.value());
    as_mat(out, r, c).rowwise() += as_mat(bias.value(), 1, c).row(0);
    return make_result(x.shape(), std::move(out), {x, bias}, [r, c](Node& n) {
        auto& px = n.parents[0];
        auto& pb = n.parents[1];
        if (px->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
        if (pb->requires_grad) as_mat(pb->grad, 1, c) += as_mat(n.grad, r, c).colwise().sum();
    });
}

/// x[C,H,W] + v[C] broadcast over spatial positions.
inline Var add_channel(const Var& x, const Var& v) {
    const int c = x.dim(0);
    const int hw = static_cast<int>(x.size()) / c;
    require(static_cast<int>(v.size()) == c, "add_channel: vector size mismatch");
    std::vector<double> out(x.value());
    as_mat(out, c, hw).colwise() += as_mat(v.value(), c, 1).col(0);
    return make_result(x.shape(), std::move(out), {x, v}, [c, hw](Node& n) {
        auto& px = n.parents[0];
        auto& pv = n.parents[1];
        if (px->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
        if (pv->requires_grad) as_mat(pv->grad, c, 1) += as_mat(n.grad, c, hw).rowwise().sum();
    });
}

/// Row-wise softmax of a matrix.
inline Var softmax_rows(const Var& a) {
    const int r = a.dim(0), c = a.dim(1);
    std::vector<double> out(a.size());
    for (int i = 0; i < r; ++i) {
        const double* row = a.value().data() + static_cast<std::size_t>(i) * c;
        double* o = out.data() + static_cast<std::size_t>(i) * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += (o[j] = std::exp(row[j] - mx));
        for (int j = 0; j < c; ++j) o[j] /= z;
    }
    return make_result(a.shape(), std::move(out), {a}, [r, c](Node& n) {
        auto& p = n.parents[0];
        for (int i = 0; i < r; ++i) {
            const double* y = n.value.data() + static_cast<std::size_t>(i) * c;
            const double* g = n.grad.data() + static_cast<std::size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += y[j] * g[j];
            double* pg = p->grad.data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) pg[j] += y[j] * (g[j] - dot);
        }
    });
}

/// Row-wise layer normalization with learned gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    const int r = x.dim(0), c = x.dim(1);
    std::vector<double> xhat(x.size()), inv_std(r), out(x.size());
    for (int i = 0; i < r; ++i) {
        const double* row = x.value().data() + static_cast<std::size_t>(i) * c;
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= c;
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < c; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * c + j;
            xhat[idx] = (row[j] - mu) * inv_std[i];
            out[idx] = xhat[idx] * gain.value()[j] + bias.value()[j];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gain, bias},
                       [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                           auto& px = n.parents[0];
                           auto& pg = n.parents[1];
                           auto& pb = n.parents[2];
                           for (int i = 0; i < r; ++i) {
                               const std::size_t base = static_cast<std::size_t>(i) * c;
                               double s1 = 0.0, s2 = 0.0;
                               for (int j = 0; j < c; ++j) {
                                   const double gy = n.grad[base + j];
                                   if (pg->requires_grad) pg->grad[j] += gy * xhat[base + j];
                                   if (pb->requires_grad) pb->grad[j] += gy;
                                   const double gx = gy * pg->value[j];
                                   s1 += gx;
                                   s2 += gx * xhat[base + j];
                               }
                               if (!px->requires_grad) continue;
                               for (int j = 0; j < c; ++j) {
                                   const double gx = n.grad[base + j] * pg->value[j];
                                   px->grad[base + j] += inv_std[i] * (gx - s1 / c - xhat[base + j] * s2 / c);
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// Convolution on single [C,H,W] tensors

namespace detail {
inline void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, double* cols) {
    const int plane = ho * wo;
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* dst = cols + static_cast<std::size_t>((ci * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? x[(static_cast<std::size_t>(ci) * h + iy) * w + ix]
                                                : 0.0;
                    }
                }
            }
}

inline void col2im(const double* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo, double* x) {
    const int plane = ho * wo;
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* src = cols + static_cast<std::size_t>((ci * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        x[(static_cast<std::size_t>(ci) * h + iy) * w + ix] += src[oy * wo + ox];
                    }
                }
            }
}
}  // namespace detail

/// 2-D convolution: x[C,H,W], weight[O,C,k,k], bias[O].
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    require(x.shape().size() == 3, "conv2d: input must be [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int o = weight.dim(0), k = weight.dim(2);
    require(weight.dim(1) == c, "conv2d: channel mismatch " + std::to_string(c) + " vs " + std::to_string(weight.dim(1)));
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (w + 2 * pad - k) / stride + 1;
    const int ck = c * k * k, plane = ho * wo;
    auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(ck) * plane);
    detail::im2col(x.value().data(), c, h, w, k, stride, pad, ho, wo, cols->data());
    std::vector<double> out(static_cast<std::size_t>(o) * plane);
    auto om = as_mat(out, o, plane);
    om.noalias() = as_mat(weight.value(), o, ck) * as_mat(*cols, ck, plane);
    om.colwise() += as_mat(bias.value(), o, 1).col(0);
    return make_result({o, ho, wo}, std::move(out), {x, weight, bias},
                       [=](Node& n) {
                           auto& px = n.parents[0];
                           auto& pw = n.parents[1];
                           auto& pb = n.parents[2];
                           auto g = as_mat(n.grad, o, plane);
                           if (pw->requires_grad) as_mat(pw->grad, o, ck).noalias() += g * as_mat(*cols, ck, plane).transpose();
                           if (pb->requires_grad) as_mat(pb->grad, o, 1) += g.rowwise().sum();
                           if (px->requires_grad) {
                               std::vector<double> dcols(static_cast<std::size_t>(ck) * plane);
                               as_mat(dcols, ck, plane).noalias() = as_mat(pw->value, o, ck).transpose() * g;
                               detail::col2im(dcols.data(), c, h, w, k, stride, pad, ho, wo, px->grad.data());
                           }
                       });
}

/// Nearest-neighbour 2x upsampling of [C,H,W].
inline Var upsample2x(const Var& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<double> out(static_cast<std::size_t>(c) * 4 * h * w);
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx] =
                    x.value()[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2];
    return make_result({c, 2 * h, 2 * w}, std::move(out), {x}, [c, h, w](Node& n) {
        auto& p = n.parents[0];
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    p->grad[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2] +=
                        n.grad[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx];
    });
}

}  // namespace m3face::ag
