#pragma once

// Small layer building blocks on top of the autodiff core. Layers are plain
// value types; each exposes visit_params() so models can be copied, saved and
// optimized without a separate registry.

#include "m3face/core/autograd.hpp"
#include "m3face/core/rng.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace m3face::nn {

using ag::Param;
using ag::Var;

using ParamVisitor = std::function<void(Param&)>;
using ConstParamVisitor = std::function<void(const Param&)>;

inline void init_uniform(Param& p, Rng& rng, double bound) {
    for (auto& v : p.value) v = rng.uniform(-bound, bound);
}

struct Linear {
    Param weight;  // [in, out]
    Param bias;    // [out]

    Linear() = default;
    Linear(const std::string& name, int in, int out, Rng& rng, bool zero_init = false)
        : weight(name + ".weight", {in, out}), bias(name + ".bias", {out}) {
        if (!zero_init) init_uniform(weight, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    }

    int in_features() const { return weight.shape[0]; }
    int out_features() const { return weight.shape[1]; }

    /// x[n, in] -> [n, out]
    Var operator()(const Var& x) const {
        return ag::add_row_bias(ag::matmul(x, Var::param(weight)), Var::param(bias));
    }

    template <typename F>
    void visit_params(F&& f) {
        f(weight);
        f(bias);
    }
    template <typename F>
    void visit_params(F&& f) const {
        f(weight);
        f(bias);
    }
};

struct Conv2d {
    Param weight;  // [out, in, k, k]
    Param bias;    // [out]
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(const std::string& name, int in, int out, int k, int stride_, int pad_, Rng& rng, bool zero_init = false)
        : weight(name + ".weight", {out, in, k, k}), bias(name + ".bias", {out}), stride(stride_), pad(pad_) {
        if (!zero_init) init_uniform(weight, rng, 1.0 / std::sqrt(static_cast<double>(in * k * k)));
    }

    int in_channels() const { return weight.shape[1]; }
    int out_channels() const { return weight.shape[0]; }

    Var operator()(const Var& x) const {
        return ag::conv2d(x, Var::param(weight), Var::param(bias), stride, pad);
    }

    template <typename F>
    void visit_params(F&& f) {
        f(weight);
        f(bias);
    }
    template <typename F>
    void visit_params(F&& f) const {
        f(weight);
        f(bias);
    }
};

struct LayerNorm {
    Param gain;
    Param bias;

    LayerNorm() = default;
    LayerNorm(const std::string& name, int dim) : gain(name + ".gain", {dim}), bias(name + ".bias", {dim}) {
        std::fill(gain.value.begin(), gain.value.end(), 1.0);
    }

    Var operator()(const Var& x) const { return ag::layer_norm(x, Var::param(gain), Var::param(bias)); }

    template <typename F>
    void visit_params(F&& f) {
        f(gain);
        f(bias);
    }
    template <typename F>
    void visit_params(F&& f) const {
        f(gain);
        f(bias);
    }
};

/// Multi-head attention of queries x[n, dim] over context[m, ctx_dim].
struct Attention {
    Linear q, k, v, out;
    int heads = 1;

    Attention() = default;
    Attention(const std::string& name, int dim, int ctx_dim, int heads_, Rng& rng, bool zero_out = false)
        : q(name + ".q", dim, dim, rng),
          k(name + ".k", ctx_dim, dim, rng),
          v(name + ".v", ctx_dim, dim, rng),
          out(name + ".out", dim, dim, rng, zero_out),
          heads(heads_) {}

    Var operator()(const Var& x, const Var& context) const {
        const Var qq = q(x), kk = k(context), vv = v(context);
        const int dim = qq.dim(1);
        const int dh = dim / heads;
        const double s = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Var> parts;
        parts.reserve(heads);
        for (int h = 0; h < heads; ++h) {
            Var qh = ag::slice_cols(qq, h * dh, dh);
            Var kh = ag::slice_cols(kk, h * dh, dh);
            Var vh = ag::slice_cols(vv, h * dh, dh);
            Var att = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), s));
            parts.push_back(ag::matmul(att, vh));
        }
        return out(heads == 1 ? parts[0] : ag::concat_cols(parts));
    }

    template <typename F>
    void visit_params(F&& f) {
        q.visit_params(f);
        k.visit_params(f);
        v.visit_params(f);
        out.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        q.visit_params(f);
        k.visit_params(f);
        v.visit_params(f);
        out.visit_params(f);
    }
};

/// Sinusoidal embedding of a scalar position/timestep.
inline std::vector<double> sinusoidal_embedding(double t, int dim) {
    std::vector<double> out(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
        out[i] = std::sin(t * freq);
        out[i + half] = std::cos(t * freq);
    }
    return out;
}

/// Collects name -> param pointers for any model exposing visit_params.
template <typename Model>
std::map<std::string, Param*> param_map(Model& m) {
    std::map<std::string, Param*> out;
    m.visit_params([&](Param& p) { out[p.name] = &p; });
    return out;
}

template <typename Model>
std::size_t param_count(const Model& m) {
    std::size_t n = 0;
    m.visit_params([&](const Param& p) { n += p.size(); });
    return n;
}

template <typename Model>
void zero_grad(const Model& m) {
    m.visit_params([](const Param& p) { p.zero_grad(); });
}

template <typename Model>
void set_trainable(Model& m, bool trainable) {
    m.visit_params([&](Param& p) { p.trainable = trainable; });
}

}  // namespace m3face::nn
