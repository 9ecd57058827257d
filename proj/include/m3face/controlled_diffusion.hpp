#pragma once

// Latent diffusion with a zero-initialized control branch. The backbone is a
// two-level UNet with cross-attention over text tokens; the control branch is
// a trainable copy of its encoder half plus a condition adapter, and feeds
// the backbone's skips and middle block through zero-initialized 1x1 convs.

#include "m3face/core/autograd.hpp"
#include "m3face/core/checkpoint.hpp"
#include "m3face/core/error.hpp"
#include "m3face/core/nn.hpp"
#include "m3face/core/optim.hpp"
#include "m3face/core/rng.hpp"
#include "m3face/text_encoding.hpp"
#include "m3face/vq_tokenizer.hpp"

#include <json.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace m3face::diffusion {

using ag::Var;
using text::TextEmbedding;

struct NoiseSchedule {
    int steps = 0;                  // T
    std::vector<double> betas;      // index 1..T (betas[0] unused, 0)
    std::vector<double> alphas;     // 1 - beta
    std::vector<double> alpha_bar;  // alpha_bar[0] == 1

    static NoiseSchedule linear(int t_max, double beta_start = 1e-4, double beta_end = 2e-2) {
        if (t_max < 1) throw ValidationError("noise schedule needs at least one step");
        std::vector<double> b(static_cast<std::size_t>(t_max));
        for (int i = 0; i < t_max; ++i)
            b[static_cast<std::size_t>(i)] = t_max == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (t_max - 1);
        return from_betas(b);
    }

    static NoiseSchedule from_betas(const std::vector<double>& b) {
        if (b.empty()) throw ValidationError("noise schedule needs at least one step");
        NoiseSchedule s;
        s.steps = static_cast<int>(b.size());
        s.betas.assign(1, 0.0);
        s.alphas.assign(1, 1.0);
        s.alpha_bar.assign(1, 1.0);
        for (double beta : b) {
            if (!(beta > 0.0 && beta < 1.0)) throw ValidationError("beta values must lie in (0,1)");
            s.betas.push_back(beta);
            s.alphas.push_back(1.0 - beta);
            s.alpha_bar.push_back(s.alpha_bar.back() * (1.0 - beta));
        }
        return s;
    }
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. t == 0 returns x0.
inline std::vector<double> forward_diffuse(const NoiseSchedule& s, const std::vector<double>& x0, int t,
                                           const std::vector<double>& eps) {
    if (t < 0 || t > s.steps)
        throw ValidationError("timestep " + std::to_string(t) + " outside [0," + std::to_string(s.steps) + "]");
    if (x0.size() != eps.size()) throw ValidationError("forward_diffuse: x0 and eps sizes differ");
    if (t == 0) return x0;
    const double a = std::sqrt(s.alpha_bar[static_cast<std::size_t>(t)]);
    const double b = std::sqrt(1.0 - s.alpha_bar[static_cast<std::size_t>(t)]);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

struct DiffusionConfig {
    int latent_channels = 32;
    int latent_size = 8;
    int condition_size = 32;
    int base_channels = 32;  // level 0
    int mid_channels = 48;   // level 1
    int time_dim = 32;
    int context_dim = 32;
    int heads = 2;
    int hint_channels = 16;
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    double latent_scale = 1.0;
    std::string condition_kind = "mask";

    void validate() const {
        if (latent_channels < 1 || latent_size < 2 || latent_size % 2 != 0)
            throw ValidationError("latent_size must be even and at least 2");
        if (base_channels < 1 || mid_channels < 1 || time_dim < 2 || context_dim < 1 || heads < 1 || hint_channels < 1)
            throw ValidationError("diffusion dimensions must be positive");
        if (base_channels % heads != 0) throw ValidationError("base_channels must be divisible by heads");
        if (mid_channels % heads != 0) throw ValidationError("mid_channels must be divisible by heads");
        if (condition_size < latent_size || condition_size % latent_size != 0)
            throw ValidationError("condition_size must be a multiple of latent_size");
        const int ratio = condition_size / latent_size;
        if ((ratio & (ratio - 1)) != 0) throw ValidationError("condition_size / latent_size must be a power of two");
        if (timesteps < 1) throw ValidationError("timesteps must be positive");
        if (!(latent_scale > 0.0)) throw ValidationError("latent_scale must be positive");
        if (condition_kind != "mask" && condition_kind != "landmarks")
            throw ValidationError("condition_kind must be 'mask' or 'landmarks'");
    }

    NoiseSchedule schedule() const { return NoiseSchedule::linear(timesteps, beta_start, beta_end); }

    nlohmann::json to_json() const {
        return {{"latent_channels", latent_channels}, {"latent_size", latent_size}, {"condition_size", condition_size},
                {"base_channels", base_channels},     {"mid_channels", mid_channels}, {"time_dim", time_dim},
                {"context_dim", context_dim},         {"heads", heads},               {"hint_channels", hint_channels},
                {"timesteps", timesteps},             {"beta_start", beta_start},     {"beta_end", beta_end},
                {"latent_scale", latent_scale},       {"condition_kind", condition_kind}};
    }

    static DiffusionConfig from_json(const nlohmann::json& j) {
        DiffusionConfig c;
        c.latent_channels = j.value("latent_channels", c.latent_channels);
        c.latent_size = j.value("latent_size", c.latent_size);
        c.condition_size = j.value("condition_size", c.condition_size);
        c.base_channels = j.value("base_channels", c.base_channels);
        c.mid_channels = j.value("mid_channels", c.mid_channels);
        c.time_dim = j.value("time_dim", c.time_dim);
        c.context_dim = j.value("context_dim", c.context_dim);
        c.heads = j.value("heads", c.heads);
        c.hint_channels = j.value("hint_channels", c.hint_channels);
        c.timesteps = j.value("timesteps", c.timesteps);
        c.beta_start = j.value("beta_start", c.beta_start);
        c.beta_end = j.value("beta_end", c.beta_end);
        c.latent_scale = j.value("latent_scale", c.latent_scale);
        c.condition_kind = j.value("condition_kind", c.condition_kind);
        c.validate();
        return c;
    }
};

struct GuidanceConfig {
    double cfg_scale = 7.5;
    std::string simple_prompt = "a high-quality portrait of a face";
    double simple_prompt_fraction = 0.25;

    void validate() const {
        if (!(cfg_scale >= 0.0)) throw ValidationError("cfg_scale must be >= 0");
        if (!(simple_prompt_fraction >= 0.0 && simple_prompt_fraction <= 1.0))
            throw ValidationError("simple_prompt_fraction must lie in [0,1]");
        if (simple_prompt.empty()) throw ValidationError("simple_prompt must not be empty");
    }
};

struct TrainRecipe {
    int epochs = 10;
    int batch_size = 4;
    int grad_accumulation = 16;
    double learning_rate = 5e-5;

    void validate() const {
        if (epochs < 1 || batch_size < 1 || grad_accumulation < 1 || !(learning_rate > 0.0))
            throw ValidationError("train recipe values must be positive");
    }
};

namespace detail {

inline Var time_input(int t, int dim) { return Var::constant({1, dim}, nn::sinusoidal_embedding(t, dim)); }

// Self-contained residual block: conv(silu) + per-channel time shift + conv.
struct ResBlock {
    nn::Conv2d conv1, conv2, skip;
    nn::Linear time_proj;
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(const std::string& name, int in, int out, int time_dim, Rng& rng)
        : conv1(name + ".conv1", in, out, 3, 1, 1, rng),
          conv2(name + ".conv2", out, out, 3, 1, 1, rng),
          time_proj(name + ".time_proj", time_dim, out, rng),
          has_skip(in != out) {
        if (has_skip) skip = nn::Conv2d(name + ".skip", in, out, 1, 1, 0, rng);
    }

    Var operator()(const Var& x, const Var& temb) const {
        Var h = conv1(ag::silu(x));
        h = ag::add_channel(h, ag::reshape(time_proj(ag::silu(temb)), {h.dim(0)}));
        h = conv2(ag::silu(h));
        return ag::add(has_skip ? skip(x) : x, h);
    }

    template <typename F>
    void visit_params(F&& f) {
        conv1.visit_params(f);
        conv2.visit_params(f);
        time_proj.visit_params(f);
        if (has_skip) skip.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        conv1.visit_params(f);
        conv2.visit_params(f);
        time_proj.visit_params(f);
        if (has_skip) skip.visit_params(f);
    }
};

// Pre-norm cross-attention over text tokens on a [C,H,W] feature map.
struct SpatialCrossAttention {
    nn::LayerNorm norm;
    nn::Attention attn;

    SpatialCrossAttention() = default;
    SpatialCrossAttention(const std::string& name, int channels, int ctx_dim, int heads, Rng& rng)
        : norm(name + ".norm", channels), attn(name + ".attn", channels, ctx_dim, heads, rng) {}

    Var operator()(const Var& x, const Var& ctx) const {
        const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
        Var tokens = ag::transpose(ag::reshape(x, {c, h * w}));
        Var y = attn(norm(tokens), ctx);
        return ag::add(x, ag::reshape(ag::transpose(y), {c, h, w}));
    }

    template <typename F>
    void visit_params(F&& f) {
        norm.visit_params(f);
        attn.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        norm.visit_params(f);
        attn.visit_params(f);
    }
};

}  // namespace detail

struct EncoderFeatures {
    Var temb, skip0, skip1, mid;
};

/// Encoder half of the UNet: time MLP, input conv, two down levels, middle.
struct UNetEncoder {
    nn::Linear time1, time2;
    nn::Conv2d conv_in;
    detail::ResBlock down0;
    nn::Conv2d downsample;
    detail::ResBlock down1, mid;
    detail::SpatialCrossAttention mid_attn;

    UNetEncoder() = default;
    UNetEncoder(const std::string& name, const DiffusionConfig& c, Rng& rng)
        : time1(name + ".time1", c.time_dim, c.time_dim, rng),
          time2(name + ".time2", c.time_dim, c.time_dim, rng),
          conv_in(name + ".conv_in", c.latent_channels, c.base_channels, 3, 1, 1, rng),
          down0(name + ".down.0", c.base_channels, c.base_channels, c.time_dim, rng),
          downsample(name + ".downsample", c.base_channels, c.mid_channels, 3, 2, 1, rng),
          down1(name + ".down.1", c.mid_channels, c.mid_channels, c.time_dim, rng),
          mid(name + ".mid", c.mid_channels, c.mid_channels, c.time_dim, rng),
          mid_attn(name + ".mid_attn", c.mid_channels, c.context_dim, c.heads, rng) {}

    EncoderFeatures operator()(const Var& x, int t, const Var& ctx, const Var* hint = nullptr) const {
        const int tdim = time1.in_features();
        Var temb = time2(ag::silu(time1(detail::time_input(t, tdim))));
        Var h = conv_in(x);
        if (hint) h = ag::add(h, *hint);
        Var s0 = down0(h, temb);
        Var s1 = down1(downsample(s0), temb);
        Var m = mid_attn(mid(s1, temb), ctx);
        return {temb, s0, s1, m};
    }

    template <typename F>
    void visit_params(F&& f) {
        time1.visit_params(f);
        time2.visit_params(f);
        conv_in.visit_params(f);
        down0.visit_params(f);
        downsample.visit_params(f);
        down1.visit_params(f);
        mid.visit_params(f);
        mid_attn.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        time1.visit_params(f);
        time2.visit_params(f);
        conv_in.visit_params(f);
        down0.visit_params(f);
        downsample.visit_params(f);
        down1.visit_params(f);
        mid.visit_params(f);
        mid_attn.visit_params(f);
    }
};

/// Additive residuals for (skip0, skip1, mid).
using Residuals = std::vector<Var>;

/// Noise-prediction UNet. Up blocks run low resolution first: "up.0" at the
/// coarse level (including its upsampler), "up.1" at full latent resolution.
struct UNet {
    UNetEncoder enc;
    detail::ResBlock up0;
    nn::Conv2d up0_upsample;
    detail::ResBlock up1;
    detail::SpatialCrossAttention up1_attn;
    nn::Conv2d conv_out;

    UNet() = default;
    UNet(const DiffusionConfig& c, Rng& rng)
        : enc("unet.enc", c, rng),
          up0("unet.up.0.res", 2 * c.mid_channels, c.mid_channels, c.time_dim, rng),
          up0_upsample("unet.up.0.upsample", c.mid_channels, c.base_channels, 3, 1, 1, rng),
          up1("unet.up.1.res", 2 * c.base_channels, c.base_channels, c.time_dim, rng),
          up1_attn("unet.up.1.attn", c.base_channels, c.context_dim, c.heads, rng),
          conv_out("unet.out", c.base_channels, c.latent_channels, 3, 1, 1, rng) {}

    bool empty() const { return conv_out.weight.value.empty(); }

    Var operator()(const Var& x, int t, const Var& ctx, const Residuals* res = nullptr) const {
        EncoderFeatures f = enc(x, t, ctx);
        if (res) {
            if (res->size() != 3) throw ValidationError("expected three control residuals");
            f.skip0 = ag::add(f.skip0, (*res)[0]);
            f.skip1 = ag::add(f.skip1, (*res)[1]);
            f.mid = ag::add(f.mid, (*res)[2]);
        }
        Var h = up0(ag::concat_channels(f.mid, f.skip1), f.temb);
        h = up0_upsample(ag::upsample2x(h));
        h = up1_attn(up1(ag::concat_channels(h, f.skip0), f.temb), ctx);
        return conv_out(ag::silu(h));
    }

    template <typename F>
    void visit_params(F&& f) {
        enc.visit_params(f);
        up0.visit_params(f);
        up0_upsample.visit_params(f);
        up1.visit_params(f);
        up1_attn.visit_params(f);
        conv_out.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        enc.visit_params(f);
        up0.visit_params(f);
        up0_upsample.visit_params(f);
        up1.visit_params(f);
        up1_attn.visit_params(f);
        conv_out.visit_params(f);
    }
};

template <typename Model>
void rename_params(Model& m, const std::string& from, const std::string& to) {
    m.visit_params([&](ag::Param& p) {
        if (p.name.rfind(from, 0) == 0) p.name = to + p.name.substr(from.size());
    });
}

/// Trainable encoder copy plus condition adapter and zero projections.
struct ControlBranch {
    UNetEncoder enc;
    std::vector<nn::Conv2d> hint;  // 3x3 stem then stride-2 convs down to latent size
    nn::Conv2d hint_out;           // zero-initialized
    nn::Conv2d zero0, zero1, zero_mid;

    ControlBranch() = default;
    ControlBranch(const DiffusionConfig& c, const UNet& backbone, std::uint64_t seed) : enc(backbone.enc) {
        rename_params(enc, "unet.enc", "control.enc");
        Rng rng(derive_seed(seed, "control.init"));
        hint.emplace_back("control.hint.0", 3, c.hint_channels, 3, 1, 1, rng);
        int size = c.condition_size, idx = 1;
        while (size > c.latent_size) {
            hint.emplace_back("control.hint." + std::to_string(idx++), c.hint_channels, c.hint_channels, 3, 2, 1, rng);
            size /= 2;
        }
        hint_out = nn::Conv2d("control.hint_out", c.hint_channels, c.base_channels, 3, 1, 1, rng, true);
        zero0 = nn::Conv2d("control.zero.0", c.base_channels, c.base_channels, 1, 1, 0, rng, true);
        zero1 = nn::Conv2d("control.zero.1", c.mid_channels, c.mid_channels, 1, 1, 0, rng, true);
        zero_mid = nn::Conv2d("control.zero.mid", c.mid_channels, c.mid_channels, 1, 1, 0, rng, true);
    }

    Residuals operator()(const Var& condition, const Var& x, int t, const Var& ctx) const {
        Var h = condition;
        for (const auto& conv : hint) h = ag::silu(conv(h));
        Var hint_feat = hint_out(h);
        const EncoderFeatures f = enc(x, t, ctx, &hint_feat);
        return {zero0(f.skip0), zero1(f.skip1), zero_mid(f.mid)};
    }

    template <typename F>
    void visit_params(F&& f) {
        enc.visit_params(f);
        for (auto& c : hint) c.visit_params(f);
        hint_out.visit_params(f);
        zero0.visit_params(f);
        zero1.visit_params(f);
        zero_mid.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        enc.visit_params(f);
        for (const auto& c : hint) c.visit_params(f);
        hint_out.visit_params(f);
        zero0.visit_params(f);
        zero1.visit_params(f);
        zero_mid.visit_params(f);
    }
};

/// Backbone, optional control branch and optional first-stage autoencoder.
/// Without a first stage, diffusion runs directly on pixels (latent_channels
/// must then be 3 and latent_size the image size).
struct DiffusionModel {
    DiffusionConfig cfg;
    NoiseSchedule schedule;
    UNet backbone;
    std::optional<ControlBranch> control;
    std::optional<vq::VqModel> first_stage;

    DiffusionModel() = default;
    DiffusionModel(DiffusionConfig c, std::uint64_t seed, std::optional<vq::VqModel> vq = std::nullopt)
        : cfg(std::move(c)), first_stage(std::move(vq)) {
        cfg.validate();
        schedule = cfg.schedule();
        if (first_stage) {
            const auto& v = first_stage->config();
            if (v.embed_dim != cfg.latent_channels || v.grid_size() != cfg.latent_size)
                throw ValidationError("first-stage latents do not match the diffusion latent shape");
        } else if (cfg.latent_channels != 3) {
            throw ValidationError("pixel-space diffusion needs latent_channels == 3");
        }
        Rng rng(derive_seed(seed, "unet.init"));
        backbone = UNet(cfg, rng);
    }

    bool loaded() const { return !backbone.empty(); }
    int image_size() const { return first_stage ? first_stage->config().image_size : cfg.latent_size; }
    std::size_t latent_numel() const {
        return static_cast<std::size_t>(cfg.latent_channels) * cfg.latent_size * cfg.latent_size;
    }

    void attach_control(std::uint64_t seed) { control = ControlBranch(cfg, backbone, seed); }

    void check_condition(const std::vector<double>& condition) const {
        const std::size_t expect = 3ULL * cfg.condition_size * cfg.condition_size;
        if (condition.size() != expect)
            throw ValidationError("condition image has " + std::to_string(condition.size()) + " values, expected 3x" +
                                  std::to_string(cfg.condition_size) + "x" + std::to_string(cfg.condition_size));
    }

    std::vector<double> to_latent(const std::vector<double>& image) const {
        if (!first_stage) {
            if (image.size() != latent_numel()) throw ValidationError("image size does not match the latent shape");
            return image;
        }
        auto z = first_stage->encode(image).data;
        for (auto& v : z) v *= cfg.latent_scale;
        return z;
    }

    std::vector<double> from_latent(const std::vector<double>& latent) const {
        if (!first_stage) return latent;
        std::vector<double> z(latent);
        for (auto& v : z) v /= cfg.latent_scale;
        return first_stage->decode_latents({cfg.latent_channels, cfg.latent_size, cfg.latent_size, z});
    }

    Var latent_var(const std::vector<double>& z) const {
        return Var::constant({cfg.latent_channels, cfg.latent_size, cfg.latent_size}, z);
    }

    Var context(const TextEmbedding& e) const {
        if (e.dim != cfg.context_dim)
            throw ValidationError("text embedding dim " + std::to_string(e.dim) + " does not match context_dim " +
                                  std::to_string(cfg.context_dim));
        return Var::constant({e.length, e.dim}, e.tokens);
    }

    /// Residuals from the control branch, or an empty list when none is
    /// attached.
    Residuals residuals(const std::vector<double>& condition, const Var& x, int t, const Var& ctx) const {
        if (!control) return {};
        check_condition(condition);
        return (*control)(Var::constant({3, cfg.condition_size, cfg.condition_size}, condition), x, t, ctx);
    }

    Var predict_noise(const Var& x, int t, const Var& ctx, const std::vector<double>* condition) const {
        if (control && condition) {
            const Residuals r = residuals(*condition, x, t, ctx);
            return backbone(x, t, ctx, &r);
        }
        return backbone(x, t, ctx);
    }
};

/// Residuals as plain tensors, for inspection.
inline std::vector<std::vector<double>> control_residuals(const DiffusionModel& m, const std::vector<double>& condition,
                                                          const std::vector<double>& x_t, int t, const TextEmbedding& text) {
    if (!m.control) throw ValidationError("no control branch attached");
    m.check_condition(condition);
    ag::NoGradGuard ng;
    std::vector<std::vector<double>> out;
    for (const auto& r : m.residuals(condition, m.latent_var(x_t), t, m.context(text))) out.push_back(r.value());
    return out;
}

/// eps_u + s (eps_c - eps_u), with condition residuals applied to both passes.
inline std::vector<double> guided_noise(const DiffusionModel& m, const std::vector<double>& x_t, int t,
                                        const TextEmbedding& cond, const TextEmbedding& uncond,
                                        const std::vector<double>* condition, double cfg_scale) {
    ag::NoGradGuard ng;
    const Var x = m.latent_var(x_t);
    const auto eu = m.predict_noise(x, t, m.context(uncond), condition).value();
    const auto ec = m.predict_noise(x, t, m.context(cond), condition).value();
    std::vector<double> out(eu.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eu[i] + cfg_scale * (ec[i] - eu[i]);
    return out;
}

enum class Sampler { DDPM, DDIM };

struct SampleOptions {
    int steps = 50;
    double cfg_scale = 7.5;
    std::uint64_t seed = 0;
    Sampler sampler = Sampler::DDIM;
    double eta = 0.0;  // DDIM only; DDPM uses eta = 1
    double clip_x0 = 0.0;  // > 0 clamps the predicted clean latent to [-c, c]
};

/// Evenly spaced timesteps 1..T, ascending, the last one equal to T.
inline std::vector<int> sampling_timesteps(int t_max, int steps) {
    if (steps < 1 || steps > t_max)
        throw ValidationError("sampling steps must lie in [1," + std::to_string(t_max) + "]");
    std::vector<int> ts;
    for (int i = 1; i <= steps; ++i) ts.push_back(static_cast<int>((static_cast<long>(i) * t_max) / steps));
    return ts;
}

/// Generalized DDIM reverse process in latent space; returns the final
/// latent.
inline std::vector<double> sample_latent(const DiffusionModel& m, const TextEmbedding& text, const TextEmbedding& uncond,
                                         const std::vector<double>* condition, const SampleOptions& opts) {
    if (!m.loaded()) throw ValidationError("no diffusion checkpoint loaded");
    if (!(opts.cfg_scale >= 0.0)) throw ValidationError("cfg_scale must be >= 0");
    if (condition) m.check_condition(*condition);
    const auto ts = sampling_timesteps(m.schedule.steps, opts.steps);
    const double eta = opts.sampler == Sampler::DDPM ? 1.0 : opts.eta;
    Rng init(derive_seed(opts.seed, "sample.init"));
    std::vector<double> x = init.normal_vector(m.latent_numel());
    for (int i = static_cast<int>(ts.size()) - 1; i >= 0; --i) {
        const int t = ts[static_cast<std::size_t>(i)];
        const int t_prev = i > 0 ? ts[static_cast<std::size_t>(i - 1)] : 0;
        const double ab = m.schedule.alpha_bar[static_cast<std::size_t>(t)];
        const double ab_prev = m.schedule.alpha_bar[static_cast<std::size_t>(t_prev)];
        const auto eps = guided_noise(m, x, t, text, uncond, condition, opts.cfg_scale);
        const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
        const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
        Rng noise(derive_seed(opts.seed, "sample.step", static_cast<std::uint64_t>(t)));
        for (std::size_t j = 0; j < x.size(); ++j) {
            double x0 = (x[j] - std::sqrt(1.0 - ab) * eps[j]) / std::sqrt(ab);
            double e = eps[j];
            if (opts.clip_x0 > 0.0 && std::fabs(x0) > opts.clip_x0) {
                x0 = std::clamp(x0, -opts.clip_x0, opts.clip_x0);
                e = (x[j] - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
            }
            x[j] = std::sqrt(ab_prev) * x0 + dir * e + (sigma > 0.0 ? sigma * noise.normal() : 0.0);
        }
    }
    for (double v : x)
        if (!std::isfinite(v)) throw NumericError("sampling produced non-finite latents");
    return x;
}

/// Planar [3,S,S] image.
inline std::vector<double> sample(const DiffusionModel& m, const TextEmbedding& text, const TextEmbedding& uncond,
                                  const std::vector<double>* condition, const SampleOptions& opts) {
    return m.from_latent(sample_latent(m, text, uncond, condition, opts));
}

struct CdSample {
    std::vector<double> image;      // planar [3,S,S] in [0,1]
    std::vector<double> condition;  // planar [3,Sc,Sc] in [0,1]
    std::string caption;
};

struct CdTrainState {
    DiffusionModel model;
    nn::Adam optimizer;
    long step = 0;   // optimizer updates
    long micro = 0;  // micro-batches seen
};

inline CdTrainState make_train_state(DiffusionModel model, const TrainRecipe& recipe, std::uint64_t seed) {
    recipe.validate();
    if (!model.control) model.attach_control(seed);
    nn::set_trainable(model.backbone, false);
    if (model.first_stage) nn::set_trainable(*model.first_stage, false);
    return {std::move(model), nn::Adam(nn::AdamConfig{recipe.learning_rate}), 0, 0};
}

struct CdStepResult {
    double loss = 0.0;
    bool updated = false;
    int simple_prompts = 0;
};

/// One micro-batch of control-branch training. The backbone stays frozen;
/// the optimizer steps every `grad_accumulation` micro-batches on the
/// averaged gradient.
inline CdStepResult cd_train_step(const std::vector<CdSample>& batch, const TrainRecipe& recipe,
                                  const GuidanceConfig& guidance, CdTrainState& state, const text::TextEncoder& encoder,
                                  std::uint64_t seed) {
    recipe.validate();
    guidance.validate();
    if (batch.empty()) throw ValidationError("cd_train_step: empty batch");
    auto& m = state.model;
    if (!m.control) throw ValidationError("cd_train_step: no control branch attached");
    if (state.micro % recipe.grad_accumulation == 0) nn::zero_grad(*m.control);
    CdStepResult res;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = batch[i];
        m.check_condition(s.condition);
        Rng rng(derive_seed(seed, "cd_train", static_cast<std::uint64_t>(state.micro) * 1000003ULL + i));
        const bool simple = rng.uniform() < guidance.simple_prompt_fraction;
        res.simple_prompts += simple;
        const auto emb = encoder.encode(simple ? guidance.simple_prompt : s.caption);
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m.schedule.steps)));
        const auto eps = rng.normal_vector(m.latent_numel());
        const auto x_t = forward_diffuse(m.schedule, m.to_latent(s.image), t, eps);
        Var loss = ag::mse(m.predict_noise(m.latent_var(x_t), t, m.context(emb), &s.condition), eps);
        if (!std::isfinite(loss.item()))
            throw NumericError("control branch loss is not finite at micro-batch " + std::to_string(state.micro));
        res.loss += loss.item() / static_cast<double>(batch.size());
        ag::backward(loss, 1.0 / static_cast<double>(batch.size()));
    }
    ++state.micro;
    if (state.micro % recipe.grad_accumulation == 0) {
        state.optimizer.step(*m.control, static_cast<double>(recipe.grad_accumulation));
        ++state.step;
        res.updated = true;
    }
    return res;
}

/// Fixed (sample, t, eps) triples for measuring the denoising loss.
struct LossProbe {
    std::size_t sample = 0;
    int t = 1;
    std::vector<double> eps;
};

inline std::vector<LossProbe> make_probes(const DiffusionModel& m, std::size_t samples, int per_sample, std::uint64_t seed) {
    std::vector<LossProbe> out;
    for (std::size_t i = 0; i < samples; ++i)
        for (int k = 0; k < per_sample; ++k) {
            Rng rng(derive_seed(seed, "probe", i * 1000ULL + static_cast<std::uint64_t>(k)));
            const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m.schedule.steps)));
            out.push_back({i, t, rng.normal_vector(m.latent_numel())});
        }
    return out;
}

/// Mean noise-prediction MSE over the probes, always with the sample's own
/// caption.
inline double probe_loss(const DiffusionModel& m, const std::vector<CdSample>& data, const std::vector<LossProbe>& probes,
                         const text::TextEncoder& encoder) {
    ag::NoGradGuard ng;
    double total = 0.0;
    std::vector<std::vector<double>> latents(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) latents[i] = m.to_latent(data[i].image);
    for (const auto& p : probes) {
        const auto& s = data.at(p.sample);
        const auto x_t = forward_diffuse(m.schedule, latents[p.sample], p.t, p.eps);
        total += ag::mse(m.predict_noise(m.latent_var(x_t), p.t, m.context(encoder.encode(s.caption)), &s.condition), p.eps).item();
    }
    return probes.empty() ? 0.0 : total / static_cast<double>(probes.size());
}

/// Backbone pretraining stand-in for a pretrained text-to-image model:
/// plain denoising loss on (image, caption), captions dropped to the
/// unconditional embedding with probability `uncond_prob`.
inline double backbone_train_step(DiffusionModel& m, nn::Adam& opt, const std::vector<CdSample>& batch,
                                  const text::TextEncoder& encoder, std::uint64_t seed, long step, double uncond_prob = 0.1) {
    if (batch.empty()) throw ValidationError("backbone_train_step: empty batch");
    nn::set_trainable(m.backbone, true);
    nn::zero_grad(m.backbone);
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Rng rng(derive_seed(seed, "backbone_train", static_cast<std::uint64_t>(step) * 1000003ULL + i));
        const auto emb = rng.uniform() < uncond_prob ? encoder.encode_unconditional() : encoder.encode(batch[i].caption);
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m.schedule.steps)));
        const auto eps = rng.normal_vector(m.latent_numel());
        const auto x_t = forward_diffuse(m.schedule, m.to_latent(batch[i].image), t, eps);
        Var loss = ag::mse(m.backbone(m.latent_var(x_t), t, m.context(emb)), eps);
        if (!std::isfinite(loss.item())) throw NumericError("backbone loss is not finite at step " + std::to_string(step));
        total += loss.item() / static_cast<double>(batch.size());
        ag::backward(loss, 1.0 / static_cast<double>(batch.size()));
    }
    opt.step(m.backbone);
    return total;
}

/// Mean-std scale that brings first-stage latents to unit variance.
inline double estimate_latent_scale(const vq::VqModel& vq, const std::vector<std::vector<double>>& images) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& img : images)
        for (double v : vq.encode(img).data) {
            sum += v;
            sq += v * v;
            ++n;
        }
    if (n == 0) return 1.0;
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    return var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
}

inline Checkpoint to_checkpoint(const CdTrainState& st) {
    Checkpoint ck;
    ck.kind = "controlnet";
    ck.config = st.model.cfg.to_json();
    ck.step = st.step;
    ck.extra = {{"micro", st.micro}};
    ck.put_model(st.model.backbone);
    if (st.model.control) ck.put_model(*st.model.control);
    if (st.model.first_stage) {
        ck.extra["first_stage"] = st.model.first_stage->config().to_json();
        ck.put_model(*st.model.first_stage, "vq.");
    }
    for (const auto& [name, v] : st.optimizer.first_moments()) ck.tensors["opt.m." + name] = {{static_cast<int>(v.size())}, v};
    for (const auto& [name, v] : st.optimizer.second_moments()) ck.tensors["opt.v." + name] = {{static_cast<int>(v.size())}, v};
    return ck;
}

inline DiffusionModel model_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "controlnet") throw ValidationError("checkpoint kind '" + ck.kind + "' is not a diffusion model");
    const auto cfg = DiffusionConfig::from_json(ck.config);
    std::optional<vq::VqModel> vq;
    if (ck.extra.contains("first_stage")) {
        vq = vq::VqModel(vq::VqConfig::from_json(ck.extra["first_stage"]), 0);
        ck.get_model(*vq, "vq.");
    }
    DiffusionModel m(cfg, 0, std::move(vq));
    ck.get_model(m.backbone);
    if (ck.has_prefix("control.")) {
        m.attach_control(0);
        ck.get_model(*m.control);
    }
    return m;
}

inline CdTrainState train_state_from_checkpoint(const Checkpoint& ck, const TrainRecipe& recipe) {
    CdTrainState st = make_train_state(model_from_checkpoint(ck), recipe, 0);
    st.step = ck.step;
    st.micro = ck.extra.value("micro", 0L);
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("opt.m.", 0) == 0) st.optimizer.first_moments()[name.substr(6)] = t.data;
        if (name.rfind("opt.v.", 0) == 0) st.optimizer.second_moments()[name.substr(6)] = t.data;
    }
    st.optimizer.set_step_count(ck.step);
    return st;
}

}  // namespace m3face::diffusion
