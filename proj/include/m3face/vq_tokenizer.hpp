#pragma once

// VQ autoencoder mapping images (faces, segmentation renderings, landmark
// renderings) to discrete token grids and back.

#include "m3face/core/autograd.hpp"
#include "m3face/core/checkpoint.hpp"
#include "m3face/core/error.hpp"
#include "m3face/core/image.hpp"
#include "m3face/core/nn.hpp"
#include "m3face/core/optim.hpp"
#include "m3face/core/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace m3face::vq {

using ag::Var;

struct VqConfig {
    int image_size = 32;
    int in_channels = 3;
    int downsample_factor = 4;
    int codebook_size = 64;  // K
    int embed_dim = 32;      // D
    std::vector<int> channels = {16, 32, 32};
    double beta = 0.25;      // commitment weight; 0 disables the commitment term
    double learning_rate = 2e-3;

    int stages() const {
        int s = 0;
        for (int f = downsample_factor; f > 1; f /= 2) ++s;
        return s;
    }
    int grid_size() const { return image_size / downsample_factor; }

    void validate() const {
        if (downsample_factor < 1 || (downsample_factor & (downsample_factor - 1)) != 0)
            throw ValidationError("downsample_factor must be a power of two");
        if (image_size <= 0 || image_size % downsample_factor != 0)
            throw ValidationError("image_size must be divisible by downsample_factor");
        if (codebook_size < 1) throw ValidationError("codebook_size must be at least 1");
        if (embed_dim < 1 || in_channels < 1) throw ValidationError("embed_dim and in_channels must be positive");
        if (static_cast<int>(channels.size()) != stages() + 1)
            throw ValidationError("channels must list one width per resolution (" + std::to_string(stages() + 1) + ")");
        for (int c : channels)
            if (c < 1) throw ValidationError("channel widths must be positive");
        if (!(beta >= 0.0)) throw ValidationError("commitment weight beta must be non-negative");
    }

    nlohmann::json to_json() const {
        return {{"image_size", image_size},   {"in_channels", in_channels}, {"downsample_factor", downsample_factor},
                {"codebook_size", codebook_size}, {"embed_dim", embed_dim}, {"channels", channels},
                {"beta", beta},               {"learning_rate", learning_rate}};
    }

    static VqConfig from_json(const nlohmann::json& j) {
        VqConfig c;
        c.image_size = j.value("image_size", c.image_size);
        c.in_channels = j.value("in_channels", c.in_channels);
        c.downsample_factor = j.value("downsample_factor", c.downsample_factor);
        c.codebook_size = j.value("codebook_size", c.codebook_size);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.channels = j.value("channels", c.channels);
        c.beta = j.value("beta", c.beta);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.validate();
        return c;
    }
};

/// Discrete latent grid. `mask_id` (== K) marks hidden cells.
struct TokenGrid {
    int height = 0;
    int width = 0;
    int mask_id = 0;
    std::vector<int> tokens;

    TokenGrid() = default;
    TokenGrid(int h, int w, int mask, int fill) : height(h), width(w), mask_id(mask), tokens(static_cast<std::size_t>(h) * w, fill) {}

    std::size_t size() const { return tokens.size(); }
    bool has_mask() const { return std::find(tokens.begin(), tokens.end(), mask_id) != tokens.end(); }

    void validate() const {
        if (tokens.size() != static_cast<std::size_t>(height) * width) throw ValidationError("token grid size mismatch");
        for (int t : tokens)
            if (t < 0 || t > mask_id) throw ValidationError("token " + std::to_string(t) + " outside vocabulary");
    }

    friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

/// Continuous latents [channels, height, width].
struct LatentGrid {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    double cell(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

struct Quantized {
    TokenGrid tokens;
    LatentGrid latents;
};

/// Nearest codebook entry per cell by squared Euclidean distance, ties to the
/// lowest index. `codebook` is row-major [K, D].
inline Quantized quantize(const LatentGrid& z, const std::vector<double>& codebook, int k) {
    if (k < 1 || codebook.empty()) throw ValidationError("quantize: empty codebook");
    const int d = z.channels;
    if (codebook.size() != static_cast<std::size_t>(k) * d)
        throw ValidationError("quantize: codebook dimension does not match latent channels");
    Quantized q{TokenGrid(z.height, z.width, k, 0), LatentGrid{d, z.height, z.width, std::vector<double>(z.data.size())}};
    const int hw = z.height * z.width;
    std::vector<double> cell(d);
    for (int p = 0; p < hw; ++p) {
        for (int c = 0; c < d; ++c) cell[c] = z.data[static_cast<std::size_t>(c) * hw + p];
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int e = 0; e < k; ++e) {
            const double* row = codebook.data() + static_cast<std::size_t>(e) * d;
            double dist = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = cell[c] - row[c];
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = e;
            }
        }
        q.tokens.tokens[p] = best;
        for (int c = 0; c < d; ++c) q.latents.data[static_cast<std::size_t>(c) * hw + p] = codebook[static_cast<std::size_t>(best) * d + c];
    }
    return q;
}

struct Encoder {
    nn::Conv2d conv_in;
    std::vector<nn::Conv2d> down;
    nn::Conv2d mid;
    nn::Conv2d conv_out;

    Encoder() = default;
    Encoder(const VqConfig& cfg, Rng& rng) {
        const auto& ch = cfg.channels;
        conv_in = nn::Conv2d("enc.conv_in", cfg.in_channels, ch[0], 3, 1, 1, rng);
        for (int s = 0; s < cfg.stages(); ++s)
            down.emplace_back("enc.down." + std::to_string(s), ch[s], ch[s + 1], 4, 2, 1, rng);
        mid = nn::Conv2d("enc.mid", ch.back(), ch.back(), 3, 1, 1, rng);
        conv_out = nn::Conv2d("enc.conv_out", ch.back(), cfg.embed_dim, 1, 1, 0, rng);
    }

    Var operator()(const Var& x) const {
        Var h = ag::silu(conv_in(x));
        for (const auto& d : down) h = ag::silu(d(h));
        h = ag::silu(mid(h));
        return conv_out(h);
    }

    template <typename F>
    void visit_params(F&& f) {
        conv_in.visit_params(f);
        for (auto& d : down) d.visit_params(f);
        mid.visit_params(f);
        conv_out.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        conv_in.visit_params(f);
        for (const auto& d : down) d.visit_params(f);
        mid.visit_params(f);
        conv_out.visit_params(f);
    }
};

struct Decoder {
    nn::Conv2d conv_in;
    nn::Conv2d mid;
    std::vector<nn::Conv2d> up;
    nn::Conv2d conv_out;

    Decoder() = default;
    Decoder(const VqConfig& cfg, Rng& rng) {
        const auto& ch = cfg.channels;
        conv_in = nn::Conv2d("dec.conv_in", cfg.embed_dim, ch.back(), 1, 1, 0, rng);
        mid = nn::Conv2d("dec.mid", ch.back(), ch.back(), 3, 1, 1, rng);
        for (int s = cfg.stages() - 1; s >= 0; --s)
            up.emplace_back("dec.up." + std::to_string(s), ch[s + 1], ch[s], 3, 1, 1, rng);
        conv_out = nn::Conv2d("dec.conv_out", ch[0], cfg.in_channels, 3, 1, 1, rng);
    }

    Var operator()(const Var& z) const {
        Var h = ag::silu(conv_in(z));
        h = ag::silu(mid(h));
        for (const auto& u : up) h = ag::silu(u(ag::upsample2x(h)));
        return conv_out(h);
    }

    template <typename F>
    void visit_params(F&& f) {
        conv_in.visit_params(f);
        mid.visit_params(f);
        for (auto& u : up) u.visit_params(f);
        conv_out.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        conv_in.visit_params(f);
        mid.visit_params(f);
        for (const auto& u : up) u.visit_params(f);
        conv_out.visit_params(f);
    }
};

struct VqLossTerms {
    double total = 0.0;
    double reconstruction = 0.0;
    double codebook = 0.0;
    double commitment = 0.0;
};

class VqModel {
public:
    VqModel() = default;
    VqModel(VqConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "vq.init"));
        encoder_ = Encoder(cfg_, rng);
        decoder_ = Decoder(cfg_, rng);
        codebook_ = ag::Param("codebook", {cfg_.codebook_size, cfg_.embed_dim});
        for (auto& v : codebook_.value) v = rng.normal() * 0.1;
    }

    const VqConfig& config() const { return cfg_; }
    const ag::Param& codebook() const { return codebook_; }
    ag::Param& codebook() { return codebook_; }
    const Encoder& encoder() const { return encoder_; }
    const Decoder& decoder() const { return decoder_; }
    int grid_size() const { return cfg_.grid_size(); }

    void check_image(const std::vector<double>& planar) const {
        const std::size_t expect = static_cast<std::size_t>(cfg_.in_channels) * cfg_.image_size * cfg_.image_size;
        if (planar.size() != expect)
            throw ValidationError("image has " + std::to_string(planar.size()) + " values, expected " +
                                  std::to_string(expect) + " (" + std::to_string(cfg_.in_channels) + "x" +
                                  std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) + ")");
    }

    Var encode_var(const Var& x) const { return encoder_(x); }
    Var decode_var(const Var& z) const { return decoder_(z); }

    /// Continuous latents for a planar [C,S,S] image in [0,1].
    LatentGrid encode(const std::vector<double>& planar) const {
        check_image(planar);
        ag::NoGradGuard ng;
        const int s = cfg_.image_size;
        Var z = encoder_(Var::constant({cfg_.in_channels, s, s}, planar));
        return {z.dim(0), z.dim(1), z.dim(2), z.value()};
    }

    LatentGrid encode(const RgbImage& img) const { return encode(to_planar(img)); }

    Quantized quantize(const LatentGrid& z) const {
        if (z.channels != cfg_.embed_dim) throw ValidationError("latent channels do not match codebook dimension");
        return vq::quantize(z, codebook_.value, cfg_.codebook_size);
    }

    TokenGrid tokenize(const RgbImage& img) const { return quantize(encode(img)).tokens; }

    std::vector<double> decode_latents(const LatentGrid& zq) const {
        ag::NoGradGuard ng;
        return decoder_(Var::constant({zq.channels, zq.height, zq.width}, zq.data)).value();
    }

    LatentGrid lookup(const TokenGrid& grid) const {
        grid.validate();
        if (grid.mask_id != cfg_.codebook_size) throw ValidationError("token grid vocabulary does not match codebook");
        if (grid.has_mask()) throw ValidationError("cannot decode a token grid containing MASK");
        const int d = cfg_.embed_dim;
        const int hw = grid.height * grid.width;
        LatentGrid z{d, grid.height, grid.width, std::vector<double>(static_cast<std::size_t>(d) * hw)};
        for (int p = 0; p < hw; ++p)
            for (int c = 0; c < d; ++c)
                z.data[static_cast<std::size_t>(c) * hw + p] = codebook_.value[static_cast<std::size_t>(grid.tokens[p]) * d + c];
        return z;
    }

    /// Planar image reconstruction of a MASK-free grid.
    std::vector<double> decode(const TokenGrid& grid) const { return decode_latents(lookup(grid)); }

    RgbImage decode_image(const TokenGrid& grid) const {
        return from_planar(decode(grid), cfg_.image_size, cfg_.image_size);
    }

    /// Builds the training graph for one image and returns its loss terms.
    /// Reconstruction gradients reach the encoder through the straight-through
    /// estimator; the codebook only learns from the codebook term.
    std::pair<Var, VqLossTerms> loss(const std::vector<double>& planar) const {
        check_image(planar);
        const int s = cfg_.image_size, d = cfg_.embed_dim;
        Var ze = encoder_(Var::constant({cfg_.in_channels, s, s}, planar));
        const int h = ze.dim(1), w = ze.dim(2);
        Var cells = ag::transpose(ag::reshape(ze, {d, h * w}));  // [hw, D]
        const Quantized q = quantize(LatentGrid{d, h, w, ze.value()});
        Var e = ag::gather_rows(Var::param(codebook_), q.tokens.tokens);  // [hw, D]
        std::vector<double> offset(e.size());
        for (std::size_t i = 0; i < offset.size(); ++i) offset[i] = e.value()[i] - cells.value()[i];
        Var zq_st = ag::add_const(cells, offset);
        Var recon_img = decoder_(ag::reshape(ag::transpose(zq_st), {d, h, w}));
        Var recon = ag::mse(recon_img, planar);
        Var cb = ag::mse(e, cells.value());
        Var commit = ag::mse(cells, e.value());
        Var total = ag::add(ag::add(recon, cb), ag::scale(commit, cfg_.beta));
        return {total, {total.item(), recon.item(), cb.item(), commit.item()}};
    }

    template <typename F>
    void visit_params(F&& f) {
        encoder_.visit_params(f);
        decoder_.visit_params(f);
        f(codebook_);
    }
    template <typename F>
    void visit_params(F&& f) const {
        encoder_.visit_params(f);
        decoder_.visit_params(f);
        f(codebook_);
    }

private:
    VqConfig cfg_;
    Encoder encoder_;
    Decoder decoder_;
    ag::Param codebook_;
};

struct VqTrainState {
    VqModel model;
    nn::Adam optimizer;
    long step = 0;
    bool codebook_seeded = false;
};

inline VqTrainState make_train_state(const VqConfig& cfg, std::uint64_t seed) {
    return {VqModel(cfg, seed), nn::Adam(nn::AdamConfig{cfg.learning_rate}), 0, false};
}

/// Replaces codebook rows by encoder outputs of the batch (cycled), so that
/// every entry starts inside the data manifold.
inline void seed_codebook(VqModel& model, const std::vector<std::vector<double>>& batch, std::uint64_t seed) {
    std::vector<std::vector<double>> cells;
    for (const auto& img : batch) {
        const LatentGrid z = model.encode(img);
        const int hw = z.height * z.width;
        for (int p = 0; p < hw; ++p) {
            std::vector<double> c(z.channels);
            for (int k = 0; k < z.channels; ++k) c[k] = z.data[static_cast<std::size_t>(k) * hw + p];
            cells.push_back(std::move(c));
        }
    }
    if (cells.empty()) return;
    Rng rng(derive_seed(seed, "vq.codebook_seed"));
    rng.shuffle(cells);
    const int k = model.config().codebook_size, d = model.config().embed_dim;
    auto& cb = model.codebook().value;
    for (int e = 0; e < k; ++e) {
        const auto& c = cells[static_cast<std::size_t>(e) % cells.size()];
        for (int j = 0; j < d; ++j) cb[static_cast<std::size_t>(e) * d + j] = c[j] + (e >= static_cast<int>(cells.size()) ? 1e-3 * rng.normal() : 0.0);
    }
}

/// One optimizer update on the batch mean of the per-image loss.
inline VqLossTerms vq_train_step(const std::vector<std::vector<double>>& batch, VqTrainState& state, std::uint64_t seed = 0) {
    if (batch.empty()) throw ValidationError("vq_train_step: empty batch");
    if (!state.codebook_seeded) {
        seed_codebook(state.model, batch, seed);
        state.codebook_seeded = true;
    }
    nn::zero_grad(state.model);
    VqLossTerms mean{};
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const auto& img : batch) {
        auto [loss, terms] = state.model.loss(img);
        if (!std::isfinite(terms.total))
            throw NumericError("VQ loss is not finite at step " + std::to_string(state.step) +
                               " (reconstruction=" + std::to_string(terms.reconstruction) +
                               ", codebook=" + std::to_string(terms.codebook) + ")");
        ag::backward(loss, inv);
        mean.total += terms.total * inv;
        mean.reconstruction += terms.reconstruction * inv;
        mean.codebook += terms.codebook * inv;
        mean.commitment += terms.commitment * inv;
    }
    state.optimizer.step(state.model);
    ++state.step;
    return mean;
}

/// Mean squared reconstruction error of tokenize-then-decode over images.
inline double reconstruction_mse(const VqModel& model, const std::vector<std::vector<double>>& images) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& img : images) {
        const auto rec = model.decode_latents(model.quantize(model.encode(img)).latents);
        for (std::size_t i = 0; i < img.size(); ++i) {
            const double d = rec[i] - img[i];
            total += d * d;
        }
        n += img.size();
    }
    return n ? total / static_cast<double>(n) : 0.0;
}

inline Checkpoint to_checkpoint(const VqTrainState& state, const std::string& image_kind) {
    Checkpoint ck;
    ck.kind = "vq";
    ck.config = state.model.config().to_json();
    ck.step = state.step;
    ck.extra = {{"image_kind", image_kind}, {"codebook_seeded", state.codebook_seeded}};
    ck.put_model(state.model);
    for (const auto& [name, m] : state.optimizer.first_moments()) ck.tensors["opt.m." + name] = {{static_cast<int>(m.size())}, m};
    for (const auto& [name, v] : state.optimizer.second_moments()) ck.tensors["opt.v." + name] = {{static_cast<int>(v.size())}, v};
    return ck;
}

inline VqTrainState from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "vq") throw ValidationError("checkpoint kind '" + ck.kind + "' is not a VQ tokenizer");
    const auto cfg = VqConfig::from_json(ck.config);
    VqTrainState st{VqModel(cfg, 0), nn::Adam(nn::AdamConfig{cfg.learning_rate}), ck.step,
                    ck.extra.value("codebook_seeded", true)};
    ck.get_model(st.model);
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("opt.m.", 0) == 0) st.optimizer.first_moments()[name.substr(6)] = t.data;
        if (name.rfind("opt.v.", 0) == 0) st.optimizer.second_moments()[name.substr(6)] = t.data;
    }
    st.optimizer.set_step_count(ck.step);
    return st;
}

}  // namespace m3face::vq
