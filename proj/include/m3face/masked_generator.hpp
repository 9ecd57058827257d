#pragma once

// Masked generative transformer over token grids: masked-token training
// with a cosine schedule, confidence-scheduled parallel decoding, and
// inpainting that holds kept cells fixed at every decoding step.

#include "m3face/core/autograd.hpp"
#include "m3face/core/checkpoint.hpp"
#include "m3face/core/error.hpp"
#include "m3face/core/nn.hpp"
#include "m3face/core/optim.hpp"
#include "m3face/core/rng.hpp"
#include "m3face/text_encoding.hpp"
#include "m3face/vq_tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace m3face::muse {

using ag::Var;
using text::TextEmbedding;
using vq::TokenGrid;

struct MaskedTransformerConfig {
    int layers = 2;
    int heads = 2;
    int model_dim = 64;
    int mlp_dim = 128;
    int codebook_size = 64;  // K; vocabulary is K+1 with MASK = K
    int grid_height = 8;
    int grid_width = 8;
    int context_dim = 32;    // E
    bool zero_init_head = true;
    double learning_rate = 1e-3;

    int vocab() const { return codebook_size + 1; }
    int mask_id() const { return codebook_size; }
    int cells() const { return grid_height * grid_width; }

    void validate() const {
        if (layers < 1 || heads < 1 || model_dim < 1 || mlp_dim < 1 || codebook_size < 1 || grid_height < 1 ||
            grid_width < 1 || context_dim < 1)
            throw ValidationError("masked transformer dimensions must be positive");
        if (model_dim % heads != 0) throw ValidationError("model_dim must be divisible by heads");
    }

    nlohmann::json to_json() const {
        return {{"layers", layers},       {"heads", heads},           {"model_dim", model_dim},
                {"mlp_dim", mlp_dim},     {"codebook_size", codebook_size}, {"grid_height", grid_height},
                {"grid_width", grid_width}, {"context_dim", context_dim}, {"zero_init_head", zero_init_head},
                {"learning_rate", learning_rate}};
    }

    static MaskedTransformerConfig from_json(const nlohmann::json& j) {
        MaskedTransformerConfig c;
        c.layers = j.value("layers", c.layers);
        c.heads = j.value("heads", c.heads);
        c.model_dim = j.value("model_dim", c.model_dim);
        c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
        c.codebook_size = j.value("codebook_size", c.codebook_size);
        c.grid_height = j.value("grid_height", c.grid_height);
        c.grid_width = j.value("grid_width", c.grid_width);
        c.context_dim = j.value("context_dim", c.context_dim);
        c.zero_init_head = j.value("zero_init_head", c.zero_init_head);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.validate();
        return c;
    }
};

/// Fraction of cells masked at schedule position u: cos(pi*u/2).
inline double mask_ratio(double u) {
    if (!(u >= 0.0 && u <= 1.0)) throw ValidationError("mask_ratio: u must lie in [0,1]");
    if (u == 1.0) return 0.0;
    return std::cos(std::numbers::pi * u / 2.0);
}

struct MaskSchedule {
    int steps = 12;

    void validate() const {
        if (steps < 1) throw ValidationError("mask schedule needs at least one step");
    }
};

struct MaskedGrid {
    TokenGrid grid;
    std::vector<bool> masked;  // per cell
    std::vector<int> positions;  // masked cells, ascending
};

/// Masks exactly round(ratio * cells) cells chosen uniformly without
/// replacement from `seed`.
inline MaskedGrid apply_mask(const TokenGrid& grid, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValidationError("apply_mask: ratio must lie in [0,1]");
    if (grid.has_mask()) throw ValidationError("apply_mask: grid already contains MASK");
    const std::size_t n = grid.size();
    const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    std::vector<int> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    Rng rng(derive_seed(seed, "apply_mask"));
    rng.shuffle(order);
    MaskedGrid out{grid, std::vector<bool>(n, false), {}};
    for (std::size_t i = 0; i < count; ++i) {
        out.masked[static_cast<std::size_t>(order[i])] = true;
        out.grid.tokens[static_cast<std::size_t>(order[i])] = grid.mask_id;
    }
    for (std::size_t i = 0; i < n; ++i)
        if (out.masked[i]) out.positions.push_back(static_cast<int>(i));
    return out;
}

struct TransformerBlock {
    nn::LayerNorm ln_self, ln_cross, ln_mlp;
    nn::Attention self_attn, cross_attn;
    nn::Linear fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(const std::string& name, const MaskedTransformerConfig& c, Rng& rng)
        : ln_self(name + ".ln_self", c.model_dim),
          ln_cross(name + ".ln_cross", c.model_dim),
          ln_mlp(name + ".ln_mlp", c.model_dim),
          self_attn(name + ".self_attn", c.model_dim, c.model_dim, c.heads, rng),
          cross_attn(name + ".cross_attn", c.model_dim, c.model_dim, c.heads, rng),
          fc1(name + ".fc1", c.model_dim, c.mlp_dim, rng),
          fc2(name + ".fc2", c.mlp_dim, c.model_dim, rng) {}

    Var operator()(const Var& x, const Var& ctx) const {
        Var h = ln_self(x);
        Var y = ag::add(x, self_attn(h, h));
        y = ag::add(y, cross_attn(ln_cross(y), ctx));
        return ag::add(y, fc2(ag::silu(fc1(ln_mlp(y)))));
    }

    template <typename F>
    void visit_params(F&& f) {
        ln_self.visit_params(f);
        ln_cross.visit_params(f);
        ln_mlp.visit_params(f);
        self_attn.visit_params(f);
        cross_attn.visit_params(f);
        fc1.visit_params(f);
        fc2.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        ln_self.visit_params(f);
        ln_cross.visit_params(f);
        ln_mlp.visit_params(f);
        self_attn.visit_params(f);
        cross_attn.visit_params(f);
        fc1.visit_params(f);
        fc2.visit_params(f);
    }
};

class MaskedTransformer {
public:
    MaskedTransformer() = default;
    MaskedTransformer(MaskedTransformerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "muse.init"));
        token_embedding_ = ag::Param("tok_emb", {cfg_.vocab(), cfg_.model_dim});
        for (auto& v : token_embedding_.value) v = 0.02 * rng.normal();
        position_embedding_ = ag::Param("pos_emb", {cfg_.cells(), cfg_.model_dim});
        for (auto& v : position_embedding_.value) v = 0.02 * rng.normal();
        context_proj_ = nn::Linear("ctx_proj", cfg_.context_dim, cfg_.model_dim, rng);
        for (int l = 0; l < cfg_.layers; ++l) blocks_.emplace_back("block." + std::to_string(l), cfg_, rng);
        final_ln_ = nn::LayerNorm("final_ln", cfg_.model_dim);
        head_ = nn::Linear("head", cfg_.model_dim, cfg_.codebook_size, rng, cfg_.zero_init_head);
    }

    const MaskedTransformerConfig& config() const { return cfg_; }

    void check_grid(const TokenGrid& g) const {
        if (g.height != cfg_.grid_height || g.width != cfg_.grid_width)
            throw ValidationError("token grid is " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                                  ", model expects " + std::to_string(cfg_.grid_height) + "x" + std::to_string(cfg_.grid_width));
        if (g.mask_id != cfg_.mask_id()) throw ValidationError("token grid vocabulary does not match the model");
        g.validate();
    }

    /// Logits [cells, K] over real tokens for every cell.
    Var logits(const TokenGrid& grid, const TextEmbedding& text) const {
        check_grid(grid);
        if (text.dim != cfg_.context_dim) throw ValidationError("text embedding dim does not match context_dim");
        Var x = ag::add(ag::gather_rows(Var::param(token_embedding_), grid.tokens), Var::param(position_embedding_));
        Var ctx = context_proj_(Var::constant({text.length, text.dim}, text.tokens));
        for (const auto& b : blocks_) x = b(x, ctx);
        return head_(final_ln_(x));
    }

    template <typename F>
    void visit_params(F&& f) {
        f(token_embedding_);
        f(position_embedding_);
        context_proj_.visit_params(f);
        for (auto& b : blocks_) b.visit_params(f);
        final_ln_.visit_params(f);
        head_.visit_params(f);
    }
    template <typename F>
    void visit_params(F&& f) const {
        f(token_embedding_);
        f(position_embedding_);
        context_proj_.visit_params(f);
        for (const auto& b : blocks_) b.visit_params(f);
        final_ln_.visit_params(f);
        head_.visit_params(f);
    }

private:
    MaskedTransformerConfig cfg_;
    ag::Param token_embedding_;
    ag::Param position_embedding_;
    nn::Linear context_proj_;
    std::vector<TransformerBlock> blocks_;
    nn::LayerNorm final_ln_;
    nn::Linear head_;
};

struct TrainSample {
    TokenGrid grid;
    TextEmbedding text;
};

struct MuseTrainState {
    MaskedTransformer model;
    nn::Adam optimizer;
    long step = 0;
};

inline MuseTrainState make_train_state(const MaskedTransformerConfig& cfg, std::uint64_t seed) {
    return {MaskedTransformer(cfg, seed), nn::Adam(nn::AdamConfig{cfg.learning_rate}), 0};
}

struct TrainStepOptions {
    std::optional<double> forced_ratio;  // debug hook: bypass the sampled ratio
};

struct TrainStepResult {
    double loss = 0.0;
    int masked_tokens = 0;
    int correct = 0;  // argmax hits on masked cells
};

/// Cross-entropy over masked cells pooled across the batch; each sample
/// draws u ~ U(0,1] and masks round(cos(pi*u/2) * cells) cells.
inline TrainStepResult mg_train_step(const std::vector<TrainSample>& batch, MuseTrainState& state, std::uint64_t seed,
                                     const TrainStepOptions& opts = {}) {
    if (batch.empty()) throw ValidationError("mg_train_step: empty batch");
    const auto& cfg = state.model.config();
    struct Prepared {
        MaskedGrid masked;
        const TrainSample* sample;
    };
    std::vector<Prepared> prepared;
    int total_masked = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        state.model.check_grid(batch[i].grid);
        if (batch[i].grid.has_mask()) throw ValidationError("training grids must not contain MASK");
        Rng rng(derive_seed(seed, "mg_train.ratio", state.step * 1000003ULL + i));
        const double u = 1.0 - rng.uniform();
        const double ratio = opts.forced_ratio ? *opts.forced_ratio : mask_ratio(u);
        prepared.push_back({apply_mask(batch[i].grid, ratio, derive_seed(seed, "mg_train.mask", state.step * 1000003ULL + i)),
                            &batch[i]});
        total_masked += static_cast<int>(prepared.back().masked.positions.size());
    }
    nn::zero_grad(state.model);
    TrainStepResult res;
    res.masked_tokens = total_masked;
    for (const auto& p : prepared) {
        const int count = static_cast<int>(p.masked.positions.size());
        if (count == 0) continue;
        Var logits = state.model.logits(p.masked.grid, p.sample->text);
        Var ce = ag::cross_entropy(logits, p.sample->grid.tokens, p.masked.masked);
        if (!std::isfinite(ce.item()))
            throw NumericError("masked transformer loss is not finite at step " + std::to_string(state.step));
        const double w = static_cast<double>(count) / total_masked;
        res.loss += ce.item() * w;
        ag::backward(ce, w);
        for (int pos : p.masked.positions) {
            const double* row = logits.value().data() + static_cast<std::size_t>(pos) * cfg.codebook_size;
            const int pred = static_cast<int>(std::max_element(row, row + cfg.codebook_size) - row);
            res.correct += pred == p.sample->grid.tokens[static_cast<std::size_t>(pos)];
        }
    }
    if (total_masked > 0) state.optimizer.step(state.model);
    ++state.step;
    return res;
}

/// Fraction of masked cells whose argmax prediction equals the target, with
/// masks drawn at `ratio` from `seed`.
inline double masked_token_accuracy(const MaskedTransformer& model, const std::vector<TrainSample>& samples, double ratio,
                                    std::uint64_t seed) {
    ag::NoGradGuard ng;
    const int k = model.config().codebook_size;
    long hits = 0, total = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto m = apply_mask(samples[i].grid, ratio, derive_seed(seed, "accuracy", i));
        const Var logits = model.logits(m.grid, samples[i].text);
        for (int pos : m.positions) {
            const double* row = logits.value().data() + static_cast<std::size_t>(pos) * k;
            hits += static_cast<int>(std::max_element(row, row + k) - row) == samples[i].grid.tokens[static_cast<std::size_t>(pos)];
            ++total;
        }
    }
    return total ? static_cast<double>(hits) / static_cast<double>(total) : 1.0;
}

struct DecodeOptions {
    MaskSchedule schedule{};
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

/// Per-step record of an iterative decode.
struct DecodingState {
    TokenGrid grid;
    int step = 0;
    std::vector<double> confidences;  // probability of the token chosen at each cell in the last prediction
};

/// Sampling temperature at step s of S (1-based): linear from T down to 0.
inline double step_temperature(double t0, int step, int steps) {
    if (steps <= 1) return t0;
    return t0 * static_cast<double>(steps - step) / static_cast<double>(steps - 1);
}

/// Iterative parallel decoding that fills every cell not marked in `keep`.
/// Kept cells are re-imposed after every step. At step s the number of filled
/// free cells is ceil((1 - mask_ratio(s/S)) * free), reaching all at s == S.
inline TokenGrid inpaint(const MaskedTransformer& model, const TokenGrid& grid, const std::vector<bool>& keep,
                         const TextEmbedding& text, const DecodeOptions& opts,
                         std::vector<DecodingState>* trace = nullptr) {
    opts.schedule.validate();
    model.check_grid(grid);
    if (keep.size() != grid.size()) throw ValidationError("keep mask size does not match the grid");
    const int k = model.config().codebook_size;
    const int mask = model.config().mask_id();
    std::vector<int> free;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i]) {
            if (grid.tokens[i] == mask)
                throw ValidationError("kept cell " + std::to_string(i) + " holds MASK; nothing to preserve");
        } else {
            free.push_back(static_cast<int>(i));
        }
    }
    TokenGrid cur = grid;
    for (int pos : free) cur.tokens[static_cast<std::size_t>(pos)] = mask;
    const int total_free = static_cast<int>(free.size());
    const int steps = opts.schedule.steps;
    ag::NoGradGuard ng;
    int committed = 0;
    for (int s = 1; s <= steps && committed < total_free; ++s) {
        const double tau = step_temperature(opts.temperature, s, steps);
        const Var logits = model.logits(cur, text);
        Rng rng(derive_seed(opts.seed, "decode", static_cast<std::uint64_t>(s)));
        struct Candidate {
            int pos;
            int token;
            double confidence;
        };
        std::vector<Candidate> cands;
        std::vector<double> conf(cur.size(), 1.0);
        for (int pos : free) {
            if (cur.tokens[static_cast<std::size_t>(pos)] != mask) continue;
            const double* row = logits.value().data() + static_cast<std::size_t>(pos) * k;
            const double mx = *std::max_element(row, row + k);
            std::vector<double> p(static_cast<std::size_t>(k));
            double z = 0.0;
            for (int j = 0; j < k; ++j) z += (p[j] = std::exp(row[j] - mx));
            for (auto& v : p) v /= z;
            int token;
            if (tau <= 0.0) {
                token = static_cast<int>(std::max_element(row, row + k) - row);
            } else {
                std::vector<double> q(static_cast<std::size_t>(k));
                double zq = 0.0;
                for (int j = 0; j < k; ++j) zq += (q[j] = std::exp((row[j] - mx) / tau));
                double r = rng.uniform() * zq;
                token = k - 1;
                for (int j = 0; j < k; ++j) {
                    r -= q[j];
                    if (r < 0.0) {
                        token = j;
                        break;
                    }
                }
            }
            cands.push_back({pos, token, p[static_cast<std::size_t>(token)]});
            conf[static_cast<std::size_t>(pos)] = p[static_cast<std::size_t>(token)];
        }
        int target = s == steps ? total_free
                                : static_cast<int>(std::ceil((1.0 - mask_ratio(static_cast<double>(s) / steps)) * total_free));
        target = std::clamp(target, committed, total_free);
        const int take = target - committed;
        std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
            return a.confidence > b.confidence;
        });
        for (int i = 0; i < take; ++i) cur.tokens[static_cast<std::size_t>(cands[static_cast<std::size_t>(i)].pos)] = cands[static_cast<std::size_t>(i)].token;
        committed = target;
        for (std::size_t i = 0; i < keep.size(); ++i)
            if (keep[i]) cur.tokens[i] = grid.tokens[i];
        if (trace) trace->push_back({cur, s, conf});
    }
    return cur;
}

/// Generation from an all-MASK grid.
inline TokenGrid generate(const MaskedTransformer& model, const TextEmbedding& text, const DecodeOptions& opts,
                          std::vector<DecodingState>* trace = nullptr) {
    const auto& c = model.config();
    TokenGrid blank(c.grid_height, c.grid_width, c.mask_id(), c.mask_id());
    return inpaint(model, blank, std::vector<bool>(blank.size(), false), text, opts, trace);
}

inline Checkpoint to_checkpoint(const MuseTrainState& state, const std::string& task) {
    Checkpoint ck;
    ck.kind = "muse";
    ck.config = state.model.config().to_json();
    ck.step = state.step;
    ck.extra = {{"task", task}};
    ck.put_model(state.model);
    for (const auto& [name, m] : state.optimizer.first_moments()) ck.tensors["opt.m." + name] = {{static_cast<int>(m.size())}, m};
    for (const auto& [name, v] : state.optimizer.second_moments()) ck.tensors["opt.v." + name] = {{static_cast<int>(v.size())}, v};
    return ck;
}

inline MuseTrainState from_checkpoint(const Checkpoint& ck, bool with_optimizer = true) {
    if (ck.kind != "muse") throw ValidationError("checkpoint kind '" + ck.kind + "' is not a masked transformer");
    const auto cfg = MaskedTransformerConfig::from_json(ck.config);
    MuseTrainState st{MaskedTransformer(cfg, 0), nn::Adam(nn::AdamConfig{cfg.learning_rate}), ck.step};
    ck.get_model(st.model);
    if (with_optimizer) {
        for (const auto& [name, t] : ck.tensors) {
            if (name.rfind("opt.m.", 0) == 0) st.optimizer.first_moments()[name.substr(6)] = t.data;
            if (name.rfind("opt.v.", 0) == 0) st.optimizer.second_moments()[name.substr(6)] = t.data;
        }
        st.optimizer.set_step_count(ck.step);
    }
    return st;
}

}  // namespace m3face::muse
