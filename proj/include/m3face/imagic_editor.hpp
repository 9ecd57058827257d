#pragma once

// Single-step face editing: optimize the target text embedding to reconstruct
// the input, fine-tune selected denoiser up blocks with that embedding fixed,
// then sample once from an interpolated embedding with the edited condition.

#include "m3face/controlled_diffusion.hpp"
#include "m3face/core/error.hpp"
#include "m3face/core/optim.hpp"
#include "m3face/core/rng.hpp"
#include "m3face/text_encoding.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace m3face::imagic {

using ag::Var;
using diffusion::DiffusionModel;
using text::TextEmbedding;

/// alpha * e_tgt + (1 - alpha) * e_opt.
inline TextEmbedding interpolate_embedding(const TextEmbedding& e_opt, const TextEmbedding& e_tgt, double alpha) {
    if (!std::isfinite(alpha)) throw ValidationError("alpha must be finite");
    if (!e_opt.same_shape(e_tgt))
        throw ValidationError("embedding shapes differ: [" + std::to_string(e_opt.length) + "," + std::to_string(e_opt.dim) +
                              "] vs [" + std::to_string(e_tgt.length) + "," + std::to_string(e_tgt.dim) + "]");
    TextEmbedding out = e_opt;
    if (alpha == 0.0) return e_opt;
    if (alpha == 1.0) return e_tgt;
    for (std::size_t i = 0; i < out.tokens.size(); ++i) out.tokens[i] = alpha * e_tgt.tokens[i] + (1.0 - alpha) * e_opt.tokens[i];
    for (std::size_t i = 0; i < out.pooled.size(); ++i) out.pooled[i] = alpha * e_tgt.pooled[i] + (1.0 - alpha) * e_opt.pooled[i];
    return out;
}

inline double embedding_distance(const TextEmbedding& a, const TextEmbedding& b) {
    if (!a.same_shape(b)) throw ValidationError("embedding shapes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.tokens.size(); ++i) s += (a.tokens[i] - b.tokens[i]) * (a.tokens[i] - b.tokens[i]);
    return std::sqrt(s);
}

struct LayerSelection {
    enum class Mode { AllUpBlocks, LastK };
    Mode mode = Mode::AllUpBlocks;
    int k = 1;

    static LayerSelection all_up_blocks() { return {Mode::AllUpBlocks, 0}; }
    static LayerSelection last_k(int k) { return {Mode::LastK, k}; }

    /// Parses "upblocks" or "last:K".
    static LayerSelection parse(const std::string& s) {
        if (s == "upblocks") return all_up_blocks();
        if (s.rfind("last:", 0) == 0) {
            try {
                std::size_t used = 0;
                const int k = std::stoi(s.substr(5), &used);
                if (used == s.size() - 5) return last_k(k);
            } catch (const std::exception&) {
            }
        }
        throw ValidationError("layer selection must be 'upblocks' or 'last:K', got '" + s + "'");
    }
};

/// Up-block name prefixes in execution order.
inline std::vector<std::string> up_block_prefixes() { return {"unet.up.0.", "unet.up.1."}; }

inline std::vector<std::string> selected_prefixes(const LayerSelection& sel) {
    const auto all = up_block_prefixes();
    if (sel.mode == LayerSelection::Mode::AllUpBlocks) return all;
    if (sel.k < 1) throw ValidationError("layer selection is empty (k must be >= 1)");
    if (sel.k > static_cast<int>(all.size()))
        throw ValidationError("layer selection asks for " + std::to_string(sel.k) + " up blocks, model has " +
                              std::to_string(all.size()));
    return {all.end() - sel.k, all.end()};
}

struct OptimizeOptions {
    int steps = 500;
    double lr = 1e-3;
    int probes = 4;
    std::uint64_t seed = 0;
    double divergence_factor = 10.0;
};

struct OptimizeResult {
    TextEmbedding e_opt;
    std::vector<double> losses;       // loss at each evaluated iterate, starting with e_tgt
    std::vector<double> best_losses;  // running minimum
};

namespace detail {

struct Probe {
    int t;
    std::vector<double> eps;
};

inline std::vector<Probe> make_probes(const DiffusionModel& m, int n, std::uint64_t seed) {
    if (n < 1) throw ValidationError("need at least one probe");
    std::vector<Probe> out;
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "imagic.probe", static_cast<std::uint64_t>(i)));
        out.push_back({1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m.schedule.steps))),
                       rng.normal_vector(m.latent_numel())});
    }
    return out;
}

inline DiffusionModel frozen_copy(const DiffusionModel& m) {
    DiffusionModel c = m;
    nn::set_trainable(c.backbone, false);
    if (c.control) nn::set_trainable(*c.control, false);
    if (c.first_stage) nn::set_trainable(*c.first_stage, false);
    return c;
}

}  // namespace detail

/// Adam on the token embedding with all weights fixed. The objective is the
/// denoising loss over a fixed probe set of (t, eps) pairs, so the returned
/// best iterate is well defined.
inline OptimizeResult optimize_embedding(const DiffusionModel& model, const std::vector<double>& image,
                                         const std::vector<double>& condition, const TextEmbedding& e_tgt,
                                         const OptimizeOptions& opts = {}) {
    if (opts.steps < 0 || !(opts.lr > 0.0)) throw ValidationError("optimize_embedding: bad steps or learning rate");
    e_tgt.validate();
    OptimizeResult res{e_tgt, {}, {}};
    if (opts.steps == 0) return res;
    const DiffusionModel m = detail::frozen_copy(model);
    m.check_condition(condition);
    const auto x0 = m.to_latent(image);
    const auto probes = detail::make_probes(m, opts.probes, opts.seed);
    std::vector<std::vector<double>> noisy;
    for (const auto& p : probes) noisy.push_back(diffusion::forward_diffuse(m.schedule, x0, p.t, p.eps));

    auto evaluate = [&](const std::vector<double>& tokens, std::vector<double>* grad) {
        Var ctx = Var::leaf({e_tgt.length, e_tgt.dim}, tokens);
        double total = 0.0;
        for (std::size_t i = 0; i < probes.size(); ++i) {
            Var loss = ag::mse(m.predict_noise(m.latent_var(noisy[i]), probes[i].t, ctx, &condition), probes[i].eps);
            total += loss.item() / static_cast<double>(probes.size());
            if (grad) ag::backward(loss, 1.0 / static_cast<double>(probes.size()));
        }
        if (grad) *grad = ctx.grad();
        return total;
    };

    nn::Adam adam(nn::AdamConfig{opts.lr});
    std::vector<double> tokens = e_tgt.tokens, grad;
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> best_tokens = tokens;
    double initial = 0.0;
    for (int step = 0; step <= opts.steps; ++step) {
        const double loss = evaluate(tokens, step < opts.steps ? &grad : nullptr);
        if (step == 0) initial = loss;
        res.losses.push_back(loss);
        if (!std::isfinite(loss) || loss > opts.divergence_factor * initial) {
            std::ostringstream msg;
            msg << "embedding optimization diverged at step " << step << "; loss trace:";
            for (double l : res.losses) msg << ' ' << l;
            throw NumericError(msg.str());
        }
        if (loss < best) {
            best = loss;
            best_tokens = tokens;
        }
        res.best_losses.push_back(best);
        if (step < opts.steps) adam.step_tensor("e_opt", tokens, grad);
    }
    res.e_opt.tokens = best_tokens;
    res.e_opt.recompute_pooled();
    return res;
}

struct FinetuneOptions {
    int steps = 1000;
    double lr = 5e-5;
    LayerSelection selection{};
    std::uint64_t seed = 0;
};

/// Fine-tunes only the selected backbone up blocks on the denoising loss of
/// the input image with e_opt fixed; returns the updated copy.
inline DiffusionModel finetune_model(const DiffusionModel& model, const std::vector<double>& image,
                                     const std::vector<double>& condition, const TextEmbedding& e_opt,
                                     const FinetuneOptions& opts = {}) {
    if (opts.steps < 0 || !(opts.lr > 0.0)) throw ValidationError("finetune_model: bad steps or learning rate");
    const auto prefixes = selected_prefixes(opts.selection);
    if (opts.steps == 0) return model;
    DiffusionModel m = detail::frozen_copy(model);
    m.check_condition(condition);
    int selected = 0;
    m.backbone.visit_params([&](ag::Param& p) {
        for (const auto& pre : prefixes)
            if (p.name.rfind(pre, 0) == 0) {
                p.trainable = true;
                ++selected;
            }
    });
    if (selected == 0) throw ValidationError("layer selection matched no parameters");
    const auto x0 = m.to_latent(image);
    const Var ctx = m.context(e_opt);
    nn::Adam adam(nn::AdamConfig{opts.lr});
    for (int step = 0; step < opts.steps; ++step) {
        Rng rng(derive_seed(opts.seed, "imagic.finetune", static_cast<std::uint64_t>(step)));
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m.schedule.steps)));
        const auto eps = rng.normal_vector(m.latent_numel());
        nn::zero_grad(m.backbone);
        Var loss = ag::mse(m.predict_noise(m.latent_var(diffusion::forward_diffuse(m.schedule, x0, t, eps)), t, ctx, &condition), eps);
        if (!std::isfinite(loss.item())) throw NumericError("fine-tuning loss is not finite at step " + std::to_string(step));
        ag::backward(loss);
        adam.step(m.backbone);
    }
    // Copy tuned values back so the result keeps the caller's trainability flags.
    DiffusionModel out = model;
    std::map<std::string, const ag::Param*> tuned;
    m.backbone.visit_params([&](const ag::Param& p) { tuned[p.name] = &p; });
    out.backbone.visit_params([&](ag::Param& p) { p.value = tuned.at(p.name)->value; });
    return out;
}

/// Stateful three-stage edit: encode + optimize, fine-tune, sample.
class EditSession {
public:
    EditSession(DiffusionModel model, std::shared_ptr<const text::TextEncoder> encoder)
        : base_(std::move(model)), encoder_(std::move(encoder)) {
        if (!encoder_) throw ValidationError("EditSession needs a text encoder");
    }

    void set_input(std::vector<double> image, std::vector<double> condition, const std::string& target_text) {
        base_.check_condition(condition);
        image_ = std::move(image);
        condition_ = std::move(condition);
        e_tgt_ = encoder_->encode(target_text);
        e_opt_.reset();
        finetuned_.reset();
    }

    const OptimizeResult& optimize(const OptimizeOptions& opts = {}) {
        require("input", e_tgt_.has_value());
        opt_result_ = optimize_embedding(base_, image_, condition_, *e_tgt_, opts);
        e_opt_ = opt_result_->e_opt;
        finetuned_.reset();
        return *opt_result_;
    }

    const DiffusionModel& finetune(const FinetuneOptions& opts = {}) {
        require("input", e_tgt_.has_value());
        require("optimize_embedding", e_opt_.has_value());
        finetuned_ = finetune_model(base_, image_, condition_, *e_opt_, opts);
        return *finetuned_;
    }

    /// One sampling pass with the interpolated embedding, the fine-tuned
    /// weights and the edited condition.
    std::vector<double> edit(const std::vector<double>& condition_edited, double alpha,
                             const diffusion::SampleOptions& opts) const {
        require("input", e_tgt_.has_value());
        require("optimize_embedding", e_opt_.has_value());
        require("finetune_model", finetuned_.has_value());
        const auto e = interpolate_embedding(*e_opt_, *e_tgt_, alpha);
        return diffusion::sample(*finetuned_, e, encoder_->encode_unconditional(), &condition_edited, opts);
    }

    const TextEmbedding& target_embedding() const {
        require("input", e_tgt_.has_value());
        return *e_tgt_;
    }
    const TextEmbedding& optimized_embedding() const {
        require("optimize_embedding", e_opt_.has_value());
        return *e_opt_;
    }
    const DiffusionModel& finetuned_model() const {
        require("finetune_model", finetuned_.has_value());
        return *finetuned_;
    }

private:
    static void require(const std::string& stage, bool ok) {
        if (!ok) throw StageError(stage, "edit session stage '" + stage + "' has not been run");
    }

    DiffusionModel base_;
    std::shared_ptr<const text::TextEncoder> encoder_;
    std::vector<double> image_, condition_;
    std::optional<TextEmbedding> e_tgt_, e_opt_;
    std::optional<OptimizeResult> opt_result_;
    std::optional<DiffusionModel> finetuned_;
};

inline std::vector<double> edit(const EditSession& session, const std::vector<double>& condition_edited, double alpha,
                                const diffusion::SampleOptions& opts) {
    return session.edit(condition_edited, alpha, opts);
}

}  // namespace m3face::imagic
