#pragma once

// Orchestration of the full flow: run configuration, corpus loading, stage
// training with resumable checkpoints, two-stage generation, condition +
// embedding editing, corpus construction and evaluation.

#include "m3face/condition_codec.hpp"
#include "m3face/controlled_diffusion.hpp"
#include "m3face/core/checkpoint.hpp"
#include "m3face/core/error.hpp"
#include "m3face/core/image.hpp"
#include "m3face/dataset_kit.hpp"
#include "m3face/eval_metrics.hpp"
#include "m3face/imagic_editor.hpp"
#include "m3face/masked_generator.hpp"
#include "m3face/synthetic_faces.hpp"
#include "m3face/text_encoding.hpp"
#include "m3face/vq_tokenizer.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace m3face::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kConfigFormatVersion = 1;

// ---------------------------------------------------------------------------
// Configuration

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ValidationError("config section '" + where + "' must be an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ValidationError("unknown key '" + k + "' in config section '" + where + "'");
}

inline std::set<std::string> keys_of(const json& j) {
    std::set<std::string> out;
    for (const auto& [k, v] : j.items()) out.insert(k);
    return out;
}

inline std::uint64_t require_seed(const json& j, const std::string& where) {
    if (!j.contains("seed")) throw ValidationError("config section '" + where + "' must set an explicit seed");
    return j.at("seed").get<std::uint64_t>();
}

template <typename T>
void take(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

struct TextSettings {
    std::string backend = "stub";
    int max_tokens = 48;
};

struct VqSection {
    std::uint64_t seed = 0;
    long steps = 400;
    int batch_size = 4;
    long checkpoint_every = 100;
    vq::VqConfig model{};

    json to_json() const {
        return {{"seed", seed}, {"steps", steps}, {"batch_size", batch_size}, {"checkpoint_every", checkpoint_every},
                {"model", model.to_json()}};
    }
    static VqSection from_json(const json& j) {
        VqSection s;
        detail::check_keys(j, detail::keys_of(s.to_json()), "vq");
        s.seed = detail::require_seed(j, "vq");
        detail::take(j, "steps", s.steps);
        detail::take(j, "batch_size", s.batch_size);
        detail::take(j, "checkpoint_every", s.checkpoint_every);
        if (j.contains("model")) {
            detail::check_keys(j["model"], detail::keys_of(vq::VqConfig{}.to_json()), "vq.model");
            s.model = vq::VqConfig::from_json(j["model"]);
        }
        if (s.steps < 0 || s.batch_size < 1 || s.checkpoint_every < 1) throw ValidationError("vq: steps/batch_size/checkpoint_every out of range");
        return s;
    }
};

struct MuseSection {
    std::uint64_t seed = 0;
    long steps = 600;
    int batch_size = 8;
    long checkpoint_every = 200;
    muse::MaskedTransformerConfig model{};
    int decode_steps = 12;
    double temperature = 1.0;
    TextSettings text{};

    json to_json() const {
        return {{"seed", seed}, {"steps", steps}, {"batch_size", batch_size}, {"checkpoint_every", checkpoint_every},
                {"model", model.to_json()}, {"decode_steps", decode_steps}, {"temperature", temperature},
                {"text_backend", text.backend}, {"text_max_tokens", text.max_tokens}};
    }
    static MuseSection from_json(const json& j) {
        MuseSection s;
        detail::check_keys(j, detail::keys_of(s.to_json()), "muse");
        s.seed = detail::require_seed(j, "muse");
        detail::take(j, "steps", s.steps);
        detail::take(j, "batch_size", s.batch_size);
        detail::take(j, "checkpoint_every", s.checkpoint_every);
        detail::take(j, "decode_steps", s.decode_steps);
        detail::take(j, "temperature", s.temperature);
        detail::take(j, "text_backend", s.text.backend);
        detail::take(j, "text_max_tokens", s.text.max_tokens);
        if (j.contains("model")) {
            detail::check_keys(j["model"], detail::keys_of(muse::MaskedTransformerConfig{}.to_json()), "muse.model");
            s.model = muse::MaskedTransformerConfig::from_json(j["model"]);
        }
        if (s.steps < 0 || s.batch_size < 1 || s.checkpoint_every < 1 || s.decode_steps < 1 || !(s.temperature >= 0.0))
            throw ValidationError("muse: steps/batch_size/checkpoint_every/decode_steps/temperature out of range");
        return s;
    }
};

struct SampleSettings {
    int steps = 25;
    double cfg_scale = 7.5;
    std::string sampler = "ddim";
    double eta = 0.0;
    double clip_x0 = 0.0;

    diffusion::SampleOptions options(std::uint64_t seed) const {
        diffusion::SampleOptions o;
        o.steps = steps;
        o.cfg_scale = cfg_scale;
        o.seed = seed;
        o.eta = eta;
        o.clip_x0 = clip_x0;
        if (sampler == "ddim") o.sampler = diffusion::Sampler::DDIM;
        else if (sampler == "ddpm") o.sampler = diffusion::Sampler::DDPM;
        else throw ValidationError("sampler must be 'ddim' or 'ddpm', got '" + sampler + "'");
        return o;
    }
};

struct ControlnetSection {
    std::uint64_t seed = 0;
    bool first_stage = true;
    long backbone_steps = 300;
    int backbone_batch = 4;
    double backbone_lr = 1e-3;
    double uncond_prob = 0.1;
    diffusion::TrainRecipe recipe{};
    diffusion::GuidanceConfig guidance{};
    diffusion::DiffusionConfig model{};
    long checkpoint_every = 10;
    SampleSettings sample{};
    TextSettings text{};

    json to_json() const {
        return {{"seed", seed},
                {"first_stage", first_stage},
                {"backbone_steps", backbone_steps},
                {"backbone_batch", backbone_batch},
                {"backbone_lr", backbone_lr},
                {"uncond_prob", uncond_prob},
                {"recipe", {{"epochs", recipe.epochs}, {"batch_size", recipe.batch_size},
                            {"grad_accumulation", recipe.grad_accumulation}, {"learning_rate", recipe.learning_rate}}},
                {"guidance", {{"cfg_scale", guidance.cfg_scale}, {"simple_prompt", guidance.simple_prompt},
                              {"simple_prompt_fraction", guidance.simple_prompt_fraction}}},
                {"model", model.to_json()},
                {"checkpoint_every", checkpoint_every},
                {"sample", {{"steps", sample.steps}, {"cfg_scale", sample.cfg_scale}, {"sampler", sample.sampler}, {"eta", sample.eta},
                            {"clip_x0", sample.clip_x0}}},
                {"text_backend", text.backend},
                {"text_max_tokens", text.max_tokens}};
    }
    static ControlnetSection from_json(const json& j) {
        ControlnetSection s;
        const json defaults = s.to_json();
        detail::check_keys(j, detail::keys_of(defaults), "controlnet");
        s.seed = detail::require_seed(j, "controlnet");
        detail::take(j, "first_stage", s.first_stage);
        detail::take(j, "backbone_steps", s.backbone_steps);
        detail::take(j, "backbone_batch", s.backbone_batch);
        detail::take(j, "backbone_lr", s.backbone_lr);
        detail::take(j, "uncond_prob", s.uncond_prob);
        detail::take(j, "checkpoint_every", s.checkpoint_every);
        detail::take(j, "text_backend", s.text.backend);
        detail::take(j, "text_max_tokens", s.text.max_tokens);
        if (j.contains("recipe")) {
            const auto& r = j["recipe"];
            detail::check_keys(r, detail::keys_of(defaults["recipe"]), "controlnet.recipe");
            detail::take(r, "epochs", s.recipe.epochs);
            detail::take(r, "batch_size", s.recipe.batch_size);
            detail::take(r, "grad_accumulation", s.recipe.grad_accumulation);
            detail::take(r, "learning_rate", s.recipe.learning_rate);
        }
        if (j.contains("guidance")) {
            const auto& g = j["guidance"];
            detail::check_keys(g, detail::keys_of(defaults["guidance"]), "controlnet.guidance");
            detail::take(g, "cfg_scale", s.guidance.cfg_scale);
            detail::take(g, "simple_prompt", s.guidance.simple_prompt);
            detail::take(g, "simple_prompt_fraction", s.guidance.simple_prompt_fraction);
        }
        if (j.contains("model")) {
            detail::check_keys(j["model"], detail::keys_of(defaults["model"]), "controlnet.model");
            s.model = diffusion::DiffusionConfig::from_json(j["model"]);
        }
        if (j.contains("sample")) {
            const auto& p = j["sample"];
            detail::check_keys(p, detail::keys_of(defaults["sample"]), "controlnet.sample");
            detail::take(p, "steps", s.sample.steps);
            detail::take(p, "cfg_scale", s.sample.cfg_scale);
            detail::take(p, "sampler", s.sample.sampler);
            detail::take(p, "eta", s.sample.eta);
            detail::take(p, "clip_x0", s.sample.clip_x0);
        }
        s.recipe.validate();
        s.guidance.validate();
        s.sample.options(0);
        if (s.backbone_steps < 0 || s.backbone_batch < 1 || !(s.backbone_lr > 0.0) || s.checkpoint_every < 1 ||
            !(s.uncond_prob >= 0.0 && s.uncond_prob <= 1.0))
            throw ValidationError("controlnet: backbone settings out of range");
        return s;
    }
};

struct EditSection {
    std::uint64_t seed = 0;
    int optimize_steps = 500;
    double optimize_lr = 1e-3;
    int probes = 4;
    int finetune_steps = 1000;
    double finetune_lr = 5e-5;
    std::string layers = "upblocks";
    double alpha = 1.0;

    json to_json() const {
        return {{"seed", seed}, {"optimize_steps", optimize_steps}, {"optimize_lr", optimize_lr}, {"probes", probes},
                {"finetune_steps", finetune_steps}, {"finetune_lr", finetune_lr}, {"layers", layers}, {"alpha", alpha}};
    }
    static EditSection from_json(const json& j) {
        EditSection s;
        detail::check_keys(j, detail::keys_of(s.to_json()), "edit");
        s.seed = detail::require_seed(j, "edit");
        detail::take(j, "optimize_steps", s.optimize_steps);
        detail::take(j, "optimize_lr", s.optimize_lr);
        detail::take(j, "probes", s.probes);
        detail::take(j, "finetune_steps", s.finetune_steps);
        detail::take(j, "finetune_lr", s.finetune_lr);
        detail::take(j, "layers", s.layers);
        detail::take(j, "alpha", s.alpha);
        imagic::LayerSelection::parse(s.layers);
        if (s.optimize_steps < 0 || s.finetune_steps < 0 || s.probes < 1 || !std::isfinite(s.alpha))
            throw ValidationError("edit: step counts, probes or alpha out of range");
        return s;
    }
};

struct DataSection {
    std::uint64_t seed = 0;
    std::string root = "corpus";
    std::string source = "synthetic";
    int count = 32;
    int raw_size = 64;
    int size = 32;
    double upscale_factor = 1.0;
    std::string upscaler = "bicubic";
    std::vector<std::string> languages = {"en", "es", "fr", "it", "de"};
    std::string translator = "stub";
    double blur_threshold = 100.0;
    double pose_threshold = 0.35;
    int landmark_radius = 1;

    int final_size() const { return static_cast<int>(std::lround(size * upscale_factor)); }

    json to_json() const {
        return {{"seed", seed}, {"root", root}, {"source", source}, {"count", count}, {"raw_size", raw_size}, {"size", size},
                {"upscale_factor", upscale_factor}, {"upscaler", upscaler}, {"languages", languages},
                {"translator", translator}, {"blur_threshold", blur_threshold}, {"pose_threshold", pose_threshold},
                {"landmark_radius", landmark_radius}};
    }
    static DataSection from_json(const json& j) {
        DataSection s;
        detail::check_keys(j, detail::keys_of(s.to_json()), "data");
        s.seed = detail::require_seed(j, "data");
        detail::take(j, "root", s.root);
        detail::take(j, "source", s.source);
        detail::take(j, "count", s.count);
        detail::take(j, "raw_size", s.raw_size);
        detail::take(j, "size", s.size);
        detail::take(j, "upscale_factor", s.upscale_factor);
        detail::take(j, "upscaler", s.upscaler);
        detail::take(j, "languages", s.languages);
        detail::take(j, "translator", s.translator);
        detail::take(j, "blur_threshold", s.blur_threshold);
        detail::take(j, "pose_threshold", s.pose_threshold);
        detail::take(j, "landmark_radius", s.landmark_radius);
        if (s.count < 0 || s.raw_size < 8 || s.size < 8 || !(s.upscale_factor >= 1.0) || s.landmark_radius < 0)
            throw ValidationError("data: sizes or counts out of range");
        if (s.languages.empty() || s.languages.front() != "en")
            throw ValidationError("data: languages must start with 'en'");
        return s;
    }
};

struct EvalSection {
    std::uint64_t seed = 0;
    int feature_dim = 16;
    std::string method = "m3face";
    TextSettings text{};

    json to_json() const {
        return {{"seed", seed}, {"feature_dim", feature_dim}, {"method", method}, {"text_backend", text.backend},
                {"text_max_tokens", text.max_tokens}};
    }
    static EvalSection from_json(const json& j) {
        EvalSection s;
        detail::check_keys(j, detail::keys_of(s.to_json()), "eval");
        s.seed = detail::require_seed(j, "eval");
        detail::take(j, "feature_dim", s.feature_dim);
        detail::take(j, "method", s.method);
        detail::take(j, "text_backend", s.text.backend);
        detail::take(j, "text_max_tokens", s.text.max_tokens);
        if (s.feature_dim < 1) throw ValidationError("eval: feature_dim must be positive");
        return s;
    }
};

struct RunConfig {
    int format_version = kConfigFormatVersion;
    VqSection vq;
    MuseSection muse;
    ControlnetSection controlnet;
    EditSection edit;
    DataSection data;
    EvalSection eval;
    fs::path base_dir = ".";  // relative paths resolve here

    fs::path data_root() const {
        const fs::path r(data.root);
        return r.is_absolute() ? r : base_dir / r;
    }

    json to_json() const {
        return {{"format_version", format_version}, {"vq", vq.to_json()}, {"muse", muse.to_json()},
                {"controlnet", controlnet.to_json()}, {"edit", edit.to_json()}, {"data", data.to_json()},
                {"eval", eval.to_json()}};
    }

    /// Strict parse: unknown keys anywhere, a missing section or a missing
    /// seed are errors.
    static RunConfig from_json(const json& j) {
        detail::check_keys(j, {"format_version", "vq", "muse", "controlnet", "edit", "data", "eval"}, "<root>");
        RunConfig c;
        if (!j.contains("format_version")) throw ValidationError("config must set format_version");
        c.format_version = j.at("format_version").get<int>();
        if (c.format_version != kConfigFormatVersion)
            throw ValidationError("unsupported config format_version " + std::to_string(c.format_version));
        for (const char* s : {"vq", "muse", "controlnet", "edit", "data", "eval"})
            if (!j.contains(s)) throw ValidationError(std::string("config is missing section '") + s + "'");
        c.vq = VqSection::from_json(j["vq"]);
        c.muse = MuseSection::from_json(j["muse"]);
        c.controlnet = ControlnetSection::from_json(j["controlnet"]);
        c.edit = EditSection::from_json(j["edit"]);
        c.data = DataSection::from_json(j["data"]);
        c.eval = EvalSection::from_json(j["eval"]);
        return c;
    }

    static RunConfig load(const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open config '" + path.string() + "'");
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw ValidationError("config '" + path.string() + "' is not valid JSON: " + e.what());
        }
        RunConfig c;
        try {
            c = from_json(j);
        } catch (const json::exception& e) {
            throw ValidationError("config '" + path.string() + "': " + e.what());
        }
        c.base_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
        return c;
    }

    std::string hash() const { return content_hash(to_json().dump()); }
};

// ---------------------------------------------------------------------------
// Shared helpers

enum class Modality { Mask, Landmarks };

inline Modality parse_modality(const std::string& s) {
    if (s == "mask") return Modality::Mask;
    if (s == "landmarks") return Modality::Landmarks;
    throw ValidationError("modality must be 'mask' or 'landmarks', got '" + s + "'");
}

inline std::string modality_name(Modality m) { return m == Modality::Mask ? "mask" : "landmarks"; }

inline text::Task modality_task(Modality m) { return m == Modality::Mask ? text::Task::Segmentation : text::Task::Landmarks; }

inline std::shared_ptr<const text::TextEncoder> make_encoder(const TextSettings& t, int dim) {
    if (t.backend == "stub") return std::make_shared<text::StubTextEncoder>(dim, t.max_tokens);
    return text::EncoderRegistry::instance().create(t.backend, dim);
}

inline fs::path checkpoint_path(const fs::path& dir, const std::string& name) { return dir / (name + ".ckpt"); }

inline Checkpoint load_stage_checkpoint(const fs::path& path, const std::string& stage) {
    if (!fs::exists(path)) throw StageError(stage, "checkpoint '" + path.string() + "' not found; run the " + stage + " stage first");
    return load_checkpoint(path);
}

inline void write_json(const fs::path& path, const json& j) { write_file_bytes(path, j.dump(2) + "\n"); }

inline json provenance(const std::string& command, const RunConfig& cfg) {
    return {{"command", command}, {"config_hash", cfg.hash()}, {"config", cfg.to_json()}};
}

/// Landmark renders are two-colour (black background, white discs); snaps
/// every pixel to the nearer of the two.
inline RgbImage snap_binary(const RgbImage& img) {
    RgbImage out = img;
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
        const int s = img.pixels[i] + img.pixels[i + 1] + img.pixels[i + 2];
        const std::uint8_t v = s >= 3 * 128 ? 255 : 0;
        out.pixels[i] = out.pixels[i + 1] = out.pixels[i + 2] = v;
    }
    return out;
}

/// Throws ValidationError unless `img` is a well-formed condition of the
/// given modality and size.
inline void validate_condition(const RgbImage& img, Modality m, int size) {
    if (img.height != size || img.width != size)
        throw ValidationError("condition is " + std::to_string(img.height) + "x" + std::to_string(img.width) + ", expected " +
                              std::to_string(size) + "x" + std::to_string(size));
    if (m == Modality::Mask) {
        const auto& pal = condition::default_palette();
        std::set<condition::Rgb> colors;
        for (int i = 0; i < pal.size(); ++i) colors.insert(pal.rgb(i));
        for (std::size_t i = 0; i < img.pixels.size(); i += 3)
            if (!colors.count({img.pixels[i], img.pixels[i + 1], img.pixels[i + 2]}))
                throw ValidationError("mask condition contains a non-palette color at pixel " + std::to_string(i / 3));
    } else {
        for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
            const auto r = img.pixels[i], g = img.pixels[i + 1], b = img.pixels[i + 2];
            if (!((r == 0 && g == 0 && b == 0) || (r == 255 && g == 255 && b == 255)))
                throw ValidationError("landmark condition must be black/white, pixel " + std::to_string(i / 3) + " is not");
        }
    }
}

inline RgbImage snap_condition(const RgbImage& img, Modality m) {
    return m == Modality::Mask ? condition::snap_to_palette(img, condition::default_palette()) : snap_binary(img);
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusItem {
    dataset::FaceRecord record;
    RgbImage image;
    condition::SegmentationMap seg;
    condition::LandmarkSet landmarks;
};

/// Reads and fully validates the manifest and every referenced file.
inline std::vector<CorpusItem> load_corpus(const fs::path& root) {
    const auto manifest = root / "manifest.jsonl";
    if (!fs::exists(manifest)) throw ValidationError("no manifest at '" + manifest.string() + "'");
    const auto records = dataset::read_manifest(manifest);
    if (records.empty()) throw ValidationError("manifest '" + manifest.string() + "' has no records");
    std::vector<CorpusItem> out;
    for (const auto& r : records) {
        r.check_refs(root);
        if (!r.captions.count("en")) throw ValidationError("record '" + r.id + "' has no English captions");
        CorpusItem it{r, read_png(root / r.image), condition::condition_to_seg(read_png(root / r.seg), condition::default_palette()),
                      condition::load_landmarks(root / r.landmarks)};
        if (it.image.height != it.seg.height || it.image.width != it.seg.width)
            throw ValidationError("record '" + r.id + "' image and segmentation sizes differ");
        out.push_back(std::move(it));
    }
    return out;
}

inline RgbImage condition_image(const CorpusItem& it, Modality m, int radius) {
    if (m == Modality::Mask) return condition::seg_to_condition(it.seg, condition::default_palette());
    return condition::rasterize_landmarks(it.landmarks, it.image.height, condition::RenderStyle{radius, {255, 255, 255}});
}

inline std::vector<std::size_t> batch_indices(std::size_t n, int batch, std::uint64_t seed, const std::string& tag, long step) {
    Rng rng(derive_seed(seed, tag, static_cast<std::uint64_t>(step)));
    std::vector<std::size_t> idx;
    for (int i = 0; i < batch; ++i) idx.push_back(rng.below(n));
    return idx;
}

// ---------------------------------------------------------------------------
// Training

enum class Stage { VQ, MUSE, CONTROLNET };

struct TrainResult {
    fs::path checkpoint;
    std::string hash;
    long step = 0;        // final step recorded in the checkpoint
    long steps_run = 0;   // steps executed by this invocation
    std::vector<double> losses;
    json info = json::object();
};

/// "mask", "landmarks" or "face".
inline std::vector<std::vector<double>> vq_training_images(const std::vector<CorpusItem>& corpus, const std::string& kind,
                                                           int radius) {
    std::vector<std::vector<double>> out;
    for (const auto& it : corpus) {
        if (kind == "face") out.push_back(to_planar(it.image));
        else out.push_back(to_planar(condition_image(it, parse_modality(kind), radius)));
    }
    return out;
}

inline TrainResult cmd_train_vq(const RunConfig& cfg, const std::string& kind, const fs::path& ckpt_dir, const fs::path& out) {
    if (kind != "mask" && kind != "landmarks" && kind != "face")
        throw ValidationError("VQ kind must be 'mask', 'landmarks' or 'face', got '" + kind + "'");
    const auto corpus = load_corpus(cfg.data_root());
    const auto& s = cfg.vq;
    if (corpus.front().image.height != s.model.image_size)
        throw ValidationError("corpus images are " + std::to_string(corpus.front().image.height) + " px but vq.model.image_size is " +
                              std::to_string(s.model.image_size));
    const auto images = vq_training_images(corpus, kind, cfg.data.landmark_radius);
    const auto path = checkpoint_path(ckpt_dir, "vq_" + kind);

    vq::VqTrainState st = vq::make_train_state(s.model, derive_seed(s.seed, "vq.init"));
    if (fs::exists(path)) {
        const auto ck = load_checkpoint(path);
        if (ck.extra.value("image_kind", "") != kind) throw ValidationError("existing checkpoint '" + path.string() + "' is for another image kind");
        if (ck.config != s.model.to_json()) throw ValidationError("existing checkpoint '" + path.string() + "' was trained with a different vq.model");
        st = vq::from_checkpoint(ck);
    }
    TrainResult res;
    res.checkpoint = path;
    const bool fresh = !fs::exists(path);
    while (st.step < s.steps) {
        std::vector<std::vector<double>> batch;
        for (auto i : batch_indices(images.size(), s.batch_size, s.seed, "vq.batch", st.step)) batch.push_back(images[i]);
        res.losses.push_back(vq::vq_train_step(batch, st, derive_seed(s.seed, "vq.step")).total);
        ++res.steps_run;
        if (st.step % s.checkpoint_every == 0 || st.step == s.steps) save_checkpoint(path, vq::to_checkpoint(st, kind));
    }
    if (fresh && res.steps_run == 0) save_checkpoint(path, vq::to_checkpoint(st, kind));
    res.step = st.step;
    res.hash = file_hash(path);
    res.info["reconstruction_mse"] = vq::reconstruction_mse(st.model, images);
    auto prov = provenance("train-vq", cfg);
    prov["kind"] = kind;
    prov["checkpoint"] = {{"path", path.string()}, {"hash", res.hash}, {"step", res.step}};
    prov["steps_run"] = res.steps_run;
    prov["reconstruction_mse"] = res.info["reconstruction_mse"];
    write_json(out / "provenance.json", prov);
    return res;
}

inline void check_muse_vq(const muse::MaskedTransformerConfig& m, const vq::VqConfig& v) {
    if (m.codebook_size != v.codebook_size || m.grid_height != v.grid_size() || m.grid_width != v.grid_size())
        throw ValidationError("muse.model grid/codebook does not match the VQ tokenizer (" + std::to_string(v.grid_size()) + "x" +
                              std::to_string(v.grid_size()) + ", K=" + std::to_string(v.codebook_size) + ")");
}

inline TrainResult cmd_train_muse(const RunConfig& cfg, Modality mod, const fs::path& ckpt_dir, const fs::path& out) {
    const auto corpus = load_corpus(cfg.data_root());
    const auto& s = cfg.muse;
    const auto vq_path = checkpoint_path(ckpt_dir, "vq_" + modality_name(mod));
    const auto vqs = vq::from_checkpoint(load_stage_checkpoint(vq_path, "train-vq"));
    check_muse_vq(s.model, vqs.model.config());
    const auto encoder = make_encoder(s.text, s.model.context_dim);

    // Every (record, caption) pair is one sample.
    std::vector<muse::TrainSample> samples;
    for (const auto& it : corpus) {
        const auto grid = vqs.model.tokenize(condition_image(it, mod, cfg.data.landmark_radius));
        for (const auto& c : it.record.captions.at("en"))
            samples.push_back({grid, encoder->encode(text::build_task_prompt(modality_task(mod), c))});
    }

    const auto path = checkpoint_path(ckpt_dir, "muse_" + modality_name(mod));
    muse::MuseTrainState st = muse::make_train_state(s.model, derive_seed(s.seed, "muse.init"));
    const bool fresh = !fs::exists(path);
    if (!fresh) {
        const auto ck = load_checkpoint(path);
        if (ck.config != s.model.to_json()) throw ValidationError("existing checkpoint '" + path.string() + "' was trained with a different muse.model");
        st = muse::from_checkpoint(ck);
    }
    TrainResult res;
    res.checkpoint = path;
    const std::string task = modality_name(mod);
    while (st.step < s.steps) {
        std::vector<muse::TrainSample> batch;
        for (auto i : batch_indices(samples.size(), s.batch_size, s.seed, "muse.batch", st.step)) batch.push_back(samples[i]);
        res.losses.push_back(muse::mg_train_step(batch, st, derive_seed(s.seed, "muse.step", static_cast<std::uint64_t>(st.step))).loss);
        ++res.steps_run;
        if (st.step % s.checkpoint_every == 0 || st.step == s.steps) save_checkpoint(path, muse::to_checkpoint(st, task));
    }
    if (fresh && res.steps_run == 0) save_checkpoint(path, muse::to_checkpoint(st, task));
    res.step = st.step;
    res.hash = file_hash(path);
    res.info["masked_token_accuracy"] = muse::masked_token_accuracy(st.model, samples, 0.5, derive_seed(s.seed, "muse.eval"));
    auto prov = provenance("train-muse", cfg);
    prov["modality"] = task;
    prov["tokenizer"] = {{"path", vq_path.string()}, {"hash", file_hash(vq_path)}};
    prov["checkpoint"] = {{"path", path.string()}, {"hash", res.hash}, {"step", res.step}};
    prov["steps_run"] = res.steps_run;
    prov["masked_token_accuracy"] = res.info["masked_token_accuracy"];
    write_json(out / "provenance.json", prov);
    return res;
}

namespace detail {

inline void restore_moments(nn::Adam& opt, const Checkpoint& ck) {
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("opt.m.", 0) == 0) opt.first_moments()[name.substr(6)] = t.data;
        if (name.rfind("opt.v.", 0) == 0) opt.second_moments()[name.substr(6)] = t.data;
    }
    opt.set_step_count(ck.step);
}

inline std::vector<diffusion::CdSample> cd_samples(const std::vector<CorpusItem>& corpus, Modality mod, int radius) {
    std::vector<diffusion::CdSample> out;
    for (const auto& it : corpus)
        for (const auto& c : it.record.captions.at("en"))
            out.push_back({to_planar(it.image), to_planar(condition_image(it, mod, radius)), c});
    return out;
}

}  // namespace detail

/// Trains (or resumes) the text-to-image backbone shared by every
/// condition kind.
inline TrainResult train_backbone(const RunConfig& cfg, const std::vector<CorpusItem>& corpus, const fs::path& ckpt_dir) {
    const auto& s = cfg.controlnet;
    const auto path = checkpoint_path(ckpt_dir, "backbone");
    const auto encoder = make_encoder(s.text, s.model.context_dim);
    std::vector<diffusion::CdSample> data;
    for (const auto& it : corpus)
        for (const auto& c : it.record.captions.at("en")) data.push_back({to_planar(it.image), {}, c});

    diffusion::DiffusionModel model;
    nn::Adam opt(nn::AdamConfig{s.backbone_lr});
    long step = 0;
    const bool fresh = !fs::exists(path);
    if (!fresh) {
        const auto ck = load_checkpoint(path);
        model = diffusion::model_from_checkpoint(ck);
        detail::restore_moments(opt, ck);
        step = ck.step;
    } else {
        auto mcfg = s.model;
        std::optional<vq::VqModel> first;
        if (s.first_stage) {
            first = vq::from_checkpoint(load_stage_checkpoint(checkpoint_path(ckpt_dir, "vq_face"), "train-vq")).model;
            std::vector<std::vector<double>> imgs;
            for (const auto& it : corpus) imgs.push_back(to_planar(it.image));
            mcfg.latent_scale = diffusion::estimate_latent_scale(*first, imgs);
        }
        model = diffusion::DiffusionModel(mcfg, derive_seed(s.seed, "backbone.init"), std::move(first));
    }
    if (model.image_size() != corpus.front().image.height)
        throw ValidationError("diffusion image size " + std::to_string(model.image_size()) + " does not match corpus images");
    TrainResult res;
    res.checkpoint = path;
    auto save = [&] {
        diffusion::CdTrainState tmp{model, opt, step, 0};
        auto ck = diffusion::to_checkpoint(tmp);
        ck.extra["stage"] = "backbone";
        save_checkpoint(path, ck);
    };
    while (step < s.backbone_steps) {
        std::vector<diffusion::CdSample> batch;
        for (auto i : batch_indices(data.size(), s.backbone_batch, s.seed, "backbone.batch", step)) batch.push_back(data[i]);
        res.losses.push_back(diffusion::backbone_train_step(model, opt, batch, *encoder, derive_seed(s.seed, "backbone.step"), step, s.uncond_prob));
        ++step;
        ++res.steps_run;
        if (step % (s.checkpoint_every * 10) == 0 || step == s.backbone_steps) save();
    }
    if (fresh && res.steps_run == 0) save();
    res.step = step;
    res.hash = file_hash(path);
    return res;
}

/// Total optimizer updates a control-branch run performs.
inline long controlnet_total_micro(const ControlnetSection& s, std::size_t samples) {
    const long per_epoch = static_cast<long>((samples + static_cast<std::size_t>(s.recipe.batch_size) - 1) / static_cast<std::size_t>(s.recipe.batch_size));
    return per_epoch * s.recipe.epochs;
}

inline TrainResult cmd_train_controlnet(const RunConfig& cfg, Modality mod, const fs::path& ckpt_dir, const fs::path& out) {
    const auto corpus = load_corpus(cfg.data_root());
    const auto& s = cfg.controlnet;
    if (s.model.condition_size != corpus.front().image.height)
        throw ValidationError("controlnet.model.condition_size must equal the corpus image size");
    const auto backbone = train_backbone(cfg, corpus, ckpt_dir);
    const auto encoder = make_encoder(s.text, s.model.context_dim);
    const auto data = detail::cd_samples(corpus, mod, cfg.data.landmark_radius);

    const auto path = checkpoint_path(ckpt_dir, "controlnet_" + modality_name(mod));
    const bool fresh = !fs::exists(path);
    diffusion::CdTrainState st = fresh
        ? diffusion::make_train_state(diffusion::model_from_checkpoint(load_checkpoint(backbone.checkpoint)), s.recipe, derive_seed(s.seed, "control.init"))
        : diffusion::train_state_from_checkpoint(load_checkpoint(path), s.recipe);
    if (fresh) st.model.cfg.condition_kind = modality_name(mod);
    else if (st.model.cfg.condition_kind != modality_name(mod))
        throw ValidationError("existing checkpoint '" + path.string() + "' was trained on another condition kind");

    const long per_epoch = static_cast<long>((data.size() + static_cast<std::size_t>(s.recipe.batch_size) - 1) / static_cast<std::size_t>(s.recipe.batch_size));
    const long total = controlnet_total_micro(s, data.size());
    const auto probes = diffusion::make_probes(st.model, data.size(), 1, derive_seed(s.seed, "control.probes"));
    TrainResult res;
    res.checkpoint = path;
    res.info["probe_loss_start"] = diffusion::probe_loss(st.model, data, probes, *encoder);
    std::vector<std::size_t> order;
    long order_epoch = -1;
    while (st.micro < total) {
        const long epoch = st.micro / per_epoch;
        if (epoch != order_epoch) {
            order.resize(data.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            Rng rng(derive_seed(s.seed, "control.epoch", static_cast<std::uint64_t>(epoch)));
            rng.shuffle(order);
            order_epoch = epoch;
        }
        const long b = st.micro % per_epoch;
        std::vector<diffusion::CdSample> batch;
        for (long i = b * s.recipe.batch_size; i < std::min<long>((b + 1) * s.recipe.batch_size, static_cast<long>(data.size())); ++i)
            batch.push_back(data[order[static_cast<std::size_t>(i)]]);
        const auto r = diffusion::cd_train_step(batch, s.recipe, s.guidance, st, *encoder, derive_seed(s.seed, "control.step"));
        res.losses.push_back(r.loss);
        ++res.steps_run;
        if ((r.updated && st.step % s.checkpoint_every == 0) || st.micro == total) save_checkpoint(path, diffusion::to_checkpoint(st));
    }
    if (fresh && res.steps_run == 0) save_checkpoint(path, diffusion::to_checkpoint(st));
    res.step = st.step;
    res.hash = file_hash(path);
    res.info["probe_loss_end"] = diffusion::probe_loss(st.model, data, probes, *encoder);
    res.info["micro_batches"] = st.micro;
    auto prov = provenance("train-controlnet", cfg);
    prov["modality"] = modality_name(mod);
    prov["backbone"] = {{"path", backbone.checkpoint.string()}, {"hash", backbone.hash}, {"step", backbone.step}};
    prov["checkpoint"] = {{"path", path.string()}, {"hash", res.hash}, {"step", res.step}};
    prov["steps_run"] = res.steps_run;
    prov["probe_loss_start"] = res.info["probe_loss_start"];
    prov["probe_loss_end"] = res.info["probe_loss_end"];
    write_json(out / "provenance.json", prov);
    return res;
}

inline TrainResult cmd_train(Stage stage, const RunConfig& cfg, const std::string& kind, const fs::path& ckpt_dir, const fs::path& out) {
    switch (stage) {
        case Stage::VQ: return cmd_train_vq(cfg, kind, ckpt_dir, out);
        case Stage::MUSE: return cmd_train_muse(cfg, parse_modality(kind), ckpt_dir, out);
        case Stage::CONTROLNET: return cmd_train_controlnet(cfg, parse_modality(kind), ckpt_dir, out);
    }
    throw ValidationError("unknown stage");
}

// ---------------------------------------------------------------------------
// Generation

struct GenerationRequest {
    std::string prompt;
    Modality modality = Modality::Mask;
    std::optional<RgbImage> condition;  // skips the condition stage
    std::uint64_t seed = 0;
};

struct GenerationResult {
    RgbImage condition;
    RgbImage face;
    json provenance;
};

inline GenerationResult cmd_generate(const RunConfig& cfg, const GenerationRequest& req, const fs::path& ckpt_dir, const fs::path& out) {
    if (req.prompt.empty()) throw ValidationError("prompt must not be empty");
    const std::string mname = modality_name(req.modality);
    const auto cn_path = checkpoint_path(ckpt_dir, "controlnet_" + mname);
    const auto model = diffusion::model_from_checkpoint(load_stage_checkpoint(cn_path, "train-controlnet"));
    const int csize = model.cfg.condition_size;
    if (req.condition) validate_condition(*req.condition, req.modality, csize);

    auto prov = provenance("generate", cfg);
    prov["prompt"] = req.prompt;
    prov["modality"] = mname;
    prov["seed"] = req.seed;
    prov["checkpoints"] = json::object();
    prov["checkpoints"]["controlnet"] = {{"path", cn_path.string()}, {"hash", file_hash(cn_path)}};

    GenerationResult res;
    if (req.condition) {
        res.condition = *req.condition;
        prov["condition_source"] = "user-condition";
    } else {
        const auto mg_path = checkpoint_path(ckpt_dir, "muse_" + mname);
        const auto vq_path = checkpoint_path(ckpt_dir, "vq_" + mname);
        const auto mg = muse::from_checkpoint(load_stage_checkpoint(mg_path, "train-muse"), false);
        const auto tok = vq::from_checkpoint(load_stage_checkpoint(vq_path, "train-vq"));
        check_muse_vq(mg.model.config(), tok.model.config());
        const auto encoder = make_encoder(cfg.muse.text, mg.model.config().context_dim);
        const std::string task_prompt = text::build_task_prompt(modality_task(req.modality), req.prompt);
        muse::DecodeOptions dopt;
        dopt.schedule.steps = cfg.muse.decode_steps;
        dopt.temperature = cfg.muse.temperature;
        dopt.seed = derive_seed(req.seed, "generate.condition");
        const auto grid = muse::generate(mg.model, encoder->encode(task_prompt), dopt);
        res.condition = snap_condition(tok.model.decode_image(grid), req.modality);
        if (res.condition.height != csize) throw ValidationError("condition tokenizer size does not match the diffusion condition size");
        prov["condition_source"] = "generated";
        prov["task_prompt"] = task_prompt;
        prov["condition_seed"] = dopt.seed;
        prov["checkpoints"]["muse"] = {{"path", mg_path.string()}, {"hash", file_hash(mg_path)}};
        prov["checkpoints"]["vq"] = {{"path", vq_path.string()}, {"hash", file_hash(vq_path)}};
    }

    const auto encoder = make_encoder(cfg.controlnet.text, model.cfg.context_dim);
    const auto sopt = cfg.controlnet.sample.options(derive_seed(req.seed, "generate.face"));
    const auto cond = to_planar(res.condition);
    res.face = from_planar(diffusion::sample(model, encoder->encode(req.prompt), encoder->encode_unconditional(), &cond, sopt),
                           model.image_size(), model.image_size());
    prov["face_seed"] = sopt.seed;
    prov["sample"] = cfg.controlnet.to_json()["sample"];
    write_png(out / "condition.png", res.condition);
    write_png(out / "face.png", res.face);
    prov["outputs"] = {{"condition", "condition.png"}, {"face", "face.png"},
                       {"condition_hash", file_hash(out / "condition.png")}, {"face_hash", file_hash(out / "face.png")}};
    write_json(out / "provenance.json", prov);
    res.provenance = prov;
    return res;
}

// ---------------------------------------------------------------------------
// Editing

/// Re-generates the tokens under `region` (true = edit) and keeps the rest.
/// An empty region returns the input tokens unchanged.
inline vq::TokenGrid edit_condition_tokens(const muse::MaskedTransformer& mg, const vq::TokenGrid& tokens,
                                           const std::vector<bool>& region, const text::TextEmbedding& text,
                                           const muse::DecodeOptions& opts) {
    if (region.size() != tokens.size())
        throw ValidationError("edit region has " + std::to_string(region.size()) + " cells, token grid has " + std::to_string(tokens.size()));
    std::vector<bool> keep(region.size());
    for (std::size_t i = 0; i < region.size(); ++i) keep[i] = !region[i];
    vq::TokenGrid grid = tokens;
    for (std::size_t i = 0; i < region.size(); ++i)
        if (region[i]) grid.tokens[i] = grid.mask_id;
    return muse::inpaint(mg, grid, keep, text, opts);
}

/// Parses "y0,x0,y1,x1" (half-open, token coordinates).
inline std::vector<bool> region_from_rect(const std::string& spec, int h, int w) {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
    char tail = 0;
    if (std::sscanf(spec.c_str(), "%d,%d,%d,%d%c", &y0, &x0, &y1, &x1, &tail) != 4)
        throw ValidationError("region must be 'y0,x0,y1,x1', got '" + spec + "'");
    if (y0 < 0 || x0 < 0 || y1 > h || x1 > w || y0 > y1 || x0 > x1)
        throw ValidationError("region '" + spec + "' lies outside the " + std::to_string(h) + "x" + std::to_string(w) + " token grid");
    std::vector<bool> r(static_cast<std::size_t>(h) * w, false);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) r[static_cast<std::size_t>(y) * w + x] = true;
    return r;
}

struct EditRequest {
    RgbImage image;
    RgbImage condition;
    std::vector<bool> region;  // token resolution, true = regenerate
    std::string prompt;
    Modality modality = Modality::Mask;
    std::optional<double> alpha;  // defaults to edit.alpha
    std::uint64_t seed = 0;
};

struct EditResult {
    RgbImage condition;
    RgbImage face;
    int tokens_changed = 0;
    json provenance;
};

inline EditResult cmd_edit(const RunConfig& cfg, const EditRequest& req, const fs::path& ckpt_dir, const fs::path& out) {
    if (req.prompt.empty()) throw ValidationError("prompt must not be empty");
    if (std::none_of(req.region.begin(), req.region.end(), [](bool b) { return b; }))
        throw ValidationError("edit region covers no tokens");
    const std::string mname = modality_name(req.modality);
    const auto cn_path = checkpoint_path(ckpt_dir, "controlnet_" + mname);
    const auto mg_path = checkpoint_path(ckpt_dir, "muse_" + mname);
    const auto vq_path = checkpoint_path(ckpt_dir, "vq_" + mname);
    const auto model = diffusion::model_from_checkpoint(load_stage_checkpoint(cn_path, "train-controlnet"));
    const auto mg = muse::from_checkpoint(load_stage_checkpoint(mg_path, "train-muse"), false);
    const auto tok = vq::from_checkpoint(load_stage_checkpoint(vq_path, "train-vq"));
    check_muse_vq(mg.model.config(), tok.model.config());
    validate_condition(req.condition, req.modality, model.cfg.condition_size);
    if (req.image.height != model.image_size() || req.image.width != model.image_size())
        throw ValidationError("input image must be " + std::to_string(model.image_size()) + " px square");

    // Condition edit in token space.
    const auto mg_enc = make_encoder(cfg.muse.text, mg.model.config().context_dim);
    const auto tokens = tok.model.tokenize(req.condition);
    muse::DecodeOptions dopt;
    dopt.schedule.steps = cfg.muse.decode_steps;
    dopt.temperature = cfg.muse.temperature;
    dopt.seed = derive_seed(req.seed, "edit.condition");
    const auto edited = edit_condition_tokens(mg.model, tokens, req.region,
                                              mg_enc->encode(text::build_task_prompt(modality_task(req.modality), req.prompt)), dopt);
    EditResult res;
    for (std::size_t i = 0; i < tokens.size(); ++i) res.tokens_changed += tokens.tokens[i] != edited.tokens[i];
    res.condition = snap_condition(tok.model.decode_image(edited), req.modality);

    // Embedding optimization, fine-tuning and sampling.
    const auto& e = cfg.edit;
    const auto encoder = std::shared_ptr<const text::TextEncoder>(make_encoder(cfg.controlnet.text, model.cfg.context_dim));
    imagic::EditSession session(model, encoder);
    session.set_input(to_planar(req.image), to_planar(req.condition), req.prompt);
    imagic::OptimizeOptions oo;
    oo.steps = e.optimize_steps;
    oo.lr = e.optimize_lr;
    oo.probes = e.probes;
    oo.seed = derive_seed(req.seed, "edit.optimize");
    const auto& opt_res = session.optimize(oo);
    imagic::FinetuneOptions fo;
    fo.steps = e.finetune_steps;
    fo.lr = e.finetune_lr;
    fo.selection = imagic::LayerSelection::parse(e.layers);
    fo.seed = derive_seed(req.seed, "edit.finetune");
    session.finetune(fo);
    const double alpha = req.alpha.value_or(e.alpha);
    const auto sopt = cfg.controlnet.sample.options(derive_seed(req.seed, "edit.sample"));
    res.face = from_planar(session.edit(to_planar(res.condition), alpha, sopt), model.image_size(), model.image_size());

    auto prov = provenance("edit", cfg);
    prov["prompt"] = req.prompt;
    prov["modality"] = mname;
    prov["seed"] = req.seed;
    prov["alpha"] = alpha;
    prov["checkpoints"] = {{"controlnet", {{"path", cn_path.string()}, {"hash", file_hash(cn_path)}}},
                           {"muse", {{"path", mg_path.string()}, {"hash", file_hash(mg_path)}}},
                           {"vq", {{"path", vq_path.string()}, {"hash", file_hash(vq_path)}}}};
    long region_cells = std::count(req.region.begin(), req.region.end(), true);
    prov["phases"] = json::array({
        {{"phase", "condition_edit"}, {"region_tokens", region_cells}, {"tokens_changed", res.tokens_changed}, {"seed", dopt.seed}},
        {{"phase", "optimize_embedding"}, {"steps", oo.steps}, {"lr", oo.lr}, {"seed", oo.seed},
         {"final_loss", opt_res.best_losses.empty() ? 0.0 : opt_res.best_losses.back()}},
        {{"phase", "finetune_model"}, {"steps", fo.steps}, {"lr", fo.lr}, {"layers", e.layers}, {"seed", fo.seed}},
        {{"phase", "sample"}, {"alpha", alpha}, {"seed", sopt.seed}},
    });
    write_png(out / "condition.png", res.condition);
    write_png(out / "face.png", res.face);
    prov["outputs"] = {{"condition", "condition.png"}, {"face", "face.png"},
                       {"condition_hash", file_hash(out / "condition.png")}, {"face_hash", file_hash(out / "face.png")}};
    write_json(out / "provenance.json", prov);
    res.provenance = prov;
    return res;
}

// ---------------------------------------------------------------------------
// Corpus construction

struct BuildHooks {
    std::shared_ptr<const dataset::Translator> translator;  // overrides data.translator
    std::function<bool(const dataset::FilterItem&)> occluded;
};

struct BuildResult {
    dataset::FilterReport report;
    long written = 0;   // records produced by this invocation
    long skipped = 0;   // already present in the manifest
    std::vector<std::string> flagged;  // ids with translation failures
};

inline std::string record_id(long index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06ld", index);
    return buf;
}

/// Builds (or completes) a corpus under `out`: manifest.jsonl, images/,
/// seg/, landmarks/, stats.csv, filter_report.json and provenance.json.
inline BuildResult cmd_build_dataset(const RunConfig& cfg, const fs::path& out, const BuildHooks& hooks = {}) {
    const auto& d = cfg.data;
    if (d.source != "synthetic")
        throw BackendError("data source '" + d.source + "' needs external landmark/segmentation extractors, which are not available");
    const auto translator = hooks.translator ? hooks.translator : dataset::make_translator(d.translator);
    dataset::upscale(RgbImage(1, 1), 1.0, d.upscaler);  // fail fast on unknown backends
    fs::create_directories(out);
    const auto manifest = out / "manifest.jsonl";
    std::map<std::string, dataset::FaceRecord> existing;
    if (fs::exists(manifest))
        for (auto& r : dataset::read_manifest(manifest)) existing.emplace(r.id, std::move(r));

    dataset::FilterRules rules;
    rules.blur_threshold = d.blur_threshold;
    rules.pose_threshold = d.pose_threshold;
    if (hooks.occluded) rules.occluded = hooks.occluded;

    BuildResult res;
    std::vector<dataset::FaceRecord> records;
    json failures = json::array();
    const dataset::TemplateCaptionEngine engine;
    dataset::SyntheticOptions sopt;
    sopt.size = d.raw_size;
    for (long i = 0; i < d.count; ++i) {
        const std::string id = record_id(i);
        const auto face = dataset::synthetic_face(d.seed, static_cast<std::uint64_t>(i), sopt);
        const dataset::FilterItem item{id, face.image, face.landmarks};
        switch (dataset::classify(item, rules)) {
            case dataset::Rejection::Occlusion: ++res.report.occlusion; continue;
            case dataset::Rejection::Blur: ++res.report.blur; continue;
            case dataset::Rejection::ExtremePose: ++res.report.extreme_pose; continue;
            case dataset::Rejection::None: ++res.report.kept; break;
        }
        if (auto it = existing.find(id); it != existing.end()) {
            it->second.check_refs(out);
            records.push_back(it->second);
            ++res.skipped;
            continue;
        }
        const auto anchors = dataset::anchors_from_dlib68(face.landmarks, d.raw_size);
        RgbImage img = dataset::upscale(dataset::align_crop(face.image, anchors, d.size), d.upscale_factor, d.upscaler);
        auto seg = dataset::align_labels(face.seg, anchors, d.size);
        auto lms = dataset::align_landmarks(face.landmarks, d.raw_size, anchors, d.size);
        if (d.final_size() != d.size) {
            // Labels follow the image with nearest-neighbour sampling.
            condition::SegmentationMap big(d.final_size(), d.final_size());
            for (int y = 0; y < big.height; ++y)
                for (int x = 0; x < big.width; ++x) big.at(y, x) = seg.at(y * d.size / big.height, x * d.size / big.width);
            seg = big;
        }
        dataset::FaceRecord r;
        r.id = id;
        r.image = "images/" + id + ".png";
        r.seg = "seg/" + id + ".png";
        r.landmarks = "landmarks/" + id + ".json";
        r.attrs = face.attrs;
        const auto en = engine.captions(face.attrs, 3, derive_seed(d.seed, "captions", static_cast<std::uint64_t>(i)));
        r.captions["en"] = en;
        bool flagged = false;
        for (const auto& lang : d.languages) {
            if (lang == "en") continue;
            try {
                r.captions[lang] = dataset::translate(en, {lang}, *translator).at(lang);
            } catch (const std::exception& e) {
                failures.push_back({{"id", id}, {"lang", lang}, {"error", e.what()}});
                flagged = true;
            }
        }
        if (flagged) res.flagged.push_back(id);
        write_png(out / r.image, img);
        write_png(out / r.seg, condition::seg_to_condition(seg, condition::default_palette()));
        condition::save_landmarks(out / r.landmarks, lms);
        records.push_back(std::move(r));
        ++res.written;
    }
    dataset::write_manifest(manifest, records);
    if (!records.empty()) write_file_bytes(out / "stats.csv", dataset::stats_csv(dataset::attribute_stats(records)));
    write_json(out / "filter_report.json", res.report.to_json());
    if (!failures.empty() || fs::exists(out / "translation_failures.json")) write_json(out / "translation_failures.json", failures);
    auto prov = provenance("build-dataset", cfg);
    prov["filter_report"] = res.report.to_json();
    prov["written"] = res.written;
    prov["skipped"] = res.skipped;
    prov["flagged"] = res.flagged;
    prov["translator"] = translator->id();
    prov["manifest_hash"] = file_hash(manifest);
    write_json(out / "provenance.json", prov);
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
    metrics::MetricRow row;
    std::string csv;
    std::string table;
};

/// Pairs generated outputs with the manifest by id. `generated` mirrors the
/// corpus layout: images/{id}.png, optional seg/{id}.png and
/// landmarks/{id}.json.
inline EvalResult cmd_evaluate(const RunConfig& cfg, const fs::path& corpus_root, const fs::path& generated, const fs::path& out) {
    const auto corpus = load_corpus(corpus_root);
    const bool has_seg = fs::exists(generated / "seg"), has_lms = fs::exists(generated / "landmarks");
    std::vector<std::string> unpaired;
    std::set<std::string> ids;
    for (const auto& it : corpus) {
        const auto& id = it.record.id;
        ids.insert(id);
        if (!fs::exists(generated / "images" / (id + ".png"))) unpaired.push_back(id + " (image)");
        if (has_seg && !fs::exists(generated / "seg" / (id + ".png"))) unpaired.push_back(id + " (seg)");
        if (has_lms && !fs::exists(generated / "landmarks" / (id + ".json"))) unpaired.push_back(id + " (landmarks)");
    }
    if (fs::exists(generated / "images"))
        for (const auto& e : fs::directory_iterator(generated / "images"))
            if (e.path().extension() == ".png" && !ids.count(e.path().stem().string()))
                unpaired.push_back(e.path().stem().string() + " (not in manifest)");
    if (!unpaired.empty()) {
        std::string msg = "unpaired ids:";
        for (const auto& u : unpaired) msg += " " + u;
        throw ValidationError(msg);
    }

    const auto& s = cfg.eval;
    const auto encoder = make_encoder(s.text, s.feature_dim);
    const int size = corpus.front().image.height;
    const metrics::RandomProjectionExtractor fid_proj(3 * size * size, s.feature_dim, derive_seed(s.seed, "eval.fid"));
    const metrics::RandomProjectionExtractor txt_proj(3 * size * size, encoder->dim(), derive_seed(s.seed, "eval.text"));
    metrics::Features real, fake;
    double text = 0.0, mask = 0.0, lm = 0.0;
    for (const auto& it : corpus) {
        const auto& id = it.record.id;
        const auto gen = read_png(generated / "images" / (id + ".png"));
        if (gen.height != size || gen.width != size) throw ValidationError("generated image '" + id + "' has the wrong size");
        real.push_back(fid_proj.features(to_planar(it.image)));
        const auto gp = to_planar(gen);
        fake.push_back(fid_proj.features(gp));
        text += 100.0 * std::max(0.0, metrics::clip_score(txt_proj.features(gp), encoder->encode(it.record.captions.at("en").front()).pooled));
        if (has_seg)
            mask += metrics::seg_consistency(condition::condition_to_seg(read_png(generated / "seg" / (id + ".png")), condition::default_palette()),
                                             condition::canonicalize(it.seg, condition::default_palette()));
        if (has_lms) lm += metrics::landmark_consistency(condition::load_landmarks(generated / "landmarks" / (id + ".json")), it.landmarks);
    }
    const double n = static_cast<double>(corpus.size());
    EvalResult res;
    res.row.method = s.method;
    res.row.fid = metrics::fid(real, fake);
    res.row.text = text / n;
    if (has_seg) res.row.mask = mask / n;
    if (has_lms) res.row.landmark = lm / n;
    res.csv = metrics::report_csv({res.row});
    res.table = metrics::report_table({res.row});
    write_file_bytes(out / "report.csv", res.csv);
    write_file_bytes(out / "report.txt", res.table);
    auto prov = provenance("evaluate", cfg);
    prov["corpus"] = corpus_root.string();
    prov["generated"] = generated.string();
    prov["records"] = corpus.size();
    write_json(out / "provenance.json", prov);
    return res;
}

}  // namespace m3face::pipeline
