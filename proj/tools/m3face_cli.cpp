// Command-line front end: train-vq, train-muse, train-controlnet, generate,
// edit, build-dataset, evaluate.

#include "m3face/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

namespace fs = std::filesystem;
using namespace m3face;
using namespace m3face::pipeline;

namespace {

struct Common {
    std::string config;
    std::string out;
    std::string checkpoints;

    fs::path ckpt_dir() const { return checkpoints.empty() ? fs::path(out) / "checkpoints" : fs::path(checkpoints); }
};

void add_common(CLI::App* app, Common& c, bool with_checkpoints = true) {
    app->add_option("--config", c.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    app->add_option("--out", c.out, "Output directory")->required();
    if (with_checkpoints)
        app->add_option("--checkpoints", c.checkpoints, "Checkpoint directory (default: <out>/checkpoints)");
}

void print_train(const TrainResult& r) {
    std::cout << "checkpoint " << r.checkpoint.string() << "\n"
              << "step " << r.step << " (ran " << r.steps_run << ")\n";
    if (!r.losses.empty()) std::cout << "loss first " << r.losses.front() << " last " << r.losses.back() << "\n";
    for (const auto& [k, v] : r.info.items()) std::cout << k << " " << v.dump() << "\n";
    std::cout << "hash " << r.hash << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"m3face: multi-modal face generation and editing"};
    app.require_subcommand(1);

    Common c;
    std::string kind = "mask", modality = "mask", prompt, condition, image, region, corpus, generated;
    std::uint64_t seed = 0;
    double alpha = std::numeric_limits<double>::quiet_NaN();

    auto* tvq = app.add_subcommand("train-vq", "Train a VQ tokenizer");
    add_common(tvq, c);
    tvq->add_option("--kind", kind, "Image kind")->check(CLI::IsMember({"mask", "landmarks", "face"}));

    auto* tmuse = app.add_subcommand("train-muse", "Train the masked condition generator");
    add_common(tmuse, c);
    tmuse->add_option("--modality", modality)->check(CLI::IsMember({"mask", "landmarks"}));

    auto* tcn = app.add_subcommand("train-controlnet", "Train the backbone and control branch");
    add_common(tcn, c);
    tcn->add_option("--modality", modality)->check(CLI::IsMember({"mask", "landmarks"}));

    auto* gen = app.add_subcommand("generate", "Text (or condition) to face");
    add_common(gen, c);
    gen->add_option("--prompt", prompt)->required();
    gen->add_option("--modality", modality)->check(CLI::IsMember({"mask", "landmarks"}));
    gen->add_option("--condition", condition, "Use this condition image instead of generating one")->check(CLI::ExistingFile);
    gen->add_option("--seed", seed);

    auto* ed = app.add_subcommand("edit", "Edit a face through its condition and prompt");
    add_common(ed, c);
    ed->add_option("--image", image)->required()->check(CLI::ExistingFile);
    ed->add_option("--condition", condition)->required()->check(CLI::ExistingFile);
    ed->add_option("--region", region, "Token rectangle y0,x0,y1,x1 to regenerate")->required();
    ed->add_option("--prompt", prompt)->required();
    ed->add_option("--modality", modality)->check(CLI::IsMember({"mask", "landmarks"}));
    ed->add_option("--alpha", alpha, "Embedding interpolation weight (default: edit.alpha)");
    ed->add_option("--seed", seed);

    auto* bd = app.add_subcommand("build-dataset", "Build a captioned corpus under --out");
    add_common(bd, c, false);

    auto* ev = app.add_subcommand("evaluate", "Score generated outputs against a corpus");
    add_common(ev, c, false);
    ev->add_option("--corpus", corpus, "Corpus root (default: data.root)");
    ev->add_option("--generated", generated)->required()->check(CLI::ExistingDirectory);

    CLI11_PARSE(app, argc, argv);

    try {
        const auto cfg = RunConfig::load(c.config);
        const fs::path out(c.out);
        fs::create_directories(out);
        const auto t0 = std::chrono::steady_clock::now();

        if (tvq->parsed()) print_train(cmd_train(Stage::VQ, cfg, kind, c.ckpt_dir(), out));
        if (tmuse->parsed()) print_train(cmd_train(Stage::MUSE, cfg, modality, c.ckpt_dir(), out));
        if (tcn->parsed()) print_train(cmd_train(Stage::CONTROLNET, cfg, modality, c.ckpt_dir(), out));
        if (gen->parsed()) {
            GenerationRequest req;
            req.prompt = prompt;
            req.modality = parse_modality(modality);
            req.seed = seed;
            if (!condition.empty()) req.condition = read_png(condition);
            const auto r = cmd_generate(cfg, req, c.ckpt_dir(), out);
            std::cout << "condition " << (out / "condition.png").string() << " (" << r.provenance["condition_source"].get<std::string>() << ")\n"
                      << "face " << (out / "face.png").string() << "\n";
        }
        if (ed->parsed()) {
            EditRequest req;
            req.image = read_png(image);
            req.condition = read_png(condition);
            req.prompt = prompt;
            req.modality = parse_modality(modality);
            req.seed = seed;
            if (!std::isnan(alpha)) req.alpha = alpha;
            const auto mg = muse::from_checkpoint(load_stage_checkpoint(checkpoint_path(c.ckpt_dir(), "muse_" + modality), "train-muse"), false);
            req.region = region_from_rect(region, mg.model.config().grid_height, mg.model.config().grid_width);
            const auto r = cmd_edit(cfg, req, c.ckpt_dir(), out);
            std::cout << "tokens changed " << r.tokens_changed << "\n"
                      << "condition " << (out / "condition.png").string() << "\n"
                      << "face " << (out / "face.png").string() << "\n";
        }
        if (bd->parsed()) {
            const auto r = cmd_build_dataset(cfg, out);
            std::cout << "kept " << r.report.kept << " occlusion " << r.report.occlusion << " blur " << r.report.blur
                      << " extreme_pose " << r.report.extreme_pose << "\n"
                      << "written " << r.written << " skipped " << r.skipped << " flagged " << r.flagged.size() << "\n";
        }
        if (ev->parsed()) {
            const auto r = cmd_evaluate(cfg, corpus.empty() ? cfg.data_root() : fs::path(corpus), generated, out);
            std::cout << r.table;
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << "done in " << secs << " s\n";
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const StageError& e) {
        std::cerr << "stage error [" << e.stage() << "]: " << e.what() << "\n";
        return 3;
    } catch (const BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
