#include "m3face/imagic_editor.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace m3face;
using namespace m3face::imagic;
using diffusion::DiffusionConfig;

namespace {

DiffusionConfig toy_config() {
    DiffusionConfig c;
    c.latent_channels = 3;
    c.latent_size = 4;
    c.condition_size = 8;
    c.base_channels = 4;
    c.mid_channels = 6;
    c.time_dim = 4;
    c.context_dim = 4;
    c.heads = 2;
    c.hint_channels = 3;
    c.timesteps = 50;
    return c;
}

std::vector<double> uniform_vec(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform();
    return v;
}

DiffusionModel toy_model() {
    DiffusionModel m(toy_config(), 1);
    m.attach_control(2);
    return m;
}

std::map<std::string, std::vector<double>> snapshot(const DiffusionModel& m) {
    std::map<std::string, std::vector<double>> out;
    m.backbone.visit_params([&](const ag::Param& p) { out[p.name] = p.value; });
    m.control->visit_params([&](const ag::Param& p) { out[p.name] = p.value; });
    return out;
}

std::set<std::string> changed(const DiffusionModel& a, const DiffusionModel& b) {
    const auto sa = snapshot(a), sb = snapshot(b);
    std::set<std::string> out;
    for (const auto& [k, v] : sa)
        if (sb.at(k) != v) out.insert(k);
    return out;
}

}  // namespace

TEST(Interpolate, EndpointsAndMidpoint) {
    text::StubTextEncoder enc(4);
    const auto a = enc.encode("old face"), b = enc.encode("new face");
    EXPECT_EQ(interpolate_embedding(a, b, 0.0), a);
    EXPECT_EQ(interpolate_embedding(a, b, 1.0), b);
    const auto mid = interpolate_embedding(a, b, 0.5);
    for (std::size_t i = 0; i < a.tokens.size(); ++i) EXPECT_DOUBLE_EQ(mid.tokens[i], (a.tokens[i] + b.tokens[i]) / 2.0);
    EXPECT_THROW(interpolate_embedding(a, enc.encode("three word caption"), 0.5), ValidationError);
    EXPECT_THROW(interpolate_embedding(a, b, std::nan("")), ValidationError);
}

TEST(Interpolate, DistanceGrowsWithAlpha) {
    text::StubTextEncoder enc(4);
    const auto a = enc.encode("old face"), b = enc.encode("new face");
    double prev = -1.0;
    for (double alpha : {0.0, 0.4, 0.8, 1.0}) {
        const double d = embedding_distance(interpolate_embedding(a, b, alpha), a);
        EXPECT_NEAR(d, alpha * embedding_distance(a, b), 1e-12);
        EXPECT_GT(d, prev);
        prev = d;
    }
}

TEST(LayerSelection, Parse) {
    EXPECT_EQ(LayerSelection::parse("upblocks").mode, LayerSelection::Mode::AllUpBlocks);
    EXPECT_EQ(LayerSelection::parse("last:1").k, 1);
    EXPECT_THROW(LayerSelection::parse("last:x"), ValidationError);
    EXPECT_THROW(LayerSelection::parse("down"), ValidationError);
    EXPECT_THROW(selected_prefixes(LayerSelection::last_k(0)), ValidationError);
    EXPECT_THROW(selected_prefixes(LayerSelection::last_k(3)), ValidationError);
}

TEST(OptimizeEmbedding, ZeroStepsReturnsTarget) {
    text::StubTextEncoder enc(4);
    const auto m = toy_model();
    const auto e = enc.encode("target");
    EXPECT_EQ(optimize_embedding(m, uniform_vec(48, 1), uniform_vec(192, 2), e, {0}).e_opt, e);
}

TEST(OptimizeEmbedding, BestLossNonIncreasingAndImproves) {
    text::StubTextEncoder enc(4);
    const auto m = toy_model();
    const auto before = snapshot(m);
    const auto r = optimize_embedding(m, uniform_vec(48, 3), uniform_vec(192, 4), enc.encode("target"), {40, 5e-2, 4, 7});
    ASSERT_EQ(r.best_losses.size(), 41u);
    for (std::size_t i = 1; i < r.best_losses.size(); ++i) EXPECT_LE(r.best_losses[i], r.best_losses[i - 1]);
    EXPECT_LT(r.best_losses.back(), r.losses.front());
    EXPECT_EQ(snapshot(m), before);
    EXPECT_TRUE(r.e_opt.same_shape(enc.encode("target")));
}

TEST(OptimizeEmbedding, DivergenceAborts) {
    text::StubTextEncoder enc(4);
    const auto m = toy_model();
    OptimizeOptions o{5, 1e3, 4, 7};
    o.divergence_factor = 1.0 + 1e-12;  // any increase counts as divergence
    EXPECT_THROW(optimize_embedding(m, uniform_vec(48, 3), uniform_vec(192, 4), enc.encode("target"), o), NumericError);
}

TEST(Finetune, ZeroStepsIdentical) {
    text::StubTextEncoder enc(4);
    const auto m = toy_model();
    const auto out = finetune_model(m, uniform_vec(48, 5), uniform_vec(192, 6), enc.encode("x"), {0, 5e-5, {}, 1});
    EXPECT_EQ(snapshot(out), snapshot(m));
}

TEST(Finetune, OnlySelectedBlocksChange) {
    text::StubTextEncoder enc(4);
    const auto m = toy_model();
    const auto img = uniform_vec(48, 5), cond = uniform_vec(192, 6);
    const auto e = enc.encode("a face with many words");
    const auto last = changed(m, finetune_model(m, img, cond, e, {3, 1e-2, LayerSelection::last_k(1), 1}));
    const auto all = changed(m, finetune_model(m, img, cond, e, {3, 1e-2, LayerSelection::all_up_blocks(), 1}));
    ASSERT_FALSE(last.empty());
    for (const auto& n : last) EXPECT_EQ(n.rfind("unet.up.1.", 0), 0u) << n;
    for (const auto& n : all) EXPECT_EQ(n.rfind("unet.up.", 0), 0u) << n;
    // Every up.1 tensor changes, and the full selection is a strict superset.
    m.backbone.visit_params([&](const ag::Param& p) {
        if (p.name.rfind("unet.up.1.", 0) == 0) EXPECT_TRUE(last.count(p.name)) << p.name;
    });
    EXPECT_TRUE(std::includes(all.begin(), all.end(), last.begin(), last.end()));
    EXPECT_GT(all.size(), last.size());
}

TEST(EditSession, StagesRequiredInOrder) {
    auto enc = std::make_shared<text::StubTextEncoder>(4);
    EditSession s(toy_model(), enc);
    const auto cond = uniform_vec(192, 6);
    try {
        s.edit(cond, 0.5, {});
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "input");
    }
    s.set_input(uniform_vec(48, 5), cond, "a smiling face");
    try {
        s.finetune();
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "optimize_embedding");
    }
    s.optimize({3, 1e-3, 2, 1});
    try {
        s.edit(cond, 0.5, {});
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "finetune_model");
    }
}

TEST(EditSession, DeterministicAndAlphaMatters) {
    auto enc = std::make_shared<text::StubTextEncoder>(4);
    EditSession s(toy_model(), enc);
    const auto cond = uniform_vec(192, 6), edited = uniform_vec(192, 7);
    s.set_input(uniform_vec(48, 5), cond, "a smiling face with glasses");
    s.optimize({10, 5e-2, 2, 1});
    s.finetune({5, 1e-2, LayerSelection::all_up_blocks(), 2});
    const diffusion::SampleOptions o{6, 3.0, 9, diffusion::Sampler::DDIM, 0.0};
    const auto a0 = edit(s, cond, 0.0, o);
    EXPECT_EQ(a0, edit(s, cond, 0.0, o));
    EXPECT_NE(a0, edit(s, cond, 1.0, o));
    EXPECT_EQ(edit(s, edited, 0.4, o).size(), 48u);
}
