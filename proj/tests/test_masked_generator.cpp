#include "m3face/masked_generator.hpp"
#include "support/finite_diff.hpp"

#include <gtest/gtest.h>

using namespace m3face;
using namespace m3face::muse;

namespace {

MaskedTransformerConfig small_config() {
    MaskedTransformerConfig c;
    c.layers = 1;
    c.heads = 2;
    c.model_dim = 16;
    c.mlp_dim = 32;
    c.codebook_size = 8;
    c.grid_height = 4;
    c.grid_width = 4;
    c.context_dim = 8;
    c.learning_rate = 3e-3;
    return c;
}

TokenGrid random_grid(const MaskedTransformerConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    TokenGrid g(c.grid_height, c.grid_width, c.mask_id(), 0);
    for (auto& t : g.tokens) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.codebook_size)));
    return g;
}

TextEmbedding caption(const MaskedTransformerConfig& c, const std::string& s) {
    return text::StubTextEncoder(c.context_dim).encode(s);
}

template <typename M>
std::map<std::string, std::vector<double>> snapshot(const M& m) {
    std::map<std::string, std::vector<double>> out;
    m.visit_params([&](const ag::Param& p) { out[p.name] = p.value; });
    return out;
}

}  // namespace

TEST(MaskRatio, EndpointsAndShape) {
    EXPECT_DOUBLE_EQ(mask_ratio(0.0), 1.0);
    EXPECT_DOUBLE_EQ(mask_ratio(1.0), 0.0);
    EXPECT_NEAR(mask_ratio(0.5), std::sqrt(0.5), 1e-15);
    double prev = 2.0;
    for (int i = 0; i <= 100; ++i) {
        const double r = mask_ratio(i / 100.0);
        EXPECT_LE(r, prev);
        prev = r;
    }
    EXPECT_THROW(mask_ratio(1.5), ValidationError);
    EXPECT_THROW(mask_ratio(-0.1), ValidationError);
}

TEST(ApplyMask, ExactCountAndDeterminism) {
    const auto c = small_config();
    const auto g = random_grid(c, 1);
    for (double ratio : {0.0, 0.1, 0.33, 0.5, 0.9, 1.0}) {
        const auto m = apply_mask(g, ratio, 7);
        EXPECT_EQ(m.positions.size(), static_cast<std::size_t>(std::llround(ratio * 16)));
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (m.masked[i]) EXPECT_EQ(m.grid.tokens[i], c.mask_id());
            else EXPECT_EQ(m.grid.tokens[i], g.tokens[i]);
        }
        EXPECT_EQ(apply_mask(g, ratio, 7).positions, m.positions);
    }
    EXPECT_NE(apply_mask(g, 0.5, 1).positions, apply_mask(g, 0.5, 2).positions);
    EXPECT_THROW(apply_mask(g, 1.1, 1), ValidationError);
}

TEST(MaskedTransformer, ZeroHeadGivesUniformCrossEntropy) {
    const auto c = small_config();
    MaskedTransformer m(c, 3);
    const auto g = random_grid(c, 4);
    const auto masked = apply_mask(g, 1.0, 5);
    const Var ce = ag::cross_entropy(m.logits(masked.grid, caption(c, "hello")), g.tokens, masked.masked);
    EXPECT_NEAR(ce.item(), std::log(8.0), 1e-12);
}

TEST(MaskedTransformer, RejectsWrongGrid) {
    const auto c = small_config();
    MaskedTransformer m(c, 3);
    TokenGrid g(3, 4, c.mask_id(), 0);
    EXPECT_THROW(m.logits(g, caption(c, "x")), ValidationError);
}

TEST(MaskedTransformer, GradientsMatchFiniteDifferences) {
    auto c = small_config();
    c.zero_init_head = false;
    MaskedTransformer m(c, 6);
    const auto g = random_grid(c, 7);
    const auto masked = apply_mask(g, 0.5, 8);
    const auto txt = caption(c, "a short caption");
    nn::zero_grad(m);
    ag::backward(ag::cross_entropy(m.logits(masked.grid, txt), g.tokens, masked.masked));
    auto f = [&] {
        ag::NoGradGuard ng;
        return ag::cross_entropy(m.logits(masked.grid, txt), g.tokens, masked.masked).item();
    };
    double worst = 0.0;
    int checked = 0;
    m.visit_params([&](ag::Param& p) {
        // Spot-check a few entries per tensor.
        for (std::size_t i = 0; i < p.size(); i += std::max<std::size_t>(1, p.size() / 5)) {
            const double fd = oracle::central_difference(p.value, i, f);
            if (std::fabs(fd) < 1e-8 && std::fabs(p.grad[i]) < 1e-8) continue;
            worst = std::max(worst, oracle::relative_error(p.grad[i], fd));
            ++checked;
        }
    });
    EXPECT_GT(checked, 30);
    EXPECT_LT(worst, 1e-4);
}

TEST(MuseTrain, ForcedZeroRatioIsNoOp) {
    auto st = make_train_state(small_config(), 1);
    const auto before = snapshot(st.model);
    const auto r = mg_train_step({{random_grid(small_config(), 2), caption(small_config(), "x")}}, st, 1,
                                 TrainStepOptions{0.0});
    EXPECT_EQ(r.loss, 0.0);
    EXPECT_EQ(r.masked_tokens, 0);
    EXPECT_EQ(snapshot(st.model), before);
    EXPECT_EQ(st.step, 1);
}

TEST(MuseTrain, OverfitsTinySet) {
    const auto c = small_config();
    auto st = make_train_state(c, 9);
    std::vector<TrainSample> data;
    for (int i = 0; i < 4; ++i) data.push_back({random_grid(c, 100 + i), caption(c, "caption number " + std::to_string(i))});
    const double before = masked_token_accuracy(st.model, data, 1.0, 1);
    for (int s = 0; s < 300; ++s) mg_train_step(data, st, 5);
    const double after = masked_token_accuracy(st.model, data, 1.0, 1);
    EXPECT_GT(after, 0.9);
    EXPECT_GT(after, before);
}

TEST(MuseTrain, NanEmbeddingAborts) {
    const auto c = small_config();
    auto st = make_train_state(c, 1);
    auto txt = caption(c, "x");
    txt.tokens[0] = std::nan("");
    EXPECT_THROW(mg_train_step({{random_grid(c, 2), txt}}, st, 1, TrainStepOptions{1.0}), NumericError);
}

TEST(StepTemperature, LinearToZero) {
    EXPECT_DOUBLE_EQ(step_temperature(2.0, 1, 5), 2.0);
    EXPECT_DOUBLE_EQ(step_temperature(2.0, 5, 5), 0.0);
    EXPECT_DOUBLE_EQ(step_temperature(2.0, 3, 5), 1.0);
    EXPECT_DOUBLE_EQ(step_temperature(1.5, 1, 1), 1.5);
}

TEST(Generate, FillsEveryCellMonotonically) {
    const auto c = small_config();
    auto cc = c;
    cc.zero_init_head = false;
    MaskedTransformer m(cc, 11);
    std::vector<DecodingState> trace;
    const auto out = generate(m, caption(c, "anything"), DecodeOptions{{5}, 1.0, 3}, &trace);
    EXPECT_FALSE(out.has_mask());
    ASSERT_EQ(trace.size(), 5u);
    std::size_t prev = 0;
    for (const auto& s : trace) {
        const auto filled = static_cast<std::size_t>(std::count_if(s.grid.tokens.begin(), s.grid.tokens.end(),
                                                                   [&](int t) { return t != c.mask_id(); }));
        EXPECT_GE(filled, prev);
        prev = filled;
    }
    EXPECT_EQ(prev, out.size());
    // Counts follow ceil((1 - cos(pi s / 2S)) * N).
    for (int s = 1; s <= 4; ++s) {
        const auto filled = std::count_if(trace[s - 1].grid.tokens.begin(), trace[s - 1].grid.tokens.end(),
                                          [&](int t) { return t != c.mask_id(); });
        EXPECT_EQ(filled, static_cast<long>(std::ceil((1.0 - std::cos(std::numbers::pi * s / 10.0)) * 16)));
    }
}

TEST(Generate, SeedDeterminism) {
    auto c = small_config();
    c.zero_init_head = false;
    MaskedTransformer m(c, 12);
    const auto txt = caption(c, "smiling");
    EXPECT_EQ(generate(m, txt, {{6}, 1.0, 4}), generate(m, txt, {{6}, 1.0, 4}));
    // Greedy decoding ignores the seed.
    EXPECT_EQ(generate(m, txt, {{6}, 0.0, 1}), generate(m, txt, {{6}, 0.0, 2}));
}

TEST(Inpaint, KeptCellsPreservedAndEmptyKeepMatchesGenerate) {
    auto c = small_config();
    c.zero_init_head = false;
    MaskedTransformer m(c, 13);
    const auto txt = caption(c, "glasses");
    const auto src = random_grid(c, 14);
    std::vector<bool> keep(src.size(), false);
    for (std::size_t i = 0; i < keep.size(); i += 3) keep[i] = true;
    std::vector<DecodingState> trace;
    const auto out = inpaint(m, src, keep, txt, {{4}, 1.0, 9}, &trace);
    for (const auto& s : trace)
        for (std::size_t i = 0; i < keep.size(); ++i)
            if (keep[i]) EXPECT_EQ(s.grid.tokens[i], src.tokens[i]);
    EXPECT_FALSE(out.has_mask());
    EXPECT_EQ(inpaint(m, src, std::vector<bool>(src.size(), false), txt, {{4}, 1.0, 9}), generate(m, txt, {{4}, 1.0, 9}));
    // Keeping everything returns the source unchanged.
    EXPECT_EQ(inpaint(m, src, std::vector<bool>(src.size(), true), txt, {{4}, 1.0, 9}), src);
}

TEST(Inpaint, KeptMaskCellRejected) {
    const auto c = small_config();
    MaskedTransformer m(c, 13);
    auto src = random_grid(c, 14);
    src.tokens[0] = c.mask_id();
    std::vector<bool> keep(src.size(), false);
    keep[0] = true;
    EXPECT_THROW(inpaint(m, src, keep, caption(c, "x"), {}), ValidationError);
}

TEST(MuseCheckpoint, RoundTrip) {
    const auto c = small_config();
    auto st = make_train_state(c, 15);
    mg_train_step({{random_grid(c, 16), caption(c, "x")}}, st, 2, TrainStepOptions{0.5});
    const auto ck = to_checkpoint(st, "segmentation");
    const auto back = from_checkpoint(deserialize_checkpoint(serialize_checkpoint(ck)));
    EXPECT_EQ(back.step, 1);
    EXPECT_EQ(snapshot(back.model), snapshot(st.model));
    EXPECT_EQ(ck.extra["task"], "segmentation");
    EXPECT_EQ(back.optimizer.first_moments(), st.optimizer.first_moments());
}

TEST(Generate, SingleStepGreedyMatchesDirectArgmax) {
    auto c = small_config();
    c.zero_init_head = false;
    MaskedTransformer m(c, 21);
    const auto txt = caption(c, "one pass");
    TokenGrid blank(c.grid_height, c.grid_width, c.mask_id(), c.mask_id());
    std::vector<int> expected;
    {
        ag::NoGradGuard ng;
        const auto logits = m.logits(blank, txt).value();
        for (int p = 0; p < c.cells(); ++p) {
            int best = 0;
            for (int k = 1; k < c.codebook_size; ++k)
                if (logits[static_cast<std::size_t>(p) * c.codebook_size + k] > logits[static_cast<std::size_t>(p) * c.codebook_size + best]) best = k;
            expected.push_back(best);
        }
    }
    EXPECT_EQ(generate(m, txt, {{1}, 0.0, 5}).tokens, expected);
    EXPECT_THROW(generate(m, txt, {{0}, 0.0, 5}), ValidationError);
}

TEST(MuseTrain, LossIgnoresUnmaskedTargets) {
    auto c = small_config();
    c.zero_init_head = false;
    MaskedTransformer m(c, 22);
    const auto g = random_grid(c, 23);
    const auto masked = apply_mask(g, 0.5, 24);
    auto targets = g.tokens;
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (!masked.masked[i]) targets[i] = (targets[i] + 1) % c.codebook_size;
    ag::NoGradGuard ng;
    const auto txt = caption(c, "x");
    EXPECT_EQ(ag::cross_entropy(m.logits(masked.grid, txt), g.tokens, masked.masked).item(),
              ag::cross_entropy(m.logits(masked.grid, txt), targets, masked.masked).item());
}
