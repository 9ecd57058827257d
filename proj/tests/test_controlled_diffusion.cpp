#include "m3face/controlled_diffusion.hpp"
#include "support/finite_diff.hpp"

#include <gtest/gtest.h>

using namespace m3face;
using namespace m3face::diffusion;

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

std::vector<CdSample> toy_data(const DiffusionConfig& c, int n, std::uint64_t seed) {
    std::vector<CdSample> out;
    for (int i = 0; i < n; ++i)
        out.push_back({uniform_vec(3ULL * c.latent_size * c.latent_size, seed + 2 * i),
                       uniform_vec(3ULL * c.condition_size * c.condition_size, seed + 2 * i + 1),
                       "face number " + std::to_string(i)});
    return out;
}

template <typename M>
std::map<std::string, std::vector<double>> snapshot(const M& m) {
    std::map<std::string, std::vector<double>> out;
    m.visit_params([&](const ag::Param& p) { out[p.name] = p.value; });
    return out;
}

// Fills every zero-initialized tensor of the branch so gradients reach its
// interior.
void perturb_zero_convs(ControlBranch& b, std::uint64_t seed) {
    Rng rng(seed);
    for (auto* conv : {&b.hint_out, &b.zero0, &b.zero1, &b.zero_mid})
        for (auto& v : conv->weight.value) v = 0.3 * rng.normal();
}

}  // namespace

TEST(NoiseSchedule, LinearEndpointsAndMonotone) {
    const auto s = NoiseSchedule::linear(1000);
    EXPECT_EQ(s.alpha_bar[0], 1.0);
    EXPECT_NEAR(s.betas[1], 1e-4, 1e-18);
    EXPECT_NEAR(s.betas[1000], 2e-2, 1e-15);
    for (int t = 1; t <= 1000; ++t) {
        EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
        EXPECT_GT(s.alpha_bar[t], 0.0);
    }
    // Reproducible from the beta list.
    const auto again = NoiseSchedule::from_betas(std::vector<double>(s.betas.begin() + 1, s.betas.end()));
    EXPECT_EQ(again.alpha_bar, s.alpha_bar);
    EXPECT_THROW(NoiseSchedule::from_betas({0.5, 1.0}), ValidationError);
}

TEST(ForwardDiffuse, ClosedFormCases) {
    const auto s = NoiseSchedule::linear(100);
    const std::vector<double> x0 = {0.3, -1.2, 2.0}, e = {1.0, -0.5, 0.25};
    EXPECT_EQ(forward_diffuse(s, x0, 0, e), x0);
    const auto xt = forward_diffuse(s, {0.0, 0.0, 0.0}, 40, e);
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(xt[i], std::sqrt(1.0 - s.alpha_bar[40]) * e[i]);
    EXPECT_THROW(forward_diffuse(s, x0, 101, e), ValidationError);
    EXPECT_THROW(forward_diffuse(s, x0, -1, e), ValidationError);
}

TEST(ForwardDiffuse, MonteCarloVariance) {
    const auto s = NoiseSchedule::linear(1000);
    Rng rng(3);
    const int n = 10000, t = 300;
    const double sd0 = 2.0;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = forward_diffuse(s, {sd0 * rng.normal()}, t, {rng.normal()})[0];
        sum += v;
        sq += v * v;
    }
    const double var = sq / n - (sum / n) * (sum / n);
    const double expected = s.alpha_bar[t] * sd0 * sd0 + (1.0 - s.alpha_bar[t]);
    EXPECT_NEAR(var / expected, 1.0, 0.05);
}

TEST(ControlBranch, FreshResidualsAreExactlyZero) {
    const auto c = toy_config();
    DiffusionModel m(c, 1);
    m.attach_control(2);
    const auto cond = uniform_vec(3 * 64, 3);
    const auto x = Rng(4).normal_vector(m.latent_numel());
    text::StubTextEncoder enc(4);
    for (const auto& r : control_residuals(m, cond, x, 17, enc.encode("any")))
        for (double v : r) EXPECT_EQ(v, 0.0);
}

TEST(ControlBranch, ResolutionMismatchRejected) {
    DiffusionModel m(toy_config(), 1);
    m.attach_control(2);
    text::StubTextEncoder enc(4);
    EXPECT_THROW(control_residuals(m, uniform_vec(3 * 16, 1), std::vector<double>(m.latent_numel(), 0.0), 1, enc.encode("x")),
                 ValidationError);
}

TEST(ControlBranch, ZeroInitIsIdentityForSampling) {
    const auto c = toy_config();
    DiffusionModel plain(c, 5);
    DiffusionModel with = plain;
    with.attach_control(6);
    text::StubTextEncoder enc(4);
    const auto cond = uniform_vec(3 * 64, 7);
    const SampleOptions opts{10, 3.0, 11, Sampler::DDIM, 0.0};
    EXPECT_EQ(sample(plain, enc.encode("hello"), enc.encode_unconditional(), nullptr, opts),
              sample(with, enc.encode("hello"), enc.encode_unconditional(), &cond, opts));
}

TEST(ControlBranch, OneUpdateMakesResidualsNonzero) {
    const auto c = toy_config();
    text::StubTextEncoder enc(4);
    TrainRecipe recipe{1, 2, 1, 1e-2};
    auto st = make_train_state(DiffusionModel(c, 8), recipe, 9);
    const auto data = toy_data(c, 2, 10);
    ASSERT_TRUE(cd_train_step(data, recipe, GuidanceConfig{}, st, enc, 1).updated);
    double mx = 0.0;
    for (const auto& r : control_residuals(st.model, data[0].condition, std::vector<double>(st.model.latent_numel(), 0.1), 5,
                                           enc.encode("x")))
        for (double v : r) mx = std::max(mx, std::fabs(v));
    EXPECT_GT(mx, 0.0);
}

TEST(CdTrain, BackboneFrozenAndAccumulationHonored) {
    const auto c = toy_config();
    text::StubTextEncoder enc(4);
    TrainRecipe recipe{1, 2, 3, 1e-3};
    auto st = make_train_state(DiffusionModel(c, 12), recipe, 13);
    const auto backbone = snapshot(st.model.backbone);
    const auto branch = snapshot(*st.model.control);
    const auto data = toy_data(c, 2, 14);
    EXPECT_FALSE(cd_train_step(data, recipe, {}, st, enc, 1).updated);
    EXPECT_FALSE(cd_train_step(data, recipe, {}, st, enc, 1).updated);
    EXPECT_EQ(snapshot(*st.model.control), branch);
    EXPECT_TRUE(cd_train_step(data, recipe, {}, st, enc, 1).updated);
    EXPECT_EQ(st.step, 1);
    EXPECT_NE(snapshot(*st.model.control), branch);
    for (int i = 0; i < 6; ++i) cd_train_step(data, recipe, {}, st, enc, 1);
    EXPECT_EQ(snapshot(st.model.backbone), backbone);
}

TEST(CdTrain, FullFractionReplacesEveryCaption) {
    const auto c = toy_config();
    auto rec = std::make_shared<text::RecordingTextEncoder>(std::make_shared<text::StubTextEncoder>(4));
    TrainRecipe recipe{1, 4, 1, 1e-3};
    GuidanceConfig g;
    g.simple_prompt_fraction = 1.0;
    auto st = make_train_state(DiffusionModel(c, 15), recipe, 16);
    const auto r = cd_train_step(toy_data(c, 4, 17), recipe, g, st, *rec, 1);
    EXPECT_EQ(r.simple_prompts, 4);
    for (const auto& s : rec->seen()) EXPECT_EQ(s, "a high-quality portrait of a face");
    EXPECT_EQ(rec->seen().size(), 4u);
}

TEST(CdTrain, NanAborts) {
    const auto c = toy_config();
    text::StubTextEncoder enc(4);
    TrainRecipe recipe{1, 1, 1, 1e-3};
    auto st = make_train_state(DiffusionModel(c, 15), recipe, 16);
    auto data = toy_data(c, 1, 17);
    data[0].image[0] = std::nan("");
    EXPECT_THROW(cd_train_step(data, recipe, {}, st, enc, 1), NumericError);
}

TEST(CdGradient, ToyUNetMatchesFiniteDifferences) {
    const auto c = toy_config();
    DiffusionModel m(c, 20);
    m.attach_control(21);
    perturb_zero_convs(*m.control, 22);
    text::StubTextEncoder enc(4);
    const auto emb = enc.encode("gradient check");
    const auto cond = uniform_vec(3 * 64, 23);
    const auto x0 = uniform_vec(m.latent_numel(), 24);
    const auto eps = Rng(25).normal_vector(m.latent_numel());
    const int t = 20;
    const auto x_t = forward_diffuse(m.schedule, x0, t, eps);
    auto loss = [&] { return ag::mse(m.predict_noise(m.latent_var(x_t), t, m.context(emb), &cond), eps); };
    nn::zero_grad(m.backbone);
    nn::zero_grad(*m.control);
    ag::backward(loss());
    auto f = [&] {
        ag::NoGradGuard ng;
        return loss().item();
    };
    int checked = 0;
    double worst = 0.0;
    auto visit = [&](ag::Param& p) {
        for (std::size_t i = 0; i < p.size(); i += std::max<std::size_t>(1, p.size() / 3)) {
            const double fd = oracle::central_difference(p.value, i, f);
            if (std::fabs(fd) < 1e-9 && std::fabs(p.grad[i]) < 1e-9) continue;
            worst = std::max(worst, oracle::relative_error(p.grad[i], fd));
            ++checked;
        }
    };
    m.backbone.visit_params(visit);
    m.control->visit_params(visit);
    EXPECT_GE(checked, 100);
    EXPECT_LT(worst, 1e-3);
}

TEST(Guidance, ScaleZeroIsUnconditionalAndAffineInScale) {
    const auto c = toy_config();
    DiffusionModel m(c, 26);
    text::StubTextEncoder enc(4);
    const auto x = Rng(27).normal_vector(m.latent_numel());
    const auto cond = enc.encode("smiling woman"), unc = enc.encode_unconditional();
    std::vector<double> direct;
    {
        ag::NoGradGuard ng;
        direct = m.predict_noise(m.latent_var(x), 9, m.context(unc), nullptr).value();
    }
    EXPECT_EQ(guided_noise(m, x, 9, cond, unc, nullptr, 0.0), direct);
    const double s = 2.5;
    const auto e0 = guided_noise(m, x, 9, cond, unc, nullptr, 0.0);
    const auto e1 = guided_noise(m, x, 9, cond, unc, nullptr, s);
    const auto e2 = guided_noise(m, x, 9, cond, unc, nullptr, 2 * s);
    for (std::size_t i = 0; i < e0.size(); ++i) EXPECT_NEAR(e2[i] - e0[i], 2 * (e1[i] - e0[i]), 1e-6);
}

TEST(Sampling, DeterministicAndShaped) {
    const auto c = toy_config();
    DiffusionModel m(c, 28);
    text::StubTextEncoder enc(4);
    const SampleOptions ddim{8, 2.0, 3, Sampler::DDIM, 0.0};
    const auto a = sample(m, enc.encode("x"), enc.encode_unconditional(), nullptr, ddim);
    EXPECT_EQ(a.size(), 3u * 4 * 4);
    EXPECT_EQ(a, sample(m, enc.encode("x"), enc.encode_unconditional(), nullptr, ddim));
    const SampleOptions ddpm{8, 2.0, 3, Sampler::DDPM, 0.0};
    const auto b = sample(m, enc.encode("x"), enc.encode_unconditional(), nullptr, ddpm);
    EXPECT_EQ(b, sample(m, enc.encode("x"), enc.encode_unconditional(), nullptr, ddpm));
    EXPECT_NE(a, b);
    EXPECT_THROW(sample(m, enc.encode("x"), enc.encode_unconditional(), nullptr, {51, 1.0, 1, Sampler::DDIM, 0.0}),
                 ValidationError);
}

TEST(Sampling, UnloadedModelRejected) {
    DiffusionModel m;
    text::StubTextEncoder enc(4);
    EXPECT_THROW(sample(m, enc.encode("x"), enc.encode_unconditional(), nullptr, {}), ValidationError);
}

TEST(Sampling, TimestepsEvenlySpaced) {
    EXPECT_EQ(sampling_timesteps(1000, 4), (std::vector<int>{250, 500, 750, 1000}));
    EXPECT_EQ(sampling_timesteps(10, 10).front(), 1);
}

TEST(CdCheckpoint, RoundTrip) {
    const auto c = toy_config();
    text::StubTextEncoder enc(4);
    TrainRecipe recipe{1, 1, 1, 1e-2};
    auto st = make_train_state(DiffusionModel(c, 40), recipe, 41);
    cd_train_step(toy_data(c, 1, 42), recipe, {}, st, enc, 1);
    const auto back = train_state_from_checkpoint(deserialize_checkpoint(serialize_checkpoint(to_checkpoint(st))), recipe);
    EXPECT_EQ(snapshot(back.model.backbone), snapshot(st.model.backbone));
    EXPECT_EQ(snapshot(*back.model.control), snapshot(*st.model.control));
    EXPECT_EQ(back.micro, 1);
    EXPECT_EQ(back.optimizer.first_moments(), st.optimizer.first_moments());
}

TEST(CdTrain, LossDropsOnTinySet) {
    const auto c = toy_config();
    text::StubTextEncoder enc(4);
    TrainRecipe recipe{1, 4, 1, 3e-3};
    GuidanceConfig g;
    auto st = make_train_state(DiffusionModel(c, 50), recipe, 51);
    const auto data = toy_data(c, 4, 52);
    const auto probes = make_probes(st.model, data.size(), 4, 53);
    const double before = probe_loss(st.model, data, probes, enc);
    for (int i = 0; i < 200; ++i) cd_train_step(data, recipe, g, st, enc, 54);
    EXPECT_LT(probe_loss(st.model, data, probes, enc), before);
}
