#include "m3face/condition_codec.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace m3face;
using namespace m3face::condition;

namespace {

const SegmentationPalette& palette() { return default_palette(); }

// Random map over the canonical label set (one id per distinct color).
SegmentationMap random_canonical_map(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> ids;
    for (const auto& c : palette().classes())
        if (palette().canonical_id(c.id) == c.id) ids.push_back(c.id);
    SegmentationMap m(h, w);
    for (auto& l : m.labels) l = static_cast<std::uint8_t>(ids[rng.below(ids.size())]);
    return m;
}

SegmentationMap random_map(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    SegmentationMap m(h, w);
    for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng.below(static_cast<std::size_t>(palette().size())));
    return m;
}

// Independent nearest-color oracle using real-valued Euclidean distance.
int nearest_class_oracle(const Rgb& px, const SegmentationPalette& pal) {
    int best = -1;
    double best_d = 1e300;
    for (int id = 0; id < pal.size(); ++id) {
        const auto& c = pal.rgb(id);
        const double d = std::sqrt(std::pow(px[0] - c[0], 2.0) + std::pow(px[1] - c[1], 2.0) + std::pow(px[2] - c[2], 2.0));
        if (d < best_d) {
            best_d = d;
            best = id;
        }
    }
    return best;
}

LandmarkSet random_landmarks(std::uint64_t seed) {
    Rng rng(seed);
    LandmarkSet s;
    for (int i = 0; i < 68; ++i) s.points.push_back({rng.uniform(), rng.uniform()});
    return s;
}

}  // namespace

TEST(Palette, DefaultHasNineteenClassesAndSixteenColors) {
    EXPECT_EQ(palette().size(), 19);
    EXPECT_EQ(palette().distinct_colors().size(), 16u);
    for (auto [a, b] : palette().mirror_pairs()) EXPECT_EQ(palette().rgb(a), palette().rgb(b));
    EXPECT_EQ(palette().mirror_pairs().size(), 3u);
}

TEST(Palette, ShippedFileMatchesDefault) {
    const auto loaded = SegmentationPalette::load(std::string(M3FACE_DATA_DIR) + "/palette.json");
    EXPECT_EQ(loaded.to_json(), palette().to_json());
}

TEST(Palette, RejectsAsymmetricMirrorColors) {
    auto j = palette().to_json();
    j[5]["rgb"] = {1, 2, 3};
    EXPECT_THROW(SegmentationPalette::from_json(j), ValidationError);
}

TEST(Palette, RejectsNonContiguousIds) {
    auto j = palette().to_json();
    j[18]["id"] = 40;
    EXPECT_THROW(SegmentationPalette::from_json(j), ValidationError);
}

TEST(Palette, RejectsDuplicateUnpairedColors) {
    auto j = palette().to_json();
    j[2]["rgb"] = j[1]["rgb"];
    EXPECT_THROW(SegmentationPalette::from_json(j), ValidationError);
}

TEST(SegToCondition, ConstantMapGivesUniformImage) {
    const auto img = seg_to_condition(SegmentationMap(4, 5, 0), palette());
    for (auto v : img.pixels) EXPECT_EQ(v, 0);
}

TEST(SegToCondition, CheckerboardUsesBothColors) {
    SegmentationMap m(2, 2);
    m.labels = {0, 1, 1, 0};
    const auto img = seg_to_condition(m, palette());
    EXPECT_EQ(Rgb({img.at(0, 0)[0], img.at(0, 0)[1], img.at(0, 0)[2]}), palette().rgb(0));
    EXPECT_EQ(Rgb({img.at(0, 1)[0], img.at(0, 1)[1], img.at(0, 1)[2]}), palette().rgb(1));
    EXPECT_EQ(Rgb({img.at(1, 0)[0], img.at(1, 0)[1], img.at(1, 0)[2]}), palette().rgb(1));
    EXPECT_EQ(Rgb({img.at(1, 1)[0], img.at(1, 1)[1], img.at(1, 1)[2]}), palette().rgb(0));
}

TEST(SegToCondition, OutOfRangeLabelNamesPixel) {
    SegmentationMap m(3, 3);
    m.at(1, 2) = 19;
    try {
        seg_to_condition(m, palette());
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("(1,2)"), std::string::npos);
    }
}

TEST(ConditionToSeg, RoundTripOnCanonicalMaps) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto m = random_canonical_map(9, 7, s);
        EXPECT_EQ(condition_to_seg(seg_to_condition(m, palette()), palette()), m);
    }
}

TEST(ConditionToSeg, MirroredLabelsResolveToLowerId) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto m = random_map(6, 6, 100 + s);
        EXPECT_EQ(condition_to_seg(seg_to_condition(m, palette()), palette()), canonicalize(m, palette()));
    }
}

TEST(ConditionToSeg, PerturbedColorsMatchBruteForce) {
    for (const auto& c : palette().classes()) {
        for (int ch = 0; ch < 3; ++ch)
            for (int delta : {-1, 1}) {
                Rgb px = c.rgb;
                const int v = px[ch] + delta;
                if (v < 0 || v > 255) continue;
                px[ch] = static_cast<std::uint8_t>(v);
                ConditionImage img(1, 1);
                std::copy(px.begin(), px.end(), img.pixels.begin());
                const int got = condition_to_seg(img, palette()).labels[0];
                EXPECT_EQ(got, nearest_class_oracle(px, palette()));
                EXPECT_EQ(got, palette().canonical_id(c.id));
            }
    }
}

TEST(ConditionToSeg, RandomColorsMatchBruteForce) {
    Rng rng(77);
    ConditionImage img(16, 16);
    for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.below(256));
    const auto seg = condition_to_seg(img, palette());
    for (int i = 0; i < 256; ++i) {
        const Rgb px{img.pixels[i * 3], img.pixels[i * 3 + 1], img.pixels[i * 3 + 2]};
        EXPECT_EQ(seg.labels[i], nearest_class_oracle(px, palette()));
    }
}

TEST(ConditionToSeg, TieBreaksToLowestId) {
    std::vector<PaletteClass> classes;
    for (int i = 0; i < 8; ++i) classes.push_back({i, "c" + std::to_string(i), {static_cast<std::uint8_t>(i * 30), 250, 0}, std::nullopt});
    classes[3].rgb = {100, 0, 0};
    classes[7].rgb = {100, 0, 20};
    const SegmentationPalette pal(classes);
    ConditionImage img(1, 1);
    img.pixels = {100, 0, 10};
    EXPECT_EQ(condition_to_seg(img, pal).labels[0], 3);
}

TEST(ConditionToSeg, SnapIsIdempotentOnArbitraryImages) {
    Rng rng(5);
    ConditionImage img(8, 8);
    for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.below(256));
    const auto once = snap_to_palette(img, palette());
    EXPECT_EQ(snap_to_palette(once, palette()), once);
}

TEST(Landmarks, EmptySetRendersBlack) {
    LandmarkSet s;
    const auto img = rasterize_landmarks(s, 32);
    for (auto v : img.pixels) EXPECT_EQ(v, 0);
}

TEST(Landmarks, SinglePointRadiusOneIsPlusShape) {
    LandmarkSet s;
    s.convention = "five";
    s.points = {{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}};
    const auto img = rasterize_landmarks(s, 64, RenderStyle{1, {255, 255, 255}});
    int white = 0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            if (img.at(y, x)[0] == 255) {
                ++white;
                EXPECT_LE(std::abs(y - 32) + std::abs(x - 32), 1);
            }
    EXPECT_EQ(white, 5);
    EXPECT_EQ(img.at(32, 32)[0], 255);
}

TEST(Landmarks, DiscPixelCountMatchesRasterOracle) {
    for (int r : {0, 1, 2, 3}) {
        int expected = 0;
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) expected += (dx * dx + dy * dy <= r * r) ? 1 : 0;
        LandmarkSet s;
        s.convention = "five";
        s.points.assign(5, {0.5, 0.5});
        const auto img = rasterize_landmarks(s, 32, RenderStyle{r, {255, 255, 255}});
        int white = 0;
        for (std::size_t i = 0; i < img.pixels.size(); i += 3) white += img.pixels[i] == 255;
        EXPECT_EQ(white, expected) << "radius " << r;
    }
}

TEST(Landmarks, RenderIsDeterministic) {
    const auto s = random_landmarks(3);
    EXPECT_EQ(rasterize_landmarks(s, 32), rasterize_landmarks(s, 32));
}

TEST(Landmarks, TooSmallCanvasRejected) {
    EXPECT_THROW(rasterize_landmarks(random_landmarks(1), 3, RenderStyle{2, {255, 255, 255}}), ValidationError);
}

TEST(Landmarks, WrongCountOrRangeRejected) {
    LandmarkSet s = random_landmarks(2);
    s.points.pop_back();
    EXPECT_THROW(validate_landmarks(s), ValidationError);
    s = random_landmarks(2);
    s.points[3][0] = 1.5;
    EXPECT_THROW(validate_landmarks(s), ValidationError);
}

TEST(Landmarks, UnknownConventionRejected) {
    LandmarkSet s;
    s.convention = "ibug49";
    EXPECT_THROW(hflip(s), ValidationError);
}

TEST(Landmarks, ShippedConventionTableMatchesBuiltIn) {
    std::ifstream in(std::string(M3FACE_DATA_DIR) + "/landmark_conventions.json");
    const auto j = nlohmann::json::parse(in);
    for (const auto& c : j.at("conventions")) {
        const auto& conv = landmark_convention(c.at("id").get<std::string>());
        EXPECT_EQ(conv.count, c.at("count").get<int>());
        EXPECT_EQ(conv.mirror, c.at("mirror").get<std::vector<int>>());
    }
}

TEST(Landmarks, MirrorTableIsAnInvolution) {
    const auto& conv = landmark_convention("dlib68");
    for (int i = 0; i < conv.count; ++i) EXPECT_EQ(conv.mirror[conv.mirror[i]], i);
}

TEST(Flip, InvolutionOnBothModalities) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto m = random_map(7, 9, s);
        EXPECT_EQ(hflip(hflip(m, palette()), palette()), m);
        const auto l = random_landmarks(s);
        const auto back = hflip(hflip(l));
        for (std::size_t i = 0; i < l.points.size(); ++i) {
            EXPECT_DOUBLE_EQ(back.points[i][0], l.points[i][0]);
            EXPECT_DOUBLE_EQ(back.points[i][1], l.points[i][1]);
        }
    }
}

TEST(Flip, SymmetricMapIsFixed) {
    SegmentationMap m(4, 6);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 3; ++x) m.at(y, x) = m.at(y, 5 - x) = static_cast<std::uint8_t>((y * 3 + x) % 19);
    EXPECT_EQ(hflip(m, palette()), m);
}

TEST(Flip, RenderCommutesWithFlip) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto m = random_map(8, 8, 1000 + s);
        EXPECT_EQ(seg_to_condition(hflip(m, palette()), palette()), horizontal_mirror(seg_to_condition(m, palette())));
    }
}

TEST(Flip, LandmarkFlipSwapsEyes) {
    auto l = random_landmarks(9);
    const auto f = hflip(l);
    EXPECT_DOUBLE_EQ(f.points[45][0], 1.0 - l.points[36][0]);
    EXPECT_DOUBLE_EQ(f.points[45][1], l.points[36][1]);
    EXPECT_DOUBLE_EQ(f.points[30][0], 1.0 - l.points[30][0]);
}

TEST(Jitter, IdentityParamsReturnInput) {
    Rng rng(1);
    ConditionImage img(8, 8);
    for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.below(256));
    EXPECT_EQ(jitter_condition(img, JitterParams{}, 42), img);
}

TEST(Jitter, SameSeedSameOutput) {
    const auto img = seg_to_condition(random_map(16, 16, 3), palette());
    JitterParams p;
    p.brightness = 0.2;
    p.contrast = 0.3;
    p.hue_degrees = 20.0;
    p.replace_prob = 0.3;
    p.palette_colors = palette().distinct_colors();
    EXPECT_EQ(jitter_condition(img, p, 11), jitter_condition(img, p, 11));
    EXPECT_NE(jitter_condition(img, p, 11), jitter_condition(img, p, 12));
}

TEST(Jitter, FullReplacementSubstitutesEveryPaletteColor) {
    SegmentationMap m(1, 19);
    for (int i = 0; i < 19; ++i) m.labels[i] = static_cast<std::uint8_t>(i);
    const auto img = seg_to_condition(m, palette());
    JitterParams p;
    p.replace_prob = 1.0;
    p.palette_colors = palette().distinct_colors();
    for (const auto& c : p.palette_colors)
        p.replacement_table[c] = {static_cast<std::uint8_t>(255 - c[0]), static_cast<std::uint8_t>(255 - c[1]),
                                  static_cast<std::uint8_t>(255 - c[2])};
    const auto out = jitter_condition(img, p, 5);
    for (int x = 0; x < 19; ++x) {
        const Rgb before{img.at(0, x)[0], img.at(0, x)[1], img.at(0, x)[2]};
        const Rgb after{out.at(0, x)[0], out.at(0, x)[1], out.at(0, x)[2]};
        EXPECT_EQ(after, p.replacement_table.at(before)) << "class " << x;
    }
}

TEST(Jitter, OutputStaysInByteRange) {
    const auto img = seg_to_condition(random_map(8, 8, 4), palette());
    JitterParams p;
    p.brightness = 0.9;
    p.contrast = 0.9;
    const auto out = jitter_condition(img, p, 3);
    EXPECT_EQ(out.pixels.size(), img.pixels.size());
}
