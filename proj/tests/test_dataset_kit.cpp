#include "m3face/dataset_kit.hpp"
#include "m3face/synthetic_faces.hpp"

#include <gtest/gtest.h>

#include <cctype>
#include <fstream>

using namespace m3face;
using namespace m3face::dataset;

namespace {

std::set<std::string> words(const std::string& s) {
    std::set<std::string> out;
    std::string cur;
    for (char c : s) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!cur.empty()) {
            out.insert(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.insert(cur);
    return out;
}

bool mentions_any(const std::string& caption, const std::vector<std::string>& vocab) {
    const auto w = words(caption);
    for (const auto& v : vocab)
        if (w.count(v)) return true;
    return false;
}

const std::vector<std::string> kMaleWords = {"man", "gentleman", "guy", "male", "boy"};
const std::vector<std::string> kFemaleWords = {"woman", "lady", "girl", "female"};
const std::vector<std::string> kGlassesWords = {"glasses", "eyeglasses", "spectacles"};

double smooth_pattern(double x, double y) { return 128.0 + 90.0 * std::sin(0.11 * x) * std::cos(0.07 * y + 0.4); }

// Direct 2D Keys bicubic sampler over a 4x4 neighbourhood.
RgbImage bicubic_oracle(const RgbImage& img, int oh, int ow) {
    auto w = [](double t) {
        t = std::fabs(t);
        if (t <= 1) return 1.5 * t * t * t - 2.5 * t * t + 1;
        if (t < 2) return -0.5 * t * t * t + 2.5 * t * t - 4 * t + 2;
        return 0.0;
    };
    RgbImage out(oh, ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            const double sx = (x + 0.5) * img.width / ow - 0.5, sy = (y + 0.5) * img.height / oh - 0.5;
            const int bx = static_cast<int>(std::floor(sx)), by = static_cast<int>(std::floor(sy));
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int j = by - 1; j <= by + 2; ++j)
                    for (int i = bx - 1; i <= bx + 2; ++i)
                        acc += w(sx - i) * w(sy - j) *
                               img.at(std::clamp(j, 0, img.height - 1), std::clamp(i, 0, img.width - 1))[c];
                out.at(y, x)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
            }
        }
    return out;
}

FaceRecord make_record(const std::string& id) {
    FaceRecord r;
    r.id = id;
    r.image = "images/" + id + ".png";
    r.seg = "seg/" + id + ".png";
    r.landmarks = "landmarks/" + id + ".json";
    r.attrs.set("Smiling", true);
    r.captions["en"] = {"a", "b", "c"};
    return r;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("m3face_dataset_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST(Attributes, JsonRoundTripAndStrictKeys) {
    AttributeVector a;
    a.set("Eyeglasses", true);
    a.set("Young", true);
    EXPECT_EQ(AttributeVector::from_json(a.to_json()), a);
    auto j = a.to_json();
    j.erase("Young");
    EXPECT_THROW(AttributeVector::from_json(j), ValidationError);
    j["Not_An_Attribute"] = true;
    EXPECT_THROW(AttributeVector::from_json(j), ValidationError);
    EXPECT_THROW(attribute_index("Beard"), ValidationError);
    EXPECT_EQ(attribute_names().size(), 40u);
}

TEST(Captions, ShippedBankMatchesBuiltIn) {
    const auto loaded = CaptionBank::load(std::string(M3FACE_DATA_DIR) + "/caption_bank.json");
    EXPECT_EQ(loaded.to_json(), default_caption_bank().to_json());
}

TEST(Captions, DistinctDeterministicAndCounted) {
    AttributeVector a;
    a.set("Smiling", true);
    a.set("Black_Hair", true);
    const auto c1 = captions_from_attributes(a, 3, 11);
    ASSERT_EQ(c1.size(), 3u);
    EXPECT_EQ(std::set<std::string>(c1.begin(), c1.end()).size(), 3u);
    EXPECT_EQ(captions_from_attributes(a, 3, 11), c1);
    EXPECT_NE(captions_from_attributes(a, 3, 12), c1);
    EXPECT_THROW(captions_from_attributes(a, 0, 1), ValidationError);
    EXPECT_EQ(captions_from_attributes(AttributeVector{}, 3, 5).size(), 3u);
}

TEST(Captions, GlassesAndGenderReferents) {
    AttributeVector m;
    m.set("Male", true);
    m.set("Eyeglasses", true);
    AttributeVector f;
    f.set("Eyeglasses", true);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (const auto& c : captions_from_attributes(m, 3, seed)) {
            EXPECT_TRUE(mentions_any(c, kGlassesWords)) << c;
            EXPECT_TRUE(mentions_any(c, kMaleWords)) << c;
        }
        for (const auto& c : captions_from_attributes(f, 3, seed)) {
            EXPECT_TRUE(mentions_any(c, kGlassesWords)) << c;
            EXPECT_FALSE(mentions_any(c, kMaleWords)) << c;
            EXPECT_FALSE(mentions_any(c, kFemaleWords)) << c;
        }
    }
}

TEST(Captions, EverySingleAttributeIsVerbalized) {
    const auto& bank = default_caption_bank();
    for (const auto& name : attribute_names()) {
        AttributeVector a;
        a.set(name, true);
        for (const auto& c : captions_from_attributes(a, 3, 3)) {
            if (name == "Male") {
                EXPECT_TRUE(mentions_any(c, kMaleWords)) << c;
                continue;
            }
            bool found = false;
            for (const auto& p : bank.phrases.at(name)) found |= c.find(p) != std::string::npos;
            EXPECT_TRUE(found) << name << ": " << c;
        }
    }
}

TEST(Captions, BankValidationRejectsMissingPhrasings) {
    auto bank = default_caption_bank();
    bank.phrases["Eyeglasses"] = {"with glasses"};
    EXPECT_THROW(bank.validate(), ValidationError);
}

TEST(Translation, StubTagsAndRegistry) {
    const auto tr = make_translator("stub");
    const auto out = translate({"a face", "a man"}, {"es", "fr"}, *tr);
    ASSERT_EQ(out.size(), 2u);
    EXPECT_EQ(out.at("es")[0], "[es] a face");
    EXPECT_EQ(out.at("fr")[1], "[fr] a man");
    EXPECT_THROW(make_translator("cloud"), BackendError);
}

TEST(Translation, EmptyLanguageListAndFullFanOut) {
    const auto tr = make_translator("stub");
    EXPECT_TRUE(translate({"a face"}, {}, *tr).empty());
    AttributeVector a;
    a.set("Smiling", true);
    const auto en = captions_from_attributes(a, 3, 2);
    auto all = translate(en, {"es", "fr", "it", "de"}, *tr);
    all["en"] = en;
    std::size_t n = 0;
    for (const auto& [lang, caps] : all) n += caps.size();
    EXPECT_EQ(n, 15u);
}

TEST(Captions, AllFalseVectorHasNoAttributePhrases) {
    const auto& bank = default_caption_bank();
    for (std::uint64_t seed = 0; seed < 10; ++seed)
        for (const auto& c : captions_from_attributes(AttributeVector{}, 3, seed)) {
            EXPECT_FALSE(mentions_any(c, kMaleWords)) << c;
            for (const auto& [name, phrases] : bank.phrases)
                for (const auto& p : phrases) EXPECT_EQ(c.find(p), std::string::npos) << name << ": " << c;
        }
}

TEST(Alignment, TemplateFileMatchesBuiltIn) {
    EXPECT_EQ(load_template(std::string(M3FACE_DATA_DIR) + "/face_template.json"), default_template());
}

TEST(Alignment, SimilarityRecoversKnownTransform) {
    const Similarity truth{1.3 * std::cos(0.4), 1.3 * std::sin(0.4), 5.0, -2.0};
    std::vector<std::array<double, 2>> src = {{0, 0}, {10, 1}, {3, 7}, {-4, 2}}, dst;
    for (const auto& p : src) dst.push_back(truth.apply(p[0], p[1]));
    const auto est = estimate_similarity(src, dst);
    EXPECT_NEAR(est.a, truth.a, 1e-10);
    EXPECT_NEAR(est.b, truth.b, 1e-10);
    EXPECT_NEAR(est.tx, truth.tx, 1e-9);
    EXPECT_NEAR(est.ty, truth.ty, 1e-9);
    const auto back = est.inverse().apply(dst[2][0], dst[2][1]);
    EXPECT_NEAR(back[0], 3.0, 1e-9);
    EXPECT_NEAR(back[1], 7.0, 1e-9);
}

TEST(Alignment, TranslatedTemplateIsExactCrop) {
    Rng rng(4);
    RgbImage img(48, 48);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    SegmentationMap seg(48, 48);
    for (auto& l : seg.labels) l = static_cast<std::uint8_t>(rng.below(19));
    const int out = 24, ox = 9, oy = 13;
    Anchors anchors;
    for (std::size_t i = 0; i < 5; ++i) anchors[i] = {default_template()[i][0] * out + ox, default_template()[i][1] * out + oy};
    const auto crop = align_crop(img, anchors, out);
    const auto labels = align_labels(seg, anchors, out);
    for (int y = 0; y < out; ++y)
        for (int x = 0; x < out; ++x) {
            for (int c = 0; c < 3; ++c) ASSERT_EQ(crop.at(y, x)[c], img.at(y + oy, x + ox)[c]);
            ASSERT_EQ(labels.at(y, x), seg.at(y + oy, x + ox));
        }
}

TEST(Alignment, RotatedFaceIsDerotated) {
    // Source is the pattern seen through a known similarity; aligning with
    // the correspondingly moved anchors must recover the pattern.
    const double angle = 10.0 * 3.14159265358979 / 180.0, s = 1.5;
    const int out = 32, in = 80;
    const Similarity t{s * std::cos(angle), s * std::sin(angle), 22.0, 8.0};
    const Similarity inv = t.inverse();
    RgbImage img(in, in);
    for (int y = 0; y < in; ++y)
        for (int x = 0; x < in; ++x) {
            const auto q = inv.apply(x + 0.5, y + 0.5);
            const auto v = static_cast<std::uint8_t>(std::lround(smooth_pattern(q[0], q[1])));
            for (int c = 0; c < 3; ++c) img.at(y, x)[c] = v;
        }
    Anchors anchors;
    for (std::size_t i = 0; i < 5; ++i) anchors[i] = t.apply(default_template()[i][0] * out, default_template()[i][1] * out);
    const auto crop = align_crop(img, anchors, out);
    double err = 0.0;
    for (int y = 0; y < out; ++y)
        for (int x = 0; x < out; ++x) err += std::fabs(crop.at(y, x)[0] - smooth_pattern(x + 0.5, y + 0.5));
    EXPECT_LT(err / (out * out), 2.0);

    LandmarkSet five{{}, "five"};
    for (const auto& a : anchors) five.points.push_back({a[0] / in, a[1] / in});
    const auto aligned = align_landmarks(five, in, anchors, out);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(aligned.points[i][0], default_template()[i][0], 1e-9);
        EXPECT_NEAR(aligned.points[i][1], default_template()[i][1], 1e-9);
    }
}

TEST(Alignment, DegenerateAnchorsRejected) {
    RgbImage img(32, 32);
    Anchors line = {{{10, 10}, {20, 10}, {15, 10}, {12, 20}, {18, 20}}};
    EXPECT_THROW(align_crop(img, line, 16), ValidationError);
    Anchors same = {{{10, 10}, {10, 10}, {15, 14}, {12, 20}, {18, 20}}};
    EXPECT_THROW(align_crop(img, same, 16), ValidationError);
}

TEST(Upscale, MatchesDirectBicubicOracle) {
    Rng rng(2);
    RgbImage img(9, 7);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    const auto up = upscale(img, 2.0);
    const auto ref = bicubic_oracle(img, 18, 14);
    ASSERT_EQ(up.height, 18);
    ASSERT_EQ(up.width, 14);
    int off = 0;
    for (std::size_t i = 0; i < up.pixels.size(); ++i) {
        ASSERT_LE(std::abs(up.pixels[i] - ref.pixels[i]), 1);
        off += up.pixels[i] != ref.pixels[i];
    }
    EXPECT_LE(off, 2);
}

TEST(Upscale, ConstantStaysConstantAndBackendsChecked) {
    RgbImage img(5, 5, 77);
    for (auto p : upscale(img, 4.0).pixels) EXPECT_EQ(p, 77);
    EXPECT_EQ(upscale(img, 1.0), img);
    EXPECT_THROW(upscale(img, 2.0, "esrgan"), BackendError);
    EXPECT_THROW(upscale(img, 0.5), ValidationError);
}

TEST(Filter, LaplacianVarianceOfCheckerboard) {
    RgbImage img(10, 10);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x)[c] = (x + y) % 2 ? 255 : 0;
    // Every interior Laplacian is +-4*255 and the signs balance.
    EXPECT_NEAR(laplacian_variance(img), 1020.0 * 1020.0, 1e-6);
    EXPECT_EQ(laplacian_variance(RgbImage(10, 10, 40)), 0.0);
}

TEST(Filter, RejectionOrderAndCounts) {
    SyntheticOptions opt;
    opt.jitter = 0.0;
    auto attrs = AttributeVector{};
    opt.attrs = attrs;
    const auto sharp = synthetic_face(1, 0, opt);
    opt.yaw = 0.5;
    const auto turned = synthetic_face(1, 1, opt);
    EXPECT_NEAR(pose_ratio(turned.landmarks), 0.5 / 0.8, 1e-9);
    EXPECT_NEAR(pose_ratio(sharp.landmarks), 0.0, 1e-9);

    std::vector<FilterItem> items = {
        {"sharp", sharp.image, sharp.landmarks},
        {"blurred_turned", RgbImage(64, 64, 90), turned.landmarks},
        {"turned", turned.image, turned.landmarks},
        {"occluded_blurred", RgbImage(64, 64, 90), sharp.landmarks},
    };
    FilterRules rules;
    rules.occluded = [](const FilterItem& it) { return it.id.rfind("occluded", 0) == 0; };
    const auto [kept, rep] = filter_records(items, rules);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_EQ(kept[0].id, "sharp");
    EXPECT_EQ(rep.kept, 1);
    EXPECT_EQ(rep.occlusion, 1);
    EXPECT_EQ(rep.blur, 1);
    EXPECT_EQ(rep.extreme_pose, 1);
    EXPECT_EQ(rep.total(), static_cast<long>(items.size()));
}

TEST(Manifest, RoundTripSortedById) {
    const auto dir = temp_dir("manifest");
    std::vector<FaceRecord> recs = {make_record("b"), make_record("a"), make_record("c")};
    recs[0].captions["es"] = {"x", "y", "z"};
    write_manifest(dir / "m.jsonl", recs);
    const auto back = read_manifest(dir / "m.jsonl");
    ASSERT_EQ(back.size(), 3u);
    EXPECT_EQ(back[0].id, "a");
    EXPECT_EQ(back[1], recs[0]);
    EXPECT_THROW(write_manifest(dir / "d.jsonl", {make_record("a"), make_record("a")}), ValidationError);
}

TEST(Manifest, RejectsBadRecords) {
    auto r = make_record("x");
    r.captions["en"].pop_back();
    EXPECT_THROW(r.validate(), ValidationError);
    r = make_record("x");
    r.image = "/abs/x.png";
    EXPECT_THROW(r.validate(), ValidationError);
    r = make_record("x");
    r.seg = "../x.png";
    EXPECT_THROW(r.validate(), ValidationError);
    const auto dir = temp_dir("refs");
    EXPECT_THROW(make_record("x").check_refs(dir), ValidationError);
    std::ofstream(dir / "m.jsonl") << "{\"id\": \"x\"}\n";
    EXPECT_THROW(read_manifest(dir / "m.jsonl"), ValidationError);
}

TEST(Stats, RatiosAndCsv) {
    EXPECT_THROW(attribute_stats({}), ValidationError);
    auto a = make_record("a"), b = make_record("b");
    b.attrs.set("Smiling", false);
    b.attrs.set("Bald", true);
    const auto st = attribute_stats({a, b, make_record("c"), make_record("d")});
    ASSERT_EQ(st.size(), 40u);
    EXPECT_DOUBLE_EQ(st[static_cast<std::size_t>(attribute_index("Smiling"))].second, 0.75);
    EXPECT_DOUBLE_EQ(st[static_cast<std::size_t>(attribute_index("Bald"))].second, 0.25);
    const auto csv = stats_csv(st);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 41);
    EXPECT_NE(csv.find("Smiling,0.750000"), std::string::npos);
}

TEST(Stats, AllTrueAndHalfSplit) {
    auto t = make_record("t"), f = make_record("f");
    for (const auto& n : attribute_names()) {
        t.attrs.set(n, true);
        f.attrs.set(n, false);
    }
    for (const auto& [name, ratio] : attribute_stats({t})) EXPECT_DOUBLE_EQ(ratio, 1.0) << name;
    for (const auto& [name, ratio] : attribute_stats({t, f})) EXPECT_DOUBLE_EQ(ratio, 0.5) << name;
}

TEST(CelebaFormat, ParsesAndChecksCount) {
    std::string header;
    for (const auto& n : attribute_names()) header += n + " ";
    std::string row = "000001.jpg";
    for (std::size_t i = 0; i < 40; ++i) row += i == 15 ? " 1" : " -1";
    std::istringstream good("1\n" + header + "\n" + row + "\n");
    const auto parsed = parse_celeba_attributes(good);
    ASSERT_EQ(parsed.size(), 1u);
    EXPECT_TRUE(parsed[0].second.get("Eyeglasses"));
    EXPECT_FALSE(parsed[0].second.get("Male"));
    std::istringstream bad("2\n" + header + "\n" + row + "\n");
    EXPECT_THROW(parse_celeba_attributes(bad), ValidationError);
}

TEST(Synthetic, DeterministicAndWellFormed) {
    const auto a = synthetic_face(7, 3), b = synthetic_face(7, 3), c = synthetic_face(7, 4);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.seg, b.seg);
    EXPECT_NE(a.image, c.image);
    ASSERT_EQ(a.landmarks.points.size(), 68u);
    condition::validate_landmarks(a.landmarks);
    condition::validate_map(a.seg, condition::default_palette());
    for (const auto& p : a.landmarks.points) {
        EXPECT_GT(p[0], 0.0);
        EXPECT_LT(p[0], 1.0);
    }
    std::set<int> labels(a.seg.labels.begin(), a.seg.labels.end());
    EXPECT_TRUE(labels.count(1) && labels.count(2) && labels.count(4));
}

TEST(Synthetic, AlignedFaceLandsOnTemplate) {
    const auto f = synthetic_face(5, 0);
    const auto anchors = anchors_from_dlib68(f.landmarks, 64);
    const auto aligned = align_landmarks(f.landmarks, 64, anchors, 32);
    const auto back = anchors_from_dlib68(aligned, 1.0);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(back[i][0], default_template()[i][0], 0.05);
        EXPECT_NEAR(back[i][1], default_template()[i][1], 0.05);
    }
}
