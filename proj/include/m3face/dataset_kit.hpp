#pragma once

// Corpus construction: similarity alignment to a 5-point template, bicubic
// upscaling, template captions from attribute vectors, translation,
// quality filtering, JSON-lines manifests and attribute statistics.

#include "m3face/condition_codec.hpp"
#include "m3face/core/checkpoint.hpp"
#include "m3face/core/error.hpp"
#include "m3face/core/image.hpp"
#include "m3face/core/rng.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace m3face::dataset {

using condition::LandmarkSet;
using condition::SegmentationMap;

// ---------------------------------------------------------------------------
// Attributes

inline const std::array<std::string, 40>& attribute_names() {
    static const std::array<std::string, 40> names = {
        "5_o_Clock_Shadow", "Arched_Eyebrows",  "Attractive",        "Bags_Under_Eyes",     "Bald",
        "Bangs",            "Big_Lips",         "Big_Nose",          "Black_Hair",          "Blond_Hair",
        "Blurry",           "Brown_Hair",       "Bushy_Eyebrows",    "Chubby",              "Double_Chin",
        "Eyeglasses",       "Goatee",           "Gray_Hair",         "Heavy_Makeup",        "High_Cheekbones",
        "Male",             "Mouth_Slightly_Open", "Mustache",       "Narrow_Eyes",         "No_Beard",
        "Oval_Face",        "Pale_Skin",        "Pointy_Nose",       "Receding_Hairline",   "Rosy_Cheeks",
        "Sideburns",        "Smiling",          "Straight_Hair",     "Wavy_Hair",           "Wearing_Earrings",
        "Wearing_Hat",      "Wearing_Lipstick", "Wearing_Necklace",  "Wearing_Necktie",     "Young"};
    return names;
}

inline int attribute_index(const std::string& name) {
    const auto& names = attribute_names();
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ValidationError("unknown attribute '" + name + "'");
    return static_cast<int>(it - names.begin());
}

struct AttributeVector {
    std::array<bool, 40> values{};

    bool get(const std::string& name) const { return values[static_cast<std::size_t>(attribute_index(name))]; }
    void set(const std::string& name, bool v) { values[static_cast<std::size_t>(attribute_index(name))] = v; }

    static AttributeVector all(bool v) {
        AttributeVector a;
        a.values.fill(v);
        return a;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (std::size_t i = 0; i < 40; ++i) j[attribute_names()[i]] = values[i];
        return j;
    }

    static AttributeVector from_json(const nlohmann::json& j) {
        if (!j.is_object() || j.size() != 40) throw ValidationError("attribute vector must have exactly 40 entries");
        AttributeVector a;
        for (const auto& [k, v] : j.items()) {
            if (!v.is_boolean()) throw ValidationError("attribute '" + k + "' is not a boolean");
            a.set(k, v.get<bool>());
        }
        return a;
    }

    friend bool operator==(const AttributeVector&, const AttributeVector&) = default;
};

// ---------------------------------------------------------------------------
// Alignment

/// Five anchor points: eye (image left), eye (image right), nose tip, mouth
/// corner (image left), mouth corner (image right).
using Anchors = std::array<std::array<double, 2>, 5>;

/// Canonical anchor positions as fractions of the output crop.
inline const Anchors& default_template() {
    static const Anchors t = {{{0.36, 0.45}, {0.64, 0.45}, {0.50, 0.58}, {0.40, 0.70}, {0.60, 0.70}}};
    return t;
}

inline Anchors load_template(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open template '" + path.string() + "'");
    const auto j = nlohmann::json::parse(in);
    const auto& pts = j.at("points");
    if (pts.size() != 5) throw ValidationError("template must have 5 points");
    Anchors a;
    for (std::size_t i = 0; i < 5; ++i) a[i] = {pts[i][0].get<double>(), pts[i][1].get<double>()};
    return a;
}

/// Anchors from normalized 68-point landmarks, scaled to a `size` pixel
/// image.
inline Anchors anchors_from_dlib68(const LandmarkSet& lms, double size) {
    if (lms.convention != "dlib68" || lms.points.size() != 68) throw ValidationError("expected dlib68 landmarks");
    auto mean = [&](int a, int b) {
        std::array<double, 2> m{0.0, 0.0};
        for (int i = a; i <= b; ++i) {
            m[0] += lms.points[static_cast<std::size_t>(i)][0] / (b - a + 1);
            m[1] += lms.points[static_cast<std::size_t>(i)][1] / (b - a + 1);
        }
        return std::array<double, 2>{m[0] * size, m[1] * size};
    };
    auto at = [&](int i) {
        return std::array<double, 2>{lms.points[static_cast<std::size_t>(i)][0] * size, lms.points[static_cast<std::size_t>(i)][1] * size};
    };
    return {mean(36, 41), mean(42, 47), at(30), at(48), at(54)};
}

/// x' = s R x + t in continuous pixel coordinates.
struct Similarity {
    double a = 1.0, b = 0.0;  // s cos, s sin
    double tx = 0.0, ty = 0.0;

    std::array<double, 2> apply(double x, double y) const { return {a * x - b * y + tx, b * x + a * y + ty}; }

    Similarity inverse() const {
        const double n = a * a + b * b;
        Similarity inv{a / n, -b / n, 0.0, 0.0};
        const auto t = inv.apply(tx, ty);
        inv.tx = -t[0];
        inv.ty = -t[1];
        return inv;
    }
};

/// Least-squares similarity mapping src onto dst (Umeyama).
inline Similarity estimate_similarity(const std::vector<std::array<double, 2>>& src, const std::vector<std::array<double, 2>>& dst) {
    if (src.size() != dst.size() || src.size() < 2) throw ValidationError("similarity needs matching point lists");
    const auto n = static_cast<Eigen::Index>(src.size());
    Eigen::MatrixXd s(2, n), d(2, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        s(0, i) = src[static_cast<std::size_t>(i)][0];
        s(1, i) = src[static_cast<std::size_t>(i)][1];
        d(0, i) = dst[static_cast<std::size_t>(i)][0];
        d(1, i) = dst[static_cast<std::size_t>(i)][1];
    }
    const Eigen::Matrix<double, 2, 1> ms = s.rowwise().mean(), md = d.rowwise().mean();
    const Eigen::MatrixXd sc = s.colwise() - ms, dc = d.colwise() - md;
    const double var_s = sc.squaredNorm() / static_cast<double>(n);
    if (var_s < 1e-12) throw ValidationError("degenerate source points");
    const Eigen::Matrix2d cov = dc * sc.transpose() / static_cast<double>(n);
    Eigen::JacobiSVD<Eigen::Matrix2d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix2d sign = Eigen::Matrix2d::Identity();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) sign(1, 1) = -1.0;
    const Eigen::Matrix2d r = svd.matrixU() * sign * svd.matrixV().transpose();
    const double scale = (svd.singularValues().asDiagonal() * sign).trace() / var_s;
    const Eigen::Vector2d t = md - scale * r * ms;
    return {scale * r(0, 0), scale * r(1, 0), t[0], t[1]};
}

inline void check_anchors(const Anchors& a) {
    const double ex = a[1][0] - a[0][0], ey = a[1][1] - a[0][1];
    const double eye2 = ex * ex + ey * ey;
    if (eye2 < 1e-12) throw ValidationError("degenerate anchors: eyes coincide");
    const double nx = a[2][0] - a[0][0], ny = a[2][1] - a[0][1];
    if (std::fabs(ex * ny - ey * nx) < 1e-3 * eye2) throw ValidationError("degenerate anchors: eyes and nose are collinear");
}

/// Transform taking output-crop pixel coordinates to input pixel
/// coordinates.
inline Similarity alignment_transform(const Anchors& anchors, int out_size, const Anchors& tmpl = default_template()) {
    check_anchors(anchors);
    std::vector<std::array<double, 2>> src, dst;
    for (std::size_t i = 0; i < 5; ++i) {
        src.push_back({tmpl[i][0] * out_size, tmpl[i][1] * out_size});
        dst.push_back(anchors[i]);
    }
    return estimate_similarity(src, dst);
}

namespace detail {

inline double sample_bilinear(const RgbImage& img, double u, double v, int c) {
    // u, v in index space (pixel centers at integers); edges clamp.
    const double x = std::clamp(u, 0.0, static_cast<double>(img.width - 1));
    const double y = std::clamp(v, 0.0, static_cast<double>(img.height - 1));
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
    const double fx = x - x0, fy = y - y0;
    const double top = img.at(y0, x0)[c] * (1 - fx) + img.at(y0, x1)[c] * fx;
    const double bot = img.at(y1, x0)[c] * (1 - fx) + img.at(y1, x1)[c] * fx;
    return top * (1 - fy) + bot * fy;
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace detail

/// Warps `image` so the anchors land on the template; output is
/// out_size x out_size, bilinear, edge-clamped.
inline RgbImage align_crop(const RgbImage& image, const Anchors& anchors, int out_size, const Anchors& tmpl = default_template()) {
    if (out_size < 1) throw ValidationError("output size must be positive");
    const Similarity tr = alignment_transform(anchors, out_size, tmpl);
    RgbImage out(out_size, out_size);
    for (int y = 0; y < out_size; ++y)
        for (int x = 0; x < out_size; ++x) {
            const auto p = tr.apply(x + 0.5, y + 0.5);
            for (int c = 0; c < 3; ++c) out.at(y, x)[c] = detail::to_byte(detail::sample_bilinear(image, p[0] - 0.5, p[1] - 0.5, c));
        }
    return out;
}

/// Nearest-neighbour warp of a label map with the same transform; pixels
/// mapping outside the input get `fill`.
inline SegmentationMap align_labels(const SegmentationMap& seg, const Anchors& anchors, int out_size,
                                    const Anchors& tmpl = default_template(), std::uint8_t fill = 0) {
    const Similarity tr = alignment_transform(anchors, out_size, tmpl);
    SegmentationMap out(out_size, out_size, fill);
    for (int y = 0; y < out_size; ++y)
        for (int x = 0; x < out_size; ++x) {
            const auto p = tr.apply(x + 0.5, y + 0.5);
            const int u = static_cast<int>(std::floor(p[0])), v = static_cast<int>(std::floor(p[1]));
            if (u >= 0 && u < seg.width && v >= 0 && v < seg.height) out.at(y, x) = seg.at(v, u);
        }
    return out;
}

/// Landmarks normalized to an input of `in_size` pixels, re-expressed
/// normalized to the aligned crop.
inline LandmarkSet align_landmarks(const LandmarkSet& lms, double in_size, const Anchors& anchors, int out_size,
                                   const Anchors& tmpl = default_template()) {
    const Similarity inv = alignment_transform(anchors, out_size, tmpl).inverse();
    LandmarkSet out = lms;
    for (auto& p : out.points) {
        const auto q = inv.apply(p[0] * in_size, p[1] * in_size);
        p = {q[0] / out_size, q[1] / out_size};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Upscaling

inline double keys_cubic(double x, double a = -0.5) {
    x = std::fabs(x);
    if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
    if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
    return 0.0;
}

class Upscaler {
public:
    virtual ~Upscaler() = default;
    virtual std::string id() const = 0;
    virtual RgbImage upscale(const RgbImage& img, double factor) const = 0;
};

/// Separable Keys bicubic (a = -0.5), half-pixel centers, edge clamp.
class BicubicUpscaler final : public Upscaler {
public:
    std::string id() const override { return "bicubic"; }

    RgbImage upscale(const RgbImage& img, double factor) const override {
        if (!(factor >= 1.0)) throw ValidationError("upscale factor must be >= 1");
        const int oh = static_cast<int>(std::lround(img.height * factor));
        const int ow = static_cast<int>(std::lround(img.width * factor));
        // Horizontal pass into doubles, then vertical.
        std::vector<double> tmp(static_cast<std::size_t>(img.height) * ow * 3);
        for (int x = 0; x < ow; ++x) {
            const double sx = (x + 0.5) * img.width / ow - 0.5;
            const int x0 = static_cast<int>(std::floor(sx));
            double w[4];
            for (int k = 0; k < 4; ++k) w[k] = keys_cubic(sx - (x0 - 1 + k));
            for (int y = 0; y < img.height; ++y)
                for (int c = 0; c < 3; ++c) {
                    double s = 0.0;
                    for (int k = 0; k < 4; ++k) s += w[k] * img.at(y, std::clamp(x0 - 1 + k, 0, img.width - 1))[c];
                    tmp[(static_cast<std::size_t>(y) * ow + x) * 3 + c] = s;
                }
        }
        RgbImage out(oh, ow);
        for (int y = 0; y < oh; ++y) {
            const double sy = (y + 0.5) * img.height / oh - 0.5;
            const int y0 = static_cast<int>(std::floor(sy));
            double w[4];
            for (int k = 0; k < 4; ++k) w[k] = keys_cubic(sy - (y0 - 1 + k));
            for (int x = 0; x < ow; ++x)
                for (int c = 0; c < 3; ++c) {
                    double s = 0.0;
                    for (int k = 0; k < 4; ++k)
                        s += w[k] * tmp[(static_cast<std::size_t>(std::clamp(y0 - 1 + k, 0, img.height - 1)) * ow + x) * 3 + c];
                    out.at(y, x)[c] = detail::to_byte(s);
                }
        }
        return out;
    }
};

inline RgbImage upscale(const RgbImage& img, double factor, const std::string& backend = "bicubic") {
    if (backend == "bicubic") return BicubicUpscaler().upscale(img, factor);
    throw BackendError("upscaler backend '" + backend + "' is not available");
}

// ---------------------------------------------------------------------------
// Captions

/// Sentence openers, subject nouns and per-attribute postmodifier phrasings.
struct CaptionBank {
    std::vector<std::string> openers;  // contain "{subject}"
    std::vector<std::string> male_subjects;
    std::vector<std::string> neutral_subjects;
    std::map<std::string, std::vector<std::string>> phrases;  // every attribute except Male

    void validate() const {
        if (openers.empty() || male_subjects.size() < 2 || neutral_subjects.empty())
            throw ValidationError("caption bank needs openers and subjects");
        for (const auto& o : openers)
            if (o.find("{subject}") == std::string::npos) throw ValidationError("opener without {subject}: " + o);
        for (const auto& name : attribute_names()) {
            if (name == "Male") continue;
            auto it = phrases.find(name);
            if (it == phrases.end() || it->second.size() < 2)
                throw ValidationError("caption bank needs at least two phrasings for '" + name + "'");
        }
        for (const auto& [k, v] : phrases) attribute_index(k);
    }

    nlohmann::json to_json() const {
        return {{"openers", openers}, {"male_subjects", male_subjects}, {"neutral_subjects", neutral_subjects}, {"phrases", phrases}};
    }

    static CaptionBank from_json(const nlohmann::json& j) {
        CaptionBank b;
        b.openers = j.at("openers").get<std::vector<std::string>>();
        b.male_subjects = j.at("male_subjects").get<std::vector<std::string>>();
        b.neutral_subjects = j.at("neutral_subjects").get<std::vector<std::string>>();
        b.phrases = j.at("phrases").get<std::map<std::string, std::vector<std::string>>>();
        b.validate();
        return b;
    }

    static CaptionBank load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open caption bank '" + path.string() + "'");
        return from_json(nlohmann::json::parse(in));
    }
};

inline const CaptionBank& default_caption_bank() {
    static const CaptionBank bank = [] {
        CaptionBank b;
        b.openers = {"A portrait of a {subject}", "A photo of a {subject}", "A close-up of a {subject}",
                     "An image of a {subject}", "A headshot of a {subject}", "A picture showing a {subject}"};
        b.male_subjects = {"man", "gentleman", "guy"};
        b.neutral_subjects = {"person", "individual"};
        b.phrases = {
            {"5_o_Clock_Shadow", {"with a five o'clock shadow", "with light stubble"}},
            {"Arched_Eyebrows", {"with arched eyebrows", "whose eyebrows are arched"}},
            {"Attractive", {"who looks attractive", "with attractive features"}},
            {"Bags_Under_Eyes", {"with bags under the eyes", "with puffy under-eye bags"}},
            {"Bald", {"who is bald", "with a bald head"}},
            {"Bangs", {"with bangs", "with a fringe of bangs"}},
            {"Big_Lips", {"with big lips", "with full lips"}},
            {"Big_Nose", {"with a big nose", "with a large nose"}},
            {"Black_Hair", {"with black hair", "with jet-black hair"}},
            {"Blond_Hair", {"with blond hair", "with golden blond hair"}},
            {"Blurry", {"in a blurry shot", "captured slightly out of focus"}},
            {"Brown_Hair", {"with brown hair", "with chestnut brown hair"}},
            {"Bushy_Eyebrows", {"with bushy eyebrows", "with thick bushy brows"}},
            {"Chubby", {"who looks chubby", "with a chubby face"}},
            {"Double_Chin", {"with a double chin", "showing a double chin"}},
            {"Eyeglasses", {"wearing eyeglasses", "with glasses"}},
            {"Goatee", {"with a goatee", "sporting a goatee"}},
            {"Gray_Hair", {"with gray hair", "with graying hair"}},
            {"Heavy_Makeup", {"wearing heavy makeup", "with heavy makeup"}},
            {"High_Cheekbones", {"with high cheekbones", "with prominent cheekbones"}},
            {"Mouth_Slightly_Open", {"with the mouth slightly open", "with slightly parted lips"}},
            {"Mustache", {"with a mustache", "sporting a mustache"}},
            {"Narrow_Eyes", {"with narrow eyes", "with narrowed eyes"}},
            {"No_Beard", {"with no beard", "who is clean-shaven"}},
            {"Oval_Face", {"with an oval face", "with an oval-shaped face"}},
            {"Pale_Skin", {"with pale skin", "with a fair complexion"}},
            {"Pointy_Nose", {"with a pointy nose", "with a pointed nose"}},
            {"Receding_Hairline", {"with a receding hairline", "whose hairline is receding"}},
            {"Rosy_Cheeks", {"with rosy cheeks", "with pink cheeks"}},
            {"Sideburns", {"with sideburns", "sporting long sideburns"}},
            {"Smiling", {"who is smiling", "with a smile"}},
            {"Straight_Hair", {"with straight hair", "with sleek straight hair"}},
            {"Wavy_Hair", {"with wavy hair", "with soft wavy hair"}},
            {"Wearing_Earrings", {"wearing earrings", "with earrings"}},
            {"Wearing_Hat", {"wearing a hat", "with a hat on"}},
            {"Wearing_Lipstick", {"wearing lipstick", "with lipstick on"}},
            {"Wearing_Necklace", {"wearing a necklace", "with a necklace"}},
            {"Wearing_Necktie", {"wearing a necktie", "with a tie"}},
            {"Young", {"who looks young", "of a young age"}},
        };
        b.validate();
        return b;
    }();
    return bank;
}

class CaptionEngine {
public:
    virtual ~CaptionEngine() = default;
    virtual std::string id() const = 0;
    virtual std::vector<std::string> captions(const AttributeVector& attrs, int n, std::uint64_t seed) const = 0;
};

/// Samples an opener, a subject noun (male referent when Male is set,
/// otherwise neutral), one phrasing per true attribute and their order.
class TemplateCaptionEngine final : public CaptionEngine {
public:
    explicit TemplateCaptionEngine(CaptionBank bank = default_caption_bank()) : bank_(std::move(bank)) { bank_.validate(); }

    std::string id() const override { return "template"; }

    std::vector<std::string> captions(const AttributeVector& attrs, int n, std::uint64_t seed) const override {
        if (n < 1) throw ValidationError("caption count must be >= 1");
        std::vector<std::string> out;
        std::set<std::string> seen;
        const auto& subjects = attrs.get("Male") ? bank_.male_subjects : bank_.neutral_subjects;
        std::vector<std::string> active;
        for (std::size_t i = 0; i < 40; ++i)
            if (attrs.values[i] && attribute_names()[i] != "Male") active.push_back(attribute_names()[i]);
        for (int attempt = 0; static_cast<int>(out.size()) < n; ++attempt) {
            if (attempt > 200 * n)
                throw ValidationError("caption bank cannot produce " + std::to_string(n) + " distinct captions");
            Rng rng(derive_seed(seed, "caption", static_cast<std::uint64_t>(attempt)));
            std::string s = bank_.openers[rng.below(bank_.openers.size())];
            s.replace(s.find("{subject}"), 9, subjects[rng.below(subjects.size())]);
            auto order = active;
            rng.shuffle(order);
            for (std::size_t i = 0; i < order.size(); ++i) {
                const auto& opts = bank_.phrases.at(order[i]);
                const std::string& p = opts[rng.below(opts.size())];
                if (i == 0) s += " " + p;
                else if (i + 1 == order.size()) s += " and " + p;
                else s += ", " + p;
            }
            s += ".";
            if (seen.insert(s).second) out.push_back(s);
        }
        return out;
    }

private:
    CaptionBank bank_;
};

inline std::vector<std::string> captions_from_attributes(const AttributeVector& attrs, int n, std::uint64_t seed,
                                                         const CaptionEngine& engine = TemplateCaptionEngine()) {
    return engine.captions(attrs, n, seed);
}

// ---------------------------------------------------------------------------
// Translation

class Translator {
public:
    virtual ~Translator() = default;
    virtual std::string id() const = 0;
    /// Throws BackendError on failure.
    virtual std::string translate(const std::string& text, const std::string& lang) const = 0;
};

/// Tagged passthrough: "[lang] text".
class StubTranslator final : public Translator {
public:
    std::string id() const override { return "stub"; }
    std::string translate(const std::string& text, const std::string& lang) const override { return "[" + lang + "] " + text; }
};

inline std::map<std::string, std::vector<std::string>> translate(const std::vector<std::string>& captions,
                                                                 const std::vector<std::string>& langs,
                                                                 const Translator& backend) {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& lang : langs) {
        auto& dst = out[lang];
        for (const auto& c : captions) dst.push_back(backend.translate(c, lang));
    }
    return out;
}

inline std::shared_ptr<const Translator> make_translator(const std::string& id) {
    if (id == "stub") return std::make_shared<StubTranslator>();
    throw BackendError("translator backend '" + id + "' is not registered");
}

// ---------------------------------------------------------------------------
// Filtering

/// Variance of the 4-neighbour Laplacian of the 0..255 luma over interior
/// pixels.
inline double laplacian_variance(const RgbImage& img) {
    if (img.height < 3 || img.width < 3) return 0.0;
    auto luma = [&](int y, int x) {
        const auto* p = img.at(y, x);
        return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    };
    double sum = 0.0, sq = 0.0;
    long n = 0;
    for (int y = 1; y < img.height - 1; ++y)
        for (int x = 1; x < img.width - 1; ++x) {
            const double l = luma(y - 1, x) + luma(y + 1, x) + luma(y, x - 1) + luma(y, x + 1) - 4.0 * luma(y, x);
            sum += l;
            sq += l * l;
            ++n;
        }
    const double mean = sum / n;
    return std::max(0.0, sq / n - mean * mean);
}

/// |nose-bridge x - eye-midpoint x| / inter-ocular distance.
inline double pose_ratio(const LandmarkSet& lms) {
    std::array<double, 2> le{}, re{}, nose{};
    if (lms.convention == "dlib68") {
        if (lms.points.size() != 68) throw ValidationError("dlib68 landmarks need 68 points");
        for (int i = 36; i <= 41; ++i) {
            le[0] += lms.points[i][0] / 6;
            le[1] += lms.points[i][1] / 6;
        }
        for (int i = 42; i <= 47; ++i) {
            re[0] += lms.points[i][0] / 6;
            re[1] += lms.points[i][1] / 6;
        }
        nose = lms.points[27];
    } else if (lms.convention == "five") {
        if (lms.points.size() != 5) throw ValidationError("five-point landmarks need 5 points");
        le = lms.points[0];
        re = lms.points[1];
        nose = lms.points[2];
    } else {
        throw ValidationError("pose ratio: unsupported convention '" + lms.convention + "'");
    }
    const double iod = std::hypot(re[0] - le[0], re[1] - le[1]);
    if (iod < 1e-12) return std::numeric_limits<double>::infinity();
    return std::fabs(nose[0] - 0.5 * (le[0] + re[0])) / iod;
}

struct FilterItem {
    std::string id;
    RgbImage image;
    LandmarkSet landmarks;
};

struct FilterRules {
    double blur_threshold = 100.0;
    double pose_threshold = 0.35;
    std::function<bool(const FilterItem&)> occluded = [](const FilterItem&) { return false; };
};

struct FilterReport {
    long kept = 0;
    long occlusion = 0;
    long blur = 0;
    long extreme_pose = 0;

    long total() const { return kept + occlusion + blur + extreme_pose; }

    nlohmann::json to_json() const {
        return {{"kept", kept}, {"occlusion", occlusion}, {"blur", blur}, {"extreme_pose", extreme_pose}};
    }
};

enum class Rejection { None, Occlusion, Blur, ExtremePose };

/// Checks occlusion, then blur, then pose; the first failing rule is the
/// recorded reason.
inline Rejection classify(const FilterItem& item, const FilterRules& rules) {
    if (rules.occluded && rules.occluded(item)) return Rejection::Occlusion;
    if (laplacian_variance(item.image) < rules.blur_threshold) return Rejection::Blur;
    if (pose_ratio(item.landmarks) > rules.pose_threshold) return Rejection::ExtremePose;
    return Rejection::None;
}

inline std::pair<std::vector<FilterItem>, FilterReport> filter_records(const std::vector<FilterItem>& items, const FilterRules& rules) {
    std::vector<FilterItem> kept;
    FilterReport rep;
    for (const auto& it : items) {
        switch (classify(it, rules)) {
            case Rejection::None:
                ++rep.kept;
                kept.push_back(it);
                break;
            case Rejection::Occlusion: ++rep.occlusion; break;
            case Rejection::Blur: ++rep.blur; break;
            case Rejection::ExtremePose: ++rep.extreme_pose; break;
        }
    }
    return {kept, rep};
}

// ---------------------------------------------------------------------------
// Manifest

struct FaceRecord {
    std::string id;
    std::string image;
    std::string seg;
    std::string landmarks;
    AttributeVector attrs;
    std::map<std::string, std::vector<std::string>> captions;

    void validate() const {
        if (id.empty()) throw ValidationError("record id must not be empty");
        if (captions.empty()) throw ValidationError("record '" + id + "' has no captions");
        for (const auto& [lang, cs] : captions)
            if (cs.size() != 3)
                throw ValidationError("record '" + id + "' has " + std::to_string(cs.size()) + " captions for '" + lang + "', expected 3");
        for (const auto* ref : {&image, &seg, &landmarks}) {
            if (ref->empty()) throw ValidationError("record '" + id + "' has an empty file reference");
            const std::filesystem::path p(*ref);
            if (p.is_absolute()) throw ValidationError("record '" + id + "' reference '" + *ref + "' is not corpus-relative");
            for (const auto& part : p)
                if (part == "..") throw ValidationError("record '" + id + "' reference '" + *ref + "' escapes the corpus root");
        }
    }

    /// Throws if any reference is missing under `root`.
    void check_refs(const std::filesystem::path& root) const {
        for (const auto* ref : {&image, &seg, &landmarks})
            if (!std::filesystem::exists(root / *ref))
                throw ValidationError("record '" + id + "' references missing file '" + *ref + "'");
    }

    nlohmann::json to_json() const {
        return {{"id", id}, {"image", image}, {"seg", seg}, {"landmarks", landmarks}, {"attrs", attrs.to_json()}, {"captions", captions}};
    }

    static FaceRecord from_json(const nlohmann::json& j) {
        FaceRecord r;
        r.id = j.at("id").get<std::string>();
        r.image = j.at("image").get<std::string>();
        r.seg = j.at("seg").get<std::string>();
        r.landmarks = j.at("landmarks").get<std::string>();
        r.attrs = AttributeVector::from_json(j.at("attrs"));
        r.captions = j.at("captions").get<std::map<std::string, std::vector<std::string>>>();
        r.validate();
        return r;
    }

    friend bool operator==(const FaceRecord&, const FaceRecord&) = default;
};

/// JSON-lines, one record per line, sorted by id.
inline void write_manifest(const std::filesystem::path& path, std::vector<FaceRecord> records) {
    std::sort(records.begin(), records.end(), [](const FaceRecord& a, const FaceRecord& b) { return a.id < b.id; });
    std::string body;
    std::set<std::string> ids;
    for (const auto& r : records) {
        r.validate();
        if (!ids.insert(r.id).second) throw ValidationError("duplicate record id '" + r.id + "'");
        body += r.to_json().dump() + "\n";
    }
    write_file_bytes(path, body);
}

inline std::vector<FaceRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open manifest '" + path.string() + "'");
    std::vector<FaceRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(FaceRecord::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("manifest line " + std::to_string(lineno) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

/// Serializes appends from concurrent producers.
class ManifestAppender {
public:
    explicit ManifestAppender(std::filesystem::path path) : path_(std::move(path)) {}

    void append(const FaceRecord& r) {
        r.validate();
        std::lock_guard lock(mu_);
        std::ofstream out(path_, std::ios::app);
        out << r.to_json().dump() << "\n";
        if (!out) throw ValidationError("cannot append to manifest '" + path_.string() + "'");
    }

private:
    std::filesystem::path path_;
    std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Statistics

/// Positives / total per attribute, in attribute_names() order.
inline std::vector<std::pair<std::string, double>> attribute_stats(const std::vector<FaceRecord>& records) {
    if (records.empty()) throw ValidationError("attribute_stats: empty manifest");
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t i = 0; i < 40; ++i) {
        long pos = 0;
        for (const auto& r : records) pos += r.attrs.values[i];
        out.emplace_back(attribute_names()[i], static_cast<double>(pos) / static_cast<double>(records.size()));
    }
    return out;
}

inline std::string stats_csv(const std::vector<std::pair<std::string, double>>& stats) {
    std::ostringstream out;
    out << "attribute,ratio\n";
    char buf[32];
    for (const auto& [name, ratio] : stats) {
        std::snprintf(buf, sizeof buf, "%.6f", ratio);
        out << name << ',' << buf << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// CelebA-format attribute files

/// Parses list_attr_celeba.txt: a count line, a header of 40 names, then
/// "<file> <+1|-1 x40>" rows.
inline std::vector<std::pair<std::string, AttributeVector>> parse_celeba_attributes(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("attribute file is empty");
    const long count = std::stol(line);
    if (!std::getline(in, line)) throw ValidationError("attribute file has no header");
    std::istringstream hs(line);
    std::vector<int> order;
    for (std::string name; hs >> name;) order.push_back(attribute_index(name));
    if (order.size() != 40) throw ValidationError("attribute header must list 40 names");
    std::vector<std::pair<std::string, AttributeVector>> out;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string file;
        if (!(ls >> file)) continue;
        AttributeVector a;
        for (int idx : order) {
            int v = 0;
            if (!(ls >> v) || (v != 1 && v != -1)) throw ValidationError("bad attribute value for '" + file + "'");
            a.values[static_cast<std::size_t>(idx)] = v == 1;
        }
        out.emplace_back(file, a);
    }
    if (static_cast<long>(out.size()) != count)
        throw ValidationError("attribute file declares " + std::to_string(count) + " rows but has " + std::to_string(out.size()));
    return out;
}

}  // namespace m3face::dataset
