#pragma once

// Condition modalities: segmentation maps and facial landmarks, their
// rendering to RGB condition images, horizontal flips and the color/brightness
// augmentations applied to condition images during control-branch training.

#include "m3face/core/error.hpp"
#include "m3face/core/image.hpp"
#include "m3face/core/rng.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace m3face::condition {

using Rgb = std::array<std::uint8_t, 3>;

struct PaletteClass {
    int id = 0;
    std::string name;
    Rgb rgb{};
    std::optional<int> mirror_of;
};

/// Ordered class table. Left/right classes are listed as mirror pairs and
/// must share one color so that a pixel-mirrored map is still a valid map.
class SegmentationPalette {
public:
    SegmentationPalette() = default;

    explicit SegmentationPalette(std::vector<PaletteClass> classes) : classes_(std::move(classes)) { validate(); }

    int size() const { return static_cast<int>(classes_.size()); }
    const std::vector<PaletteClass>& classes() const { return classes_; }
    const Rgb& rgb(int id) const { return classes_.at(static_cast<std::size_t>(id)).rgb; }
    const std::string& name(int id) const { return classes_.at(static_cast<std::size_t>(id)).name; }

    int id_of(const std::string& name) const {
        for (const auto& c : classes_)
            if (c.name == name) return c.id;
        throw ValidationError("palette has no class named '" + name + "'");
    }

    /// Mirror pairs as (lower id, higher id).
    std::vector<std::pair<int, int>> mirror_pairs() const {
        std::set<std::pair<int, int>> pairs;
        for (const auto& c : classes_)
            if (c.mirror_of) pairs.insert({std::min(c.id, *c.mirror_of), std::max(c.id, *c.mirror_of)});
        return {pairs.begin(), pairs.end()};
    }

    /// Smallest class id sharing this class's color.
    int canonical_id(int id) const {
        const auto& c = classes_.at(static_cast<std::size_t>(id));
        return c.mirror_of ? std::min(id, *c.mirror_of) : id;
    }

    /// Distinct colors in class order.
    std::vector<Rgb> distinct_colors() const {
        std::vector<Rgb> out;
        for (const auto& c : classes_)
            if (std::find(out.begin(), out.end(), c.rgb) == out.end()) out.push_back(c.rgb);
        return out;
    }

    static SegmentationPalette from_json(const nlohmann::json& j) {
        std::vector<PaletteClass> classes;
        for (const auto& e : j) {
            PaletteClass c;
            c.id = e.at("id").get<int>();
            c.name = e.at("name").get<std::string>();
            const auto rgb = e.at("rgb").get<std::vector<int>>();
            if (rgb.size() != 3) throw ValidationError("palette rgb must have 3 components");
            for (int k = 0; k < 3; ++k) {
                if (rgb[k] < 0 || rgb[k] > 255) throw ValidationError("palette rgb component out of range");
                c.rgb[k] = static_cast<std::uint8_t>(rgb[k]);
            }
            if (e.contains("mirror_of") && !e.at("mirror_of").is_null()) c.mirror_of = e.at("mirror_of").get<int>();
            classes.push_back(std::move(c));
        }
        std::sort(classes.begin(), classes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
        return SegmentationPalette(std::move(classes));
    }

    nlohmann::json to_json() const {
        auto j = nlohmann::json::array();
        for (const auto& c : classes_) {
            j.push_back({{"id", c.id},
                         {"name", c.name},
                         {"rgb", {c.rgb[0], c.rgb[1], c.rgb[2]}},
                         {"mirror_of", c.mirror_of ? nlohmann::json(*c.mirror_of) : nlohmann::json(nullptr)}});
        }
        return j;
    }

    static SegmentationPalette load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open palette file '" + path.string() + "'");
        return from_json(nlohmann::json::parse(in));
    }

private:
    void validate() const {
        for (std::size_t i = 0; i < classes_.size(); ++i) {
            if (classes_[i].id != static_cast<int>(i))
                throw ValidationError("palette ids must be contiguous from 0; found " + std::to_string(classes_[i].id) +
                                      " at position " + std::to_string(i));
        }
        for (const auto& c : classes_) {
            if (!c.mirror_of) continue;
            const int m = *c.mirror_of;
            if (m < 0 || m >= size() || m == c.id) throw ValidationError("palette class '" + c.name + "' has invalid mirror_of");
            const auto& other = classes_[static_cast<std::size_t>(m)];
            if (!other.mirror_of || *other.mirror_of != c.id)
                throw ValidationError("palette mirror relation for '" + c.name + "' is not symmetric");
            if (other.rgb != c.rgb) throw ValidationError("mirror classes '" + c.name + "' and '" + other.name + "' must share a color");
        }
        for (std::size_t a = 0; a < classes_.size(); ++a)
            for (std::size_t b = a + 1; b < classes_.size(); ++b) {
                const bool paired = classes_[a].mirror_of && *classes_[a].mirror_of == static_cast<int>(b);
                if (!paired && classes_[a].rgb == classes_[b].rgb)
                    throw ValidationError("palette classes '" + classes_[a].name + "' and '" + classes_[b].name +
                                          "' share a color but are not a mirror pair");
            }
    }

    std::vector<PaletteClass> classes_;
};

/// 19-class face parsing palette with left/right eyes, brows and ears merged
/// to shared colors (16 distinct colors).
inline const SegmentationPalette& default_palette() {
    static const SegmentationPalette palette([] {
        std::vector<PaletteClass> c = {
            {0, "background", {0, 0, 0}, std::nullopt},  {1, "skin", {204, 0, 0}, std::nullopt},
            {2, "nose", {76, 153, 0}, std::nullopt},     {3, "eye_g", {204, 204, 0}, std::nullopt},
            {4, "l_eye", {51, 51, 255}, 5},              {5, "r_eye", {51, 51, 255}, 4},
            {6, "l_brow", {0, 255, 255}, 7},             {7, "r_brow", {0, 255, 255}, 6},
            {8, "l_ear", {255, 204, 204}, 9},            {9, "r_ear", {255, 204, 204}, 8},
            {10, "mouth", {102, 51, 0}, std::nullopt},   {11, "u_lip", {255, 0, 0}, std::nullopt},
            {12, "l_lip", {102, 204, 0}, std::nullopt},  {13, "hair", {255, 255, 0}, std::nullopt},
            {14, "hat", {0, 0, 153}, std::nullopt},      {15, "ear_r", {0, 0, 204}, std::nullopt},
            {16, "neck_l", {255, 51, 153}, std::nullopt}, {17, "neck", {0, 204, 204}, std::nullopt},
            {18, "cloth", {0, 51, 0}, std::nullopt},
        };
        return c;
    }());
    return palette;
}

struct SegmentationMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> labels;

    SegmentationMap() = default;
    SegmentationMap(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

    friend bool operator==(const SegmentationMap&, const SegmentationMap&) = default;
};

/// Replaces each mirrored label by the lowest id sharing its color; the
/// form every map takes after a render/snap round trip.
inline SegmentationMap canonicalize(const SegmentationMap& seg, const SegmentationPalette& palette) {
    SegmentationMap out = seg;
    for (auto& l : out.labels) l = static_cast<std::uint8_t>(palette.canonical_id(l));
    return out;
}

inline void validate_map(const SegmentationMap& seg, const SegmentationPalette& palette) {
    if (seg.labels.size() != static_cast<std::size_t>(seg.height) * seg.width)
        throw ValidationError("segmentation map dimensions do not match label count");
    for (int y = 0; y < seg.height; ++y)
        for (int x = 0; x < seg.width; ++x)
            if (seg.at(y, x) >= palette.size())
                throw ValidationError("label " + std::to_string(seg.at(y, x)) + " at pixel (" + std::to_string(y) + "," +
                                      std::to_string(x) + ") is outside the palette (" + std::to_string(palette.size()) +
                                      " classes)");
}

inline ConditionImage seg_to_condition(const SegmentationMap& seg, const SegmentationPalette& palette) {
    validate_map(seg, palette);
    ConditionImage img(seg.height, seg.width);
    for (std::size_t i = 0; i < seg.labels.size(); ++i) {
        const auto& c = palette.rgb(seg.labels[i]);
        std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(i * 3));
    }
    return img;
}

/// Nearest palette color per pixel (squared RGB distance, ties to the lowest
/// class id). Repairs off-palette colors produced by a generator.
inline SegmentationMap condition_to_seg(const ConditionImage& img, const SegmentationPalette& palette) {
    SegmentationMap seg(img.height, img.width);
    std::map<Rgb, std::uint8_t> cache;
    for (std::size_t i = 0; i < seg.labels.size(); ++i) {
        const Rgb px{img.pixels[i * 3], img.pixels[i * 3 + 1], img.pixels[i * 3 + 2]};
        auto it = cache.find(px);
        if (it == cache.end()) {
            int best = 0;
            long best_d = -1;
            for (const auto& c : palette.classes()) {
                long d = 0;
                for (int k = 0; k < 3; ++k) {
                    const long diff = static_cast<long>(px[k]) - c.rgb[k];
                    d += diff * diff;
                }
                if (best_d < 0 || d < best_d) {
                    best_d = d;
                    best = c.id;
                }
            }
            it = cache.emplace(px, static_cast<std::uint8_t>(best)).first;
        }
        seg.labels[i] = it->second;
    }
    return seg;
}

/// Snaps every pixel of a condition image to its nearest palette color.
inline ConditionImage snap_to_palette(const ConditionImage& img, const SegmentationPalette& palette) {
    return seg_to_condition(condition_to_seg(img, palette), palette);
}

/// Mirror about the vertical axis. Paired classes share a color, so the
/// rendered result is the mirrored rendering.
inline SegmentationMap hflip(const SegmentationMap& seg, const SegmentationPalette& palette) {
    validate_map(seg, palette);
    SegmentationMap out(seg.height, seg.width);
    for (int y = 0; y < seg.height; ++y)
        for (int x = 0; x < seg.width; ++x) out.at(y, x) = seg.at(y, seg.width - 1 - x);
    return out;
}

// ---------------------------------------------------------------------------
// Landmarks

struct LandmarkConvention {
    std::string id;
    int count = 0;
    std::vector<int> mirror;  // mirror[i] = index of the point that i maps to
};

namespace detail {
inline std::vector<int> dlib68_mirror() {
    std::vector<int> m(68);
    for (int i = 0; i < 68; ++i) m[i] = i;
    auto pair = [&](int a, int b) {
        m[a] = b;
        m[b] = a;
    };
    for (int i = 0; i <= 7; ++i) pair(i, 16 - i);      // jaw
    for (int i = 17; i <= 21; ++i) pair(i, 43 - i);    // brows
    pair(31, 35);                                      // nostrils
    pair(32, 34);
    pair(36, 45);                                      // eyes
    pair(37, 44);
    pair(38, 43);
    pair(39, 42);
    pair(40, 47);
    pair(41, 46);
    pair(48, 54);                                      // outer lips
    pair(49, 53);
    pair(50, 52);
    pair(55, 59);
    pair(56, 58);
    pair(60, 64);                                      // inner lips
    pair(61, 63);
    pair(65, 67);
    return m;
}
}  // namespace detail

inline const LandmarkConvention& landmark_convention(const std::string& id) {
    static const std::map<std::string, LandmarkConvention> table = {
        {"dlib68", {"dlib68", 68, detail::dlib68_mirror()}},
        // eye_left, eye_right, nose, mouth_left, mouth_right
        {"five", {"five", 5, {1, 0, 2, 4, 3}}},
    };
    auto it = table.find(id);
    if (it == table.end()) throw ValidationError("unknown landmark convention '" + id + "'");
    return it->second;
}

struct LandmarkSet {
    std::vector<std::array<double, 2>> points;  // normalized (x, y)
    std::string convention = "dlib68";

    friend bool operator==(const LandmarkSet&, const LandmarkSet&) = default;

    nlohmann::json to_json() const {
        auto pts = nlohmann::json::array();
        for (const auto& p : points) pts.push_back({p[0], p[1]});
        return {{"convention", convention}, {"points", pts}};
    }

    static LandmarkSet from_json(const nlohmann::json& j) {
        LandmarkSet s;
        s.convention = j.at("convention").get<std::string>();
        for (const auto& p : j.at("points")) s.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        return s;
    }
};

/// Checks count against the convention (an empty set is allowed) and that
/// every coordinate is finite and within [0,1].
inline void validate_landmarks(const LandmarkSet& lms) {
    const auto& conv = landmark_convention(lms.convention);
    if (!lms.points.empty() && static_cast<int>(lms.points.size()) != conv.count)
        throw ValidationError("convention '" + conv.id + "' expects " + std::to_string(conv.count) + " points, got " +
                              std::to_string(lms.points.size()));
    for (std::size_t i = 0; i < lms.points.size(); ++i)
        for (double v : lms.points[i])
            if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                throw ValidationError("landmark " + std::to_string(i) + " has coordinate outside [0,1]");
}

inline LandmarkSet hflip(const LandmarkSet& lms) {
    const auto& conv = landmark_convention(lms.convention);
    validate_landmarks(lms);
    LandmarkSet out;
    out.convention = lms.convention;
    out.points.resize(lms.points.size());
    for (std::size_t i = 0; i < lms.points.size(); ++i) {
        const auto& p = lms.points[i];
        out.points[static_cast<std::size_t>(conv.mirror[i])] = {1.0 - p[0], p[1]};
    }
    return out;
}

struct RenderStyle {
    int radius = 2;
    Rgb color{255, 255, 255};
};

/// Pixel index of a normalized coordinate on a `size`-pixel axis.
inline int landmark_pixel(double v, int size) {
    return std::clamp(static_cast<int>(std::floor(v * size)), 0, size - 1);
}

/// Filled discs on black; a pixel belongs to a disc when its squared offset
/// from the center pixel is at most radius^2.
inline ConditionImage rasterize_landmarks(const LandmarkSet& lms, int size, const RenderStyle& style = {}) {
    if (style.radius < 0) throw ValidationError("render radius must be non-negative");
    if (size < 2 * style.radius || size <= 0)
        throw ValidationError("render size " + std::to_string(size) + " is smaller than 2x radius " +
                              std::to_string(style.radius));
    validate_landmarks(lms);
    ConditionImage img(size, size);
    const int r = style.radius;
    for (const auto& p : lms.points) {
        const int cx = landmark_pixel(p[0], size), cy = landmark_pixel(p[1], size);
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                if (dx * dx + dy * dy > r * r) continue;
                const int y = cy + dy, x = cx + dx;
                if (y < 0 || y >= size || x < 0 || x >= size) continue;
                std::copy(style.color.begin(), style.color.end(), img.at(y, x));
            }
    }
    return img;
}

inline void save_landmarks(const std::filesystem::path& path, const LandmarkSet& lms) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    out << lms.to_json().dump() << "\n";
}

inline LandmarkSet load_landmarks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open landmark file '" + path.string() + "'");
    auto lms = LandmarkSet::from_json(nlohmann::json::parse(in));
    validate_landmarks(lms);
    return lms;
}

// ---------------------------------------------------------------------------
// Condition-image augmentation

struct JitterParams {
    double brightness = 0.0;       // factor drawn from [1-b, 1+b]
    double contrast = 0.0;         // factor drawn from [1-c, 1+c]
    double hue_degrees = 0.0;      // shift drawn from [-h, h]
    double replace_prob = 0.0;     // per distinct palette color
    std::vector<Rgb> palette_colors;              // colors eligible for replacement
    std::map<Rgb, Rgb> replacement_table;         // fixed substitutes; random colors otherwise
};

namespace detail {
inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double d = mx - mn;
    v = mx;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d == 0.0) {
        h = 0.0;
    } else if (mx == r) {
        h = 60.0 * std::fmod((g - b) / d, 6.0);
    } else if (mx == g) {
        h = 60.0 * ((b - r) / d + 2.0);
    } else {
        h = 60.0 * ((r - g) / d + 4.0);
    }
    if (h < 0.0) h += 360.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    const double c = v * s;
    const double hp = std::fmod(h, 360.0) / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1) { r1 = c; g1 = x; }
    else if (hp < 2) { r1 = x; g1 = c; }
    else if (hp < 3) { g1 = c; b1 = x; }
    else if (hp < 4) { g1 = x; b1 = c; }
    else if (hp < 5) { r1 = x; b1 = c; }
    else { r1 = c; b1 = x; }
    const double m = v - c;
    r = r1 + m;
    g = g1 + m;
    b = b1 + m;
}
}  // namespace detail

/// Random color replacement followed by brightness, contrast and hue jitter.
/// Deterministic in `seed`; transforms whose drawn parameter is the identity
/// are skipped, so identity parameters return the input unchanged.
inline ConditionImage jitter_condition(const ConditionImage& img, const JitterParams& params, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "jitter"));
    ConditionImage out = img;

    if (params.replace_prob > 0.0) {
        std::map<Rgb, Rgb> subst;
        for (const auto& c : params.palette_colors) {
            if (rng.uniform() >= params.replace_prob) continue;
            auto fixed = params.replacement_table.find(c);
            if (fixed != params.replacement_table.end()) {
                subst[c] = fixed->second;
            } else {
                subst[c] = {static_cast<std::uint8_t>(rng.below(256)), static_cast<std::uint8_t>(rng.below(256)),
                            static_cast<std::uint8_t>(rng.below(256))};
            }
        }
        for (std::size_t i = 0; i < out.pixels.size(); i += 3) {
            const Rgb px{img.pixels[i], img.pixels[i + 1], img.pixels[i + 2]};
            auto it = subst.find(px);
            if (it != subst.end()) std::copy(it->second.begin(), it->second.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(i));
        }
    }

    const double bright = 1.0 + rng.uniform(-params.brightness, params.brightness);
    const double contrast = 1.0 + rng.uniform(-params.contrast, params.contrast);
    const double hue = rng.uniform(-params.hue_degrees, params.hue_degrees);

    if (bright != 1.0)
        for (auto& v : out.pixels) v = to_u8(v * bright);
    if (contrast != 1.0) {
        double mean = 0.0;
        for (std::size_t i = 0; i < out.pixels.size(); i += 3)
            mean += 0.299 * out.pixels[i] + 0.587 * out.pixels[i + 1] + 0.114 * out.pixels[i + 2];
        mean /= std::max<std::size_t>(1, out.pixels.size() / 3);
        for (auto& v : out.pixels) v = to_u8((v - mean) * contrast + mean);
    }
    if (hue != 0.0) {
        for (std::size_t i = 0; i < out.pixels.size(); i += 3) {
            double h, s, v, r, g, b;
            detail::rgb_to_hsv(out.pixels[i] / 255.0, out.pixels[i + 1] / 255.0, out.pixels[i + 2] / 255.0, h, s, v);
            detail::hsv_to_rgb(std::fmod(h + hue + 360.0, 360.0), s, v, r, g, b);
            out.pixels[i] = to_u8(r * 255.0);
            out.pixels[i + 1] = to_u8(g * 255.0);
            out.pixels[i + 2] = to_u8(b * 255.0);
        }
    }
    return out;
}

}  // namespace m3face::condition
