#pragma once

// Procedural face source: a seeded head geometry rendered into a label map,
// 68 landmarks, an attribute vector and a textured RGB image. Used for toy
// corpora and tests where no real face data is available.

#include "m3face/condition_codec.hpp"
#include "m3face/core/image.hpp"
#include "m3face/core/rng.hpp"
#include "m3face/dataset_kit.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <vector>

namespace m3face::dataset {

struct SyntheticFace {
    RgbImage image;
    SegmentationMap seg;
    LandmarkSet landmarks;  // dlib68, normalized to the image
    AttributeVector attrs;
};

struct SyntheticOptions {
    int size = 64;
    double jitter = 1.0;  // scales pose, placement and scale randomness
    std::optional<double> yaw;  // horizontal nose offset in face half-widths
    std::optional<AttributeVector> attrs;
};

namespace synth {

enum Label : std::uint8_t {
    kBackground = 0, kSkin = 1, kNose = 2, kGlasses = 3, kLEye = 4, kREye = 5, kLBrow = 6, kRBrow = 7,
    kLEar = 8, kREar = 9, kMouth = 10, kULip = 11, kLLip = 12, kHair = 13, kHat = 14, kNeck = 17, kCloth = 18
};

inline double ell(double u, double v, double cu, double cv, double ru, double rv) {
    const double a = (u - cu) / ru, b = (v - cv) / rv;
    return a * a + b * b;
}

struct Geometry {
    double nose_shift = 0.0;
    double eye_h = 0.08;
    double mouth_w = 0.35;
    double nose_w = 0.12;
    bool open = false, glasses = false, hat = false, bald = false, long_hair = false, bangs = false;
};

/// Label at canonical face coordinates (u right, v down, face half-width 1).
inline std::uint8_t label_at(double u, double v, const Geometry& g) {
    std::uint8_t l = kBackground;
    if (v > 1.6 && std::fabs(u) < 2.2) l = kCloth;
    if (std::fabs(u) < 0.5 && v > 0.9 && v < 1.9) l = kNeck;
    if (!g.bald && g.long_hair && std::fabs(u) < 1.3 && v > -1.2 && v < 1.4) l = kHair;
    if (ell(u, v, -1.02, 0.05, 0.15, 0.3) <= 1.0) l = kREar;
    if (ell(u, v, 1.02, 0.05, 0.15, 0.3) <= 1.0) l = kLEar;
    const bool face = ell(u, v, 0.0, 0.0, 1.0, 1.3) <= 1.0;
    if (face) l = kSkin;
    const double hair_line = g.bangs ? -0.62 : -0.8;
    if (!g.bald && ell(u, v, 0.0, -0.1, 1.15, 1.45) <= 1.0 && (!face || v < hair_line) && v < 0.1) l = kHair;
    if (ell(u, v, -0.4, -0.45, 0.25, 0.06) <= 1.0) l = kRBrow;
    if (ell(u, v, 0.4, -0.45, 0.25, 0.06) <= 1.0) l = kLBrow;
    if (ell(u, v, -0.4, -0.2, 0.18, g.eye_h) <= 1.0) l = kREye;
    if (ell(u, v, 0.4, -0.2, 0.18, g.eye_h) <= 1.0) l = kLEye;
    if (v > -0.15 && v < 0.35) {
        const double half = g.nose_w * (v + 0.15) / 0.5 + 0.03;
        if (std::fabs(u - g.nose_shift) < half) l = kNose;
    }
    const double mc = 0.72;
    if (ell(u, v, 0.0, mc - 0.06, g.mouth_w, 0.07) <= 1.0) l = kULip;
    if (ell(u, v, 0.0, mc + 0.07, g.mouth_w * 0.9, 0.07) <= 1.0) l = kLLip;
    if (g.open && ell(u, v, 0.0, mc, g.mouth_w * 0.85, 0.035) <= 1.0) l = kMouth;
    if (g.glasses) {
        for (double cu : {-0.4, 0.4}) {
            const double r = std::sqrt(ell(u, v, cu, -0.2, 1.0, 1.0));
            if (r > 0.26 && r < 0.31) l = kGlasses;
        }
        if (std::fabs(u) < 0.14 && std::fabs(v + 0.2) < 0.025) l = kGlasses;
    }
    if (g.hat && v < -0.95 && v > -1.8 && std::fabs(u) < 1.3) l = kHat;
    return l;
}

inline std::vector<std::array<double, 2>> canonical_landmarks(const Geometry& g) {
    constexpr double pi = 3.14159265358979323846;
    std::vector<std::array<double, 2>> p;
    for (int i = 0; i <= 16; ++i) p.push_back({-std::cos(pi * i / 16), 1.3 * std::sin(pi * i / 16)});
    for (int k = 0; k < 5; ++k) {
        const double t = k / 4.0;
        p.push_back({-0.65 + 0.5 * t, -0.45 - 0.07 * std::sin(pi * t)});
    }
    for (int k = 0; k < 5; ++k) {
        const double t = k / 4.0;
        p.push_back({0.15 + 0.5 * t, -0.45 - 0.07 * std::sin(pi * t)});
    }
    for (int k = 0; k < 4; ++k) p.push_back({g.nose_shift, -0.2 + 0.15 * k});
    for (int k = 0; k < 5; ++k) p.push_back({g.nose_shift - g.nose_w - 0.03 + (g.nose_w + 0.03) * k / 2.0, 0.32});
    for (double cu : {-0.4, 0.4}) {
        const double h = g.eye_h * 0.8;
        p.push_back({cu - 0.18, -0.2});
        p.push_back({cu - 0.06, -0.2 - h});
        p.push_back({cu + 0.06, -0.2 - h});
        p.push_back({cu + 0.18, -0.2});
        p.push_back({cu + 0.06, -0.2 + h});
        p.push_back({cu - 0.06, -0.2 + h});
    }
    for (int k = 0; k < 12; ++k) {
        const double phi = pi + 2 * pi * k / 12;
        p.push_back({g.mouth_w * std::cos(phi), 0.72 + 0.13 * std::sin(phi)});
    }
    for (int k = 0; k < 8; ++k) {
        const double phi = pi + 2 * pi * k / 8;
        p.push_back({0.8 * g.mouth_w * std::cos(phi), 0.72 + (g.open ? 0.035 : 0.01) * std::sin(phi)});
    }
    return p;
}

inline AttributeVector sample_attributes(Rng& rng) {
    AttributeVector a;
    for (auto& v : a.values) v = rng.uniform() < 0.2;
    const bool male = rng.uniform() < 0.45;
    a.set("Male", male);
    a.set("Young", rng.uniform() < 0.75);
    a.set("Smiling", rng.uniform() < 0.5);
    a.set("Mouth_Slightly_Open", rng.uniform() < 0.4);
    a.set("Eyeglasses", rng.uniform() < 0.15);
    a.set("Wearing_Hat", rng.uniform() < 0.08);
    a.set("Narrow_Eyes", rng.uniform() < 0.1);
    a.set("Pale_Skin", rng.uniform() < 0.08);
    a.set("Blurry", rng.uniform() < 0.04);
    a.set("Bangs", rng.uniform() < 0.15);
    a.set("Bald", male && rng.uniform() < 0.1);
    const double h = rng.uniform();
    a.set("Black_Hair", !a.get("Bald") && h < 0.3);
    a.set("Brown_Hair", !a.get("Bald") && h >= 0.3 && h < 0.6);
    a.set("Blond_Hair", !a.get("Bald") && h >= 0.6 && h < 0.8);
    a.set("Gray_Hair", !a.get("Bald") && h >= 0.8 && h < 0.9);
    for (const char* m : {"Mustache", "Goatee", "5_o_Clock_Shadow", "Sideburns", "Wearing_Necktie"})
        a.set(m, male && rng.uniform() < 0.15);
    a.set("No_Beard", !male || !(a.get("Goatee") || a.get("Mustache")));
    for (const char* f : {"Wearing_Lipstick", "Heavy_Makeup", "Wearing_Earrings", "Arched_Eyebrows"})
        a.set(f, !male && rng.uniform() < 0.4);
    return a;
}

inline std::array<double, 3> base_color(std::uint8_t l, const AttributeVector& a) {
    std::array<double, 3> skin = a.get("Pale_Skin") ? std::array<double, 3>{238, 214, 200} : std::array<double, 3>{214, 168, 138};
    std::array<double, 3> hair{60, 45, 35};
    if (a.get("Black_Hair")) hair = {25, 22, 22};
    if (a.get("Blond_Hair")) hair = {215, 185, 110};
    if (a.get("Gray_Hair")) hair = {160, 160, 165};
    switch (l) {
        case kSkin: case kLEar: case kREar: case kNeck: return skin;
        case kNose: return {skin[0] - 12, skin[1] - 14, skin[2] - 12};
        case kGlasses: return {30, 30, 40};
        case kLEye: case kREye: return {240, 240, 235};
        case kLBrow: case kRBrow: return {hair[0] * 0.7, hair[1] * 0.7, hair[2] * 0.7};
        case kMouth: return {90, 30, 40};
        case kULip: case kLLip: return a.get("Wearing_Lipstick") ? std::array<double, 3>{190, 40, 60} : std::array<double, 3>{180, 105, 100};
        case kHair: return hair;
        case kHat: return {60, 80, 150};
        case kCloth: return {90, 110, 90};
        default: return {120, 150, 180};
    }
}

}  // namespace synth

/// Deterministic face for (seed, index).
inline SyntheticFace synthetic_face(std::uint64_t seed, std::uint64_t index, const SyntheticOptions& opt = {}) {
    if (opt.size < 8) throw ValidationError("synthetic face size must be at least 8");
    Rng rng(derive_seed(seed, "synthetic_face", index));
    SyntheticFace f;
    f.attrs = opt.attrs ? *opt.attrs : synth::sample_attributes(rng);
    const auto& a = f.attrs;

    synth::Geometry g;
    g.nose_shift = opt.yaw ? *opt.yaw : 0.06 * opt.jitter * rng.normal();
    g.eye_h = a.get("Narrow_Eyes") ? 0.05 : 0.08;
    g.mouth_w = a.get("Smiling") ? 0.42 : 0.33;
    g.nose_w = a.get("Big_Nose") ? 0.17 : 0.12;
    g.open = a.get("Mouth_Slightly_Open");
    g.glasses = a.get("Eyeglasses");
    g.hat = a.get("Wearing_Hat");
    g.bald = a.get("Bald");
    g.long_hair = !a.get("Male");
    g.bangs = a.get("Bangs");

    const double n = opt.size;
    const double cx = n * (0.5 + 0.03 * opt.jitter * rng.uniform(-1.0, 1.0));
    const double cy = n * (0.5 + 0.03 * opt.jitter * rng.uniform(-1.0, 1.0));
    const double scale = n * (0.24 + 0.02 * opt.jitter * rng.uniform(-1.0, 1.0));
    const double theta = 0.1 * opt.jitter * rng.normal();
    const double c = std::cos(theta), s = std::sin(theta);

    for (const auto& p : synth::canonical_landmarks(g))
        f.landmarks.points.push_back({(cx + scale * (c * p[0] - s * p[1])) / n, (cy + scale * (s * p[0] + c * p[1])) / n});
    f.landmarks.convention = "dlib68";

    f.seg = SegmentationMap(opt.size, opt.size);
    f.image = RgbImage(opt.size, opt.size);
    const double fx = rng.uniform(0.2, 0.6), fy = rng.uniform(0.2, 0.6), ph = rng.uniform(0.0, 6.28);
    for (int y = 0; y < opt.size; ++y)
        for (int x = 0; x < opt.size; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            const double u = (c * dx + s * dy) / scale, v = (-s * dx + c * dy) / scale;
            const auto l = synth::label_at(u, v, g);
            f.seg.at(y, x) = l;
            const auto base = synth::base_color(l, a);
            const double shade = 1.0 - 0.08 * v + 0.06 * std::sin(fx * x + fy * y + ph);
            for (int ch = 0; ch < 3; ++ch) f.image.at(y, x)[ch] = detail::to_byte(base[ch] * shade + 12.0 * rng.normal());
        }
    if (a.get("Blurry")) {
        for (int pass = 0; pass < 3; ++pass) {
            RgbImage b = f.image;
            for (int y = 0; y < opt.size; ++y)
                for (int x = 0; x < opt.size; ++x)
                    for (int ch = 0; ch < 3; ++ch) {
                        double acc = 0.0;
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx)
                                acc += f.image.at(std::clamp(y + dy, 0, opt.size - 1), std::clamp(x + dx, 0, opt.size - 1))[ch];
                        b.at(y, x)[ch] = detail::to_byte(acc / 9.0);
                    }
            f.image = b;
        }
    }
    return f;
}

}  // namespace m3face::dataset
