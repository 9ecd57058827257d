#pragma once

#include "m3face/core/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace m3face {

/// Interleaved 8-bit RGB image, row-major.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;

    RgbImage() = default;
    RgbImage(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

    std::uint8_t* at(int y, int x) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* at(int y, int x) const { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Rendered condition (segmentation colors or landmark dots) fed to the
/// control branch.
using ConditionImage = RgbImage;

/// Planar [3,H,W] doubles in [0,1].
inline std::vector<double> to_planar(const RgbImage& img) {
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    std::vector<double> out(plane * 3);
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) out[c * plane + i] = img.pixels[i * 3 + c] / 255.0;
    return out;
}

inline std::uint8_t to_u8(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

inline RgbImage from_planar(const std::vector<double>& planar, int h, int w) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (planar.size() != plane * 3) throw ValidationError("from_planar: size mismatch");
    RgbImage img(h, w);
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) img.pixels[i * 3 + c] = to_u8(planar[c * plane + i] * 255.0);
    return img;
}

inline RgbImage horizontal_mirror(const RgbImage& img) {
    RgbImage out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) std::copy_n(img.at(y, img.width - 1 - x), 3, out.at(y, x));
    return out;
}

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
}  // namespace detail

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw StageError("io", "cannot write '" + path.string() + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw StageError("io", "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw StageError("io", "libpng write failed for '" + path.string() + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline RgbImage read_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw StageError("io", "cannot open '" + path.string() + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw StageError("io", "libpng init failed");
    }
    RgbImage img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValidationError("'" + path.string() + "' is not a readable PNG");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img = RgbImage(static_cast<int>(png_get_image_height(png, info)), static_cast<int>(png_get_image_width(png, info)));
    for (int y = 0; y < img.height; ++y) png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace m3face
