#pragma once

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "facemask/image.hpp"

namespace facemask {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void png_error_to_longjmp(png_structp png, png_const_charp) {
    std::longjmp(png_jmpbuf(png), 1);
}
inline void png_warning_silent(png_structp, png_const_charp) {}

struct Raster8 {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<unsigned char> bytes;
};

inline Raster8 read_png8(const std::filesystem::path& path) {
    const std::string where = path.string();
    if (!std::filesystem::exists(path)) throw DataError("load_image: no such file: " + where);
    FilePtr fp(std::fopen(where.c_str(), "rb"));
    if (!fp) throw DataError("load_image: cannot open " + where);

    unsigned char sig[8] = {};
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw DataError("load_image: not a PNG file: " + where);
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_to_longjmp,
                                             png_warning_silent);
    if (!png) throw DataError("load_image: libpng init failed for " + where);
    png_infop info = png_create_info_struct(png);
    Raster8 out;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("load_image: corrupt PNG data in " + where);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (depth != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("load_image: unsupported bit depth " + std::to_string(depth) + " in " + where);
    }
    if (color == PNG_COLOR_TYPE_GRAY) {
        out.channels = 1;
    } else if (color == PNG_COLOR_TYPE_RGB) {
        out.channels = 3;
    } else {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("load_image: only 8-bit grayscale or RGB is supported: " + where);
    }
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.bytes.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);
    rows.resize(out.height);
    for (int r = 0; r < out.height; ++r) {
        rows[r] = out.bytes.data() + static_cast<std::size_t>(r) * out.width * out.channels;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

inline void write_png8(const std::filesystem::path& path, const Raster8& raster) {
    const std::string where = path.string();
    FilePtr fp(std::fopen(where.c_str(), "wb"));
    if (!fp) throw DataError("save_image: cannot write " + where);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_to_longjmp,
                                              png_warning_silent);
    if (!png) throw DataError("save_image: libpng init failed for " + where);
    png_infop info = png_create_info_struct(png);
    std::vector<png_bytep> rows(raster.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("save_image: encoding failed for " + where);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, raster.width, raster.height, 8,
                 raster.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < raster.height; ++r) {
        rows[r] = const_cast<png_bytep>(raster.bytes.data() +
                                        static_cast<std::size_t>(r) * raster.width * raster.channels);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Reads an 8-bit grayscale or RGB PNG; values become v/255.
template <typename T = float>
ImageTensor<T> load_image(const std::filesystem::path& path) {
    const auto raster = detail::read_png8(path);
    ImageTensor<T> img(raster.height, raster.width, raster.channels);
    for (std::size_t i = 0; i < raster.bytes.size(); ++i) img[i] = T(raster.bytes[i]) / T(255);
    return img;
}

/// Writes 1- or 3-channel images as 8-bit PNG, rounding to the nearest level.
template <typename T>
void save_image(const ImageTensor<T>& img, const std::filesystem::path& path) {
    if (img.channels() != 1 && img.channels() != 3) {
        throw ShapeError("save_image: only 1 or 3 channels can be written, got " + img.shape_string());
    }
    detail::Raster8 raster{img.height(), img.width(), img.channels(), {}};
    raster.bytes.resize(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = std::clamp(static_cast<double>(img[i]), 0.0, 1.0);
        raster.bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    detail::write_png8(path, raster);
}

}  // namespace facemask
