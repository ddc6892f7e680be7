// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Image containers and file I/O.
//
// RAW container format (documented bit-exactly):
//   8 little-endian uint16 header values:
//     [0] magic 0x4152 ("RA")       [1] version (1)
//     [2] height                    [3] width
//     [4] CFA code (0=RGGB 1=BGGR 2=GRBG 3=GBRG)
//     [5] white level               [6],[7] reserved (0)
//   followed by height*width little-endian uint16 mosaic samples, row-major.

#pragma once

#include <png.h>

#include <cstdio>
#include <fstream>
#include <vector>

#include "padv/common.hpp"
#include "padv/tensor.hpp"

namespace padv {

enum class Cfa : uint16_t { RGGB = 0, BGGR = 1, GRBG = 2, GBRG = 3 };

/// Channel index (0=R,1=G,2=B) measured at mosaic position (y,x).
inline int cfa_channel(Cfa cfa, int y, int x) {
    static constexpr int pat[4][2][2] = {
        {{0, 1}, {1, 2}},  // RGGB
        {{2, 1}, {1, 0}},  // BGGR
        {{1, 0}, {2, 1}},  // GRBG
        {{1, 2}, {0, 1}},  // GBRG
    };
    return pat[int(cfa)][y & 1][x & 1];
}

/// Planar RGB image, channel-major (CHW), values in [0,1].
struct RgbImage {
    int height = 0, width = 0;
    std::vector<float> data;  // 3*H*W

    RgbImage() = default;
    RgbImage(int h, int w, float fill = 0.f) : height(h), width(w), data(size_t(3) * h * w, fill) {}

    float& at(int c, int y, int x) { return data[(size_t(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(size_t(c) * height + y) * width + x]; }

    Tensor<float> to_tensor() const {
        return Tensor<float>::from_vector({1, 3, height, width},
                                          std::vector<float>(data.begin(), data.end()));
    }
    static RgbImage from_tensor(const Tensor<float>& t) {
        const Shape& s = t.shape();
        if (s.size() != 4 || s[0] != 1 || s[1] != 3)
            throw Error("RgbImage expects a [1,3,H,W] tensor, got " + shape_str(s));
        RgbImage img(s[2], s[3]);
        img.data = t.values();
        return img;
    }
};

/// Single-channel Bayer mosaic in native sensor units [0, white_level].
struct RawImage {
    int height = 0, width = 0;
    std::vector<float> mosaic;  // H*W
    Cfa cfa = Cfa::RGGB;
    float white_level = 65535.f;

    RawImage() = default;
    RawImage(int h, int w, Cfa c = Cfa::RGGB, float wl = 65535.f)
        : height(h), width(w), mosaic(size_t(h) * w, 0.f), cfa(c), white_level(wl) {
        if (h % 2 || w % 2)
            throw Error("RawImage dimensions must be even, got " + std::to_string(h) + "x" +
                        std::to_string(w));
    }

    float& at(int y, int x) { return mosaic[size_t(y) * width + x]; }
    float at(int y, int x) const { return mosaic[size_t(y) * width + x]; }

    void validate() const {
        if (height % 2 || width % 2) throw Error("RawImage dimensions must be even");
        if (mosaic.size() != size_t(height) * width) throw Error("RawImage data size mismatch");
        for (float v : mosaic)
            if (!(v >= 0.f && v <= white_level))
                throw Error("RawImage value " + std::to_string(v) + " outside [0, " +
                            std::to_string(white_level) + "]");
    }

    Tensor<float> to_tensor() const {
        return Tensor<float>::from_vector({1, 1, height, width},
                                          std::vector<float>(mosaic.begin(), mosaic.end()));
    }
    RawImage with_mosaic(const std::vector<float>& m) const {
        RawImage r = *this;
        r.mosaic = m;
        return r;
    }
};

// ---- RAW container ----

inline void write_raw(const std::string& path, const RawImage& raw) {
    raw.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    auto put16 = [&](uint16_t v) {
        char b[2] = {char(v & 0xff), char(v >> 8)};
        f.write(b, 2);
    };
    uint16_t hdr[8] = {0x4152, 1, uint16_t(raw.height), uint16_t(raw.width), uint16_t(raw.cfa),
                       uint16_t(raw.white_level), 0, 0};
    for (uint16_t v : hdr) put16(v);
    for (float v : raw.mosaic) put16(uint16_t(std::lround(std::min(v, raw.white_level))));
}

inline RawImage read_raw(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path);
    auto get16 = [&]() {
        unsigned char b[2];
        f.read(reinterpret_cast<char*>(b), 2);
        return uint16_t(b[0] | (b[1] << 8));
    };
    uint16_t hdr[8];
    for (auto& v : hdr) v = get16();
    if (!f || hdr[0] != 0x4152) throw Error(path + ": not a RAW container (bad magic)");
    if (hdr[1] != 1) throw Error(path + ": unsupported RAW container version");
    RawImage raw(hdr[2], hdr[3], Cfa(hdr[4]), float(hdr[5]));
    for (auto& v : raw.mosaic) v = float(get16());
    if (!f) throw Error(path + ": truncated RAW container");
    return raw;
}

// ---- PNG I/O (8-bit, internal processing stays real-valued) ----

inline void write_png(const std::string& path, const RgbImage& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw Error("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw Error("libpng failure writing " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(size_t(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = std::min(std::max(img.at(c, y, x), 0.f), 1.f);
                row[size_t(x) * 3 + c] = (unsigned char)std::lround(v * 255.f);
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline RgbImage read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw Error("cannot open " + path);
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8)) {
        std::fclose(fp);
        throw Error(path + ": not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw Error("libpng failure reading " + path);
    }
    png_init_io(png, fp);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    int H = png_get_image_height(png, info);
    int W = png_get_image_width(png, info);
    RgbImage img(H, W);
    std::vector<unsigned char> row(size_t(W) * 3);
    for (int y = 0; y < H; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[size_t(x) * 3 + c] / 255.f;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

/// Bilinear resize to (h,w); used for dataset ingestion.
inline RgbImage resize_bilinear(const RgbImage& img, int h, int w) {
    RgbImage out(h, w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y) {
            double sy = (y + 0.5) * img.height / double(h) - 0.5;
            int y0 = std::clamp(int(std::floor(sy)), 0, img.height - 1);
            int y1 = std::min(y0 + 1, img.height - 1);
            double fy = std::clamp(sy - y0, 0.0, 1.0);
            for (int x = 0; x < w; ++x) {
                double sx = (x + 0.5) * img.width / double(w) - 0.5;
                int x0 = std::clamp(int(std::floor(sx)), 0, img.width - 1);
                int x1 = std::min(x0 + 1, img.width - 1);
                double fx = std::clamp(sx - x0, 0.0, 1.0);
                out.at(c, y, x) = float((1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
                                        fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1)));
            }
        }
    return out;
}

inline double psnr(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw Error("psnr: size mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = double(a[i]) - b[i];
        mse += d * d;
    }
    mse /= double(a.size());
    if (mse == 0.0) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

}  // namespace padv
