// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Image-formation and processing stages: Bayer mosaicing, differentiable
// ISPs (demosaic-only and demosaic+bilateral), two black-box reference ISPs
// with non-differentiable stages, and lens PSF simulation.

#pragma once

#include <array>
#include <fstream>
#include <map>

#include "padv/image.hpp"
#include "padv/tensor.hpp"

namespace padv {

// ---- preset files (flat key = value lines, '#' comments) ----

inline std::map<std::string, std::string> load_preset(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open preset " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(" \t\r");
            size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (!trim(line).empty()) throw Error(path + ": malformed preset line: " + line);
            continue;
        }
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

inline double preset_num(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw Error("preset missing key '" + key + "'");
    return std::stod(it->second);
}

// ---- mosaic ----

/// Sample the CFA-designated channel at every pixel, scaled to native units.
inline RawImage mosaic(const RgbImage& rgb, Cfa cfa = Cfa::RGGB, float white_level = 65535.f) {
    if (rgb.height % 2 || rgb.width % 2)
        throw Error("mosaic requires even dimensions, got " + std::to_string(rgb.height) + "x" +
                    std::to_string(rgb.width));
    RawImage raw(rgb.height, rgb.width, cfa, white_level);
    for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x) {
            float v = rgb.at(cfa_channel(cfa, y, x), y, x);
            raw.at(y, x) = std::min(std::max(v, 0.f), 1.f) * white_level;
        }
    return raw;
}

/// Differentiable mosaic: [1,3,H,W] RGB in [0,1] to [1,1,H,W] native-unit
/// samples by CFA selection. Pure gather, so the adjoint is a scatter.
/// Range clipping is the caller's job (clip before mosaicking).
template <class T>
Tensor<T> mosaic_op(const Tensor<T>& rgb, Cfa cfa, T white_level) {
    const Shape& s = rgb.shape();
    if (s.size() != 4 || s[0] != 1 || s[1] != 3)
        throw Error("mosaic_op expects [1,3,H,W], got " + shape_str(s));
    int H = s[2], W = s[3];
    if (H % 2 || W % 2) throw Error("mosaic_op requires even dimensions");
    std::vector<T> out(size_t(H) * W);
    const auto& iv = rgb.values();
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int c = cfa_channel(cfa, y, x);
            out[size_t(y) * W + x] = iv[(size_t(c) * H + y) * W + x] * white_level;
        }
    return detail::make_result<T>({1, 1, H, W}, std::move(out), {rgb},
                                  [H, W, cfa, white_level](TensorImpl<T>& self) {
                                      auto pa = self.parents[0];
                                      if (!pa->needs_grad) return;
                                      auto& ga = pa->ensure_grad();
                                      const auto& g = self.grad;
                                      for (int y = 0; y < H; ++y)
                                          for (int x = 0; x < W; ++x) {
                                              int c = cfa_channel(cfa, y, x);
                                              ga[(size_t(c) * H + y) * W + x] +=
                                                  g[size_t(y) * W + x] * white_level;
                                          }
                                  });
}

// ---- bilinear demosaic ----

namespace detail {

// Visit the fixed interpolation stencil: emit(c, y, x, sy, sx, w) for each
// contribution out[c,y,x] += w * raw[sy,sx]. Measured samples pass through
// with weight 1; missing channels average same-color 3x3 neighbors with
// bilinear weights (renormalized at borders).
template <class F>
void bilinear_demosaic_stencil(int H, int W, Cfa cfa, F&& emit) {
    static constexpr double kw[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int measured = cfa_channel(cfa, y, x);
            for (int c = 0; c < 3; ++c) {
                if (c == measured) {
                    emit(c, y, x, y, x, 1.0);
                    continue;
                }
                double wsum = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int sy = y + dy, sx = x + dx;
                        if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                        if (cfa_channel(cfa, sy, sx) == c) wsum += kw[dy + 1][dx + 1];
                    }
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int sy = y + dy, sx = x + dx;
                        if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                        if (cfa_channel(cfa, sy, sx) == c)
                            emit(c, y, x, sy, sx, kw[dy + 1][dx + 1] / wsum);
                    }
            }
        }
}

}  // namespace detail

/// Differentiable bilinear demosaic: [1,1,H,W] native-unit mosaic to
/// [1,3,H,W] RGB in [0,1]. Linear, with a hand-written adjoint.
template <class T>
Tensor<T> bilinear_demosaic_op(const Tensor<T>& raw, Cfa cfa, T white_level) {
    const Shape& s = raw.shape();
    if (s.size() != 4 || s[0] != 1 || s[1] != 1)
        throw Error("bilinear_demosaic_op expects [1,1,H,W], got " + shape_str(s));
    int H = s[2], W = s[3];
    std::vector<T> out(size_t(3) * H * W, T(0));
    const auto& rv = raw.values();
    T inv = T(1) / white_level;
    detail::bilinear_demosaic_stencil(H, W, cfa, [&](int c, int y, int x, int sy, int sx, double w) {
        out[(size_t(c) * H + y) * W + x] += T(w) * rv[size_t(sy) * W + sx] * inv;
    });
    return detail::make_result<T>({1, 3, H, W}, std::move(out), {raw},
                                  [H, W, cfa, inv](TensorImpl<T>& self) {
                                      auto pa = self.parents[0];
                                      if (!pa->needs_grad) return;
                                      auto& ga = pa->ensure_grad();
                                      const auto& g = self.grad;
                                      detail::bilinear_demosaic_stencil(
                                          H, W, cfa, [&](int c, int y, int x, int sy, int sx, double w) {
                                              ga[size_t(sy) * W + sx] +=
                                                  T(w) * g[(size_t(c) * H + y) * W + x] * inv;
                                          });
                                  });
}

inline RgbImage bilinear_demosaic(const RawImage& raw) {
    raw.validate();
    return RgbImage::from_tensor(bilinear_demosaic_op(raw.to_tensor(), raw.cfa, raw.white_level));
}

// ---- bilateral filter (differentiable; built from autodiff primitives) ----

struct BilateralParams {
    float sigma_spatial = 1.0f;
    float sigma_range = 0.1f;
};

template <class T>
Tensor<T> bilateral_filter_op(const Tensor<T>& rgb, const BilateralParams& p) {
    if (!(p.sigma_spatial > 0.f) || !(p.sigma_range > 0.f))
        throw Error("bilateral_filter: sigmas must be positive");
    int radius = int(std::ceil(2.0 * p.sigma_spatial));
    T inv2ss = T(1) / (T(2) * T(p.sigma_spatial) * T(p.sigma_spatial));
    T inv2sr = T(1) / (T(2) * T(p.sigma_range) * T(p.sigma_range));
    Tensor<T> num, den;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
            T ws = std::exp(-T(dy * dy + dx * dx) * inv2ss);
            auto sh = shift2d(rgb, dy, dx);
            auto d = sub(rgb, sh);
            auto wr = exp(mul(sum_channels(mul(d, d)), -inv2sr));  // [1,1,H,W]
            auto w = mul(wr, ws);
            auto term = mul(sh, w);
            num = num.defined() ? add(num, term) : term;
            den = den.defined() ? add(den, w) : w;
        }
    return div(num, den);
}

inline RgbImage bilateral_filter(const RgbImage& rgb, const BilateralParams& p) {
    return RgbImage::from_tensor(bilateral_filter_op(rgb.to_tensor(), p));
}

// ---- PSF kernels and optics ----

struct PsfKernel {
    std::string id;
    int size = 0;                           // odd
    std::array<std::vector<float>, 3> k;    // per-channel, each sums to 1

    void validate() const {
        if (size % 2 == 0 || size <= 0) throw Error("PSF kernel size must be odd and positive");
        for (const auto& ch : k) {
            if (ch.size() != size_t(size) * size) throw Error("PSF kernel size mismatch");
            double s = 0.0;
            for (float v : ch) {
                if (v < 0.f) throw Error("PSF kernel has negative value");
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-4)
                throw Error("PSF kernel not normalized: sum " + std::to_string(s));
        }
    }
};

inline PsfKernel make_gaussian_psf(const std::string& id, std::array<float, 3> sigma, int size = 7) {
    PsfKernel psf;
    psf.id = id;
    psf.size = size;
    int r = size / 2;
    for (int c = 0; c < 3; ++c) {
        psf.k[c].resize(size_t(size) * size);
        double s = 0.0;
        for (int y = -r; y <= r; ++y)
            for (int x = -r; x <= r; ++x)
                s += psf.k[c][(y + r) * size + x + r] =
                    std::exp(-(y * y + x * x) / (2.0 * sigma[c] * sigma[c]));
        for (auto& v : psf.k[c]) v = float(v / s);
    }
    psf.validate();
    return psf;
}

/// Defocus disk with soft edge; per-channel radii model chromatic spread.
inline PsfKernel make_disk_psf(const std::string& id, std::array<float, 3> radius, int size = 7) {
    PsfKernel psf;
    psf.id = id;
    psf.size = size;
    int r = size / 2;
    for (int c = 0; c < 3; ++c) {
        psf.k[c].resize(size_t(size) * size);
        double s = 0.0;
        for (int y = -r; y <= r; ++y)
            for (int x = -r; x <= r; ++x) {
                double d = std::sqrt(double(y * y + x * x));
                double v = std::clamp(radius[c] + 0.5 - d, 0.0, 1.0);  // 1px antialiased edge
                s += psf.k[c][(y + r) * size + x + r] = v;
            }
        for (auto& v : psf.k[c]) v = float(v / s);
    }
    psf.validate();
    return psf;
}

inline PsfKernel load_psf_preset(const std::string& path) {
    auto kv = load_preset(path);
    auto it = kv.find("kind");
    if (it == kv.end()) throw Error(path + ": lens preset missing 'kind'");
    std::string id = kv.count("id") ? kv.at("id") : "lens";
    int size = kv.count("size") ? int(preset_num(kv, "size")) : 7;
    if (it->second == "gaussian")
        return make_gaussian_psf(id,
                                 {float(preset_num(kv, "sigma_r")), float(preset_num(kv, "sigma_g")),
                                  float(preset_num(kv, "sigma_b"))},
                                 size);
    if (it->second == "disk")
        return make_disk_psf(id,
                             {float(preset_num(kv, "radius_r")), float(preset_num(kv, "radius_g")),
                              float(preset_num(kv, "radius_b"))},
                             size);
    throw Error(path + ": unknown lens kind '" + it->second + "'");
}

/// Per-channel convolution with the PSF, replicate padding. Linear; the
/// kernel is a fixed parameter, so only the image gradient is defined.
template <class T>
Tensor<T> apply_psf_op(const Tensor<T>& rgb, const PsfKernel& psf) {
    psf.validate();
    const Shape& s = rgb.shape();
    if (s.size() != 4 || s[0] != 1 || s[1] != 3)
        throw Error("apply_psf expects [1,3,H,W], got " + shape_str(s));
    int H = s[2], W = s[3], r = psf.size / 2, ks = psf.size;
    std::vector<T> out(rgb.numel(), T(0));
    const auto& iv = rgb.values();
    for (int c = 0; c < 3; ++c) {
        const T* src = iv.data() + size_t(c) * H * W;
        T* dst = out.data() + size_t(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int ky = -r; ky <= r; ++ky) {
                    int sy = std::clamp(y + ky, 0, H - 1);
                    for (int kx = -r; kx <= r; ++kx)
                        acc += double(psf.k[c][(ky + r) * ks + kx + r]) *
                               src[sy * W + std::clamp(x + kx, 0, W - 1)];
                }
                dst[y * W + x] = T(acc);
            }
    }
    return detail::make_result<T>(s, std::move(out), {rgb}, [H, W, r, ks, psf](TensorImpl<T>& self) {
        auto pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int c = 0; c < 3; ++c) {
            T* dst = ga.data() + size_t(c) * H * W;
            const T* g = self.grad.data() + size_t(c) * H * W;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    T gv = g[y * W + x];
                    for (int ky = -r; ky <= r; ++ky) {
                        int sy = std::clamp(y + ky, 0, H - 1);
                        for (int kx = -r; kx <= r; ++kx)
                            dst[sy * W + std::clamp(x + kx, 0, W - 1)] +=
                                T(psf.k[c][(ky + r) * ks + kx + r]) * gv;
                    }
                }
        }
    });
}

inline RgbImage apply_psf(const RgbImage& img, const PsfKernel& psf) {
    return RgbImage::from_tensor(apply_psf_op(img.to_tensor(), psf));
}

///// Display-to-RAW capture: PSF blur, exposure gain, mosaic. Optional
/// Gaussian read noise (off by default).
inline RawImage capture_display(const RgbImage& display, const PsfKernel& lens, Cfa cfa = Cfa::RGGB,
                                float white_level = 65535.f, float exposure_gain = 1.f,
                                float noise_sigma = 0.f, Rng* rng = nullptr) {
    if (!(exposure_gain > 0.f)) throw Error("capture_display: exposure gain must be positive");
    RgbImage blurred = apply_psf(display, lens);
    for (auto& v : blurred.data) v = std::min(v * exposure_gain, 1.f);
    RawImage raw = mosaic(blurred, cfa, white_level);
    if (noise_sigma > 0.f && rng) {
        for (auto& v : raw.mosaic)
            v = std::clamp(v + float(rng->normal()) * noise_sigma * white_level, 0.f, white_level);
    }
    return raw;
}

// ---- black-box reference ISP A (demosaic / WB / CCM / gamma LUT / unsharp) ----

struct IspAParams {
    std::array<float, 3> wb = {1.6f, 1.0f, 1.4f};
    std::array<float, 9> ccm = {1.45f, -0.30f, -0.15f, -0.25f, 1.50f, -0.25f, -0.10f, -0.40f, 1.50f};
    float sharpen_amount = 1.2f;
    // Coring detail response: detail below denoise_t0 is scaled by
    // denoise_floor (0 = fully removed, negative = over-corrected), detail
    // above denoise_t1 is fully kept and sharpened, with a smooth ramp in
    // between. t1 <= t0 disables the gate and leaves plain unsharp masking.
    float denoise_t0 = 0.02f;
    float denoise_t1 = 0.06f;
    float denoise_floor = 0.f;
    int lut_levels = 256;

    static IspAParams from_preset(const std::string& path) {
        auto kv = load_preset(path);
        IspAParams p;
        p.wb = {float(preset_num(kv, "wb_r")), float(preset_num(kv, "wb_g")),
                float(preset_num(kv, "wb_b"))};
        static const char* keys[9] = {"ccm_rr", "ccm_rg", "ccm_rb", "ccm_gr", "ccm_gg",
                                      "ccm_gb", "ccm_br", "ccm_bg", "ccm_bb"};
        for (int i = 0; i < 9; ++i) p.ccm[i] = float(preset_num(kv, keys[i]));
        p.sharpen_amount = float(preset_num(kv, "sharpen_amount"));
        p.denoise_t0 = float(preset_num(kv, "denoise_t0"));
        p.denoise_t1 = float(preset_num(kv, "denoise_t1"));
        p.denoise_floor = float(preset_num(kv, "denoise_floor"));
        p.lut_levels = int(preset_num(kv, "lut_levels"));
        return p;
    }
};

inline float srgb_encode(float v) {
    v = std::clamp(v, 0.f, 1.f);
    return v <= 0.0031308f ? 12.92f * v : 1.055f * std::pow(v, 1.f / 2.4f) - 0.055f;
}

namespace detail {
inline RgbImage gauss3_blur(const RgbImage& img) {
    static constexpr float k[3] = {0.25f, 0.5f, 0.25f};
    RgbImage tmp(img.height, img.width), out(img.height, img.width);
    auto cl = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                tmp.at(c, y, x) = k[0] * img.at(c, y, cl(x - 1, img.width)) + k[1] * img.at(c, y, x) +
                                  k[2] * img.at(c, y, cl(x + 1, img.width));
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out.at(c, y, x) = k[0] * tmp.at(c, cl(y - 1, img.height), x) + k[1] * tmp.at(c, y, x) +
                                  k[2] * tmp.at(c, cl(y + 1, img.height), x);
    }
    return out;
}

inline void apply_lut_quantized(RgbImage& img, const std::vector<float>& lut) {
    int n = int(lut.size());
    for (auto& v : img.data) {
        int idx = std::clamp(int(std::lround(std::clamp(v, 0.f, 1.f) * (n - 1))), 0, n - 1);
        v = lut[idx];
    }
}
}  // namespace detail

/// Reference black-box pipeline A. Deterministic, pure, non-differentiable
/// (LUT quantization and the sharpening clamp break differentiability).
inline RgbImage blackbox_isp_a(const RawImage& raw, const IspAParams& p = {}) {
    raw.validate();
    RgbImage img = bilinear_demosaic(raw);
    // white balance
    for (int c = 0; c < 3; ++c) {
        float g = p.wb[c];
        float* d = img.data.data() + size_t(c) * raw.height * raw.width;
        for (int i = 0; i < raw.height * raw.width; ++i) d[i] = std::min(d[i] * g, 1.f);
    }
    // color-correction matrix
    size_t hw = size_t(raw.height) * raw.width;
    for (size_t i = 0; i < hw; ++i) {
        float r = img.data[i], g = img.data[hw + i], b = img.data[2 * hw + i];
        img.data[i] = std::clamp(p.ccm[0] * r + p.ccm[1] * g + p.ccm[2] * b, 0.f, 1.f);
        img.data[hw + i] = std::clamp(p.ccm[3] * r + p.ccm[4] * g + p.ccm[5] * b, 0.f, 1.f);
        img.data[2 * hw + i] = std::clamp(p.ccm[6] * r + p.ccm[7] * g + p.ccm[8] * b, 0.f, 1.f);
    }
    // sRGB-like gamma via quantized LUT
    std::vector<float> lut(p.lut_levels);
    for (int i = 0; i < p.lut_levels; ++i) {
        float enc = srgb_encode(float(i) / (p.lut_levels - 1));
        lut[i] = std::lround(enc * (p.lut_levels - 1)) / float(p.lut_levels - 1);
    }
    detail::apply_lut_quantized(img, lut);
    // amplitude-gated detail stage: small detail is treated as sensor noise
    // and flattened toward the local mean, large detail is kept and
    // sharpened (unsharp masking)
    RgbImage blur = detail::gauss3_blur(img);
    RgbImage det(img.height, img.width);
    for (size_t i = 0; i < img.data.size(); ++i) det.data[i] = img.data[i] - blur.data[i];
    for (size_t i = 0; i < img.data.size(); ++i) {
        float keep = 1.f;
        if (p.denoise_t1 > p.denoise_t0) {
            float u = std::clamp((std::abs(det.data[i]) - p.denoise_t0) / (p.denoise_t1 - p.denoise_t0),
                                 0.f, 1.f);
            float s = u * u * (3.f - 2.f * u);
            keep = p.denoise_floor + (1.f - p.denoise_floor) * s;
        }
        img.data[i] = std::clamp(blur.data[i] + (1.f + p.sharpen_amount) * keep * det.data[i], 0.f, 1.f);
    }
    return img;
}

// ---- black-box reference ISP B (Malvar / median / tone LUT / quantize) ----

struct IspBParams {
    float tone_strength = 0.7f;
    int quant_levels = 256;

    static IspBParams from_preset(const std::string& path) {
        auto kv = load_preset(path);
        IspBParams p;
        p.tone_strength = float(preset_num(kv, "tone_strength"));
        p.quant_levels = int(preset_num(kv, "quant_levels"));
        return p;
    }
};

/// Gradient-corrected (Malvar-style) demosaic; borders fall back to bilinear.
inline RgbImage malvar_demosaic(const RawImage& raw) {
    RgbImage img = bilinear_demosaic(raw);
    int H = raw.height, W = raw.width;
    float wl = raw.white_level;
    auto m = [&](int y, int x) { return raw.at(y, x) / wl; };
    for (int y = 2; y < H - 2; ++y)
        for (int x = 2; x < W - 2; ++x) {
            int ch = cfa_channel(raw.cfa, y, x);
            float c = m(y, x);
            float cross4 = m(y - 2, x) + m(y + 2, x) + m(y, x - 2) + m(y, x + 2);
            if (ch == 0 || ch == 2) {
                // G at an R/B site: laplacian-corrected average of 4 G neighbors
                float g4 = m(y - 1, x) + m(y + 1, x) + m(y, x - 1) + m(y, x + 1);
                img.at(1, y, x) = std::clamp((2.f * g4 + 4.f * c - cross4) / 8.f, 0.f, 1.f);
                // opposite chroma at this site, from the 4 diagonals
                float d4 = m(y - 1, x - 1) + m(y - 1, x + 1) + m(y + 1, x - 1) + m(y + 1, x + 1);
                float v = (2.f * d4 + 6.f * c - 1.5f * cross4) / 8.f;
                img.at(ch == 0 ? 2 : 0, y, x) = std::clamp(v, 0.f, 1.f);
            } else {
                // R and B at a G site
                bool red_row = cfa_channel(raw.cfa, y, x - 1) == 0 || cfa_channel(raw.cfa, y, x + 1) == 0;
                float horiz2 = m(y, x - 1) + m(y, x + 1);
                float vert2 = m(y - 1, x) + m(y + 1, x);
                float diag4 = m(y - 1, x - 1) + m(y - 1, x + 1) + m(y + 1, x - 1) + m(y + 1, x + 1);
                float row_t = (4.f * horiz2 + 5.f * c - diag4 - m(y, x - 2) - m(y, x + 2) +
                               0.5f * (m(y - 2, x) + m(y + 2, x))) / 8.f;
                float col_t = (4.f * vert2 + 5.f * c - diag4 - m(y - 2, x) - m(y + 2, x) +
                               0.5f * (m(y, x - 2) + m(y, x + 2))) / 8.f;
                img.at(red_row ? 0 : 2, y, x) = std::clamp(row_t, 0.f, 1.f);
                img.at(red_row ? 2 : 0, y, x) = std::clamp(col_t, 0.f, 1.f);
            }
        }
    return img;
}

namespace detail {
inline RgbImage median3(const RgbImage& img) {
    RgbImage out(img.height, img.width);
    auto cl = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    float window[9];
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                int n = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx)
                        window[n++] = img.at(c, cl(y + dy, img.height), cl(x + dx, img.width));
                std::nth_element(window, window + 4, window + 9);
                out.at(c, y, x) = window[4];
            }
    return out;
}
}  // namespace detail

/// Reference black-box pipeline B. Median filtering and 8-bit quantization
/// are the non-differentiable stages.
inline RgbImage blackbox_isp_b(const RawImage& raw, const IspBParams& p = {}) {
    raw.validate();
    RgbImage img = malvar_demosaic(raw);
    img = detail::median3(img);
    // global tone curve (contrast S-curve blended with identity)
    std::vector<float> lut(p.quant_levels);
    for (int i = 0; i < p.quant_levels; ++i) {
        float v = float(i) / (p.quant_levels - 1);
        float s = v * v * (3.f - 2.f * v);
        lut[i] = (1.f - p.tone_strength) * v + p.tone_strength * s;
    }
    detail::apply_lut_quantized(img, lut);
    // 8-bit quantization
    for (auto& v : img.data) v = std::lround(std::clamp(v, 0.f, 1.f) * 255.f) / 255.f;
    return img;
}

// ---- ISP handles ----

enum class DiffIsp { Demosaic, Bilateral };

/// Handle over a pipeline ISP: either a differentiable graph function or a
/// black-box oracle. Requesting the gradient path of a black-box is an error.
struct IspHandle {
    enum class Kind { Differentiable, BlackBox };
    Kind kind = Kind::BlackBox;
    std::string id;
    DiffIsp diff_kind = DiffIsp::Demosaic;
    BilateralParams bilateral;
    std::function<RgbImage(const RawImage&)> oracle;

    RgbImage evaluate(const RawImage& raw) const {
        if (kind == Kind::BlackBox) return oracle(raw);
        auto t = forward_graph(raw.to_tensor(), raw.white_level);
        return RgbImage::from_tensor(t);
    }

    template <class T>
    Tensor<T> forward_graph(const Tensor<T>& raw, T white_level) const {
        if (kind == Kind::BlackBox)
            throw Error("ISP '" + id + "' is a black-box oracle; gradients are not available");
        auto rgb = bilinear_demosaic_op(raw, Cfa::RGGB, white_level);
        if (diff_kind == DiffIsp::Bilateral) rgb = bilateral_filter_op(rgb, bilateral);
        return rgb;
    }
};

inline IspHandle make_demosaic_isp() {
    IspHandle h;
    h.kind = IspHandle::Kind::Differentiable;
    h.id = "demosaic";
    h.diff_kind = DiffIsp::Demosaic;
    return h;
}

inline IspHandle make_bilateral_isp(BilateralParams p = {}) {
    IspHandle h;
    h.kind = IspHandle::Kind::Differentiable;
    h.id = "bilateral";
    h.diff_kind = DiffIsp::Bilateral;
    h.bilateral = p;
    return h;
}

inline IspHandle make_blackbox_a(IspAParams p = {}) {
    IspHandle h;
    h.kind = IspHandle::Kind::BlackBox;
    h.id = "isp_a";
    h.oracle = [p](const RawImage& raw) { return blackbox_isp_a(raw, p); };
    return h;
}

inline IspHandle make_blackbox_b(IspBParams p = {}) {
    IspHandle h;
    h.kind = IspHandle::Kind::BlackBox;
    h.id = "isp_b";
    h.oracle = [p](const RawImage& raw) { return blackbox_isp_b(raw, p); };
    return h;
}

/// Display-to-RGB chain for the optics attack: lens PSF, capture, one ISP.
struct CaptureChain {
    std::string id;
    PsfKernel lens;
    IspHandle isp;
    Cfa cfa = Cfa::RGGB;
    float white_level = 65535.f;
    float exposure_gain = 1.f;

    RgbImage evaluate(const RgbImage& display) const {
        return isp.evaluate(capture_display(display, lens, cfa, white_level, exposure_gain));
    }
};

}  // namespace padv
