// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Test-only oracles, independent of the library's gradient path:
//  * central finite differences for gradient checks
//  * direct KL divergence summation
//  * direct Gaussian convolution

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "padv/common.hpp"

namespace oracle {

/// Central finite-difference gradient of a scalar function of a flat vector.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-3) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        double x0 = x[i];
        x[i] = x0 + h;
        double fp = f(x);
        x[i] = x0 - h;
        double fm = f(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Max relative error between two gradient vectors, with an absolute floor
/// so that near-zero entries do not blow up the ratio.
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                          double floor = 1e-6) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

/// KL(q || p) by direct summation over categorical distributions.
inline double kl_divergence(const std::vector<double>& q, const std::vector<double>& p) {
    double s = 0.0;
    for (size_t i = 0; i < q.size(); ++i)
        if (q[i] > 0.0) s += q[i] * std::log(q[i] / p[i]);
    return s;
}

/// Shannon entropy of a categorical distribution.
inline double entropy(const std::vector<double>& p) {
    double s = 0.0;
    for (double v : p)
        if (v > 0.0) s -= v * std::log(v);
    return s;
}

/// Direct dense Gaussian blur with replicate borders, one channel.
inline std::vector<double> gaussian_blur(const std::vector<double>& img, int H, int W, double sigma,
                                         int radius) {
    std::vector<double> w(2 * radius + 1);
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) s += w[i + radius] = std::exp(-i * i / (2 * sigma * sigma));
    for (auto& v : w) v /= s;
    auto clampi = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    std::vector<double> tmp(img.size()), out(img.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += w[i + radius] * img[y * W + clampi(x + i, W)];
            tmp[y * W + x] = acc;
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += w[i + radius] * tmp[clampi(y + i, H) * W + x];
            out[y * W + x] = acc;
        }
    return out;
}

}  // namespace oracle
