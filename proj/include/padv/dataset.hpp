// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Hermetic procedural dataset: ten parametric shape/texture classes with
// randomized pose, color and background, plus PNG-folder ingestion.

#pragma once

#include <filesystem>
#include <iostream>

#include "padv/image.hpp"

namespace padv {

enum class Split { Train, Val, Test };

struct LabeledItem {
    RgbImage image;
    int label = 0;
    Split split = Split::Train;
};

struct LabeledDataset {
    std::vector<LabeledItem> items;
    int num_classes = 10;

    std::vector<const LabeledItem*> split_items(Split s) const {
        std::vector<const LabeledItem*> out;
        for (const auto& it : items)
            if (it.split == s) out.push_back(&it);
        return out;
    }
};

namespace detail {

inline void fill_background(RgbImage& img, Rng& rng) {
    float c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
        c0[c] = float(rng.uniform(0.05, 0.6));
        c1[c] = float(rng.uniform(0.05, 0.6));
    }
    bool horizontal = rng.uniform() < 0.5;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float t = horizontal ? x / float(img.width - 1) : y / float(img.height - 1);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = (1 - t) * c0[c] + t * c1[c];
        }
}

// Antialiased compositing of a coverage field over the background.
template <class F>
void paint(RgbImage& img, const float fg[3], F&& coverage) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float a = std::clamp(coverage(y + 0.5f, x + 0.5f), 0.f, 1.f);
            if (a <= 0.f) continue;
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = (1 - a) * img.at(c, y, x) + a * fg[c];
        }
}

}  // namespace detail

/// Renders one procedural sample. Classes:
/// 0 disc, 1 square, 2 triangle, 3 ring, 4 cross, 5 horizontal stripes,
/// 6 vertical stripes, 7 checkerboard, 8 dot grid, 9 diagonal stripes.
inline RgbImage render_class_sample(int label, int size, Rng& rng) {
    RgbImage img(size, size);
    detail::fill_background(img, rng);
    float fg[3];
    for (int c = 0; c < 3; ++c) fg[c] = float(rng.uniform(0.55, 1.0));
    float cx = size * float(rng.uniform(0.35, 0.65));
    float cy = size * float(rng.uniform(0.35, 0.65));
    float r = size * float(rng.uniform(0.18, 0.30));
    float period = float(rng.uniform(6.0, 10.0));
    float phase = float(rng.uniform(0.0, period));

    switch (label) {
        case 0:  // disc
            detail::paint(img, fg, [&](float y, float x) {
                return r - std::hypot(x - cx, y - cy) + 0.5f;
            });
            break;
        case 1:  // axis-aligned square
            detail::paint(img, fg, [&](float y, float x) {
                float d = std::max(std::abs(x - cx), std::abs(y - cy));
                return r - d + 0.5f;
            });
            break;
        case 2:  // upward triangle
            detail::paint(img, fg, [&](float y, float x) {
                float u = (y - (cy - r)) / (2.f * r);
                if (u < 0.f || u > 1.f) return 0.f;
                float half = u * r;
                return half - std::abs(x - cx) + 0.5f;
            });
            break;
        case 3:  // ring
            detail::paint(img, fg, [&](float y, float x) {
                float d = std::hypot(x - cx, y - cy);
                float w = 0.35f * r;
                return w - std::abs(d - r) + 0.5f;
            });
            break;
        case 4:  // cross
            detail::paint(img, fg, [&](float y, float x) {
                float w = 0.35f * r;
                float dx = std::abs(x - cx), dy = std::abs(y - cy);
                float arm1 = std::min(w - dx, r - dy);
                float arm2 = std::min(w - dy, r - dx);
                return std::max(arm1, arm2) + 0.5f;
            });
            break;
        case 5:  // horizontal stripes
            detail::paint(img, fg, [&](float y, float) {
                float t = std::fmod(y + phase, period) / period;
                return t < 0.5f ? 1.f : 0.f;
            });
            break;
        case 6:  // vertical stripes
            detail::paint(img, fg, [&](float, float x) {
                float t = std::fmod(x + phase, period) / period;
                return t < 0.5f ? 1.f : 0.f;
            });
            break;
        case 7: {  // checkerboard
            float cell = period * 0.8f;
            detail::paint(img, fg, [&](float y, float x) {
                int ix = int((x + phase) / cell), iy = int((y + phase) / cell);
                return (ix + iy) % 2 == 0 ? 1.f : 0.f;
            });
            break;
        }
        case 8: {  // dot grid
            float spacing = period * 1.5f;
            float rad = spacing * 0.3f;
            detail::paint(img, fg, [&](float y, float x) {
                float mx = std::fmod(x + phase, spacing) - spacing / 2;
                float my = std::fmod(y + phase, spacing) - spacing / 2;
                return rad - std::hypot(mx, my) + 0.5f;
            });
            break;
        }
        case 9:  // diagonal stripes
            detail::paint(img, fg, [&](float y, float x) {
                float t = std::fmod(x + y + phase, period) / period;
                return t < 0.5f ? 1.f : 0.f;
            });
            break;
        default:
            throw Error("render_class_sample: label " + std::to_string(label) + " out of range");
    }
    // mild per-pixel noise so the classes are textured, not flat
    for (auto& v : img.data) v = std::clamp(v + float(rng.uniform(-0.02, 0.02)), 0.f, 1.f);
    return img;
}

/// Deterministic class-balanced dataset; per-item RNG is keyed by (seed,
/// label, index) so any subset is reproducible independently.
inline LabeledDataset generate_dataset(uint64_t seed, int n_per_class, int K = 10, int size = 64) {
    if (K < 1 || K > 10) throw Error("generate_dataset: K must be in [1,10]");
    LabeledDataset ds;
    ds.num_classes = K;
    for (int label = 0; label < K; ++label)
        for (int i = 0; i < n_per_class; ++i) {
            Rng rng = Rng::keyed(seed, uint64_t(label) * 1000003u + uint64_t(i));
            LabeledItem item;
            item.image = render_class_sample(label, size, rng);
            item.label = label;
            // fixed 70/10/20 split by index
            if (i < (n_per_class * 7) / 10)
                item.split = Split::Train;
            else if (i < (n_per_class * 8) / 10)
                item.split = Split::Val;
            else
                item.split = Split::Test;
            ds.items.push_back(std::move(item));
        }
    return ds;
}

/// Ingests a folder of `class_name/*.png`; images are resized to `size`.
/// Unreadable files are skipped with a warning; an empty class is an error.
inline LabeledDataset ingest_dataset(const std::string& root, int size = 64) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw Error("ingest: " + root + " is not a directory");
    std::vector<std::string> classes;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) classes.push_back(e.path().filename().string());
    std::sort(classes.begin(), classes.end());
    if (classes.empty()) throw Error("ingest: no class subdirectories in " + root);
    LabeledDataset ds;
    ds.num_classes = int(classes.size());
    for (int label = 0; label < int(classes.size()); ++label) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(fs::path(root) / classes[label]))
            if (e.is_regular_file()) files.push_back(e.path().string());
        std::sort(files.begin(), files.end());  // deterministic ordering by filename
        int count = 0;
        for (size_t i = 0; i < files.size(); ++i) {
            RgbImage img;
            try {
                img = read_png(files[i]);
            } catch (const Error& err) {
                std::cerr << "warning: skipping " << files[i] << ": " << err.what() << "\n";
                continue;
            }
            LabeledItem item;
            item.image = resize_bilinear(img, size, size);
            item.label = label;
            item.split = (count % 5 == 4) ? Split::Test : Split::Train;
            ds.items.push_back(std::move(item));
            ++count;
        }
        if (count == 0) throw Error("ingest: class '" + classes[label] + "' has no readable images");
    }
    return ds;
}

}  // namespace padv
