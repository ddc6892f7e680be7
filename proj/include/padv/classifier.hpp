// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Desk-scale CNN classifier shared by every pipeline: 4 conv blocks with
// 2x pooling, global average pool, linear head.

#pragma once

#include "padv/dataset.hpp"
#include "padv/isp.hpp"
#include "padv/nn.hpp"

namespace padv {

template <class T = float>
struct ClassifierModelT {
    int input_size = 64;
    int num_classes = 10;
    Tensor<T> w1, b1, w2, b2, w3, b3, w4, b4, wh, bh;

    static ClassifierModelT init(int K, int input_size, uint64_t seed) {
        Rng rng = Rng::keyed(seed, 0xc1a55);
        ClassifierModelT m;
        m.input_size = input_size;
        m.num_classes = K;
        auto he = [&](Shape s) { return he_init(std::move(s), rng).template cast<T>(); };
        m.w1 = he({16, 3, 3, 3});
        m.b1 = Tensor<T>::zeros({16});
        m.w2 = he({32, 16, 3, 3});
        m.b2 = Tensor<T>::zeros({32});
        m.w3 = he({64, 32, 3, 3});
        m.b3 = Tensor<T>::zeros({64});
        m.w4 = he({64, 64, 3, 3});
        m.b4 = Tensor<T>::zeros({64});
        m.wh = he({K, 64});
        m.bh = Tensor<T>::zeros({K});
        return m;
    }

    /// Logits for a [N,3,H,W] batch in [0,1].
    Tensor<T> forward(const Tensor<T>& x) const {
        auto block = [](const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b) {
            return avgpool2(leaky_relu(conv2d(in, w, 1, 1, &b)));
        };
        auto h = block(x, w1, b1);
        h = block(h, w2, b2);
        h = block(h, w3, b3);
        h = block(h, w4, b4);
        return linear(global_avgpool(h), wh, bh);
    }

    ParamList params() {
        return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"w3", w3},
                {"b3", b3}, {"w4", w4}, {"b4", b4}, {"wh", wh}, {"bh", bh}};
    }

    void set_requires_grad(bool on) {
        for (auto& p : params()) p.tensor.requires_grad(on);
    }

    template <class U>
    ClassifierModelT<U> cast() const {
        ClassifierModelT<U> m;
        m.input_size = input_size;
        m.num_classes = num_classes;
        m.w1 = w1.template cast<U>();
        m.b1 = b1.template cast<U>();
        m.w2 = w2.template cast<U>();
        m.b2 = b2.template cast<U>();
        m.w3 = w3.template cast<U>();
        m.b3 = b3.template cast<U>();
        m.w4 = w4.template cast<U>();
        m.b4 = b4.template cast<U>();
        m.wh = wh.template cast<U>();
        m.bh = bh.template cast<U>();
        return m;
    }
};

using ClassifierModel = ClassifierModelT<float>;

inline void save_classifier(const std::string& path, ClassifierModel& model,
                            const std::string& extra_meta = "") {
    std::string meta = "kind=classifier;classes=" + std::to_string(model.num_classes) +
                       ";input=" + std::to_string(model.input_size);
    if (!extra_meta.empty()) meta += ";" + extra_meta;
    save_checkpoint(path, model.params(), meta);
}

inline ClassifierModel load_classifier(const std::string& path) {
    std::string meta;
    auto src = load_checkpoint(path, &meta);
    if (meta.find("kind=classifier") == std::string::npos)
        throw Error(path + ": not a classifier checkpoint (" + meta + ")");
    auto grab = [&](const std::string& key) {
        auto pos = meta.find(key + "=");
        return std::stoi(meta.substr(pos + key.size() + 1));
    };
    ClassifierModel m = ClassifierModel::init(grab("classes"), grab("input"), 0);
    auto dst = m.params();
    assign_params(dst, src);
    return m;
}

// ---- inference ----

/// Class distribution for one image (resized to the model input if needed).
inline std::vector<float> predict(const ClassifierModel& model, const RgbImage& rgb) {
    RgbImage in = (rgb.height == model.input_size && rgb.width == model.input_size)
                      ? rgb
                      : resize_bilinear(rgb, model.input_size, model.input_size);
    auto probs = softmax(model.forward(in.to_tensor()));
    return probs.values();
}

/// argmax of predict; ties break to the lowest class index.
inline int argmax_class(const std::vector<float>& dist) {
    int best = 0;
    for (int k = 1; k < int(dist.size()); ++k)
        if (dist[k] > dist[best]) best = k;
    return best;
}

inline int decide(const ClassifierModel& model, const RgbImage& rgb) {
    return argmax_class(predict(model, rgb));
}

// ---- training ----

struct TrainReport {
    std::vector<std::pair<std::string, double>> pipeline_accuracy;
    std::string to_string() const {
        std::string s;
        for (const auto& [id, acc] : pipeline_accuracy)
            s += id + ": " + std::to_string(acc * 100.0).substr(0, 5) + "%  ";
        return s;
    }
};

inline double pipeline_accuracy(const ClassifierModel& model, const IspHandle& isp,
                                const std::vector<const LabeledItem*>& items) {
    int hits = 0;
    for (const auto* it : items) {
        auto out = isp.evaluate(mosaic(it->image));
        if (decide(model, out) == it->label) ++hits;
    }
    return items.empty() ? 0.0 : double(hits) / double(items.size());
}

/// Trains the single shared classifier on the union of all pipelines'
/// outputs. Fails (with a per-pipeline accuracy report) unless every
/// pipeline reaches `min_accuracy` on the test split.
/// When adv_eps > 0, each batch is additionally perturbed by a one-step
/// adversarial low-frequency field: the input gradient is average-pooled to an
/// adv_grid x adv_grid lattice, upsampled bilinearly, and its sign applied at
/// amplitude adv_eps. This hardens the classifier against smooth photometric
/// shifts while leaving fine-detail features untouched.
inline ClassifierModel train_classifier(const LabeledDataset& ds, const std::vector<IspHandle>& isps,
                                        int epochs, float lr, uint64_t seed,
                                        double min_accuracy = 0.70, TrainReport* report_out = nullptr,
                                        bool verbose = false, float adv_eps = 0.f, int adv_grid = 8) {
    auto train_items = ds.split_items(Split::Train);
    if (train_items.empty()) throw Error("train_classifier: empty train split");
    int size = train_items[0]->image.height;

    // precompute every pipeline's view of every training image
    std::vector<std::pair<RgbImage, int>> samples;
    samples.reserve(train_items.size() * isps.size());
    for (const auto* it : train_items) {
        RawImage raw = mosaic(it->image);
        for (const auto& isp : isps) samples.emplace_back(isp.evaluate(raw), it->label);
    }

    ClassifierModel model = ClassifierModel::init(ds.num_classes, size, seed);
    model.set_requires_grad(true);
    auto params = model.params();
    SgdMomentum opt(lr, 0.9f);
    Rng shuffle_rng = Rng::keyed(seed, 0x5bbf1e);

    const int batch = 32;
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), size_t(0));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        opt.set_lr(cosine_lr(lr, epoch, epochs));
        // Fisher-Yates with the dedicated stream
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.randint(int(i))]);
        double epoch_loss = 0.0;
        int nb = 0;
        for (size_t start = 0; start < order.size(); start += batch) {
            size_t n = std::min(size_t(batch), order.size() - start);
            std::vector<float> data(n * 3 * size * size);
            std::vector<int> labels(n);
            for (size_t i = 0; i < n; ++i) {
                const auto& [img, lab] = samples[order[start + i]];
                std::copy(img.data.begin(), img.data.end(), data.begin() + i * 3 * size * size);
                labels[i] = lab;
            }
            if (adv_eps > 0.f) {
                auto xa = Tensor<float>::from_vector({int(n), 3, size, size}, data).requires_grad();
                zero_grads(params);
                backward(cross_entropy(model.forward(xa), labels));
                const auto& g = xa.grad();
                const int gs = adv_grid, cellp = size / gs;
                std::vector<float> cell(n * 3 * gs * gs, 0.f);
                for (size_t i = 0; i < n; ++i)
                    for (int c = 0; c < 3; ++c)
                        for (int y = 0; y < size; ++y)
                            for (int x2 = 0; x2 < size; ++x2)
                                cell[((i * 3 + c) * gs + std::min(y / cellp, gs - 1)) * gs +
                                     std::min(x2 / cellp, gs - 1)] +=
                                    g[((i * 3 + c) * size + y) * size + x2];
                for (size_t i = 0; i < n; ++i)
                    for (int c = 0; c < 3; ++c)
                        for (int y = 0; y < size; ++y)
                            for (int x2 = 0; x2 < size; ++x2) {
                                // bilinear sample of the pooled gradient field
                                float fy = (y + 0.5f) * gs / size - 0.5f;
                                float fx = (x2 + 0.5f) * gs / size - 0.5f;
                                int y0 = std::clamp(int(std::floor(fy)), 0, gs - 1);
                                int x0 = std::clamp(int(std::floor(fx)), 0, gs - 1);
                                int y1 = std::min(y0 + 1, gs - 1), x1 = std::min(x0 + 1, gs - 1);
                                float wy = std::clamp(fy - y0, 0.f, 1.f), wx = std::clamp(fx - x0, 0.f, 1.f);
                                const float* cc = &cell[(i * 3 + c) * gs * gs];
                                float v = (1 - wy) * ((1 - wx) * cc[y0 * gs + x0] + wx * cc[y0 * gs + x1]) +
                                          wy * ((1 - wx) * cc[y1 * gs + x0] + wx * cc[y1 * gs + x1]);
                                float& px = data[((i * 3 + c) * size + y) * size + x2];
                                px = std::clamp(px + adv_eps * (v > 0.f ? 1.f : (v < 0.f ? -1.f : 0.f)),
                                                0.f, 1.f);
                            }
            }
            auto x = Tensor<float>::from_vector({int(n), 3, size, size}, std::move(data));
            zero_grads(params);
            auto loss = cross_entropy(model.forward(x), labels);
            backward(loss);
            opt.step(params);
            epoch_loss += loss.item();
            ++nb;
        }
        if (verbose)
            std::cerr << "classifier epoch " << epoch + 1 << "/" << epochs << " loss "
                      << epoch_loss / nb << "\n";
    }
    model.set_requires_grad(false);

    auto test_items = ds.split_items(Split::Test);
    TrainReport report;
    bool ok = true;
    for (const auto& isp : isps) {
        double acc = pipeline_accuracy(model, isp, test_items);
        report.pipeline_accuracy.emplace_back(isp.id, acc);
        ok = ok && acc >= min_accuracy;
    }
    if (report_out) *report_out = report;
    if (!ok)
        throw Error("classifier below " + std::to_string(min_accuracy * 100) +
                    "% on some pipeline: " + report.to_string());
    return model;
}

}  // namespace padv
