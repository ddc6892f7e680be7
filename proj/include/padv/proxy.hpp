// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Differentiable proxy for a black-box ISP: a fixed bilinear-demosaic front
// end plus a small residual U-Net that learns the remaining color/tone/
// sharpening behaviour. Trained with l1 against oracle outputs; the local
// variant fine-tunes on attack-neighborhood samples.

#pragma once

#include "padv/classifier.hpp"

namespace padv {

template <class T = float>
struct ProxyModelT {
    Cfa cfa = Cfa::RGGB;
    float white_level = 65535.f;
    // encoder (full res, half, quarter), decoder with skips, 3-ch residue head
    Tensor<T> we1, be1, we2, be2, wb, bb, wd2, bd2, wd1, bd1, wo, bo;

    static ProxyModelT init(uint64_t seed, Cfa cfa = Cfa::RGGB, float white_level = 65535.f) {
        Rng rng = Rng::keyed(seed, 0x9c0f7);
        ProxyModelT m;
        m.cfa = cfa;
        m.white_level = white_level;
        auto he = [&](Shape s) { return he_init(std::move(s), rng).template cast<T>(); };
        m.we1 = he({16, 3, 3, 3});
        m.be1 = Tensor<T>::zeros({16});
        m.we2 = he({32, 16, 3, 3});
        m.be2 = Tensor<T>::zeros({32});
        m.wb = he({32, 32, 3, 3});
        m.bb = Tensor<T>::zeros({32});
        m.wd2 = he({16, 64, 3, 3});
        m.bd2 = Tensor<T>::zeros({16});
        m.wd1 = he({16, 32, 3, 3});
        m.bd1 = Tensor<T>::zeros({16});
        m.wo = he({3, 16, 3, 3});
        m.bo = Tensor<T>::zeros({3});
        return m;
    }

    /// Residue predicted from an RGB estimate in [0,1].
    Tensor<T> residue(const Tensor<T>& rgb) const {
        auto e1 = leaky_relu(conv2d(rgb, we1, 1, 1, &be1));
        auto e2 = leaky_relu(conv2d(avgpool2(e1), we2, 1, 1, &be2));
        auto b = leaky_relu(conv2d(avgpool2(e2), wb, 1, 1, &bb));
        auto d2 = leaky_relu(conv2d(concat_channels(upsample_bilinear2(b), e2), wd2, 1, 1, &bd2));
        auto d1 = leaky_relu(conv2d(concat_channels(upsample_bilinear2(d2), e1), wd1, 1, 1, &bd1));
        return conv2d(d1, wo, 1, 1, &bo);
    }

    /// [1,1,H,W] native-unit mosaic to [1,3,H,W] RGB in [0,1].
    Tensor<T> forward(const Tensor<T>& raw) const {
        auto base = bilinear_demosaic_op(raw, cfa, T(white_level));
        return clip(base + residue(base), T(0), T(1));
    }

    RgbImage evaluate(const RawImage& raw) const {
        return RgbImage::from_tensor(forward(raw.to_tensor().template cast<T>()).template cast<float>());
    }

    ParamList params() {
        static_assert(std::is_same_v<T, float>, "params() is for the float production model");
        return {{"we1", we1}, {"be1", be1}, {"we2", we2}, {"be2", be2},
                {"wb", wb},   {"bb", bb},   {"wd2", wd2}, {"bd2", bd2},
                {"wd1", wd1}, {"bd1", bd1}, {"wo", wo},   {"bo", bo}};
    }

    void set_requires_grad(bool on) {
        for (Tensor<T>* t : {&we1, &be1, &we2, &be2, &wb, &bb, &wd2, &bd2, &wd1, &bd1, &wo, &bo})
            t->requires_grad(on);
    }

    template <class U>
    ProxyModelT<U> cast() const {
        ProxyModelT<U> m;
        m.cfa = cfa;
        m.white_level = white_level;
        m.we1 = we1.template cast<U>();
        m.be1 = be1.template cast<U>();
        m.we2 = we2.template cast<U>();
        m.be2 = be2.template cast<U>();
        m.wb = wb.template cast<U>();
        m.bb = bb.template cast<U>();
        m.wd2 = wd2.template cast<U>();
        m.bd2 = bd2.template cast<U>();
        m.wd1 = wd1.template cast<U>();
        m.bd1 = bd1.template cast<U>();
        m.wo = wo.template cast<U>();
        m.bo = bo.template cast<U>();
        return m;
    }

    /// Deep copy (fresh storage, no aliasing with this model).
    ProxyModelT clone() const { return cast<T>(); }
};

using ProxyModel = ProxyModelT<float>;

inline void save_proxy(const std::string& path, ProxyModel& model, const std::string& extra_meta = "") {
    std::string meta = "kind=proxy;cfa=" + std::to_string(int(model.cfa)) +
                       ";wl=" + std::to_string(int(model.white_level));
    if (!extra_meta.empty()) meta += ";" + extra_meta;
    save_checkpoint(path, model.params(), meta);
}

inline ProxyModel load_proxy(const std::string& path) {
    std::string meta;
    auto src = load_checkpoint(path, &meta);
    if (meta.find("kind=proxy") == std::string::npos)
        throw Error(path + ": not a proxy checkpoint (" + meta + ")");
    auto grab = [&](const std::string& key) {
        auto pos = meta.find(key + "=");
        return std::stoi(meta.substr(pos + key.size() + 1));
    };
    ProxyModel m = ProxyModel::init(0, Cfa(grab("cfa")), float(grab("wl")));
    auto dst = m.params();
    assign_params(dst, src);
    return m;
}

// ---- supervised training against an oracle ISP ----

/// Mean PSNR (dB) of the proxy against the oracle over a set of raws.
inline double proxy_psnr(const ProxyModel& model, const IspHandle& oracle,
                         const std::vector<RawImage>& raws) {
    if (raws.empty()) throw Error("proxy_psnr: empty evaluation set");
    double sum = 0;
    for (const auto& raw : raws) sum += psnr(model.evaluate(raw).data, oracle.evaluate(raw).data);
    return sum / double(raws.size());
}

/// l1 regression of the proxy onto oracle outputs. Zero epochs is a no-op
/// (the model is returned untouched). Oracle outputs are precomputed once.
inline void train_proxy(ProxyModel& model, const IspHandle& oracle, const std::vector<RawImage>& raws,
                        int epochs, float lr, uint64_t seed, bool verbose = false) {
    if (raws.empty()) throw Error("train_proxy: empty training set");
    std::vector<Tensor<float>> inputs, targets;
    inputs.reserve(raws.size());
    targets.reserve(raws.size());
    for (const auto& raw : raws) {
        inputs.push_back(raw.to_tensor());
        targets.push_back(oracle.evaluate(raw).to_tensor());
    }
    model.set_requires_grad(true);
    auto params = model.params();
    Adam opt(lr);
    Rng shuffle_rng = Rng::keyed(seed, 0x5fadc3);
    std::vector<size_t> order(raws.size());
    std::iota(order.begin(), order.end(), size_t(0));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.randint(int(i))]);
        double epoch_loss = 0;
        for (size_t i : order) {
            zero_grads(params);
            auto loss = l1_loss(model.forward(inputs[i]), targets[i]);
            backward(loss);
            opt.step(params);
            epoch_loss += loss.item();
        }
        if (verbose)
            std::cerr << "proxy epoch " << epoch + 1 << "/" << epochs << " l1 "
                      << epoch_loss / double(order.size()) << "\n";
    }
    model.set_requires_grad(false);
}

// ---- local proxy (attack-neighborhood fine-tuning) ----

struct LocalProxyConfig {
    float epsilon = 2000.f / 65535.f;  // linf radius, fraction of white level
    float alpha = 50.f / 65535.f;      // PGD step, fraction of white level
    int steps = 30;                    // PGD iterations per augmentation
    int augmentations = 12;            // M: perturbed queries per image
    int finetune_epochs = 80;
    float finetune_lr_scale = 0.3f;  // relative to the base training lr
    float base_lr = 1e-3f;
};

namespace detail {

/// One signed-gradient step with the documented order: descend, clamp to
/// the linf ball, then re-clip x+delta to the valid range.
inline void pgd_update(std::vector<float>& delta, const std::vector<float>& grad,
                       const std::vector<float>& x, float alpha, float eps, float lo, float hi) {
    for (size_t i = 0; i < delta.size(); ++i) {
        float g = grad[i];
        float d = delta[i] - alpha * (g > 0.f ? 1.f : (g < 0.f ? -1.f : 0.f));
        d = std::min(std::max(d, -eps), eps);
        d = std::min(std::max(x[i] + d, lo), hi) - x[i];
        delta[i] = d;
    }
}

}  // namespace detail

/// Fine-tunes a copy of `base` on oracle queries in the attack neighborhood
/// of each image in `seeds`: the clean image itself plus M perturbed
/// variants found by targeted PGD on the *base* proxy with a radius drawn
/// from Uniform(alpha, epsilon+alpha). The base model is not modified.
inline ProxyModel local_proxy_training(const ProxyModel& base, const IspHandle& oracle,
                                       const ClassifierModel& classifier,
                                       const std::vector<RawImage>& seeds,
                                       const LocalProxyConfig& cfg, uint64_t seed,
                                       bool verbose = false) {
    if (seeds.empty()) throw Error("local_proxy_training: empty seed set");
    Rng rng = Rng::keyed(seed, 0x10ca1);
    float wl = base.white_level;
    int K = classifier.num_classes;

    std::vector<RawImage> queries;
    queries.reserve(seeds.size() * size_t(cfg.augmentations + 1));
    for (const auto& x : seeds) {
        queries.push_back(x);
        int current = decide(classifier, base.evaluate(x));
        for (int m = 0; m < cfg.augmentations; ++m) {
            float eps_hat = (cfg.alpha + float(rng.uniform()) * cfg.epsilon) * wl;
            float alpha_n = cfg.alpha * wl;
            int target = rng.randint(K - 1);
            if (target >= current) ++target;  // any class but the current prediction
            std::vector<float> delta(x.mosaic.size());
            for (auto& d : delta) d = float(rng.uniform() * 2.0 - 1.0) * eps_hat;
            for (size_t i = 0; i < delta.size(); ++i)
                delta[i] = std::min(std::max(x.mosaic[i] + delta[i], 0.f), wl) - x.mosaic[i];
            for (int it = 0; it < cfg.steps; ++it) {
                std::vector<float> pert(x.mosaic.size());
                for (size_t i = 0; i < pert.size(); ++i) pert[i] = x.mosaic[i] + delta[i];
                auto xt = Tensor<float>::from_vector({1, 1, x.height, x.width}, std::move(pert))
                              .requires_grad();
                auto logits = classifier.forward(base.forward(xt));
                backward(cross_entropy(logits, std::vector<int>{target}));
                detail::pgd_update(delta, xt.grad(), x.mosaic, alpha_n, eps_hat, 0.f, wl);
            }
            std::vector<float> pert(x.mosaic.size());
            for (size_t i = 0; i < pert.size(); ++i) pert[i] = x.mosaic[i] + delta[i];
            queries.push_back(x.with_mosaic(pert));
        }
    }
    if (verbose)
        std::cerr << "local proxy: " << queries.size() << " oracle queries from " << seeds.size()
                  << " seeds\n";

    ProxyModel local = base.clone();
    train_proxy(local, oracle, queries, cfg.finetune_epochs, cfg.base_lr * cfg.finetune_lr_scale,
                splitmix64(seed ^ 0xf1e7), verbose);
    return local;
}

}  // namespace padv
