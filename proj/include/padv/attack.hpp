// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Projected-gradient attacks run through a differentiable stand-in for the
// camera pipeline. Raw-domain attacks perturb mosaic samples inside an
// linf ball; display-domain attacks perturb the image shown to the camera
// and push gradients through lens PSF, exposure, and mosaic as well.
//
// Step order everywhere: descend along sign(grad), clamp to the linf ball,
// then re-clip x+delta to the valid range. delta is initialised uniformly
// in the ball and range-clipped, so both invariants hold at every iterate.

#pragma once

#include <functional>

#include "padv/proxy.hpp"

namespace padv {

struct AttackConfig {
    float epsilon = 2000.f / 65535.f;  // linf radius as a fraction of the value range
    float alpha = 50.f / 65535.f;      // step size, same units
    int steps = 30;
    int target = -1;              // class index, or -1 for untargeted
    std::vector<float> lambdas;   // weights of the auxiliary isolation terms
    uint64_t seed = 0;
};

/// One iterate as seen by an observer: the perturbation, the main-pipeline
/// logits, and the scalar objective before the step is taken.
using AttackObserver =
    std::function<void(int iter, const std::vector<float>& delta, const Tensor<float>& logits, float loss)>;

namespace detail {

struct PgdTrace {
    std::vector<float> delta;
    std::vector<float> loss_trace;
};

/// Generic driver. `loss_of` maps the perturbed input tensor to
/// (scalar loss tensor, main logits). eps/alpha are in native units of x.
template <class LossFn>
PgdTrace pgd_drive(const std::vector<float>& x, const Shape& shape, float lo, float hi, float eps,
                   float alpha, int steps, Rng& rng, LossFn&& loss_of,
                   const AttackObserver& observer = nullptr) {
    PgdTrace tr;
    tr.delta.resize(x.size());
    for (auto& d : tr.delta) d = float(rng.uniform(-eps, eps));
    for (size_t i = 0; i < x.size(); ++i)
        tr.delta[i] = std::min(std::max(x[i] + tr.delta[i], lo), hi) - x[i];
    for (int it = 0; it < steps; ++it) {
        std::vector<float> pert(x.size());
        for (size_t i = 0; i < x.size(); ++i) pert[i] = x[i] + tr.delta[i];
        auto xt = Tensor<float>::from_vector(shape, std::move(pert)).requires_grad();
        auto [loss, logits] = loss_of(xt);
        backward(loss);
        float lv = loss.item();
        tr.loss_trace.push_back(lv);
        if (observer) observer(it, tr.delta, logits, lv);
        const auto& g = xt.grad();
        for (size_t i = 0; i < tr.delta.size(); ++i) {
            float d = tr.delta[i] - alpha * (g[i] > 0.f ? 1.f : (g[i] < 0.f ? -1.f : 0.f));
            d = std::min(std::max(d, -eps), eps);
            tr.delta[i] = std::min(std::max(x[i] + d, lo), hi) - x[i];
        }
    }
    return tr;
}

}  // namespace detail

// ---- raw-domain attacks ----

struct RawAttackResult {
    RawImage adversarial;
    std::vector<float> delta;       // native units
    std::vector<float> loss_trace;  // objective before each step
};

/// Differentiable stand-in for one pipeline: RAW tensor to RGB tensor with
/// gradients. Built from either a learned proxy or a true differentiable
/// ISP graph.
using PipelineFn = std::function<Tensor<float>(const Tensor<float>&)>;

/// Pipeline function backed by a (copied, cheaply shared) proxy model.
inline PipelineFn pipeline_fn(const ProxyModel& proxy) {
    return [proxy](const Tensor<float>& raw) { return proxy.forward(raw); };
}

/// Pipeline function backed by a differentiable ISP's true graph.
inline PipelineFn pipeline_fn(const IspHandle& isp, float white_level = 65535.f) {
    return [isp, white_level](const Tensor<float>& raw) {
        return isp.forward_graph(raw, white_level);
    };
}

/// Class distribution of a pipeline+classifier on one RAW image.
inline std::vector<float> predict_raw(const ClassifierModel& classifier, const PipelineFn& fn,
                                      const RawImage& x) {
    return softmax(classifier.forward(fn(x.to_tensor()))).values();
}

/// Untargeted: ascend the cross-entropy of the clean prediction through
/// pipeline + classifier, so the pipeline is pushed off its own answer.
inline RawAttackResult untargeted_attack(const ClassifierModel& classifier, const PipelineFn& fn,
                                         const RawImage& x, const AttackConfig& cfg,
                                         const AttackObserver& observer = nullptr) {
    x.validate();
    float wl = x.white_level;
    int clean = argmax_class(predict_raw(classifier, fn, x));
    Rng rng = Rng::keyed(cfg.seed, 0x47ac);
    auto tr = detail::pgd_drive(
        x.mosaic, {1, 1, x.height, x.width}, 0.f, wl, cfg.epsilon * wl, cfg.alpha * wl, cfg.steps,
        rng,
        [&](const Tensor<float>& xt) {
            auto logits = classifier.forward(fn(xt));
            auto loss = neg(cross_entropy(logits, std::vector<int>{clean}));
            return std::pair(loss, logits);
        },
        observer);
    std::vector<float> adv(x.mosaic.size());
    for (size_t i = 0; i < adv.size(); ++i) adv[i] = x.mosaic[i] + tr.delta[i];
    return {x.with_mosaic(adv), std::move(tr.delta), std::move(tr.loss_trace)};
}

/// A named auxiliary pipeline the targeted attack must leave unperturbed.
struct AuxiliaryPipeline {
    std::string id;
    PipelineFn fn;
};

/// Targeted with isolation: minimise CE toward `cfg.target` on the main
/// pipeline plus lambda-weighted CE of each auxiliary pipeline toward its
/// own frozen clean distribution, so only the main pipeline changes its mind.
inline RawAttackResult targeted_attack(const ClassifierModel& classifier, const PipelineFn& fn,
                                       const std::vector<AuxiliaryPipeline>& aux, const RawImage& x,
                                       const AttackConfig& cfg,
                                       const AttackObserver& observer = nullptr) {
    x.validate();
    if (cfg.target < 0 || cfg.target >= classifier.num_classes)
        throw Error("targeted_attack: target class " + std::to_string(cfg.target) + " out of range");
    if (!cfg.lambdas.empty() && cfg.lambdas.size() != aux.size())
        throw Error("targeted_attack: lambda count " + std::to_string(cfg.lambdas.size()) +
                    " does not match auxiliary pipeline count " + std::to_string(aux.size()));
    float wl = x.white_level;

    // freeze each auxiliary pipeline's clean distribution
    std::vector<std::vector<float>> frozen;
    for (const auto& a : aux) frozen.push_back(predict_raw(classifier, a.fn, x));

    Rng rng = Rng::keyed(cfg.seed, 0x7a46);
    auto tr = detail::pgd_drive(
        x.mosaic, {1, 1, x.height, x.width}, 0.f, wl, cfg.epsilon * wl, cfg.alpha * wl, cfg.steps,
        rng,
        [&](const Tensor<float>& xt) {
            auto logits = classifier.forward(fn(xt));
            auto loss = cross_entropy(logits, std::vector<int>{cfg.target});
            for (size_t i = 0; i < aux.size(); ++i) {
                float lam = cfg.lambdas.empty() ? 1.f : cfg.lambdas[i];
                if (lam == 0.f) continue;
                auto aux_logits = classifier.forward(aux[i].fn(xt));
                loss = loss + mul(cross_entropy_dist(aux_logits, frozen[i]), lam);
            }
            return std::pair(loss, logits);
        },
        observer);
    std::vector<float> adv(x.mosaic.size());
    for (size_t i = 0; i < adv.size(); ++i) adv[i] = x.mosaic[i] + tr.delta[i];
    return {x.with_mosaic(adv), std::move(tr.delta), std::move(tr.loss_trace)};
}

// ---- display-domain (optics) attacks ----

struct DisplayAttackResult {
    RgbImage adversarial;
    std::vector<float> delta;
    std::vector<float> loss_trace;
};

/// Differentiable capture front end for one chain: lens PSF, exposure gain,
/// range clip, mosaic. Output feeds a raw-domain proxy.
inline Tensor<float> capture_graph(const Tensor<float>& display, const PsfKernel& lens,
                                   float exposure_gain, Cfa cfa, float white_level) {
    auto blurred = apply_psf_op(display, lens);
    auto exposed = clip(mul(blurred, exposure_gain), 0.f, 1.f);
    return mosaic_op(exposed, cfa, white_level);
}

/// Targeted attack on the image shown to the camera. The perturbation
/// lives in display RGB space ([0,1]); gradients flow through the whole
/// optical chain into the ISP stand-in.
inline DisplayAttackResult display_attack(const ClassifierModel& classifier, const PipelineFn& fn,
                                          const PsfKernel& lens, float exposure_gain,
                                          const RgbImage& display, const AttackConfig& cfg,
                                          Cfa cfa = Cfa::RGGB, float white_level = 65535.f,
                                          const AttackObserver& observer = nullptr) {
    if (cfg.target < 0 || cfg.target >= classifier.num_classes)
        throw Error("display_attack: target class " + std::to_string(cfg.target) + " out of range");
    Rng rng = Rng::keyed(cfg.seed, 0xd15b);
    auto tr = detail::pgd_drive(
        display.data, {1, 3, display.height, display.width}, 0.f, 1.f, cfg.epsilon, cfg.alpha,
        cfg.steps, rng,
        [&](const Tensor<float>& xt) {
            auto raw = capture_graph(xt, lens, exposure_gain, cfa, white_level);
            auto logits = classifier.forward(fn(raw));
            auto loss = cross_entropy(logits, std::vector<int>{cfg.target});
            return std::pair(loss, logits);
        },
        observer);
    RgbImage adv(display.height, display.width);
    for (size_t i = 0; i < adv.data.size(); ++i) adv.data[i] = display.data[i] + tr.delta[i];
    return {std::move(adv), std::move(tr.delta), std::move(tr.loss_trace)};
}

}  // namespace padv
