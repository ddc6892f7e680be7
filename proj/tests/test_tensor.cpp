// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "padv/tensor.hpp"

using padv::Rng;
using padv::Shape;
using DTensor = padv::Tensor<double>;

namespace {

DTensor randu(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
    std::vector<double> v(padv::shape_numel(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return DTensor::from_vector(std::move(s), std::move(v));
}

// Autodiff gradient of loss_fn w.r.t. a flat input vector under shape s.
std::vector<double> autodiff_gradient(const std::function<DTensor(const DTensor&)>& loss_fn, Shape s,
                                      const std::vector<double>& x) {
    auto t = DTensor::from_vector(s, x).requires_grad();
    auto loss = loss_fn(t);
    padv::backward(loss);
    return t.grad();
}

void check_fd(const std::function<DTensor(const DTensor&)>& loss_fn, Shape s,
              const std::vector<double>& x, double tol = 1e-4) {
    auto ad = autodiff_gradient(loss_fn, s, x);
    auto fd = oracle::fd_gradient(
        [&](const std::vector<double>& v) { return loss_fn(DTensor::from_vector(s, v)).item(); }, x);
    CHECK(oracle::max_rel_err(ad, fd) < tol);
}

}  // namespace

TEST_CASE("clip outside interval: value and pass-through gradient") {
    auto x = DTensor::from_vector({3}, {1.3, 0.5, -0.2}).requires_grad();
    auto y = padv::clip(x, 0.0, 1.0);
    CHECK(y.values()[0] == doctest::Approx(1.0));
    CHECK(y.values()[1] == doctest::Approx(0.5));
    CHECK(y.values()[2] == doctest::Approx(0.0));
    padv::backward(padv::sum(y));
    CHECK(x.grad()[0] == 0.0);  // outside -> zero
    CHECK(x.grad()[1] == 1.0);  // strictly inside -> upstream
    CHECK(x.grad()[2] == 0.0);
}

TEST_CASE("abs of negative branch") {
    auto x = DTensor::scalar(-2.5).requires_grad();
    auto y = padv::abs(x);
    CHECK(y.item() == doctest::Approx(2.5));
    padv::backward(y);
    CHECK(x.grad()[0] == -1.0);
}

TEST_CASE("product rule d/da of a*b") {
    auto a = DTensor::scalar(3.0).requires_grad();
    auto b = DTensor::scalar(4.0);
    padv::backward(padv::mul(a, b));
    CHECK(a.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("kink subgradients are zero") {
    auto x = DTensor::from_vector({2}, {0.0, 1.0}).requires_grad();
    padv::backward(padv::sum(padv::abs(x)));
    CHECK(x.grad()[0] == 0.0);
    auto y = DTensor::from_vector({1}, {1.0}).requires_grad();
    padv::backward(padv::sum(padv::clip(y, 0.0, 1.0)));
    CHECK(y.grad()[0] == 0.0);  // exactly at the clip boundary
    auto a = DTensor::scalar(2.0).requires_grad();
    padv::backward(padv::maximum(a, DTensor::scalar(2.0)));
    CHECK(a.grad()[0] == 0.0);
}

TEST_CASE("sign has zero gradient everywhere") {
    auto x = DTensor::from_vector({3}, {-1.5, 0.0, 2.0}).requires_grad();
    auto y = padv::sign(x);
    CHECK(y.values() == std::vector<double>{-1.0, 0.0, 1.0});
    padv::backward(padv::sum(y));
    CHECK(x.grad() == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("broadcast shape mismatch raises with both shapes named") {
    auto a = DTensor::zeros({2, 3});
    auto b = DTensor::zeros({4});
    CHECK_THROWS_WITH_AS(padv::add(a, b), doctest::Contains("[2,3]"), padv::Error);
}

TEST_CASE("conv2d basics") {
    auto ones = DTensor::full({1, 1, 3, 3}, 1.0);
    auto kern = DTensor::full({1, 1, 3, 3}, 1.0);
    CHECK(padv::conv2d(ones, kern).item() == doctest::Approx(9.0));

    Rng rng(11);
    auto img = randu({1, 1, 4, 4}, rng);
    auto ident = DTensor::zeros({1, 1, 3, 3});
    ident.values_mut()[4] = 1.0;
    auto out = padv::conv2d(img, ident, 1, 1);
    for (size_t i = 0; i < img.numel(); ++i)
        CHECK(out.values()[i] == doctest::Approx(img.values()[i]));
}

TEST_CASE("conv2d rejects oversized kernel and bad channels") {
    CHECK_THROWS_AS(padv::conv2d(DTensor::zeros({1, 1, 2, 2}), DTensor::zeros({1, 1, 3, 3})),
                    padv::Error);
    CHECK_THROWS_AS(padv::conv2d(DTensor::zeros({1, 2, 4, 4}), DTensor::zeros({1, 1, 3, 3})),
                    padv::Error);
}

TEST_CASE("conv2d kernel gradient matches finite differences") {
    Rng rng(7);
    auto input = randu({1, 2, 5, 5}, rng);
    auto k0 = randu({3, 2, 3, 3}, rng, -0.5, 0.5);
    auto loss_fn = [&](const DTensor& k) { return padv::mean(padv::conv2d(input, k, 1, 1)); };
    auto ad = autodiff_gradient(loss_fn, k0.shape(), k0.values());
    auto fd = oracle::fd_gradient(
        [&](const std::vector<double>& v) {
            return loss_fn(DTensor::from_vector(k0.shape(), v)).item();
        },
        k0.values());
    CHECK(oracle::max_rel_err(ad, fd) < 1e-4);
}

TEST_CASE("conv2d input gradient matches finite differences, stride 2") {
    Rng rng(8);
    auto kern = randu({2, 1, 3, 3}, rng, -1.0, 1.0);
    auto bias = randu({2}, rng);
    check_fd(
        [&](const DTensor& x) {
            auto y = padv::conv2d(x, kern, 2, 1, &bias);
            return padv::mean(padv::mul(y, y));
        },
        {1, 1, 6, 6}, randu({1, 1, 6, 6}, rng).values());
}

TEST_CASE("softmax of zeros is uniform; rows sum to 1 and are positive") {
    auto sm = padv::softmax(DTensor::zeros({1, 3}));
    for (double v : sm.values()) CHECK(v == doctest::Approx(1.0 / 3.0));

    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto sm2 = padv::softmax(randu({2, 7}, rng, -8.0, 8.0));
        for (int n = 0; n < 2; ++n) {
            double s = 0.0;
            for (int k = 0; k < 7; ++k) {
                double v = sm2.values()[n * 7 + k];
                CHECK(v > 0.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("cross-entropy of a distribution with itself is its entropy") {
    std::vector<double> q = {0.2, 0.5, 0.3};
    std::vector<double> logits(3);
    for (int i = 0; i < 3; ++i) logits[i] = std::log(q[i]);
    auto ce = padv::cross_entropy_dist(DTensor::from_vector({1, 3}, logits), q);
    CHECK(ce.item() == doctest::Approx(oracle::entropy(q)).epsilon(1e-9));
}

TEST_CASE("cross_entropy minus entropy equals direct KL on random inputs") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        int K = 2 + rng.randint(9);
        auto logits = randu({1, K}, rng, -4.0, 4.0);
        std::vector<double> q(K);
        double qs = 0.0;
        for (auto& v : q) qs += v = rng.uniform(0.01, 1.0);
        for (auto& v : q) v /= qs;
        auto p = padv::softmax(logits).values();
        double ce = padv::cross_entropy_dist(logits, q).item();
        CHECK(std::abs(ce - oracle::entropy(q) - oracle::kl_divergence(q, p)) < 1e-6);
    }
}

TEST_CASE("cross_entropy_dist rejects non-normalized targets") {
    CHECK_THROWS_AS(padv::cross_entropy_dist(DTensor::zeros({1, 3}), {0.4, 0.4, 0.4}), padv::Error);
}

TEST_CASE("structural suite basics") {
    auto c = DTensor::full({1, 1, 8, 8}, 0.5);
    auto d = padv::avgpool2(c);
    CHECK(d.shape() == Shape{1, 1, 4, 4});
    for (double v : d.values()) CHECK(v == doctest::Approx(0.5));
    auto u = padv::upsample_bilinear2(d);
    for (double v : u.values()) CHECK(v == doctest::Approx(0.5));  // identity on constants

    auto cc = padv::concat_channels(DTensor::zeros({1, 3, 4, 4}), DTensor::full({1, 5, 4, 4}, 1.0));
    CHECK(cc.shape() == Shape{1, 8, 4, 4});
    CHECK(cc.values()[0] == 0.0);
    CHECK(cc.values()[3 * 16] == 1.0);

    CHECK_THROWS_AS(padv::avgpool2(DTensor::zeros({1, 1, 5, 6})), padv::Error);
}

TEST_CASE("bilinear upsample gradient matches finite differences") {
    Rng rng(5);
    check_fd([](const DTensor& x) { return padv::mean(padv::mul(padv::upsample_bilinear2(x),
                                                                padv::upsample_bilinear2(x))); },
             {1, 2, 4, 4}, randu({1, 2, 4, 4}, rng).values());
}

TEST_CASE("backward of sum yields ones; non-scalar loss rejected") {
    auto x = DTensor::zeros({2, 3}).requires_grad();
    padv::backward(padv::sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
    CHECK_THROWS_AS(padv::backward(x), padv::Error);
}

TEST_CASE("gradient of loss independent of a leaf is zero") {
    auto delta = DTensor::zeros({4}).requires_grad();
    auto other = DTensor::full({4}, 2.0).requires_grad();
    padv::backward(padv::sum(padv::mul(other, other)));
    CHECK(delta.grad().empty());  // never touched by the tape
}

TEST_CASE("backward linearity: joint pass equals sum of separate passes") {
    Rng rng(17);
    auto x = randu({6}, rng);
    auto mk = [&]() { return DTensor::from_vector({6}, x.values()).requires_grad(); };

    auto xa = mk();
    padv::backward(padv::sum(padv::mul(xa, xa)));
    auto ga = xa.grad();
    auto xb = mk();
    padv::backward(padv::mean(padv::exp(xb)));
    auto gb = xb.grad();

    auto xc = mk();
    padv::backward(padv::add(padv::sum(padv::mul(xc, xc)), padv::mean(padv::exp(xc))));
    for (size_t i = 0; i < 6; ++i) CHECK(xc.grad()[i] == ga[i] + gb[i]);
}

TEST_CASE("every differentiable primitive matches finite differences on random probes") {
    Rng rng(42);
    int probes = 0;
    for (int trial = 0; trial < 12; ++trial) {
        Shape s = {1, 2, 4, 4};
        auto x = randu(s, rng, 0.05, 0.95);
        // keep probes clear of the max/leaky-relu kinks at 0.5 so central
        // differences sample a single linear branch
        for (auto& v : x.values_mut())
            if (std::abs(v - 0.5) < 0.005) v += 0.01;
        auto b = DTensor::full(s, 0.5);
        auto kern = randu({2, 2, 3, 3}, rng, -0.5, 0.5);
        std::vector<std::function<DTensor(const DTensor&)>> fns = {
            [&](const DTensor& t) { return padv::sum(padv::mul(t, b)); },
            [&](const DTensor& t) { return padv::mean(padv::div(t, b)); },
            [&](const DTensor& t) { return padv::sum(padv::exp(padv::neg(t))); },
            [&](const DTensor& t) { return padv::sum(padv::log(padv::add(t, 1.0))); },
            [&](const DTensor& t) { return padv::mean(padv::maximum(t, b)); },
            [&](const DTensor& t) { return padv::sum(padv::leaky_relu(padv::sub(t, 0.5))); },
            [&](const DTensor& t) { return padv::mean(padv::conv2d(t, kern, 1, 1)); },
            [&](const DTensor& t) { return padv::sum(padv::avgpool2(t)); },
            [&](const DTensor& t) {
                return padv::mean(padv::mul(padv::upsample_bilinear2(t), padv::upsample_bilinear2(t)));
            },
            [&](const DTensor& t) { return padv::sum(padv::shift2d(padv::mul(t, t), 1, -1)); },
            [&](const DTensor& t) { return padv::mean(padv::sum_channels(padv::mul(t, t))); },
            [&](const DTensor& t) {
                return padv::cross_entropy(padv::mul(t, 3.0).reshape({4, 8}), {1, 0, 5, 2});
            },
            [&](const DTensor& t) { return padv::l1_loss(t, b); },
        };
        for (auto& fn : fns) {
            check_fd(fn, s, x.values());
            ++probes;
        }
    }
    CHECK(probes >= 100);
}

TEST_CASE("composite graph: conv -> pool -> cross-entropy input gradient vs FD") {
    Rng rng(9);
    auto kern = randu({4, 1, 3, 3}, rng, -0.7, 0.7);
    check_fd(
        [&](const DTensor& x) {
            auto h = padv::leaky_relu(padv::conv2d(x, kern, 1, 1));
            auto pooled = padv::avgpool2(h);
            return padv::cross_entropy(padv::mul(pooled.reshape({1, 4 * 4 * 4}), 2.0)
                                           .reshape({4, 16}),
                                       {3, 1, 0, 7});
        },
        {1, 1, 8, 8}, randu({1, 1, 8, 8}, rng).values());
}

TEST_CASE("detach severs the graph") {
    auto x = DTensor::scalar(2.0).requires_grad();
    auto y = padv::mul(x, x).detach();
    auto z = padv::mul(y, DTensor::scalar(3.0).requires_grad());
    padv::backward(z);
    CHECK(x.grad().empty());
}
