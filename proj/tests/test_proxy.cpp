// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "padv/proxy.hpp"
#include "oracles.hpp"

using namespace padv;

namespace {

RawImage random_raw(int h, int w, uint64_t seed) {
    Rng rng(seed);
    RawImage raw(h, w, Cfa::RGGB, 65535.f);
    for (auto& v : raw.mosaic) v = float(rng.uniform()) * 65535.f;
    return raw;
}

std::vector<RawImage> raw_set(int n, int size, uint64_t seed) {
    std::vector<RawImage> out;
    for (int i = 0; i < n; ++i) out.push_back(random_raw(size, size, seed + i));
    return out;
}

}  // namespace

TEST_CASE("proxy forward has RGB shape and stays in [0,1]") {
    auto m = ProxyModel::init(1);
    auto raw = random_raw(16, 16, 3);
    auto out = m.forward(raw.to_tensor());
    CHECK(out.shape() == Shape{1, 3, 16, 16});
    for (float v : out.values()) {
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
    }
}

TEST_CASE("zeroed residue head reduces the proxy to bilinear demosaic") {
    auto m = ProxyModel::init(2);
    std::fill(m.wo.values_mut().begin(), m.wo.values_mut().end(), 0.f);
    auto raw = random_raw(12, 12, 5);
    auto out = m.evaluate(raw);
    auto ref = bilinear_demosaic(raw);
    for (size_t i = 0; i < ref.data.size(); ++i)
        CHECK(out.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-6));
}

TEST_CASE("proxy gradients match finite differences on a double cast") {
    auto m = ProxyModel::init(7).cast<double>();
    Rng rng(11);
    std::vector<double> xs(8 * 8);
    for (auto& v : xs) v = rng.uniform() * 65535.0;
    auto probe = [&](const std::vector<double>& v) {
        auto x = Tensor<double>::from_vector({1, 1, 8, 8}, v);
        return sum(m.forward(x) * m.forward(x)).item();
    };
    auto x = Tensor<double>::from_vector({1, 1, 8, 8}, xs).requires_grad();
    auto y = m.forward(x);
    backward(sum(y * y));
    auto fd = oracle::fd_gradient(probe, xs, 1e-1);  // raw units are O(1e4)
    CHECK(oracle::max_rel_err(x.grad(), fd) < 1e-4);
}

TEST_CASE("train_proxy with zero epochs leaves the model untouched") {
    auto m = ProxyModel::init(4);
    auto before = m.wo.values();
    train_proxy(m, make_blackbox_a(), raw_set(2, 16, 9), 0, 1e-3f, 1);
    CHECK(m.wo.values() == before);
}

TEST_CASE("training improves PSNR against a black-box oracle") {
    auto isp = make_blackbox_a();
    auto train = raw_set(6, 32, 21);
    auto val = raw_set(3, 32, 91);
    auto m = ProxyModel::init(5);
    double before = proxy_psnr(m, isp, val);
    train_proxy(m, isp, train, 30, 1e-3f, 2);
    double after = proxy_psnr(m, isp, val);
    CHECK(after > before + 1.0);
}

TEST_CASE("training is deterministic in the seed") {
    auto isp = make_blackbox_b();
    auto train = raw_set(3, 16, 33);
    auto a = ProxyModel::init(6);
    auto b = ProxyModel::init(6);
    train_proxy(a, isp, train, 3, 1e-3f, 4);
    train_proxy(b, isp, train, 3, 1e-3f, 4);
    CHECK(a.wo.values() == b.wo.values());
    CHECK(a.we1.values() == b.we1.values());
}

TEST_CASE("clone produces independent storage") {
    auto a = ProxyModel::init(8);
    auto b = a.clone();
    b.wo.values_mut()[0] += 1.f;
    CHECK(a.wo.values()[0] != b.wo.values()[0]);
}

TEST_CASE("proxy checkpoint round-trips") {
    auto m = ProxyModel::init(9);
    auto path = std::string("/tmp/padv_proxy_test.ckpt");
    save_proxy(path, m);
    auto back = load_proxy(path);
    CHECK(back.cfa == m.cfa);
    CHECK(back.white_level == m.white_level);
    CHECK(back.wd1.values() == m.wd1.values());
    std::remove(path.c_str());
}

TEST_CASE("local proxy queries the oracle (M+1) times per seed and keeps the base intact") {
    auto isp = make_blackbox_a();
    int calls = 0;
    auto counted = isp;
    auto inner = isp.oracle;
    counted.oracle = [&calls, inner](const RawImage& r) {
        ++calls;
        return inner(r);
    };

    auto classifier = ClassifierModel::init(4, 16, 3);
    auto base = ProxyModel::init(10);
    auto base_wo = base.wo.values();
    auto seeds = raw_set(2, 16, 55);

    LocalProxyConfig cfg;
    cfg.augmentations = 3;
    cfg.steps = 2;
    cfg.finetune_epochs = 2;
    auto local = local_proxy_training(base, counted, classifier, seeds, cfg, 7);

    CHECK(calls == int(seeds.size()) * (cfg.augmentations + 1));
    CHECK(base.wo.values() == base_wo);
    CHECK(local.wo.values() != base_wo);
}

TEST_CASE("local proxy PGD respects the sampled ball and the raw range") {
    // run the same construction with a recording oracle and check every
    // queried variant stays within epsilon+alpha of its seed and in range
    auto isp = make_blackbox_a();
    auto seeds = raw_set(1, 16, 77);
    LocalProxyConfig cfg;
    cfg.augmentations = 4;
    cfg.steps = 3;
    cfg.finetune_epochs = 0;
    std::vector<RawImage> seen;
    auto recorder = isp;
    auto inner = isp.oracle;
    recorder.oracle = [&seen, inner](const RawImage& r) {
        seen.push_back(r);
        return inner(r);
    };
    auto classifier = ClassifierModel::init(4, 16, 5);
    auto base = ProxyModel::init(11);
    local_proxy_training(base, recorder, classifier, seeds, cfg, 13);

    float wl = 65535.f;
    float bound = (cfg.epsilon + cfg.alpha) * wl + 1e-2f;
    REQUIRE(seen.size() == size_t(cfg.augmentations + 1));
    for (const auto& q : seen)
        for (size_t i = 0; i < q.mosaic.size(); ++i) {
            CHECK(std::abs(q.mosaic[i] - seeds[0].mosaic[i]) <= bound);
            CHECK(q.mosaic[i] >= 0.f);
            CHECK(q.mosaic[i] <= wl);
        }
}
