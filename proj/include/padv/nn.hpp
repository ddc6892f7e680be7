// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Training plumbing shared by the classifier and the proxy ISPs: parameter
// registry, weight init, SGD-with-momentum and Adam, and the checkpoint
// container.
//
// Checkpoint container format:
//   bytes 0-7   magic "PADVCKPT"
//   u32         version (1)
//   u64         FNV-1a checksum of everything that follows
//   string      metadata (u32 length + bytes; "key=value;..." record)
//   u32         tensor count
//   per tensor: name (u32 len + bytes), u32 ndim, i32 dims..., f32 data (LE)

#pragma once

#include <cstring>
#include <fstream>

#include "padv/tensor.hpp"

namespace padv {

struct NamedParam {
    std::string name;
    Tensor<float> tensor;
};

using ParamList = std::vector<NamedParam>;

// ---- init ----

/// He-normal init for conv/linear weights (fan-in scaled).
inline Tensor<float> he_init(Shape s, Rng& rng) {
    size_t fan_in = 1;
    for (size_t i = 1; i < s.size(); ++i) fan_in *= size_t(s[i]);
    float std_dev = std::sqrt(2.f / float(fan_in));
    std::vector<float> v(shape_numel(s));
    for (auto& x : v) x = float(rng.normal()) * std_dev;
    return Tensor<float>::from_vector(std::move(s), std::move(v));
}

// ---- optimizers ----

class SgdMomentum {
public:
    SgdMomentum(float lr, float momentum = 0.9f) : lr_(lr), momentum_(momentum) {}

    void set_lr(float lr) { lr_ = lr; }
    float lr() const { return lr_; }

    void step(ParamList& params) {
        if (vel_.empty())
            for (auto& p : params) vel_.emplace_back(p.tensor.numel(), 0.f);
        for (size_t i = 0; i < params.size(); ++i) {
            auto& t = params[i].tensor;
            if (t.grad().empty()) continue;
            auto& val = t.values_mut();
            auto& v = vel_[i];
            const auto& g = t.grad();
            for (size_t j = 0; j < val.size(); ++j) {
                v[j] = momentum_ * v[j] + g[j];
                val[j] -= lr_ * v[j];
            }
        }
    }

private:
    float lr_, momentum_;
    std::vector<std::vector<float>> vel_;
};

class Adam {
public:
    explicit Adam(float lr, float b1 = 0.9f, float b2 = 0.999f, float eps = 1e-8f)
        : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void set_lr(float lr) { lr_ = lr; }

    void step(ParamList& params) {
        if (m_.empty())
            for (auto& p : params) {
                m_.emplace_back(p.tensor.numel(), 0.f);
                v_.emplace_back(p.tensor.numel(), 0.f);
            }
        ++t_;
        float bc1 = 1.f - std::pow(b1_, float(t_));
        float bc2 = 1.f - std::pow(b2_, float(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& t = params[i].tensor;
            if (t.grad().empty()) continue;
            auto& val = t.values_mut();
            const auto& g = t.grad();
            for (size_t j = 0; j < val.size(); ++j) {
                m_[i][j] = b1_ * m_[i][j] + (1.f - b1_) * g[j];
                v_[i][j] = b2_ * v_[i][j] + (1.f - b2_) * g[j] * g[j];
                val[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
            }
        }
    }

private:
    float lr_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

inline void zero_grads(ParamList& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

inline float cosine_lr(float base, int epoch, int total_epochs) {
    return base * 0.5f * (1.f + std::cos(3.14159265358979f * epoch / float(total_epochs)));
}

// ---- checkpoint container ----

namespace detail {
inline void put_u32(std::string& buf, uint32_t v) {
    char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char(v >> 24)};
    buf.append(b, 4);
}
inline void put_str(std::string& buf, const std::string& s) {
    put_u32(buf, uint32_t(s.size()));
    buf.append(s);
}
struct Reader {
    const std::string& buf;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > buf.size()) throw Error("checkpoint truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = uint8_t(buf[pos]) | (uint8_t(buf[pos + 1]) << 8) |
                     (uint8_t(buf[pos + 2]) << 16) | (uint32_t(uint8_t(buf[pos + 3])) << 24);
        pos += 4;
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};
}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamList& params,
                            const std::string& metadata) {
    std::string payload;
    detail::put_str(payload, metadata);
    detail::put_u32(payload, uint32_t(params.size()));
    for (const auto& p : params) {
        detail::put_str(payload, p.name);
        detail::put_u32(payload, uint32_t(p.tensor.shape().size()));
        for (int d : p.tensor.shape()) detail::put_u32(payload, uint32_t(d));
        const auto& v = p.tensor.values();
        payload.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    }
    uint64_t sum = fnv1a(payload);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    f.write("PADVCKPT", 8);
    std::string head;
    detail::put_u32(head, 1);  // version
    for (int i = 0; i < 8; ++i) head.push_back(char((sum >> (8 * i)) & 0xff));
    f.write(head.data(), std::streamsize(head.size()));
    f.write(payload.data(), std::streamsize(payload.size()));
}

/// Loads a checkpoint; returns params and fills `metadata`. The checksum is
/// verified before any field is interpreted.
inline ParamList load_checkpoint(const std::string& path, std::string* metadata = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint " + path);
    std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (all.size() < 20 || all.compare(0, 8, "PADVCKPT") != 0)
        throw Error(path + ": not a checkpoint (bad magic)");
    detail::Reader r{all, 8};
    uint32_t version = r.u32();
    if (version != 1) throw Error(path + ": unsupported checkpoint version");
    r.need(8);
    uint64_t sum = 0;
    for (int i = 0; i < 8; ++i) sum |= uint64_t(uint8_t(all[r.pos + i])) << (8 * i);
    r.pos += 8;
    if (fnv1a(all.data() + r.pos, all.size() - r.pos) != sum)
        throw Error(path + ": checkpoint checksum mismatch");
    std::string meta = r.str();
    if (metadata) *metadata = meta;
    uint32_t count = r.u32();
    ParamList params;
    for (uint32_t i = 0; i < count; ++i) {
        NamedParam p;
        p.name = r.str();
        uint32_t nd = r.u32();
        Shape s(nd);
        for (auto& d : s) d = int(r.u32());
        size_t n = shape_numel(s);
        r.need(n * sizeof(float));
        std::vector<float> v(n);
        std::memcpy(v.data(), all.data() + r.pos, n * sizeof(float));
        r.pos += n * sizeof(float);
        p.tensor = Tensor<float>::from_vector(std::move(s), std::move(v));
        params.push_back(std::move(p));
    }
    return params;
}

/// Copies loaded values into an existing model's parameters, matching by name.
inline void assign_params(ParamList& dst, const ParamList& src) {
    for (auto& d : dst) {
        bool found = false;
        for (const auto& s : src)
            if (s.name == d.name) {
                if (s.tensor.shape() != d.tensor.shape())
                    throw Error("checkpoint param '" + d.name + "' shape mismatch: " +
                                shape_str(s.tensor.shape()) + " vs " + shape_str(d.tensor.shape()));
                d.tensor.values_mut() = s.tensor.values();
                found = true;
                break;
            }
        if (!found) throw Error("checkpoint missing param '" + d.name + "'");
    }
}

}  // namespace padv
