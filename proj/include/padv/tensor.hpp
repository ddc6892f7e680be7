// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Dense NCHW-oriented tensors with define-by-run reverse-mode autodiff.
// Graphs are rebuilt per attack iteration; nodes own their parents through
// shared_ptr so a held output keeps its subgraph alive.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "padv/common.hpp"

namespace padv {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= size_t(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <class T>
struct TensorImpl {
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad;  // allocated on demand during backward
    bool needs_grad = false;
    std::vector<std::shared_ptr<TensorImpl<T>>> parents;
    std::function<void(TensorImpl<T>&)> backprop;  // pushes self.grad into parents

    std::vector<T>& ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), T(0));
        return grad;
    }
};

template <class T = float>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s) { return full(std::move(s), T(0)); }

    static Tensor full(Shape s, T v) {
        Tensor t;
        t.p_ = std::make_shared<TensorImpl<T>>();
        t.p_->shape = std::move(s);
        t.p_->val.assign(shape_numel(t.p_->shape), v);
        return t;
    }

    static Tensor from_vector(Shape s, std::vector<T> v) {
        if (shape_numel(s) != v.size())
            throw Error("tensor data length " + std::to_string(v.size()) +
                        " does not match shape " + shape_str(s));
        Tensor t;
        t.p_ = std::make_shared<TensorImpl<T>>();
        t.p_->shape = std::move(s);
        t.p_->val = std::move(v);
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    bool defined() const { return bool(p_); }
    const Shape& shape() const { return p_->shape; }
    size_t numel() const { return p_->val.size(); }
    const std::vector<T>& values() const { return p_->val; }
    std::vector<T>& values_mut() { return p_->val; }
    T item() const {
        if (numel() != 1) throw Error("item() on non-scalar tensor " + shape_str(shape()));
        return p_->val[0];
    }

    Tensor& requires_grad(bool on = true) {
        p_->needs_grad = on;
        return *this;
    }
    bool needs_grad() const { return p_->needs_grad; }

    /// Gradient accumulated by the last backward pass (empty if none).
    const std::vector<T>& grad() const { return p_->grad; }
    void zero_grad() { p_->grad.assign(p_->val.size(), T(0)); }

    /// Value copy severed from any gradient graph.
    Tensor detach() const {
        Tensor t;
        t.p_ = std::make_shared<TensorImpl<T>>();
        t.p_->shape = p_->shape;
        t.p_->val = p_->val;
        return t;
    }

    /// Same data viewed under a new shape (graph-transparent).
    Tensor reshape(Shape s) const;

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> v(p_->val.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = U(p_->val[i]);
        return Tensor<U>::from_vector(p_->shape, std::move(v));
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return p_; }

    static Tensor wrap(std::shared_ptr<TensorImpl<T>> p) {
        Tensor t;
        t.p_ = std::move(p);
        return t;
    }

private:
    std::shared_ptr<TensorImpl<T>> p_;
};

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> val,
                      std::vector<Tensor<T>> parents,
                      std::function<void(TensorImpl<T>&)> backprop) {
    auto p = std::make_shared<TensorImpl<T>>();
    p->shape = std::move(shape);
    p->val = std::move(val);
    bool ng = false;
    for (auto& par : parents) ng = ng || par.needs_grad();
    p->needs_grad = ng;
    if (ng) {
        for (auto& par : parents) p->parents.push_back(par.impl());
        p->backprop = std::move(backprop);
    }
    return Tensor<T>::wrap(std::move(p));
}

// Right-aligned numpy-style broadcast of two shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (size_t i = 0; i < out.size(); ++i) {
        int da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        int db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw Error("shapes not broadcast-compatible: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

inline std::vector<size_t> strides_for(const Shape& s) {
    std::vector<size_t> st(s.size(), 1);
    for (int i = int(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * size_t(s[i + 1]);
    return st;
}

// Map a flat index in `out` to a flat index in the (broadcast) operand shape.
struct BroadcastMap {
    std::vector<size_t> out_strides;
    std::vector<size_t> op_strides;  // 0 where the operand dim is broadcast
    size_t operator()(size_t flat) const {
        size_t idx = 0;
        for (size_t d = 0; d < out_strides.size(); ++d) {
            size_t c = flat / out_strides[d];
            flat -= c * out_strides[d];
            idx += c * op_strides[d];
        }
        return idx;
    }
};

inline BroadcastMap broadcast_map(const Shape& out, const Shape& op) {
    BroadcastMap m;
    m.out_strides = strides_for(out);
    auto opst = strides_for(op);
    m.op_strides.assign(out.size(), 0);
    size_t off = out.size() - op.size();
    for (size_t d = 0; d < op.size(); ++d)
        m.op_strides[off + d] = (op[d] == 1 && out[off + d] != 1) ? 0 : opst[d];
    return m;
}

// Generic broadcasting binary op. fwd(a,b) -> value; dfa/dfb give local
// partials as functions of (a, b, out_val).
template <class T, class F, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F fwd, DA dfa, DB dfb) {
    Shape os = broadcast_shape(a.shape(), b.shape());
    size_t n = shape_numel(os);
    auto ma = broadcast_map(os, a.shape());
    auto mb = broadcast_map(os, b.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(n);
    bool same = a.shape() == b.shape();
    if (same) {
        for (size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    } else {
        for (size_t i = 0; i < n; ++i) out[i] = fwd(av[ma(i)], bv[mb(i)]);
    }
    return make_result<T>(
        os, std::move(out), {a, b},
        [ma, mb, same, dfa, dfb, n](TensorImpl<T>& self) {
            auto pa = self.parents[0];
            auto pb = self.parents[1];
            const auto& g = self.grad;
            const auto& ov = self.val;
            const auto& av2 = pa->val;
            const auto& bv2 = pb->val;
            if (pa->needs_grad) {
                auto& ga = pa->ensure_grad();
                for (size_t i = 0; i < n; ++i) {
                    size_t ia = same ? i : ma(i), ib = same ? i : mb(i);
                    ga[ia] += g[i] * dfa(av2[ia], bv2[ib], ov[i]);
                }
            }
            if (pb->needs_grad) {
                auto& gb = pb->ensure_grad();
                for (size_t i = 0; i < n; ++i) {
                    size_t ia = same ? i : ma(i), ib = same ? i : mb(i);
                    gb[ib] += g[i] * dfb(av2[ia], bv2[ib], ov[i]);
                }
            }
        });
}

template <class T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& a, F fwd, DF df) {
    size_t n = a.numel();
    const auto& av = a.values();
    std::vector<T> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
    return make_result<T>(a.shape(), std::move(out), {a}, [df, n](TensorImpl<T>& self) {
        auto pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * df(pa->val[i], self.val[i]);
    });
}

}  // namespace detail

// ---- elementwise suite ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    // zero subgradient at ties, per the fixed kink convention
    return detail::binary_op(
        a, b, [](T x, T y) { return std::max(x, y); },
        [](T x, T y, T) { return x > y ? T(1) : T(0); },
        [](T x, T y, T) { return y > x ? T(1) : T(0); });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <class T>
Tensor<T> mul(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <class T>
Tensor<T> sub(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::exp(x); }, [](T, T o) { return o; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
    // zero subgradient at 0
    return detail::unary_op(
        a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> sign(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); },
        [](T, T) { return T(0); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
    return detail::unary_op(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

/// Pass-through gradient strictly inside [lo,hi], zero outside and at the kinks.
template <class T>
Tensor<T> clip(const Tensor<T>& a, T lo, T hi) {
    return detail::unary_op(
        a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.1)) {
    return detail::unary_op(
        a, [slope](T x) { return x > 0 ? x : slope * x; },
        [slope](T x, T) { return x > 0 ? T(1) : slope; });
}

// ---- reductions ----

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = std::accumulate(a.values().begin(), a.values().end(), T(0));
    return detail::make_result<T>({1}, {s}, {a}, [](TensorImpl<T>& self) {
        auto pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        T g = self.grad[0];
        for (auto& v : ga) v += g;
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    size_t n = a.numel();
    T s = std::accumulate(a.values().begin(), a.values().end(), T(0)) / T(n);
    return detail::make_result<T>({1}, {s}, {a}, [n](TensorImpl<T>& self) {
        auto pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        T g = self.grad[0] / T(n);
        for (auto& v : ga) v += g;
    });
}

/// Sum over the channel axis of an NCHW tensor, keeping a singleton channel.
template <class T>
Tensor<T> sum_channels(const Tensor<T>& a) {
    const Shape& s = a.shape();
    if (s.size() != 4) throw Error("sum_channels expects NCHW, got " + shape_str(s));
    int N = s[0], C = s[1], H = s[2], W = s[3];
    size_t hw = size_t(H) * W;
    std::vector<T> out(size_t(N) * hw, T(0));
    const auto& av = a.values();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* src = av.data() + (size_t(n) * C + c) * hw;
            T* dst = out.data() + size_t(n) * hw;
            for (size_t i = 0; i < hw; ++i) dst[i] += src[i];
        }
    return detail::make_result<T>({N, 1, H, W}, std::move(out), {a},
                                  [N, C, hw](TensorImpl<T>& self) {
                                      auto pa = self.parents[0];
                                      if (!pa->needs_grad) return;
                                      auto& ga = pa->ensure_grad();
                                      for (int n = 0; n < N; ++n)
                                          for (int c = 0; c < C; ++c) {
                                              T* dst = ga.data() + (size_t(n) * C + c) * hw;
                                              const T* src = self.grad.data() + size_t(n) * hw;
                                              for (size_t i = 0; i < hw; ++i) dst[i] += src[i];
                                          }
                                  });
}

/// Mean over the spatial dims of NCHW: [N,C,H,W] -> [N,C].
template <class T>
Tensor<T> global_avgpool(const Tensor<T>& a) {
    const Shape& s = a.shape();
    if (s.size() != 4) throw Error("global_avgpool expects NCHW, got " + shape_str(s));
    int N = s[0], C = s[1];
    size_t hw = size_t(s[2]) * s[3];
    std::vector<T> out(size_t(N) * C, T(0));
    const auto& av = a.values();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* src = av.data() + size_t(nc) * hw;
        T acc = T(0);
        for (size_t i = 0; i < hw; ++i) acc += src[i];
        out[nc] = acc / T(hw);
    }
    return detail::make_result<T>({N, C}, std::move(out), {a}, [N, C, hw](TensorImpl<T>& self) {
        auto pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
            T g = self.grad[nc] / T(hw);
            T* dst = ga.data() + size_t(nc) * hw;
            for (size_t i = 0; i < hw; ++i) dst[i] += g;
        }
    });
}

template <class T>
Tensor<T> Tensor<T>::reshape(Shape s) const {
    if (shape_numel(s) != numel())
        throw Error("reshape " + shape_str(shape()) + " -> " + shape_str(s) + ": size mismatch");
    Tensor<T> self = *this;
    return detail::make_result<T>(std::move(s), p_->val, {self}, [](TensorImpl<T>& self2) {
        auto pa = self2.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += self2.grad[i];
    });
}

// ---- structural suite ----

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        throw Error("concat_channels: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
    int N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
    size_t hw = size_t(H) * W;
    std::vector<T> out(size_t(N) * (Ca + Cb) * hw);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int n = 0; n < N; ++n) {
        std::copy_n(av.data() + size_t(n) * Ca * hw, Ca * hw,
                    out.data() + size_t(n) * (Ca + Cb) * hw);
        std::copy_n(bv.data() + size_t(n) * Cb * hw, Cb * hw,
                    out.data() + size_t(n) * (Ca + Cb) * hw + Ca * hw);
    }
    return detail::make_result<T>({N, Ca + Cb, H, W}, std::move(out), {a, b},
                                  [N, Ca, Cb, hw](TensorImpl<T>& self) {
                                      auto pa = self.parents[0];
                                      auto pb = self.parents[1];
                                      for (int n = 0; n < N; ++n) {
                                          const T* g = self.grad.data() + size_t(n) * (Ca + Cb) * hw;
                                          if (pa->needs_grad) {
                                              auto& ga = pa->ensure_grad();
                                              T* d = ga.data() + size_t(n) * Ca * hw;
                                              for (size_t i = 0; i < size_t(Ca) * hw; ++i) d[i] += g[i];
                                          }
                                          if (pb->needs_grad) {
                                              auto& gb = pb->ensure_grad();
                                              T* d = gb.data() + size_t(n) * Cb * hw;
                                              for (size_t i = 0; i < size_t(Cb) * hw; ++i)
                                                  d[i] += g[size_t(Ca) * hw + i];
                                          }
                                      }
                                  });
}

/// 2x average-pool downsample. Errors on odd spatial sizes.
template <class T>
Tensor<T> avgpool2(const Tensor<T>& a) {
    const Shape& s = a.shape();
    if (s.size() != 4) throw Error("avgpool2 expects NCHW, got " + shape_str(s));
    int N = s[0], C = s[1], H = s[2], W = s[3];
    if (H % 2 || W % 2)
        throw Error("avgpool2: odd spatial size " + std::to_string(H) + "x" + std::to_string(W));
    int Ho = H / 2, Wo = W / 2;
    std::vector<T> out(size_t(N) * C * Ho * Wo);
    const auto& av = a.values();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* src = av.data() + size_t(nc) * H * W;
        T* dst = out.data() + size_t(nc) * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int x = 0; x < Wo; ++x)
                dst[y * Wo + x] = T(0.25) * (src[(2 * y) * W + 2 * x] + src[(2 * y) * W + 2 * x + 1] +
                                             src[(2 * y + 1) * W + 2 * x] + src[(2 * y + 1) * W + 2 * x + 1]);
    }
    return detail::make_result<T>({N, C, Ho, Wo}, std::move(out), {a},
                                  [N, C, H, W, Ho, Wo](TensorImpl<T>& self) {
                                      auto pa = self.parents[0];
                                      if (!pa->needs_grad) return;
                                      auto& ga = pa->ensure_grad();
                                      for (int nc = 0; nc < N * C; ++nc) {
                                          T* dst = ga.data() + size_t(nc) * H * W;
                                          const T* g = self.grad.data() + size_t(nc) * Ho * Wo;
                                          for (int y = 0; y < Ho; ++y)
                                              for (int x = 0; x < Wo; ++x) {
                                                  T v = T(0.25) * g[y * Wo + x];
                                                  dst[(2 * y) * W + 2 * x] += v;
                                                  dst[(2 * y) * W + 2 * x + 1] += v;
                                                  dst[(2 * y + 1) * W + 2 * x] += v;
                                                  dst[(2 * y + 1) * W + 2 * x + 1] += v;
                                              }
                                      }
                                  });
}

namespace detail {
// Sample positions for 2x bilinear upsampling with half-pixel centers.
struct UpTap {
    int i0, i1;
    double w0, w1;
};
inline std::vector<UpTap> up_taps(int in, int out) {
    std::vector<UpTap> taps(out);
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * in / double(out) - 0.5;
        int i0 = int(std::floor(src));
        double f = src - i0;
        int a = std::clamp(i0, 0, in - 1);
        int b = std::clamp(i0 + 1, 0, in - 1);
        taps[o] = {a, b, 1.0 - f, f};
    }
    return taps;
}
}  // namespace detail

/// 2x bilinear upsample (half-pixel aligned; exact inverse of avgpool2 on constants).
template <class T>
Tensor<T> upsample_bilinear2(const Tensor<T>& a) {
    const Shape& s = a.shape();
    if (s.size() != 4) throw Error("upsample_bilinear2 expects NCHW, got " + shape_str(s));
    int N = s[0], C = s[1], H = s[2], W = s[3];
    int Ho = H * 2, Wo = W * 2;
    auto ty = detail::up_taps(H, Ho);
    auto tx = detail::up_taps(W, Wo);
    std::vector<T> out(size_t(N) * C * Ho * Wo);
    const auto& av = a.values();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* src = av.data() + size_t(nc) * H * W;
        T* dst = out.data() + size_t(nc) * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int x = 0; x < Wo; ++x) {
                const auto& a0 = ty[y];
                const auto& a1 = tx[x];
                dst[y * Wo + x] = T(a0.w0 * (a1.w0 * src[a0.i0 * W + a1.i0] + a1.w1 * src[a0.i0 * W + a1.i1]) +
                                    a0.w1 * (a1.w0 * src[a0.i1 * W + a1.i0] + a1.w1 * src[a0.i1 * W + a1.i1]));
            }
    }
    return detail::make_result<T>(
        {N, C, Ho, Wo}, std::move(out), {a},
        [N, C, H, W, Ho, Wo, ty, tx](TensorImpl<T>& self) {
            auto pa = self.parents[0];
            if (!pa->needs_grad) return;
            auto& ga = pa->ensure_grad();
            for (int nc = 0; nc < N * C; ++nc) {
                T* dst = ga.data() + size_t(nc) * H * W;
                const T* g = self.grad.data() + size_t(nc) * Ho * Wo;
                for (int y = 0; y < Ho; ++y)
                    for (int x = 0; x < Wo; ++x) {
                        const auto& a0 = ty[y];
                        const auto& a1 = tx[x];
                        T gv = g[y * Wo + x];
                        dst[a0.i0 * W + a1.i0] += T(a0.w0 * a1.w0) * gv;
                        dst[a0.i0 * W + a1.i1] += T(a0.w0 * a1.w1) * gv;
                        dst[a0.i1 * W + a1.i0] += T(a0.w1 * a1.w0) * gv;
                        dst[a0.i1 * W + a1.i1] += T(a0.w1 * a1.w1) * gv;
                    }
            }
        });
}

/// Spatial shift by (dy,dx) with replicate border handling. Linear.
template <class T>
Tensor<T> shift2d(const Tensor<T>& a, int dy, int dx) {
    const Shape& s = a.shape();
    if (s.size() != 4) throw Error("shift2d expects NCHW, got " + shape_str(s));
    int N = s[0], C = s[1], H = s[2], W = s[3];
    std::vector<T> out(a.numel());
    const auto& av = a.values();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* src = av.data() + size_t(nc) * H * W;
        T* dst = out.data() + size_t(nc) * H * W;
        for (int y = 0; y < H; ++y) {
            int sy = std::clamp(y + dy, 0, H - 1);
            for (int x = 0; x < W; ++x) dst[y * W + x] = src[sy * W + std::clamp(x + dx, 0, W - 1)];
        }
    }
    return detail::make_result<T>(s, std::move(out), {a}, [N, C, H, W, dy, dx](TensorImpl<T>& self) {
        auto pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
            T* dst = ga.data() + size_t(nc) * H * W;
            const T* g = self.grad.data() + size_t(nc) * H * W;
            for (int y = 0; y < H; ++y) {
                int sy = std::clamp(y + dy, 0, H - 1);
                for (int x = 0; x < W; ++x) dst[sy * W + std::clamp(x + dx, 0, W - 1)] += g[y * W + x];
            }
        }
    });
}

// ---- conv2d (cross-correlation, im2col + GEMM) ----

namespace detail {
template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
void im2col(const T* src, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
    // col is (C*k*k) x (Ho*Wo)
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                T* row = col + size_t((c * k + ky) * k + kx) * Ho * Wo;
                for (int y = 0; y < Ho; ++y) {
                    int sy = y * stride + ky - pad;
                    if (sy < 0 || sy >= H) {
                        std::fill_n(row + size_t(y) * Wo, Wo, T(0));
                        continue;
                    }
                    for (int x = 0; x < Wo; ++x) {
                        int sx = x * stride + kx - pad;
                        row[size_t(y) * Wo + x] =
                            (sx >= 0 && sx < W) ? src[(size_t(c) * H + sy) * W + sx] : T(0);
                    }
                }
            }
}

template <class T>
void col2im(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* dst) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const T* row = col + size_t((c * k + ky) * k + kx) * Ho * Wo;
                for (int y = 0; y < Ho; ++y) {
                    int sy = y * stride + ky - pad;
                    if (sy < 0 || sy >= H) continue;
                    for (int x = 0; x < Wo; ++x) {
                        int sx = x * stride + kx - pad;
                        if (sx >= 0 && sx < W) dst[(size_t(c) * H + sy) * W + sx] += row[size_t(y) * Wo + x];
                    }
                }
            }
}
}  // namespace detail

/// 2-D cross-correlation over NCHW input with an [O,C,k,k] kernel and
/// optional per-output-channel bias of shape [O].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride = 1, int pad = 0,
                 const Tensor<T>* bias = nullptr) {
    const Shape& is = input.shape();
    const Shape& ks = kernel.shape();
    if (is.size() != 4 || ks.size() != 4)
        throw Error("conv2d expects NCHW input and OCkk kernel, got " + shape_str(is) + " and " +
                    shape_str(ks));
    int N = is[0], C = is[1], H = is[2], W = is[3];
    int O = ks[0], KC = ks[1], k = ks[2];
    if (ks[2] != ks[3]) throw Error("conv2d: non-square kernel " + shape_str(ks));
    if (KC != C)
        throw Error("conv2d: channel mismatch, input " + shape_str(is) + " vs kernel " + shape_str(ks));
    if (stride < 1) throw Error("conv2d: stride must be >= 1");
    if (k > H + 2 * pad || k > W + 2 * pad)
        throw Error("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                    std::to_string(H + 2 * pad) + "x" + std::to_string(W + 2 * pad));
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    size_t colsz = size_t(C) * k * k * Ho * Wo;

    std::vector<T> out(size_t(N) * O * Ho * Wo);
    std::vector<T> col(colsz);
    using EMat = detail::EMat<T>;
    Eigen::Map<const EMat> Wm(kernel.values().data(), O, C * k * k);
    for (int n = 0; n < N; ++n) {
        detail::im2col(input.values().data() + size_t(n) * C * H * W, C, H, W, k, stride, pad, Ho, Wo,
                       col.data());
        Eigen::Map<const EMat> Cm(col.data(), C * k * k, Ho * Wo);
        Eigen::Map<EMat> Om(out.data() + size_t(n) * O * Ho * Wo, O, Ho * Wo);
        Om.noalias() = Wm * Cm;
    }
    if (bias) {
        if (bias->shape() != Shape{O}) throw Error("conv2d: bias shape must be [O]");
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) {
                T b = bias->values()[o];
                T* dst = out.data() + (size_t(n) * O + o) * Ho * Wo;
                for (int i = 0; i < Ho * Wo; ++i) dst[i] += b;
            }
    }

    std::vector<Tensor<T>> parents = {input, kernel};
    if (bias) parents.push_back(*bias);
    bool has_bias = bias != nullptr;
    return detail::make_result<T>(
        {N, O, Ho, Wo}, std::move(out), std::move(parents),
        [N, C, H, W, O, k, stride, pad, Ho, Wo, has_bias](TensorImpl<T>& self) {
            auto pin = self.parents[0];
            auto pker = self.parents[1];
            using EMat = detail::EMat<T>;
            Eigen::Map<const EMat> Wm(pker->val.data(), O, C * k * k);
            size_t colsz = size_t(C) * k * k * Ho * Wo;
            std::vector<T> col(colsz);
            if (pker->needs_grad || pin->needs_grad) {
                if (pker->needs_grad) pker->ensure_grad();
                if (pin->needs_grad) pin->ensure_grad();
                for (int n = 0; n < N; ++n) {
                    Eigen::Map<const EMat> Gm(self.grad.data() + size_t(n) * O * Ho * Wo, O, Ho * Wo);
                    if (pker->needs_grad) {
                        detail::im2col(pin->val.data() + size_t(n) * C * H * W, C, H, W, k, stride, pad,
                                       Ho, Wo, col.data());
                        Eigen::Map<const EMat> Cm(col.data(), C * k * k, Ho * Wo);
                        Eigen::Map<EMat> Kg(pker->grad.data(), O, C * k * k);
                        Kg.noalias() += Gm * Cm.transpose();
                    }
                    if (pin->needs_grad) {
                        Eigen::Map<EMat> Cg(col.data(), C * k * k, Ho * Wo);
                        Cg.noalias() = Wm.transpose() * Gm;
                        detail::col2im(col.data(), C, H, W, k, stride, pad, Ho, Wo,
                                       pin->grad.data() + size_t(n) * C * H * W);
                    }
                }
            }
            if (has_bias) {
                auto pb = self.parents[2];
                if (pb->needs_grad) {
                    auto& gb = pb->ensure_grad();
                    for (int n = 0; n < N; ++n)
                        for (int o = 0; o < O; ++o) {
                            const T* g = self.grad.data() + (size_t(n) * O + o) * Ho * Wo;
                            T s = T(0);
                            for (int i = 0; i < Ho * Wo; ++i) s += g[i];
                            gb[o] += s;
                        }
                }
            }
        });
}

/// Fully connected layer: x [N,F] * W^T [O,F] + b [O] -> [N,O].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        throw Error("linear: incompatible shapes " + shape_str(xs) + " and " + shape_str(ws));
    int N = xs[0], F = xs[1], O = ws[0];
    using EMat = detail::EMat<T>;
    std::vector<T> out(size_t(N) * O);
    Eigen::Map<const EMat> Xm(x.values().data(), N, F);
    Eigen::Map<const EMat> Wm(w.values().data(), O, F);
    Eigen::Map<EMat> Om(out.data(), N, O);
    Om.noalias() = Xm * Wm.transpose();
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) out[size_t(n) * O + o] += b.values()[o];
    return detail::make_result<T>(
        {N, O}, std::move(out), {x, w, b}, [N, F, O](TensorImpl<T>& self) {
            auto px = self.parents[0];
            auto pw = self.parents[1];
            auto pb = self.parents[2];
            using EMat = detail::EMat<T>;
            Eigen::Map<const EMat> Gm(self.grad.data(), N, O);
            if (px->needs_grad) {
                px->ensure_grad();
                Eigen::Map<const EMat> Wm(pw->val.data(), O, F);
                Eigen::Map<EMat> Xg(px->grad.data(), N, F);
                Xg.noalias() += Gm * Wm;
            }
            if (pw->needs_grad) {
                pw->ensure_grad();
                Eigen::Map<const EMat> Xm(px->val.data(), N, F);
                Eigen::Map<EMat> Wg(pw->grad.data(), O, F);
                Wg.noalias() += Gm.transpose() * Xm;
            }
            if (pb->needs_grad) {
                auto& gb = pb->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) gb[o] += self.grad[size_t(n) * O + o];
            }
        });
}

// ---- losses ----

/// Row-wise log-softmax over the last axis of an [N,K] tensor (log-sum-exp stabilized).
template <class T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw Error("log_softmax expects [N,K], got " + shape_str(s));
    int N = s[0], K = s[1];
    std::vector<T> out(logits.numel());
    const auto& lv = logits.values();
    for (int n = 0; n < N; ++n) {
        const T* row = lv.data() + size_t(n) * K;
        T m = *std::max_element(row, row + K);
        T lse = T(0);
        for (int k = 0; k < K; ++k) lse += std::exp(row[k] - m);
        lse = m + std::log(lse);
        for (int k = 0; k < K; ++k) out[size_t(n) * K + k] = row[k] - lse;
    }
    return detail::make_result<T>(s, std::move(out), {logits}, [N, K](TensorImpl<T>& self) {
        auto pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const T* g = self.grad.data() + size_t(n) * K;
            const T* o = self.val.data() + size_t(n) * K;
            T gs = T(0);
            for (int k = 0; k < K; ++k) gs += g[k];
            T* d = ga.data() + size_t(n) * K;
            for (int k = 0; k < K; ++k) d[k] += g[k] - std::exp(o[k]) * gs;
        }
    });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
    return exp(log_softmax(logits));
}

/// Mean cross-entropy of [N,K] logits against integer class labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || size_t(s[0]) != labels.size())
        throw Error("cross_entropy: logits " + shape_str(s) + " vs " + std::to_string(labels.size()) +
                    " labels");
    int K = s[1];
    for (int y : labels)
        if (y < 0 || y >= K) throw Error("cross_entropy: label " + std::to_string(y) + " out of range");
    auto ls = log_softmax(logits);
    int N = s[0];
    std::vector<T> picked(size_t(N), T(0));
    for (int n = 0; n < N; ++n) picked[n] = -ls.values()[size_t(n) * K + labels[n]];
    T loss = std::accumulate(picked.begin(), picked.end(), T(0)) / T(N);
    return detail::make_result<T>({1}, {loss}, {ls}, [N, K, labels](TensorImpl<T>& self) {
        auto pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        T g = self.grad[0] / T(N);
        for (int n = 0; n < N; ++n) ga[size_t(n) * K + labels[n]] -= g;
    });
}

/// Mean cross-entropy of [N,K] logits against full target distributions
/// (plain values, one row per sample). Each target row must sum to 1.
template <class T>
Tensor<T> cross_entropy_dist(const Tensor<T>& logits, const std::vector<T>& target) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || target.size() != logits.numel())
        throw Error("cross_entropy_dist: logits " + shape_str(s) + " vs target of " +
                    std::to_string(target.size()) + " values");
    int N = s[0], K = s[1];
    for (int n = 0; n < N; ++n) {
        T tsum = T(0);
        for (int k = 0; k < K; ++k) tsum += target[size_t(n) * K + k];
        if (std::abs(double(tsum) - 1.0) > 1e-6)
            throw Error("cross_entropy_dist: target row " + std::to_string(n) + " sums to " +
                        std::to_string(double(tsum)) + ", expected 1");
    }
    auto ls = log_softmax(logits);
    T loss = T(0);
    for (size_t i = 0; i < target.size(); ++i) loss -= target[i] * ls.values()[i];
    loss /= T(N);
    return detail::make_result<T>({1}, {loss}, {ls}, [N, target](TensorImpl<T>& self) {
        auto pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        T g = self.grad[0] / T(N);
        for (size_t i = 0; i < target.size(); ++i) ga[i] -= g * target[i];
    });
}

/// Mean absolute error.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
    return mean(abs(sub(a, b)));
}

// ---- backward ----

/// Reverse-mode sweep from a scalar loss. Visits each node exactly once in
/// reverse topological order; leaf gradients accumulate in .grad().
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw Error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto root = loss.impl();
    if (!root->needs_grad) return;  // nothing on the tape depends on a leaf

    // iterative post-order DFS; construction order fixes accumulation order
    std::vector<TensorImpl<T>*> topo;
    std::unordered_set<TensorImpl<T>*> seen;
    std::vector<std::pair<TensorImpl<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl<T>* p = node->parents[idx++].get();
            if (p->needs_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    for (auto* n : topo) n->grad.assign(n->val.size(), T(0));
    root->grad[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace padv
