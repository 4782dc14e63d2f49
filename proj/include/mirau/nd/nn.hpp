#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "mirau/nd/ops.hpp"

namespace mirau::nd {

namespace detail {

// x [C,H,W] -> col [C*kh*kw, Ho*Wo]
template <typename T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t Ho, std::int64_t Wo, T* col) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                T* dst = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (std::int64_t ho = 0; ho < Ho; ++ho) {
                    const std::int64_t hi = ho * stride - pad + ki;
                    if (hi < 0 || hi >= H) {
                        for (std::int64_t wo = 0; wo < Wo; ++wo) dst[ho * Wo + wo] = T(0);
                        continue;
                    }
                    const T* src = x + (c * H + hi) * W;
                    for (std::int64_t wo = 0; wo < Wo; ++wo) {
                        const std::int64_t wi = wo * stride - pad + kj;
                        dst[ho * Wo + wo] = (wi >= 0 && wi < W) ? src[wi] : T(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add col into x.
template <typename T>
void col2im_add(const T* col, std::int64_t C, std::int64_t H, std::int64_t W,
                std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                std::int64_t Ho, std::int64_t Wo, T* x) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const T* src = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (std::int64_t ho = 0; ho < Ho; ++ho) {
                    const std::int64_t hi = ho * stride - pad + ki;
                    if (hi < 0 || hi >= H) continue;
                    T* dst = x + (c * H + hi) * W;
                    for (std::int64_t wo = 0; wo < Wo; ++wo) {
                        const std::int64_t wi = wo * stride - pad + kj;
                        if (wi >= 0 && wi < W) dst[wi] += src[ho * Wo + wo];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: x [N,C,H,W], kernel [F,C,kh,kw] -> [N,F,Ho,Wo]
// ---------------------------------------------------------------------------
template <typename T>
Array<T> conv2d(const Array<T>& x, const Array<T>& w, const std::optional<Array<T>>& bias,
                std::int64_t stride, std::int64_t padding) {
    using A = OpAccess<T>;
    if (x.shape().rank() != 4 || w.shape().rank() != 4)
        throw ShapeError("conv2d expects x [N,C,H,W], kernel [F,C,kh,kw]");
    const std::int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t F = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != C)
        throw ShapeError("conv2d channel mismatch: input C=" + std::to_string(C) +
                         ", kernel C=" + std::to_string(w.shape()[1]));
    if (stride < 1 || padding < 0) throw ConfigError("conv2d stride/padding invalid");
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw ShapeError("conv2d kernel larger than padded input");
    const std::int64_t Ho = (H + 2 * padding - kh) / stride + 1;
    const std::int64_t Wo = (W + 2 * padding - kw) / stride + 1;
    if (bias && bias->shape() != Shape{F}) throw ShapeError("conv2d bias must be [F]");

    const std::int64_t ckk = C * kh * kw;
    const T* xv = x.values().data();
    const T* wv = w.values().data();
    std::vector<T> out(static_cast<std::size_t>(N * F * Ho * Wo));
    std::vector<T> col(static_cast<std::size_t>(ckk * Ho * Wo));
    for (std::int64_t n = 0; n < N; ++n) {
        detail::im2col(xv + n * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
        gemm_nn(F, Ho * Wo, ckk, wv, col.data(), out.data() + n * F * Ho * Wo, false);
    }
    if (bias) {
        const T* bv = bias->values().data();
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t f = 0; f < F; ++f) {
                T* o = out.data() + (n * F + f) * Ho * Wo;
                const T bval = bv[f];
                for (std::int64_t i = 0; i < Ho * Wo; ++i) o[i] += bval;
            }
    }

    Tape<T>* tape = bias ? A::common_tape({&x, &w, &*bias}) : A::common_tape({&x, &w});
    Array<T> y = A::result(tape, Shape{N, F, Ho, Wo}, std::move(out), "conv2d");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, w, bias, yn, N, C, H, W, F, kh, kw, stride, padding, Ho, Wo, ckk]() {
            const T* gy = yn->grad.data();
            const T* xv = x.values().data();
            const T* wv = w.values().data();
            const bool need_x = OpAccess<T>::node_of(x) != nullptr;
            const bool need_w = OpAccess<T>::node_of(w) != nullptr;
            std::vector<T> gx, gw, col, gcol;
            if (need_x) gx.assign(x.values().size(), T(0));
            if (need_w) gw.assign(w.values().size(), T(0));
            if (need_w) col.resize(static_cast<std::size_t>(ckk * Ho * Wo));
            if (need_x) gcol.resize(static_cast<std::size_t>(ckk * Ho * Wo));
            for (std::int64_t n = 0; n < N; ++n) {
                const T* gyn = gy + n * F * Ho * Wo;
                if (need_w) {
                    detail::im2col(xv + n * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
                    gemm_nt(F, ckk, Ho * Wo, gyn, col.data(), gw.data(), true);
                }
                if (need_x) {
                    gemm_tn(ckk, Ho * Wo, F, wv, gyn, gcol.data(), false);
                    detail::col2im_add(gcol.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
                                       gx.data() + n * C * H * W);
                }
            }
            if (need_x) OpAccess<T>::add_grad(x, gx);
            if (need_w) OpAccess<T>::add_grad(w, gw);
            if (bias && OpAccess<T>::node_of(*bias)) {
                std::vector<T> gb(static_cast<std::size_t>(F), T(0));
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t f = 0; f < F; ++f) {
                        const T* g = gy + (n * F + f) * Ho * Wo;
                        T s = T(0);
                        for (std::int64_t i = 0; i < Ho * Wo; ++i) s += g[i];
                        gb[static_cast<std::size_t>(f)] += s;
                    }
                OpAccess<T>::add_grad(*bias, gb);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// conv_transpose2d: x [N,F,H,W], kernel [F,C,kh,kw] -> [N,C,Ho,Wo].
// Adjoint of conv2d with the same kernel: <conv2d(a,k), b> == <a, conv_transpose2d(b,k)>.
// ---------------------------------------------------------------------------
template <typename T>
Array<T> conv_transpose2d(const Array<T>& x, const Array<T>& w, const std::optional<Array<T>>& bias,
                          std::int64_t stride, std::int64_t padding) {
    using A = OpAccess<T>;
    if (x.shape().rank() != 4 || w.shape().rank() != 4)
        throw ShapeError("conv_transpose2d expects x [N,F,H,W], kernel [F,C,kh,kw]");
    const std::int64_t N = x.shape()[0], F = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t C = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[0] != F)
        throw ShapeError("conv_transpose2d channel mismatch: input F=" + std::to_string(F) +
                         ", kernel F=" + std::to_string(w.shape()[0]));
    if (stride < 1 || padding < 0) throw ConfigError("conv_transpose2d stride/padding invalid");
    const std::int64_t Ho = (H - 1) * stride - 2 * padding + kh;
    const std::int64_t Wo = (W - 1) * stride - 2 * padding + kw;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv_transpose2d non-positive output extent");
    if (bias && bias->shape() != Shape{C}) throw ShapeError("conv_transpose2d bias must be [C]");

    const std::int64_t ckk = C * kh * kw;
    const T* xv = x.values().data();
    const T* wv = w.values().data();
    std::vector<T> out(static_cast<std::size_t>(N * C * Ho * Wo), T(0));
    std::vector<T> col(static_cast<std::size_t>(ckk * H * W));
    for (std::int64_t n = 0; n < N; ++n) {
        // col = W^T * x_n, then scatter into the (larger) output plane
        gemm_tn(ckk, H * W, F, wv, xv + n * F * H * W, col.data(), false);
        detail::col2im_add(col.data(), C, Ho, Wo, kh, kw, stride, padding, H, W,
                           out.data() + n * C * Ho * Wo);
    }
    if (bias) {
        const T* bv = bias->values().data();
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                T* o = out.data() + (n * C + c) * Ho * Wo;
                for (std::int64_t i = 0; i < Ho * Wo; ++i) o[i] += bv[c];
            }
    }

    Tape<T>* tape = bias ? A::common_tape({&x, &w, &*bias}) : A::common_tape({&x, &w});
    Array<T> y = A::result(tape, Shape{N, C, Ho, Wo}, std::move(out), "conv_transpose2d");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, w, bias, yn, N, C, F, H, W, kh, kw, stride, padding, Ho, Wo, ckk]() {
            const T* gy = yn->grad.data();
            const T* xv = x.values().data();
            const T* wv = w.values().data();
            const bool need_x = OpAccess<T>::node_of(x) != nullptr;
            const bool need_w = OpAccess<T>::node_of(w) != nullptr;
            std::vector<T> gx, gw, col;
            if (need_x) gx.assign(x.values().size(), T(0));
            if (need_w) gw.assign(w.values().size(), T(0));
            col.resize(static_cast<std::size_t>(ckk * H * W));
            for (std::int64_t n = 0; n < N; ++n) {
                // grad wrt x is a plain convolution of gy with the same kernel
                detail::im2col(gy + n * C * Ho * Wo, C, Ho, Wo, kh, kw, stride, padding, H, W, col.data());
                if (need_x)
                    gemm_nn(F, H * W, ckk, wv, col.data(), gx.data() + n * F * H * W, false);
                if (need_w)
                    gemm_nt(F, ckk, H * W, xv + n * F * H * W, col.data(), gw.data(), true);
            }
            if (need_x) OpAccess<T>::add_grad(x, gx);
            if (need_w) OpAccess<T>::add_grad(w, gw);
            if (bias && OpAccess<T>::node_of(*bias)) {
                std::vector<T> gb(static_cast<std::size_t>(C), T(0));
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* g = gy + (n * C + c) * Ho * Wo;
                        T s = T(0);
                        for (std::int64_t i = 0; i < Ho * Wo; ++i) s += g[i];
                        gb[static_cast<std::size_t>(c)] += s;
                    }
                OpAccess<T>::add_grad(*bias, gb);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// softmax along an axis (shift-invariant form)
// ---------------------------------------------------------------------------
template <typename T>
Array<T> softmax(const Array<T>& x, int axis) {
    using A = OpAccess<T>;
    const int r = x.shape().rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("softmax axis out of range");
    const std::int64_t len = x.shape()[axis];
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];

    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            T mx = xv[static_cast<std::size_t>(base)];
            for (std::int64_t l = 1; l < len; ++l)
                mx = std::max(mx, xv[static_cast<std::size_t>(base + l * inner)]);
            T denom = T(0);
            for (std::int64_t l = 0; l < len; ++l) {
                const T e = std::exp(xv[static_cast<std::size_t>(base + l * inner)] - mx);
                out[static_cast<std::size_t>(base + l * inner)] = e;
                denom += e;
            }
            const T invd = T(1) / denom;
            for (std::int64_t l = 0; l < len; ++l) out[static_cast<std::size_t>(base + l * inner)] *= invd;
        }
    }

    Array<T> y = A::result(A::common_tape({&x}), x.shape(), std::move(out), "softmax");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, yn, outer, len, inner]() {
            const auto& gy = yn->grad;
            const auto& yv = *yn->value;
            std::vector<T> gx(yv.size());
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * len * inner + in;
                    T dot = T(0);
                    for (std::int64_t l = 0; l < len; ++l) {
                        const auto i = static_cast<std::size_t>(base + l * inner);
                        dot += gy[i] * yv[i];
                    }
                    for (std::int64_t l = 0; l < len; ++l) {
                        const auto i = static_cast<std::size_t>(base + l * inner);
                        gx[i] = yv[i] * (gy[i] - dot);
                    }
                }
            }
            OpAccess<T>::add_grad(x, gx);
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis
// ---------------------------------------------------------------------------
template <typename T>
Array<T> layer_norm(const Array<T>& x, const Array<T>& gain, const Array<T>& bias, T eps) {
    using A = OpAccess<T>;
    const int r = x.shape().rank();
    if (r < 1) throw ShapeError("layer_norm on scalar");
    const std::int64_t D = x.shape()[r - 1];
    if (gain.shape() != Shape{D} || bias.shape() != Shape{D})
        throw ShapeError("layer_norm gain/bias must be [D]");
    const std::int64_t rows = x.numel() / D;

    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    std::vector<T> out(xv.size());
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t rr = 0; rr < rows; ++rr) {
        const T* xr = xv.data() + rr * D;
        double mu = 0.0;
        for (std::int64_t i = 0; i < D; ++i) mu += xr[i];
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (std::int64_t i = 0; i < D; ++i) {
            const double d = xr[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(D);
        const T istd = T(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_std[static_cast<std::size_t>(rr)] = istd;
        for (std::int64_t i = 0; i < D; ++i) {
            const T xh = (xr[i] - T(mu)) * istd;
            xhat[static_cast<std::size_t>(rr * D + i)] = xh;
            out[static_cast<std::size_t>(rr * D + i)] = xh * gv[static_cast<std::size_t>(i)] + bv[static_cast<std::size_t>(i)];
        }
    }

    Array<T> y = A::result(A::common_tape({&x, &gain, &bias}), x.shape(), std::move(out), "layer_norm");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, gain, bias, yn, rows, D, xhat = std::move(xhat),
                            inv_std = std::move(inv_std)]() {
            const auto& gy = yn->grad;
            const auto& gv = gain.values();
            if (OpAccess<T>::node_of(x)) {
                std::vector<T> gx(x.values().size());
                for (std::int64_t rr = 0; rr < rows; ++rr) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::int64_t i = 0; i < D; ++i) {
                        const auto idx = static_cast<std::size_t>(rr * D + i);
                        const double h = gy[idx] * gv[static_cast<std::size_t>(i)];
                        s1 += h;
                        s2 += h * xhat[idx];
                    }
                    s1 /= static_cast<double>(D);
                    s2 /= static_cast<double>(D);
                    const T istd = inv_std[static_cast<std::size_t>(rr)];
                    for (std::int64_t i = 0; i < D; ++i) {
                        const auto idx = static_cast<std::size_t>(rr * D + i);
                        const double h = gy[idx] * gv[static_cast<std::size_t>(i)];
                        gx[idx] = T((h - s1 - xhat[idx] * s2)) * istd;
                    }
                }
                OpAccess<T>::add_grad(x, gx);
            }
            if (OpAccess<T>::node_of(gain)) {
                std::vector<T> gg(static_cast<std::size_t>(D), T(0));
                for (std::int64_t rr = 0; rr < rows; ++rr)
                    for (std::int64_t i = 0; i < D; ++i)
                        gg[static_cast<std::size_t>(i)] +=
                            gy[static_cast<std::size_t>(rr * D + i)] * xhat[static_cast<std::size_t>(rr * D + i)];
                OpAccess<T>::add_grad(gain, gg);
            }
            if (OpAccess<T>::node_of(bias)) {
                std::vector<T> gb(static_cast<std::size_t>(D), T(0));
                for (std::int64_t rr = 0; rr < rows; ++rr)
                    for (std::int64_t i = 0; i < D; ++i)
                        gb[static_cast<std::size_t>(i)] += gy[static_cast<std::size_t>(rr * D + i)];
                OpAccess<T>::add_grad(bias, gb);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// group_norm on [N,C,H,W]
// ---------------------------------------------------------------------------
template <typename T>
Array<T> group_norm(const Array<T>& x, std::int64_t groups, const Array<T>& gain,
                    const Array<T>& bias, T eps) {
    using A = OpAccess<T>;
    if (x.shape().rank() != 4) throw ShapeError("group_norm expects [N,C,H,W]");
    const std::int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (groups < 1 || C % groups != 0)
        throw ConfigError("group_norm: C=" + std::to_string(C) + " not divisible by groups=" + std::to_string(groups));
    if (gain.shape() != Shape{C} || bias.shape() != Shape{C})
        throw ShapeError("group_norm gain/bias must be [C]");
    const std::int64_t cpg = C / groups;
    const std::int64_t gsz = cpg * H * W;

    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    std::vector<T> out(xv.size());
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(static_cast<std::size_t>(N * groups));
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t g = 0; g < groups; ++g) {
            const std::int64_t base = (n * C + g * cpg) * H * W;
            double mu = 0.0;
            for (std::int64_t i = 0; i < gsz; ++i) mu += xv[static_cast<std::size_t>(base + i)];
            mu /= static_cast<double>(gsz);
            double var = 0.0;
            for (std::int64_t i = 0; i < gsz; ++i) {
                const double d = xv[static_cast<std::size_t>(base + i)] - mu;
                var += d * d;
            }
            var /= static_cast<double>(gsz);
            const T istd = T(1.0 / std::sqrt(var + static_cast<double>(eps)));
            inv_std[static_cast<std::size_t>(n * groups + g)] = istd;
            for (std::int64_t c = 0; c < cpg; ++c) {
                const T gc = gv[static_cast<std::size_t>(g * cpg + c)];
                const T bc = bv[static_cast<std::size_t>(g * cpg + c)];
                const std::int64_t cb = base + c * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    const auto idx = static_cast<std::size_t>(cb + i);
                    const T xh = (xv[idx] - T(mu)) * istd;
                    xhat[idx] = xh;
                    out[idx] = xh * gc + bc;
                }
            }
        }
    }

    Array<T> y = A::result(A::common_tape({&x, &gain, &bias}), x.shape(), std::move(out), "group_norm");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, gain, bias, yn, N, C, H, W, groups, cpg, gsz,
                            xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
            const auto& gy = yn->grad;
            const auto& gv = gain.values();
            if (OpAccess<T>::node_of(x)) {
                std::vector<T> gx(x.values().size());
                for (std::int64_t n = 0; n < N; ++n) {
                    for (std::int64_t g = 0; g < groups; ++g) {
                        const std::int64_t base = (n * C + g * cpg) * H * W;
                        double s1 = 0.0, s2 = 0.0;
                        for (std::int64_t c = 0; c < cpg; ++c) {
                            const double gc = gv[static_cast<std::size_t>(g * cpg + c)];
                            const std::int64_t cb = base + c * H * W;
                            for (std::int64_t i = 0; i < H * W; ++i) {
                                const auto idx = static_cast<std::size_t>(cb + i);
                                const double h = gy[idx] * gc;
                                s1 += h;
                                s2 += h * xhat[idx];
                            }
                        }
                        s1 /= static_cast<double>(gsz);
                        s2 /= static_cast<double>(gsz);
                        const T istd = inv_std[static_cast<std::size_t>(n * groups + g)];
                        for (std::int64_t c = 0; c < cpg; ++c) {
                            const double gc = gv[static_cast<std::size_t>(g * cpg + c)];
                            const std::int64_t cb = base + c * H * W;
                            for (std::int64_t i = 0; i < H * W; ++i) {
                                const auto idx = static_cast<std::size_t>(cb + i);
                                const double h = gy[idx] * gc;
                                gx[idx] = T(h - s1 - xhat[idx] * s2) * istd;
                            }
                        }
                    }
                }
                OpAccess<T>::add_grad(x, gx);
            }
            if (OpAccess<T>::node_of(gain) || OpAccess<T>::node_of(bias)) {
                std::vector<T> gg(static_cast<std::size_t>(C), T(0));
                std::vector<T> gb(static_cast<std::size_t>(C), T(0));
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const std::int64_t cb = (n * C + c) * H * W;
                        for (std::int64_t i = 0; i < H * W; ++i) {
                            const auto idx = static_cast<std::size_t>(cb + i);
                            gg[static_cast<std::size_t>(c)] += gy[idx] * xhat[idx];
                            gb[static_cast<std::size_t>(c)] += gy[idx];
                        }
                    }
                if (OpAccess<T>::node_of(gain)) OpAccess<T>::add_grad(gain, gg);
                if (OpAccess<T>::node_of(bias)) OpAccess<T>::add_grad(bias, gb);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// dropout: zero each element with probability p and scale survivors by 1/(1-p)
// in train mode; identity in eval mode. Randomness comes from the tape stream
// so equal (seed, pass index) reproduce the same mask.
// ---------------------------------------------------------------------------
template <typename T>
Array<T> dropout(Tape<T>& tape, const Array<T>& x, double p) {
    using A = OpAccess<T>;
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout p must be in [0,1)");
    if (!tape.train() || p == 0.0) return x;

    Rng rng = tape.next_stream();
    const T inv_keep = T(1.0 / (1.0 - p));
    const auto& xv = x.values();
    auto mask = std::make_shared<std::vector<T>>(xv.size());
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T m = rng.uniform() < p ? T(0) : inv_keep;
        (*mask)[i] = m;
        out[i] = xv[i] * m;
    }

    Array<T> y = A::result(A::common_tape({&x}), x.shape(), std::move(out), "dropout");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, yn, mask]() {
            const auto& gy = yn->grad;
            std::vector<T> gx(gy.size());
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = gy[i] * (*mask)[i];
            OpAccess<T>::add_grad(x, gx);
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention over [B,T,D] token matrices.
// Optional additive logit bias [heads,Tq,Tk], broadcast over the batch.
// ---------------------------------------------------------------------------
template <typename T>
Array<T> multi_head_attention(const Array<T>& q, const Array<T>& k, const Array<T>& v,
                              std::int64_t heads, const std::optional<Array<T>>& logit_bias = {}) {
    if (q.shape().rank() != 3 || k.shape().rank() != 3 || v.shape().rank() != 3)
        throw ShapeError("attention expects [B,T,D]");
    const std::int64_t B = q.shape()[0], Tq = q.shape()[1], D = q.shape()[2];
    const std::int64_t Tk = k.shape()[1];
    if (k.shape()[0] != B || v.shape()[0] != B || v.shape()[1] != Tk ||
        k.shape()[2] != D || v.shape()[2] != D)
        throw ShapeError("attention operand shapes disagree");
    if (heads < 1 || D % heads != 0)
        throw ConfigError("attention heads must divide embedding dim: D=" + std::to_string(D) +
                          " heads=" + std::to_string(heads));
    const std::int64_t dh = D / heads;

    auto split = [&](const Array<T>& t, std::int64_t tok) {
        // [B,T,D] -> [B,heads,T,dh]
        return permute(reshape(t, Shape{B, tok, heads, dh}), {0, 2, 1, 3});
    };
    Array<T> qh = split(q, Tq);
    Array<T> kh = split(k, Tk);
    Array<T> vh = split(v, Tk);

    Array<T> scores = scale(matmul_nt(qh, kh), T(1.0 / std::sqrt(static_cast<double>(dh))));
    if (logit_bias) {
        if (logit_bias->shape() != Shape{heads, Tq, Tk})
            throw ShapeError("attention logit bias must be [heads,Tq,Tk]");
        scores = add(scores, *logit_bias);
    }
    Array<T> attn = softmax(scores, -1);
    Array<T> ctx = matmul(attn, vh);  // [B,heads,Tq,dh]
    return reshape(permute(ctx, {0, 2, 1, 3}), Shape{B, Tq, D});
}

// x [..., in] * W [in, out] + b [out]
template <typename T>
Array<T> linear(const Array<T>& x, const Array<T>& w, const Array<T>& b) {
    return add(matmul(x, w), b);
}

}  // namespace mirau::nd
