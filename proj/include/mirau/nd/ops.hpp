#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mirau/nd/core.hpp"
#include "mirau/nd/gemm.hpp"

namespace mirau::nd {

namespace detail {

// Right-aligned numpy-style broadcast of two shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const int ra = a.rank(), rb = b.rank();
    const int r = std::max(ra, rb);
    std::vector<std::int64_t> out(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const std::int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        const std::int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + a.str() + " with " + b.str());
        out[static_cast<std::size_t>(i)] = std::max(da, db);
    }
    return Shape(std::move(out));
}

// Strides of `in` viewed through `out`, with zero stride on broadcast axes.
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    const int r = out.rank(), ri = in.rank();
    auto is = in.strides();
    std::vector<std::int64_t> s(static_cast<std::size_t>(r), 0);
    for (int i = 0; i < ri; ++i) {
        const int o = i + (r - ri);
        s[static_cast<std::size_t>(o)] = in[i] == 1 ? 0 : is[static_cast<std::size_t>(i)];
    }
    return s;
}

// Visit every output index of `out`, giving the linear offsets into two
// broadcast operands.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
    const int r = out.rank();
    const std::int64_t n = out.numel();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t lin = 0; lin < n; ++lin) {
        f(lin, oa, ob);
        for (int d = r - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            if (++idx[ud] < out[d]) {
                oa += sa[ud];
                ob += sb[ud];
                break;
            }
            oa -= sa[ud] * (out[d] - 1);
            ob -= sb[ud] * (out[d] - 1);
            idx[ud] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

// f: value -> value; df: (x, y) -> dy/dx
template <typename T, typename F, typename DF>
Array<T> unary_op(const Array<T>& x, const char* name, F f, DF df) {
    using A = OpAccess<T>;
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    Array<T> y = A::result(A::common_tape({&x}), x.shape(), std::move(out), name);
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, yn, df]() {
            const auto& gy = yn->grad;
            const auto& xv = x.values();
            const auto& yv = *yn->value;
            std::vector<T> gx(xv.size());
            for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = df(xv[i], yv[i]) * gy[i];
            OpAccess<T>::add_grad(x, gx);
        });
    }
    return y;
}

template <typename T>
Array<T> neg(const Array<T>& x) {
    return unary_op(x, "neg", [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Array<T> exp_(const Array<T>& x) {
    return unary_op(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Array<T> log_(const Array<T>& x) {
    return unary_op(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Array<T> sqrt_(const Array<T>& x) {
    return unary_op(x, "sqrt", [](T v) { return std::sqrt(v); },
                    [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Array<T> abs_(const Array<T>& x) {
    return unary_op(x, "abs", [](T v) { return std::abs(v); },
                    [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Array<T> sigmoid(const Array<T>& x) {
    return unary_op(x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                    [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Array<T> relu(const Array<T>& x) {
    return unary_op(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                    [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Array<T> gelu(const Array<T>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_op(
        x, "gelu",
        [](T v) { return T(0.5) * v * (T(1) + T(std::erf(static_cast<double>(v) * inv_sqrt2))); },
        [](T v, T) {
            const double vd = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(vd * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * vd * vd);
            return T(cdf + vd * pdf);
        });
}

// Gradient is passed through inside [lo, hi] and cut outside.
template <typename T>
Array<T> clamp(const Array<T>& x, T lo, T hi) {
    return unary_op(x, "clamp",
                    [lo, hi](T v) { return std::min(hi, std::max(lo, v)); },
                    [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Array<T> scale(const Array<T>& x, T c) {
    return unary_op(x, "scale", [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Array<T> add_scalar(const Array<T>& x, T c) {
    return unary_op(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Elementwise binary with broadcasting
// ---------------------------------------------------------------------------

// f: (a,b)->out; dfa/dfb: (a,b,g)->grad contribution
template <typename T, typename F, typename DFA, typename DFB>
Array<T> binary_op(const Array<T>& a, const Array<T>& b, const char* name, F f, DFA dfa, DFB dfb) {
    using A = OpAccess<T>;
    const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(static_cast<std::size_t>(out_shape.numel()));

    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
    } else {
        detail::for_each_broadcast(out_shape, sa, sb, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
            out[static_cast<std::size_t>(lin)] =
                f(av[static_cast<std::size_t>(oa)], bv[static_cast<std::size_t>(ob)]);
        });
    }

    Array<T> y = A::result(A::common_tape({&a, &b}), out_shape, std::move(out), name);
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [a, b, yn, out_shape, sa, sb, dfa, dfb]() {
            const auto& gy = yn->grad;
            const auto& av = a.values();
            const auto& bv = b.values();
            const bool same = a.shape() == b.shape();
            if (OpAccess<T>::node_of(a)) {
                std::vector<T> ga(av.size(), T(0));
                if (same) {
                    for (std::size_t i = 0; i < av.size(); ++i) ga[i] = dfa(av[i], bv[i], gy[i]);
                } else {
                    detail::for_each_broadcast(out_shape, sa, sb,
                                               [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
                        ga[static_cast<std::size_t>(oa)] +=
                            dfa(av[static_cast<std::size_t>(oa)], bv[static_cast<std::size_t>(ob)],
                                gy[static_cast<std::size_t>(lin)]);
                    });
                }
                OpAccess<T>::add_grad(a, ga);
            }
            if (OpAccess<T>::node_of(b)) {
                std::vector<T> gb(bv.size(), T(0));
                if (same) {
                    for (std::size_t i = 0; i < bv.size(); ++i) gb[i] = dfb(av[i], bv[i], gy[i]);
                } else {
                    detail::for_each_broadcast(out_shape, sa, sb,
                                               [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
                        gb[static_cast<std::size_t>(ob)] +=
                            dfb(av[static_cast<std::size_t>(oa)], bv[static_cast<std::size_t>(ob)],
                                gy[static_cast<std::size_t>(lin)]);
                    });
                }
                OpAccess<T>::add_grad(b, gb);
            }
        });
    }
    return y;
}

template <typename T>
Array<T> add(const Array<T>& a, const Array<T>& b) {
    return binary_op(a, b, "add", [](T x, T y) { return x + y; },
                     [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
Array<T> sub(const Array<T>& a, const Array<T>& b) {
    return binary_op(a, b, "sub", [](T x, T y) { return x - y; },
                     [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
Array<T> mul(const Array<T>& a, const Array<T>& b) {
    return binary_op(a, b, "mul", [](T x, T y) { return x * y; },
                     [](T, T y, T g) { return y * g; }, [](T x, T, T g) { return x * g; });
}

template <typename T>
Array<T> div_(const Array<T>& a, const Array<T>& b) {
    return binary_op(a, b, "div", [](T x, T y) { return x / y; },
                     [](T, T y, T g) { return g / y; },
                     [](T x, T y, T g) { return -x / (y * y) * g; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Array<T> sum_all(const Array<T>& x) {
    using A = OpAccess<T>;
    const auto& xv = x.values();
    double acc = 0.0;
    for (const T v : xv) acc += static_cast<double>(v);
    Array<T> y = A::result(A::common_tape({&x}), Shape{std::vector<std::int64_t>{}},
                           {static_cast<T>(acc)}, "sum");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, yn]() {
            OpAccess<T>::add_grad(x, std::vector<T>(x.values().size(), yn->grad[0]));
        });
    }
    return y;
}

template <typename T>
Array<T> mean_all(const Array<T>& x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Movement
// ---------------------------------------------------------------------------

template <typename T>
Array<T> reshape(const Array<T>& x, Shape shape) {
    using A = OpAccess<T>;
    if (shape.numel() != x.numel())
        throw ShapeError("reshape " + x.shape().str() + " -> " + shape.str());
    Array<T> y = A::result(A::common_tape({&x}), std::move(shape), x.values(), "reshape");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, yn]() { OpAccess<T>::add_grad(x, yn->grad); });
    }
    return y;
}

template <typename T>
Array<T> permute(const Array<T>& x, const std::vector<int>& axes) {
    using A = OpAccess<T>;
    const int r = x.shape().rank();
    if (static_cast<int>(axes.size()) != r) throw ShapeError("permute rank mismatch");
    std::vector<std::int64_t> od(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) od[static_cast<std::size_t>(i)] = x.shape()[axes[static_cast<std::size_t>(i)]];
    Shape out_shape(std::move(od));

    const auto xs = x.shape().strides();
    std::vector<std::int64_t> src_stride(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i)
        src_stride[static_cast<std::size_t>(i)] = xs[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

    const auto& xv = x.values();
    std::vector<T> out(static_cast<std::size_t>(out_shape.numel()));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t src = 0;
    const std::int64_t n = out_shape.numel();
    for (std::int64_t lin = 0; lin < n; ++lin) {
        out[static_cast<std::size_t>(lin)] = xv[static_cast<std::size_t>(src)];
        for (int d = r - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            if (++idx[ud] < out_shape[d]) {
                src += src_stride[ud];
                break;
            }
            src -= src_stride[ud] * (out_shape[d] - 1);
            idx[ud] = 0;
        }
    }

    Array<T> y = A::result(A::common_tape({&x}), out_shape, std::move(out), "permute");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, yn, out_shape, src_stride, r]() {
            const auto& gy = yn->grad;
            std::vector<T> gx(x.values().size(), T(0));
            std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
            std::int64_t src = 0;
            const std::int64_t n = out_shape.numel();
            for (std::int64_t lin = 0; lin < n; ++lin) {
                gx[static_cast<std::size_t>(src)] += gy[static_cast<std::size_t>(lin)];
                for (int d = r - 1; d >= 0; --d) {
                    auto ud = static_cast<std::size_t>(d);
                    if (++idx[ud] < out_shape[d]) {
                        src += src_stride[ud];
                        break;
                    }
                    src -= src_stride[ud] * (out_shape[d] - 1);
                    idx[ud] = 0;
                }
            }
            OpAccess<T>::add_grad(x, gx);
        });
    }
    return y;
}

// Cyclic shift of the last two axes (used by shifted-window attention).
template <typename T>
Array<T> roll2d(const Array<T>& x, std::int64_t shift_h, std::int64_t shift_w) {
    using A = OpAccess<T>;
    const int r = x.shape().rank();
    if (r < 2) throw ShapeError("roll2d needs rank >= 2");
    const std::int64_t H = x.shape()[r - 2];
    const std::int64_t W = x.shape()[r - 1];
    const std::int64_t planes = x.numel() / (H * W);
    auto wrap = [](std::int64_t v, std::int64_t m) { return ((v % m) + m) % m; };

    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::int64_t p = 0; p < planes; ++p) {
        const std::int64_t base = p * H * W;
        for (std::int64_t h = 0; h < H; ++h) {
            const std::int64_t sh = wrap(h - shift_h, H);
            for (std::int64_t w = 0; w < W; ++w)
                out[static_cast<std::size_t>(base + h * W + w)] =
                    xv[static_cast<std::size_t>(base + sh * W + wrap(w - shift_w, W))];
        }
    }

    Array<T> y = A::result(A::common_tape({&x}), x.shape(), std::move(out), "roll2d");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, yn, H, W, planes, shift_h, shift_w, wrap]() {
            const auto& gy = yn->grad;
            std::vector<T> gx(x.values().size());
            for (std::int64_t p = 0; p < planes; ++p) {
                const std::int64_t base = p * H * W;
                for (std::int64_t h = 0; h < H; ++h) {
                    const std::int64_t sh = wrap(h - shift_h, H);
                    for (std::int64_t w = 0; w < W; ++w)
                        gx[static_cast<std::size_t>(base + sh * W + wrap(w - shift_w, W))] =
                            gy[static_cast<std::size_t>(base + h * W + w)];
                }
            }
            OpAccess<T>::add_grad(x, gx);
        });
    }
    return y;
}

template <typename T>
Array<T> concat(const Array<T>& a, const Array<T>& b, int axis) {
    using A = OpAccess<T>;
    const int r = a.shape().rank();
    if (b.shape().rank() != r) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < r; ++i)
        if (i != axis && a.shape()[i] != b.shape()[i])
            throw ShapeError("concat extent mismatch outside axis");
    std::vector<std::int64_t> od = a.shape().dims();
    od[static_cast<std::size_t>(axis)] += b.shape()[axis];
    Shape out_shape(std::move(od));

    // outer = product of dims before axis; inner = product after
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int i = axis + 1; i < r; ++i) inner *= a.shape()[i];
    const std::int64_t na = a.shape()[axis] * inner;
    const std::int64_t nb = b.shape()[axis] * inner;

    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(static_cast<std::size_t>(out_shape.numel()));
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(av.begin() + o * na, na, out.begin() + o * (na + nb));
        std::copy_n(bv.begin() + o * nb, nb, out.begin() + o * (na + nb) + na);
    }

    Array<T> y = A::result(A::common_tape({&a, &b}), out_shape, std::move(out), "concat");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [a, b, yn, outer, na, nb]() {
            const auto& gy = yn->grad;
            if (OpAccess<T>::node_of(a)) {
                std::vector<T> ga(a.values().size());
                for (std::int64_t o = 0; o < outer; ++o)
                    std::copy_n(gy.begin() + o * (na + nb), na, ga.begin() + o * na);
                OpAccess<T>::add_grad(a, ga);
            }
            if (OpAccess<T>::node_of(b)) {
                std::vector<T> gb(b.values().size());
                for (std::int64_t o = 0; o < outer; ++o)
                    std::copy_n(gy.begin() + o * (na + nb) + na, nb, gb.begin() + o * nb);
                OpAccess<T>::add_grad(b, gb);
            }
        });
    }
    return y;
}

// Gather rows along axis 0.
template <typename T>
Array<T> take_rows(const Array<T>& x, const std::vector<std::int64_t>& rows) {
    using A = OpAccess<T>;
    if (x.shape().rank() < 1) throw ShapeError("take_rows on scalar");
    const std::int64_t R = x.shape()[0];
    const std::int64_t inner = x.numel() / R;
    for (auto r : rows)
        if (r < 0 || r >= R) throw ShapeError("take_rows index out of range");

    std::vector<std::int64_t> od = x.shape().dims();
    od[0] = static_cast<std::int64_t>(rows.size());
    Shape out_shape(std::move(od));

    const auto& xv = x.values();
    std::vector<T> out(static_cast<std::size_t>(out_shape.numel()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(xv.begin() + rows[i] * inner, inner,
                    out.begin() + static_cast<std::int64_t>(i) * inner);

    Array<T> y = A::result(A::common_tape({&x}), out_shape, std::move(out), "take_rows");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, yn, rows, inner]() {
            const auto& gy = yn->grad;
            std::vector<T> gx(x.values().size(), T(0));
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const std::int64_t src = static_cast<std::int64_t>(i) * inner;
                const std::int64_t dst = rows[i] * inner;
                for (std::int64_t j = 0; j < inner; ++j)
                    gx[static_cast<std::size_t>(dst + j)] += gy[static_cast<std::size_t>(src + j)];
            }
            OpAccess<T>::add_grad(x, gx);
        });
    }
    return y;
}

// Scatter rows of x into a zero array with `total` rows; adjoint of take_rows.
template <typename T>
Array<T> put_rows(const Array<T>& x, const std::vector<std::int64_t>& rows, std::int64_t total) {
    using A = OpAccess<T>;
    if (static_cast<std::int64_t>(rows.size()) != x.shape()[0])
        throw ShapeError("put_rows index count mismatch");
    const std::int64_t inner = x.numel() / x.shape()[0];
    std::vector<std::int64_t> od = x.shape().dims();
    od[0] = total;
    Shape out_shape(std::move(od));

    const auto& xv = x.values();
    std::vector<T> out(static_cast<std::size_t>(out_shape.numel()), T(0));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= total) throw ShapeError("put_rows index out of range");
        std::copy_n(xv.begin() + static_cast<std::int64_t>(i) * inner, inner,
                    out.begin() + rows[i] * inner);
    }

    Array<T> y = A::result(A::common_tape({&x}), out_shape, std::move(out), "put_rows");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [x, yn, rows, inner]() {
            const auto& gy = yn->grad;
            std::vector<T> gx(x.values().size());
            for (std::size_t i = 0; i < rows.size(); ++i)
                std::copy_n(gy.begin() + rows[i] * inner, inner,
                            gx.begin() + static_cast<std::int64_t>(i) * inner);
            OpAccess<T>::add_grad(x, gx);
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void matmul_shapes(const Array<T>& a, const Array<T>& b, bool b_transposed,
                   std::int64_t& batch, std::int64_t& m, std::int64_t& k, std::int64_t& n,
                   bool& b_is_weights) {
    const int ra = a.shape().rank(), rb = b.shape().rank();
    if (ra < 2 || rb < 2) throw ShapeError("matmul needs rank >= 2");
    m = a.shape()[ra - 2];
    k = a.shape()[ra - 1];
    const std::int64_t bk = b_transposed ? b.shape()[rb - 1] : b.shape()[rb - 2];
    n = b_transposed ? b.shape()[rb - 2] : b.shape()[rb - 1];
    if (k != bk)
        throw ShapeError("matmul inner extent mismatch: " + a.shape().str() + " x " + b.shape().str());
    batch = a.numel() / (m * k);
    b_is_weights = (rb == 2 && ra > 2);
    if (!b_is_weights && b.numel() / (bk * n) != batch)
        throw ShapeError("matmul batch mismatch: " + a.shape().str() + " x " + b.shape().str());
}

}  // namespace detail

// a [..., m, k] x b [..., k, n] (or b [k, n] shared over the batch).
template <typename T>
Array<T> matmul(const Array<T>& a, const Array<T>& b) {
    using A = OpAccess<T>;
    std::int64_t batch, m, k, n;
    bool shared_b;
    detail::matmul_shapes(a, b, false, batch, m, k, n, shared_b);

    std::vector<std::int64_t> od(a.shape().dims().begin(), a.shape().dims().end() - 1);
    od.push_back(n);
    Shape out_shape(std::move(od));

    const T* av = a.values().data();
    const T* bv = b.values().data();
    std::vector<T> out(static_cast<std::size_t>(out_shape.numel()));
    for (std::int64_t p = 0; p < batch; ++p)
        gemm_nn(m, n, k, av + p * m * k, shared_b ? bv : bv + p * k * n, out.data() + p * m * n, false);

    Array<T> y = A::result(A::common_tape({&a, &b}), out_shape, std::move(out), "matmul");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [a, b, yn, batch, m, k, n, shared_b]() {
            const T* gy = yn->grad.data();
            const T* av = a.values().data();
            const T* bv = b.values().data();
            if (OpAccess<T>::node_of(a)) {
                // dA = dY * B^T
                std::vector<T> ga(a.values().size());
                for (std::int64_t p = 0; p < batch; ++p)
                    gemm_nt(m, k, n, gy + p * m * n, shared_b ? bv : bv + p * k * n,
                            ga.data() + p * m * k, false);
                OpAccess<T>::add_grad(a, ga);
            }
            if (OpAccess<T>::node_of(b)) {
                // dB = A^T * dY, accumulated over the batch when B is shared
                std::vector<T> gb(b.values().size(), T(0));
                for (std::int64_t p = 0; p < batch; ++p)
                    gemm_tn(k, n, m, av + p * m * k, gy + p * m * n,
                            gb.data() + (shared_b ? 0 : p * k * n), true);
                OpAccess<T>::add_grad(b, gb);
            }
        });
    }
    return y;
}

// a [..., m, k] x b [..., n, k]^T -> [..., m, n]
template <typename T>
Array<T> matmul_nt(const Array<T>& a, const Array<T>& b) {
    using A = OpAccess<T>;
    std::int64_t batch, m, k, n;
    bool shared_b;
    detail::matmul_shapes(a, b, true, batch, m, k, n, shared_b);

    std::vector<std::int64_t> od(a.shape().dims().begin(), a.shape().dims().end() - 1);
    od.push_back(n);
    Shape out_shape(std::move(od));

    const T* av = a.values().data();
    const T* bv = b.values().data();
    std::vector<T> out(static_cast<std::size_t>(out_shape.numel()));
    for (std::int64_t p = 0; p < batch; ++p)
        gemm_nt(m, n, k, av + p * m * k, shared_b ? bv : bv + p * n * k, out.data() + p * m * n, false);

    Array<T> y = A::result(A::common_tape({&a, &b}), out_shape, std::move(out), "matmul_nt");
    if (y.on_tape()) {
        auto* yn = A::node_of(y);
        A::set_backward(y, [a, b, yn, batch, m, k, n, shared_b]() {
            const T* gy = yn->grad.data();
            const T* av = a.values().data();
            const T* bv = b.values().data();
            if (OpAccess<T>::node_of(a)) {
                // dA = dY * B
                std::vector<T> ga(a.values().size());
                for (std::int64_t p = 0; p < batch; ++p)
                    gemm_nn(m, k, n, gy + p * m * n, shared_b ? bv : bv + p * n * k,
                            ga.data() + p * m * k, false);
                OpAccess<T>::add_grad(a, ga);
            }
            if (OpAccess<T>::node_of(b)) {
                // dB = dY^T * A
                std::vector<T> gb(b.values().size(), T(0));
                for (std::int64_t p = 0; p < batch; ++p)
                    gemm_tn(n, k, m, gy + p * m * n, av + p * m * k,
                            gb.data() + (shared_b ? 0 : p * n * k), true);
                OpAccess<T>::add_grad(b, gb);
            }
        });
    }
    return y;
}

}  // namespace mirau::nd
