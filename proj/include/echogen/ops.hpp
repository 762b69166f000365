#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <vector>

#include "echogen/tensor.hpp"

namespace echogen {

namespace detail {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline std::vector<i64> row_major_strides(const Shape& s) {
    std::vector<i64> st(s.size());
    i64 acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; i--) {
        st[static_cast<std::size_t>(i)] = acc;
        acc *= s[static_cast<std::size_t>(i)];
    }
    return st;
}

struct Broadcast {
    Shape out;
    std::vector<i64> sa, sb;  // strides into a and b, zero on broadcast axes
};

inline Broadcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
    if (a.size() != b.size())
        throw ShapeError(std::string(op) + ": operands must have equal rank, got " + shape_str(a) + " and " +
                         shape_str(b));
    Broadcast bc;
    bc.out.resize(a.size());
    for (std::size_t i = 0; i < a.size(); i++) {
        if (a[i] == b[i] || b[i] == 1)
            bc.out[i] = a[i];
        else if (a[i] == 1)
            bc.out[i] = b[i];
        else
            throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
    bc.sa = row_major_strides(a);
    bc.sb = row_major_strides(b);
    for (std::size_t i = 0; i < a.size(); i++) {
        if (a[i] == 1 && bc.out[i] > 1) bc.sa[i] = 0;
        if (b[i] == 1 && bc.out[i] > 1) bc.sb[i] = 0;
    }
    return bc;
}

// Walks the output index space of a broadcast op, exposing the linear
// offsets into both operands at every step.
template <class F>
inline void bcast_walk(const Broadcast& bc, F&& body) {
    const int r = static_cast<int>(bc.out.size());
    const i64 n = shape_numel(bc.out);
    if (r == 0) {
        body(static_cast<i64>(0), static_cast<i64>(0), static_cast<i64>(0));
        return;
    }
    std::vector<i64> idx(static_cast<std::size_t>(r), 0);
    i64 oa = 0, ob = 0;
    for (i64 lin = 0;;) {
        body(lin, oa, ob);
        if (++lin == n) break;
        for (int d = r - 1; d >= 0; d--) {
            auto du = static_cast<std::size_t>(d);
            idx[du]++;
            oa += bc.sa[du];
            ob += bc.sb[du];
            if (idx[du] < bc.out[du]) break;
            oa -= bc.sa[du] * bc.out[du];
            ob -= bc.sb[du] * bc.out[du];
            idx[du] = 0;
        }
    }
}

inline void permute_raw(const float* in, const Shape& in_shape, const std::vector<int>& perm, float* out) {
    const int r = static_cast<int>(in_shape.size());
    const auto in_strides = row_major_strides(in_shape);
    Shape out_shape(static_cast<std::size_t>(r));
    std::vector<i64> step(static_cast<std::size_t>(r));
    for (int d = 0; d < r; d++) {
        out_shape[static_cast<std::size_t>(d)] = in_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];
        step[static_cast<std::size_t>(d)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];
    }
    const i64 n = shape_numel(in_shape);
    std::vector<i64> idx(static_cast<std::size_t>(r), 0);
    i64 off = 0;
    for (i64 lin = 0;;) {
        out[lin] = in[off];
        if (++lin == n) break;
        for (int d = r - 1; d >= 0; d--) {
            auto du = static_cast<std::size_t>(d);
            idx[du]++;
            off += step[du];
            if (idx[du] < out_shape[du]) break;
            off -= step[du] * out_shape[du];
            idx[du] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (same-rank broadcasting over size-1 axes only).
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul };

inline Tensor binary_op(const char* name, BinKind kind, const Tensor& a, const Tensor& b) {
    check_finite(name, a);
    check_finite(name, b);
    const bool same = a.shape() == b.shape();
    Broadcast bc;
    if (!same) bc = broadcast_shapes(name, a.shape(), b.shape());
    const Shape out_shape = same ? a.shape() : bc.out;
    std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
    const float* pa = a.data();
    const float* pb = b.data();
    if (same) {
        const i64 n = a.numel();
        switch (kind) {
            case BinKind::Add:
                for (i64 i = 0; i < n; i++) out[static_cast<std::size_t>(i)] = pa[i] + pb[i];
                break;
            case BinKind::Sub:
                for (i64 i = 0; i < n; i++) out[static_cast<std::size_t>(i)] = pa[i] - pb[i];
                break;
            case BinKind::Mul:
                for (i64 i = 0; i < n; i++) out[static_cast<std::size_t>(i)] = pa[i] * pb[i];
                break;
        }
    } else {
        switch (kind) {
            case BinKind::Add:
                bcast_walk(bc, [&](i64 lin, i64 oa, i64 ob) { out[static_cast<std::size_t>(lin)] = pa[oa] + pb[ob]; });
                break;
            case BinKind::Sub:
                bcast_walk(bc, [&](i64 lin, i64 oa, i64 ob) { out[static_cast<std::size_t>(lin)] = pa[oa] - pb[ob]; });
                break;
            case BinKind::Mul:
                bcast_walk(bc, [&](i64 lin, i64 oa, i64 ob) { out[static_cast<std::size_t>(lin)] = pa[oa] * pb[ob]; });
                break;
        }
    }
    return make_output(out_shape, std::move(out), {a, b}, [name, kind, a, b, bc, same](Node& self) {
        const float* g = self.grad.data();
        auto& na = *a.handle();
        auto& nb = *b.handle();
        const float sgn = (kind == BinKind::Sub) ? -1.0f : 1.0f;
        if (same) {
            const i64 n = a.numel();
            if (wants_grad(na)) {
                na.ensure_grad();
                if (kind == BinKind::Mul) {
                    const float* pb2 = b.data();
                    for (i64 i = 0; i < n; i++) na.grad[static_cast<std::size_t>(i)] += g[i] * pb2[i];
                } else {
                    for (i64 i = 0; i < n; i++) na.grad[static_cast<std::size_t>(i)] += g[i];
                }
            }
            if (wants_grad(nb)) {
                nb.ensure_grad();
                if (kind == BinKind::Mul) {
                    const float* pa2 = a.data();
                    for (i64 i = 0; i < n; i++) nb.grad[static_cast<std::size_t>(i)] += g[i] * pa2[i];
                } else {
                    for (i64 i = 0; i < n; i++) nb.grad[static_cast<std::size_t>(i)] += sgn * g[i];
                }
            }
        } else {
            if (wants_grad(na)) {
                na.ensure_grad();
                if (kind == BinKind::Mul) {
                    const float* pb2 = b.data();
                    bcast_walk(bc, [&](i64 lin, i64 oa, i64 ob) { na.grad[static_cast<std::size_t>(oa)] += g[lin] * pb2[ob]; });
                } else {
                    bcast_walk(bc, [&](i64 lin, i64 oa, i64) { na.grad[static_cast<std::size_t>(oa)] += g[lin]; });
                }
            }
            if (wants_grad(nb)) {
                nb.ensure_grad();
                if (kind == BinKind::Mul) {
                    const float* pa2 = a.data();
                    bcast_walk(bc, [&](i64 lin, i64 oa, i64 ob) { nb.grad[static_cast<std::size_t>(ob)] += g[lin] * pa2[oa]; });
                } else {
                    bcast_walk(bc, [&](i64 lin, i64, i64 ob) { nb.grad[static_cast<std::size_t>(ob)] += sgn * g[lin]; });
                }
            }
        }
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op("add", detail::BinKind::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op("sub", detail::BinKind::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op("mul", detail::BinKind::Mul, a, b); }

inline Tensor scale(const Tensor& a, float c) {
    detail::check_finite("scale", a);
    if (!std::isfinite(c)) throw ValueError("scale: factor is not finite");
    std::vector<float> out(static_cast<std::size_t>(a.numel()));
    const float* pa = a.data();
    for (i64 i = 0; i < a.numel(); i++) out[static_cast<std::size_t>(i)] = c * pa[i];
    return detail::make_output(a.shape(), std::move(out), {a}, [a, c](detail::Node& self) {
        auto& na = *a.handle();
        if (!detail::wants_grad(na)) return;
        na.ensure_grad();
        const float* g = self.grad.data();
        for (i64 i = 0; i < na.numel(); i++) na.grad[static_cast<std::size_t>(i)] += c * g[i];
    });
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

// a: (..., K) x b: (K, N) -> (..., N); leading axes of a are collapsed into
// the GEMM row dimension.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_finite("matmul", a);
    detail::check_finite("matmul", b);
    if (a.rank() < 2 || b.rank() != 2)
        throw ShapeError("matmul: need a rank>=2 and b rank 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const i64 K = a.shape().back();
    const i64 N = b.dim(1);
    if (b.dim(0) != K)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const i64 M = a.numel() / K;
    Shape out_shape = a.shape();
    out_shape.back() = N;
    std::vector<float> out(static_cast<std::size_t>(M * N));
    {
        detail::ECMap A(a.data(), M, K), B(b.data(), K, N);
        detail::EMap C(out.data(), M, N);
        C.noalias() = A * B;
    }
    return detail::make_output(std::move(out_shape), std::move(out), {a, b}, [a, b, M, K, N](detail::Node& self) {
        detail::ECMap G(self.grad.data(), M, N);
        auto& na = *a.handle();
        auto& nb = *b.handle();
        if (detail::wants_grad(na)) {
            na.ensure_grad();
            detail::EMap GA(na.grad.data(), M, K);
            detail::ECMap B(b.data(), K, N);
            GA.noalias() += G * B.transpose();
        }
        if (detail::wants_grad(nb)) {
            nb.ensure_grad();
            detail::EMap GB(nb.grad.data(), K, N);
            detail::ECMap A(a.data(), M, K);
            GB.noalias() += A.transpose() * G;
        }
    });
}

// Batched product: (B, M, K) x (B, K, N) -> (B, M, N).
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    detail::check_finite("bmm", a);
    detail::check_finite("bmm", b);
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const i64 B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    std::vector<float> out(static_cast<std::size_t>(B * M * N));
    for (i64 i = 0; i < B; i++) {
        detail::ECMap A(a.data() + i * M * K, M, K), Bm(b.data() + i * K * N, K, N);
        detail::EMap C(out.data() + i * M * N, M, N);
        C.noalias() = A * Bm;
    }
    return detail::make_output({B, M, N}, std::move(out), {a, b}, [a, b, B, M, K, N](detail::Node& self) {
        auto& na = *a.handle();
        auto& nb = *b.handle();
        if (detail::wants_grad(na)) na.ensure_grad();
        if (detail::wants_grad(nb)) nb.ensure_grad();
        for (i64 i = 0; i < B; i++) {
            detail::ECMap G(self.grad.data() + i * M * N, M, N);
            if (detail::wants_grad(na)) {
                detail::EMap GA(na.grad.data() + i * M * K, M, K);
                detail::ECMap Bm(b.data() + i * K * N, K, N);
                GA.noalias() += G * Bm.transpose();
            }
            if (detail::wants_grad(nb)) {
                detail::EMap GB(nb.grad.data() + i * K * N, K, N);
                detail::ECMap A(a.data() + i * M * K, M, K);
                GB.noalias() += A.transpose() * G;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Layout ops.
// ---------------------------------------------------------------------------

inline Tensor transpose(const Tensor& a, const std::vector<int>& perm) {
    detail::check_finite("transpose", a);
    const int r = a.rank();
    if (static_cast<int>(perm.size()) != r) throw ShapeError("transpose: permutation rank mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)])
            throw ShapeError("transpose: invalid permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(r));
    for (int d = 0; d < r; d++) out_shape[static_cast<std::size_t>(d)] = a.dim(perm[static_cast<std::size_t>(d)]);
    std::vector<float> out(static_cast<std::size_t>(a.numel()));
    detail::permute_raw(a.data(), a.shape(), perm, out.data());
    return detail::make_output(std::move(out_shape), std::move(out), {a}, [a, perm, r](detail::Node& self) {
        auto& na = *a.handle();
        if (!detail::wants_grad(na)) return;
        std::vector<int> inv(static_cast<std::size_t>(r));
        for (int d = 0; d < r; d++) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])] = d;
        std::vector<float> scratch(static_cast<std::size_t>(na.numel()));
        detail::permute_raw(self.grad.data(), self.shape, inv, scratch.data());
        detail::accumulate(na, scratch.data(), na.numel());
    });
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    detail::check_finite("reshape", a);
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: element count changes from " + shape_str(a.shape()) + " to " +
                         shape_str(new_shape));
    std::vector<float> out(a.vec());
    return detail::make_output(std::move(new_shape), std::move(out), {a}, [a](detail::Node& self) {
        auto& na = *a.handle();
        if (!detail::wants_grad(na)) return;
        detail::accumulate(na, self.grad.data(), na.numel());
    });
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::check_finite("concat_channels", a);
    detail::check_finite("concat_channels", b);
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const i64 N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const i64 hw = H * W;
    std::vector<float> out(static_cast<std::size_t>(N * (Ca + Cb) * hw));
    for (i64 n = 0; n < N; n++) {
        std::memcpy(out.data() + n * (Ca + Cb) * hw, a.data() + n * Ca * hw, static_cast<std::size_t>(Ca * hw) * 4);
        std::memcpy(out.data() + n * (Ca + Cb) * hw + Ca * hw, b.data() + n * Cb * hw,
                    static_cast<std::size_t>(Cb * hw) * 4);
    }
    return detail::make_output({N, Ca + Cb, H, W}, std::move(out), {a, b}, [a, b, N, Ca, Cb, hw](detail::Node& self) {
        auto& na = *a.handle();
        auto& nb = *b.handle();
        const float* g = self.grad.data();
        if (detail::wants_grad(na)) {
            na.ensure_grad();
            for (i64 n = 0; n < N; n++)
                for (i64 i = 0; i < Ca * hw; i++)
                    na.grad[static_cast<std::size_t>(n * Ca * hw + i)] += g[n * (Ca + Cb) * hw + i];
        }
        if (detail::wants_grad(nb)) {
            nb.ensure_grad();
            for (i64 n = 0; n < N; n++)
                for (i64 i = 0; i < Cb * hw; i++)
                    nb.grad[static_cast<std::size_t>(n * Cb * hw + i)] += g[n * (Ca + Cb) * hw + Ca * hw + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution and resampling.
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const float* x, i64 C, i64 H, i64 W, i64 kh, i64 kw, i64 stride, i64 pad, i64 Ho, i64 Wo,
                   float* cols) {
    for (i64 c = 0; c < C; c++) {
        for (i64 i = 0; i < kh; i++) {
            for (i64 j = 0; j < kw; j++) {
                float* row = cols + ((c * kh + i) * kw + j) * Ho * Wo;
                for (i64 ho = 0; ho < Ho; ho++) {
                    const i64 hi = ho * stride + i - pad;
                    float* dst = row + ho * Wo;
                    if (hi < 0 || hi >= H) {
                        std::memset(dst, 0, static_cast<std::size_t>(Wo) * 4);
                        continue;
                    }
                    const float* src = x + (c * H + hi) * W;
                    if (stride == 1) {
                        const i64 wo_lo = std::max<i64>(0, pad - j);
                        const i64 wo_hi = std::min<i64>(Wo, W + pad - j);
                        if (wo_lo > 0) std::memset(dst, 0, static_cast<std::size_t>(wo_lo) * 4);
                        if (wo_hi > wo_lo)
                            std::memcpy(dst + wo_lo, src + wo_lo - pad + j, static_cast<std::size_t>(wo_hi - wo_lo) * 4);
                        if (wo_hi < Wo) std::memset(dst + wo_hi, 0, static_cast<std::size_t>(Wo - wo_hi) * 4);
                    } else {
                        for (i64 wo = 0; wo < Wo; wo++) {
                            const i64 wi = wo * stride + j - pad;
                            dst[wo] = (wi >= 0 && wi < W) ? src[wi] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_add(const float* cols, i64 C, i64 H, i64 W, i64 kh, i64 kw, i64 stride, i64 pad, i64 Ho, i64 Wo,
                       float* dx) {
    for (i64 c = 0; c < C; c++) {
        for (i64 i = 0; i < kh; i++) {
            for (i64 j = 0; j < kw; j++) {
                const float* row = cols + ((c * kh + i) * kw + j) * Ho * Wo;
                for (i64 ho = 0; ho < Ho; ho++) {
                    const i64 hi = ho * stride + i - pad;
                    if (hi < 0 || hi >= H) continue;
                    float* dst = dx + (c * H + hi) * W;
                    const float* src = row + ho * Wo;
                    for (i64 wo = 0; wo < Wo; wo++) {
                        const i64 wi = wo * stride + j - pad;
                        if (wi >= 0 && wi < W) dst[wi] += src[wo];
                    }
                }
            }
        }
    }
}

inline thread_local std::vector<float> g_conv_scratch;
inline thread_local std::vector<float> g_conv_scratch2;

}  // namespace detail

// x: (N, C, H, W), w: (O, C, kh, kw), bias: (O) or empty. Zero padding `pad`,
// square stride.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, i64 stride = 1, i64 pad = 1) {
    detail::check_finite("conv2d", x);
    detail::check_finite("conv2d", w);
    if (bias.defined()) detail::check_finite("conv2d", bias);
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d: need x rank 4 and w rank 4, got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const i64 O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C)
        throw ShapeError("conv2d: channel mismatch, x " + shape_str(x.shape()) + " vs w " + shape_str(w.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O))
        throw ShapeError("conv2d: bias must have shape (" + std::to_string(O) + ")");
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/pad");
    const i64 Ho = (H + 2 * pad - kh) / stride + 1;
    const i64 Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");

    const i64 ckk = C * kh * kw;
    std::vector<float> out(static_cast<std::size_t>(N * O * Ho * Wo));
    auto& cols = detail::g_conv_scratch;
    cols.resize(static_cast<std::size_t>(ckk * Ho * Wo));
    for (i64 n = 0; n < N; n++) {
        detail::im2col(x.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
        detail::ECMap Wm(w.data(), O, ckk), Cm(cols.data(), ckk, Ho * Wo);
        detail::EMap Y(out.data() + n * O * Ho * Wo, O, Ho * Wo);
        Y.noalias() = Wm * Cm;
        if (bias.defined()) {
            const float* pb = bias.data();
            for (i64 o = 0; o < O; o++) {
                float* dst = out.data() + (n * O + o) * Ho * Wo;
                for (i64 i = 0; i < Ho * Wo; i++) dst[i] += pb[o];
            }
        }
    }
    std::vector<Tensor> parents = bias.defined() ? std::vector<Tensor>{x, w, bias} : std::vector<Tensor>{x, w};
    return detail::make_output({N, O, Ho, Wo}, std::move(out), parents,
                               [x, w, bias, N, C, H, W, O, kh, kw, stride, pad, Ho, Wo, ckk](detail::Node& self) {
        auto& nx = *x.handle();
        auto& nw = *w.handle();
        const bool want_x = detail::wants_grad(nx);
        const bool want_w = detail::wants_grad(nw);
        detail::Node* nb = bias.defined() ? bias.handle().get() : nullptr;
        const bool want_b = nb && detail::wants_grad(*nb);
        if (want_x) nx.ensure_grad();
        if (want_w) nw.ensure_grad();
        if (want_b) nb->ensure_grad();
        auto& cols = detail::g_conv_scratch;
        auto& dcols = detail::g_conv_scratch2;
        cols.resize(static_cast<std::size_t>(ckk * Ho * Wo));
        if (want_x) dcols.resize(static_cast<std::size_t>(ckk * Ho * Wo));
        for (i64 n = 0; n < N; n++) {
            detail::ECMap G(self.grad.data() + n * O * Ho * Wo, O, Ho * Wo);
            if (want_w || want_x) {
                if (want_w) {
                    detail::im2col(x.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
                    detail::ECMap Cm(cols.data(), ckk, Ho * Wo);
                    detail::EMap GW(nw.grad.data(), O, ckk);
                    GW.noalias() += G * Cm.transpose();
                }
                if (want_x) {
                    detail::ECMap Wm(w.data(), O, ckk);
                    detail::EMap DC(dcols.data(), ckk, Ho * Wo);
                    DC.noalias() = Wm.transpose() * G;
                    detail::col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                                       nx.grad.data() + n * C * H * W);
                }
            }
            if (want_b) {
                for (i64 o = 0; o < O; o++) {
                    const float* g = self.grad.data() + (n * O + o) * Ho * Wo;
                    double s = 0.0;
                    for (i64 i = 0; i < Ho * Wo; i++) s += g[i];
                    nb->grad[static_cast<std::size_t>(o)] += static_cast<float>(s);
                }
            }
        }
    });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, i64 stride = 1, i64 pad = 1) {
    return conv2d(x, w, Tensor(), stride, pad);
}

// Nearest-neighbour 2x upsampling, (N, C, H, W) -> (N, C, 2H, 2W).
inline Tensor upsample_nearest2(const Tensor& x) {
    detail::check_finite("upsample_nearest2", x);
    if (x.rank() != 4) throw ShapeError("upsample_nearest2: need rank 4, got " + shape_str(x.shape()));
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<float> out(static_cast<std::size_t>(N * C * 4 * H * W));
    const float* px = x.data();
    for (i64 nc = 0; nc < N * C; nc++) {
        const float* src = px + nc * H * W;
        float* dst = out.data() + nc * 4 * H * W;
        for (i64 h = 0; h < H; h++) {
            for (i64 w2 = 0; w2 < W; w2++) {
                const float v = src[h * W + w2];
                dst[(2 * h) * 2 * W + 2 * w2] = v;
                dst[(2 * h) * 2 * W + 2 * w2 + 1] = v;
                dst[(2 * h + 1) * 2 * W + 2 * w2] = v;
                dst[(2 * h + 1) * 2 * W + 2 * w2 + 1] = v;
            }
        }
    }
    return detail::make_output({N, C, 2 * H, 2 * W}, std::move(out), {x}, [x, N, C, H, W](detail::Node& self) {
        auto& nx = *x.handle();
        if (!detail::wants_grad(nx)) return;
        nx.ensure_grad();
        const float* g = self.grad.data();
        for (i64 nc = 0; nc < N * C; nc++) {
            const float* src = g + nc * 4 * H * W;
            for (i64 h = 0; h < H; h++)
                for (i64 w2 = 0; w2 < W; w2++)
                    nx.grad[static_cast<std::size_t>(nc * H * W + h * W + w2)] +=
                        src[(2 * h) * 2 * W + 2 * w2] + src[(2 * h) * 2 * W + 2 * w2 + 1] +
                        src[(2 * h + 1) * 2 * W + 2 * w2] + src[(2 * h + 1) * 2 * W + 2 * w2 + 1];
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization and activations.
// ---------------------------------------------------------------------------

// Group normalization over (N, C, H, W) with per-channel affine parameters.
inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, i64 groups, float eps = 1e-5f) {
    detail::check_finite("group_norm", x);
    detail::check_finite("group_norm", gamma);
    detail::check_finite("group_norm", beta);
    if (x.rank() != 4) throw ShapeError("group_norm: need rank 4, got " + shape_str(x.shape()));
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (groups < 1 || C % groups != 0)
        throw ShapeError("group_norm: groups " + std::to_string(groups) + " must divide channels " + std::to_string(C));
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw ShapeError("group_norm: affine parameters must have shape (" + std::to_string(C) + ")");
    const i64 cg = C / groups;
    const i64 m = cg * H * W;
    std::vector<float> out(static_cast<std::size_t>(x.numel()));
    std::vector<float> means(static_cast<std::size_t>(N * groups)), rstds(static_cast<std::size_t>(N * groups));
    const float* px = x.data();
    const float* pg = gamma.data();
    const float* pb = beta.data();
    for (i64 n = 0; n < N; n++) {
        for (i64 g = 0; g < groups; g++) {
            const float* base = px + (n * C + g * cg) * H * W;
            double s = 0.0, s2 = 0.0;
            for (i64 i = 0; i < m; i++) {
                s += base[i];
                s2 += static_cast<double>(base[i]) * base[i];
            }
            const double mean = s / m;
            const double var = std::max(0.0, s2 / m - mean * mean);
            const float r = static_cast<float>(1.0 / std::sqrt(var + eps));
            means[static_cast<std::size_t>(n * groups + g)] = static_cast<float>(mean);
            rstds[static_cast<std::size_t>(n * groups + g)] = r;
            for (i64 c = 0; c < cg; c++) {
                const i64 ch = g * cg + c;
                const float* src = px + (n * C + ch) * H * W;
                float* dst = out.data() + (n * C + ch) * H * W;
                const float gc = pg[ch], bc = pb[ch], mu = static_cast<float>(mean);
                for (i64 i = 0; i < H * W; i++) dst[i] = gc * (src[i] - mu) * r + bc;
            }
        }
    }
    return detail::make_output(x.shape(), std::move(out), {x, gamma, beta},
                               [x, gamma, beta, N, C, H, W, groups, cg, m, means = std::move(means),
                                rstds = std::move(rstds)](detail::Node& self) {
        auto& nx = *x.handle();
        auto& ng = *gamma.handle();
        auto& nb = *beta.handle();
        const bool want_x = detail::wants_grad(nx);
        const bool want_g = detail::wants_grad(ng);
        const bool want_b = detail::wants_grad(nb);
        if (want_x) nx.ensure_grad();
        if (want_g) ng.ensure_grad();
        if (want_b) nb.ensure_grad();
        const float* px = x.data();
        const float* pg = gamma.data();
        const float* gout = self.grad.data();
        for (i64 n = 0; n < N; n++) {
            for (i64 g = 0; g < groups; g++) {
                const float mu = means[static_cast<std::size_t>(n * groups + g)];
                const float r = rstds[static_cast<std::size_t>(n * groups + g)];
                double s1 = 0.0, s2 = 0.0;
                for (i64 c = 0; c < cg; c++) {
                    const i64 ch = g * cg + c;
                    const float* src = px + (n * C + ch) * H * W;
                    const float* gy = gout + (n * C + ch) * H * W;
                    const float gc = pg[ch];
                    for (i64 i = 0; i < H * W; i++) {
                        const float xh = (src[i] - mu) * r;
                        s1 += static_cast<double>(gy[i]) * gc;
                        s2 += static_cast<double>(gy[i]) * gc * xh;
                    }
                }
                const float k1 = static_cast<float>(s1 / m);
                const float k2 = static_cast<float>(s2 / m);
                for (i64 c = 0; c < cg; c++) {
                    const i64 ch = g * cg + c;
                    const float* src = px + (n * C + ch) * H * W;
                    const float* gy = gout + (n * C + ch) * H * W;
                    const float gc = pg[ch];
                    if (want_x) {
                        float* dx = nx.grad.data() + (n * C + ch) * H * W;
                        for (i64 i = 0; i < H * W; i++) {
                            const float xh = (src[i] - mu) * r;
                            dx[i] += r * (gy[i] * gc - k1 - xh * k2);
                        }
                    }
                    if (want_g || want_b) {
                        double dg = 0.0, db = 0.0;
                        for (i64 i = 0; i < H * W; i++) {
                            const float xh = (src[i] - mu) * r;
                            dg += static_cast<double>(gy[i]) * xh;
                            db += gy[i];
                        }
                        if (want_g) ng.grad[static_cast<std::size_t>(ch)] += static_cast<float>(dg);
                        if (want_b) nb.grad[static_cast<std::size_t>(ch)] += static_cast<float>(db);
                    }
                }
            }
        }
    });
}

inline Tensor silu(const Tensor& x) {
    detail::check_finite("silu", x);
    std::vector<float> out(static_cast<std::size_t>(x.numel()));
    const float* px = x.data();
    for (i64 i = 0; i < x.numel(); i++) {
        const float s = 1.0f / (1.0f + std::exp(-px[i]));
        out[static_cast<std::size_t>(i)] = px[i] * s;
    }
    return detail::make_output(x.shape(), std::move(out), {x}, [x](detail::Node& self) {
        auto& nx = *x.handle();
        if (!detail::wants_grad(nx)) return;
        nx.ensure_grad();
        const float* px = x.data();
        const float* g = self.grad.data();
        for (i64 i = 0; i < nx.numel(); i++) {
            const float s = 1.0f / (1.0f + std::exp(-px[i]));
            nx.grad[static_cast<std::size_t>(i)] += g[i] * s * (1.0f + px[i] * (1.0f - s));
        }
    });
}

inline Tensor relu(const Tensor& x) {
    detail::check_finite("relu", x);
    std::vector<float> out(static_cast<std::size_t>(x.numel()));
    const float* px = x.data();
    for (i64 i = 0; i < x.numel(); i++) out[static_cast<std::size_t>(i)] = px[i] > 0.0f ? px[i] : 0.0f;
    return detail::make_output(x.shape(), std::move(out), {x}, [x](detail::Node& self) {
        auto& nx = *x.handle();
        if (!detail::wants_grad(nx)) return;
        nx.ensure_grad();
        const float* px = x.data();
        const float* g = self.grad.data();
        for (i64 i = 0; i < nx.numel(); i++)
            if (px[i] > 0.0f) nx.grad[static_cast<std::size_t>(i)] += g[i];
    });
}

// Softmax over the last axis.
inline Tensor softmax_lastdim(const Tensor& x) {
    detail::check_finite("softmax_lastdim", x);
    if (x.rank() < 1) throw ShapeError("softmax_lastdim: need rank >= 1");
    const i64 K = x.shape().back();
    const i64 rows = x.numel() / K;
    std::vector<float> out(static_cast<std::size_t>(x.numel()));
    const float* px = x.data();
    for (i64 r = 0; r < rows; r++) {
        const float* src = px + r * K;
        float* dst = out.data() + r * K;
        float mx = src[0];
        for (i64 i = 1; i < K; i++) mx = std::max(mx, src[i]);
        double s = 0.0;
        for (i64 i = 0; i < K; i++) {
            dst[i] = std::exp(src[i] - mx);
            s += dst[i];
        }
        const float inv = static_cast<float>(1.0 / s);
        for (i64 i = 0; i < K; i++) dst[i] *= inv;
    }
    std::vector<float> saved = out;
    return detail::make_output(x.shape(), std::move(out), {x}, [x, K, rows, saved = std::move(saved)](detail::Node& self) {
        auto& nx = *x.handle();
        if (!detail::wants_grad(nx)) return;
        nx.ensure_grad();
        const float* g = self.grad.data();
        for (i64 r = 0; r < rows; r++) {
            const float* y = saved.data() + r * K;
            const float* gy = g + r * K;
            double dot = 0.0;
            for (i64 i = 0; i < K; i++) dot += static_cast<double>(gy[i]) * y[i];
            float* dx = nx.grad.data() + r * K;
            for (i64 i = 0; i < K; i++) dx[i] += y[i] * (gy[i] - static_cast<float>(dot));
        }
    });
}

// ---------------------------------------------------------------------------
// Lookup and reductions.
// ---------------------------------------------------------------------------

// table: (V, d), ids flattened; output (ids.size(), d).
inline Tensor embedding(const Tensor& table, const std::vector<std::int32_t>& ids) {
    detail::check_finite("embedding", table);
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
    const i64 V = table.dim(0), d = table.dim(1);
    for (std::int32_t id : ids)
        if (id < 0 || id >= V)
            throw ShapeError("embedding: id " + std::to_string(id) + " out of range [0," + std::to_string(V) + ")");
    const i64 n = static_cast<i64>(ids.size());
    if (n == 0) throw ShapeError("embedding: empty id list");
    std::vector<float> out(static_cast<std::size_t>(n * d));
    for (i64 i = 0; i < n; i++)
        std::memcpy(out.data() + i * d, table.data() + static_cast<i64>(ids[static_cast<std::size_t>(i)]) * d,
                    static_cast<std::size_t>(d) * 4);
    return detail::make_output({n, d}, std::move(out), {table}, [table, ids, d](detail::Node& self) {
        auto& nt = *table.handle();
        if (!detail::wants_grad(nt)) return;
        nt.ensure_grad();
        const float* g = self.grad.data();
        for (std::size_t i = 0; i < ids.size(); i++) {
            float* dst = nt.grad.data() + static_cast<i64>(ids[i]) * d;
            const float* src = g + static_cast<i64>(i) * d;
            for (i64 k = 0; k < d; k++) dst[k] += src[k];
        }
    });
}

// Mean of squared entries; the diffusion objective's reduction.
inline Tensor mean_square(const Tensor& x) {
    detail::check_finite("mean_square", x);
    const i64 n = x.numel();
    double s = 0.0;
    const float* px = x.data();
    for (i64 i = 0; i < n; i++) s += static_cast<double>(px[i]) * px[i];
    std::vector<float> out{static_cast<float>(s / n)};
    return detail::make_output({1}, std::move(out), {x}, [x, n](detail::Node& self) {
        auto& nx = *x.handle();
        if (!detail::wants_grad(nx)) return;
        nx.ensure_grad();
        const float g = self.grad[0];
        const float* px = x.data();
        const float k = 2.0f / static_cast<float>(n);
        for (i64 i = 0; i < n; i++) nx.grad[static_cast<std::size_t>(i)] += g * k * px[i];
    });
}

inline Tensor sum_all(const Tensor& x) {
    detail::check_finite("sum_all", x);
    double s = 0.0;
    const float* px = x.data();
    for (i64 i = 0; i < x.numel(); i++) s += px[i];
    std::vector<float> out{static_cast<float>(s)};
    return detail::make_output({1}, std::move(out), {x}, [x](detail::Node& self) {
        auto& nx = *x.handle();
        if (!detail::wants_grad(nx)) return;
        nx.ensure_grad();
        const float g = self.grad[0];
        for (i64 i = 0; i < nx.numel(); i++) nx.grad[static_cast<std::size_t>(i)] += g;
    });
}

inline Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0f / static_cast<float>(x.numel())); }

// (N, C, H, W) -> (N, C): global average pool.
inline Tensor spatial_mean(const Tensor& x) {
    detail::check_finite("spatial_mean", x);
    if (x.rank() != 4) throw ShapeError("spatial_mean: need rank 4, got " + shape_str(x.shape()));
    const i64 N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<float> out(static_cast<std::size_t>(N * C));
    const float* px = x.data();
    for (i64 nc = 0; nc < N * C; nc++) {
        double s = 0.0;
        const float* src = px + nc * hw;
        for (i64 i = 0; i < hw; i++) s += src[i];
        out[static_cast<std::size_t>(nc)] = static_cast<float>(s / hw);
    }
    return detail::make_output({N, C}, std::move(out), {x}, [x, N, C, hw](detail::Node& self) {
        auto& nx = *x.handle();
        if (!detail::wants_grad(nx)) return;
        nx.ensure_grad();
        const float inv = 1.0f / static_cast<float>(hw);
        for (i64 nc = 0; nc < N * C; nc++) {
            const float g = self.grad[static_cast<std::size_t>(nc)] * inv;
            float* dst = nx.grad.data() + nc * hw;
            for (i64 i = 0; i < hw; i++) dst[i] += g;
        }
    });
}

// Mean negative log-likelihood of labels under softmax(logits); labels are
// class indices. Returns scalar.
inline Tensor cross_entropy_logits(const Tensor& logits, const std::vector<std::int32_t>& labels) {
    detail::check_finite("cross_entropy_logits", logits);
    if (logits.rank() != 2) throw ShapeError("cross_entropy_logits: logits must be rank 2");
    const i64 N = logits.dim(0), C = logits.dim(1);
    if (static_cast<i64>(labels.size()) != N)
        throw ShapeError("cross_entropy_logits: label count " + std::to_string(labels.size()) +
                         " does not match batch " + std::to_string(N));
    for (std::int32_t l : labels)
        if (l < 0 || l >= C) throw ShapeError("cross_entropy_logits: label out of range");
    std::vector<float> probs(static_cast<std::size_t>(N * C));
    const float* pl = logits.data();
    double loss = 0.0;
    for (i64 i = 0; i < N; i++) {
        const float* src = pl + i * C;
        float* dst = probs.data() + i * C;
        float mx = src[0];
        for (i64 c = 1; c < C; c++) mx = std::max(mx, src[c]);
        double s = 0.0;
        for (i64 c = 0; c < C; c++) {
            dst[c] = std::exp(src[c] - mx);
            s += dst[c];
        }
        const float inv = static_cast<float>(1.0 / s);
        for (i64 c = 0; c < C; c++) dst[c] *= inv;
        loss -= std::log(std::max(1e-12, static_cast<double>(dst[labels[static_cast<std::size_t>(i)]])));
    }
    std::vector<float> out{static_cast<float>(loss / N)};
    return detail::make_output({1}, std::move(out), {logits},
                               [logits, labels, N, C, probs = std::move(probs)](detail::Node& self) {
        auto& nl = *logits.handle();
        if (!detail::wants_grad(nl)) return;
        nl.ensure_grad();
        const float g = self.grad[0] / static_cast<float>(N);
        for (i64 i = 0; i < N; i++) {
            const float* p = probs.data() + i * C;
            float* dst = nl.grad.data() + i * C;
            const i64 li = labels[static_cast<std::size_t>(i)];
            for (i64 c = 0; c < C; c++) dst[c] += g * (p[c] - (c == li ? 1.0f : 0.0f));
        }
    });
}

inline std::vector<std::int32_t> argmax_rows(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("argmax_rows: need rank 2");
    const i64 N = t.dim(0), C = t.dim(1);
    std::vector<std::int32_t> out(static_cast<std::size_t>(N));
    for (i64 i = 0; i < N; i++) {
        const float* row = t.data() + i * C;
        i64 best = 0;
        for (i64 c = 1; c < C; c++)
            if (row[c] > row[best]) best = c;
        out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(best);
    }
    return out;
}

}  // namespace echogen
