#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "icfd/autograd.hpp"

namespace icfd::ag {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw ShapeError(std::string(op) + ": mismatched shapes " + a.value().shape_str() + " vs " +
                         b.value().shape_str());
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    const T* bd = b.value().data();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] += bd[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        if (n.parents[0]->requires_grad) accumulate(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) accumulate(*n.parents[1], n.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out = a.value();
    const T* bd = b.value().data();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] -= bd[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        if (n.parents[0]->requires_grad) accumulate(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor<T>& g = n.parents[1]->ensure_grad();
            const T* s = n.grad.data();
            T* d = g.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) d[i] -= s[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out = a.value();
    const T* bd = b.value().data();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] *= bd[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        const Tensor<T>& av = n.parents[0]->value;
        const Tensor<T>& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            Tensor<T>& g = n.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor<T>& g = n.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] *= c;
    return make_op<T>(std::move(out), {a}, [c](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += c * n.grad[i];
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] += c;
    return make_op<T>(std::move(out), {a},
                      [](Node<T>& n) { accumulate(*n.parents[0], n.grad); });
}

// Elementwise product with a constant tensor; no gradient flows to `c`.
template <typename T>
Var<T> mul_const(const Var<T>& a, Tensor<T> c) {
    if (!a.value().same_shape(c)) throw ShapeError("mul_const: mismatched shapes");
    Tensor<T> out = a.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
    return make_op<T>(std::move(out), {a}, [c = std::move(c)](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += c[i] * n.grad[i];
    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> out = a.value();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] = od[i] > T(0) ? od[i] : T(0);
    return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
        const Tensor<T>& x = n.parents[0]->value;
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (x[i] > T(0)) g[i] += n.grad[i];
    });
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out = a.value();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] = stable_sigmoid(od[i]);
    Tensor<T> y = out;
    return make_op<T>(std::move(out), {a}, [y = std::move(y)](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * y[i] * (T(1) - y[i]);
    });
}

template <typename T>
Var<T> square(const Var<T>& a) {
    Tensor<T> out = a.value();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] *= od[i];
    return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
        const Tensor<T>& x = n.parents[0]->value;
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += T(2) * x[i] * n.grad[i];
    });
}

template <typename T>
Var<T> sqrt_op(const Var<T>& a) {
    Tensor<T> out = a.value();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] = std::sqrt(od[i]);
    Tensor<T> y = out;
    return make_op<T>(std::move(out), {a}, [y = std::move(y)](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / (T(2) * y[i]);
    });
}

template <typename T>
Var<T> abs_op(const Var<T>& a) {
    Tensor<T> out = a.value();
    T* od = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) od[i] = std::abs(od[i]);
    return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
        const Tensor<T>& x = n.parents[0]->value;
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            if (x[i] > T(0)) g[i] += n.grad[i];
            else if (x[i] < T(0)) g[i] -= n.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions and shape
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
    T s = T(0);
    const T* d = a.value().data();
    for (std::int64_t i = 0; i < a.value().numel(); ++i) s += d[i];
    return make_op<T>(Tensor<T>::scalar(s), {a}, [](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        const T gv = n.grad[0];
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    const std::int64_t cnt = a.value().numel();
    detail::require(cnt > 0, "mean_all: empty tensor");
    T s = T(0);
    const T* d = a.value().data();
    for (std::int64_t i = 0; i < cnt; ++i) s += d[i];
    s /= static_cast<T>(cnt);
    return make_op<T>(Tensor<T>::scalar(s), {a}, [cnt](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        const T gv = n.grad[0] / static_cast<T>(cnt);
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

template <typename T>
Var<T> flatten(const Var<T>& a) {
    detail::require(a.value().rank() == 4, "flatten expects [N,C,H,W]");
    const auto& s = a.value().shape();
    return reshape(a, {s[0], s[1] * s[2] * s[3]});
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    detail::require(!xs.empty(), "concat_channels: empty input list");
    const auto& s0 = xs[0].value().shape();
    detail::require(xs[0].value().rank() == 4, "concat_channels expects [N,C,H,W]");
    int ctot = 0;
    for (const auto& x : xs) {
        const auto& s = x.value().shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw ShapeError("concat_channels: mismatched dims " + x.value().shape_str() + " vs " +
                             xs[0].value().shape_str());
        ctot += s[1];
    }
    const int N = s0[0], H = s0[2], W = s0[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor<T> out({N, ctot, H, W});
    std::vector<int> offs;
    int off = 0;
    for (const auto& x : xs) {
        offs.push_back(off);
        const int c = x.value().dim(1);
        for (int n = 0; n < N; ++n)
            std::memcpy(out.data() + (static_cast<std::int64_t>(n) * ctot + off) * hw,
                        x.value().data() + static_cast<std::int64_t>(n) * c * hw,
                        sizeof(T) * static_cast<std::size_t>(c) * hw);
        off += c;
    }
    return make_op<T>(std::move(out), xs, [offs, N, ctot, hw](Node<T>& n) {
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            if (!n.parents[i]->requires_grad) continue;
            Tensor<T>& g = n.parents[i]->ensure_grad();
            const int c = g.dim(1);
            for (int b = 0; b < N; ++b) {
                const T* src = n.grad.data() + (static_cast<std::int64_t>(b) * ctot + offs[i]) * hw;
                T* dst = g.data() + static_cast<std::int64_t>(b) * c * hw;
                for (std::int64_t j = 0; j < c * hw; ++j) dst[j] += src[j];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

// y[N,O] = x[N,F] * w[O,F]^T + b[O]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    detail::require(x.value().rank() == 2 && w.value().rank() == 2, "linear expects rank-2 inputs");
    const int N = x.value().dim(0), F = x.value().dim(1), O = w.value().dim(0);
    detail::require(w.value().dim(1) == F, "linear: weight width mismatch");
    detail::require(b.value().numel() == O, "linear: bias size mismatch");
    Tensor<T> out({N, O});
    ConstMatMap<T> X(x.value().data(), N, F), W(w.value().data(), O, F);
    MatMap<T> Y(out.data(), N, O);
    Y.noalias() = X * W.transpose();
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < O; ++j) out.at2(i, j) += b.value()[j];
    return make_op<T>(std::move(out), {x, w, b}, [N, F, O](Node<T>& n) {
        ConstMatMap<T> G(n.grad.data(), N, O);
        ConstMatMap<T> X(n.parents[0]->value.data(), N, F);
        ConstMatMap<T> W(n.parents[1]->value.data(), O, F);
        if (n.parents[0]->requires_grad) {
            MatMap<T> GX(n.parents[0]->ensure_grad().data(), N, F);
            GX.noalias() += G * W;
        }
        if (n.parents[1]->requires_grad) {
            MatMap<T> GW(n.parents[1]->ensure_grad().data(), O, F);
            GW.noalias() += G.transpose() * X;
        }
        if (n.parents[2]->requires_grad) {
            Tensor<T>& gb = n.parents[2]->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < O; ++j) gb[j] += n.grad[static_cast<std::int64_t>(i) * O + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

struct ConvSpec {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
};

inline int conv_out_dim(int in, int k, const ConvSpec& cs) {
    return (in + 2 * cs.pad - cs.dilation * (k - 1) - 1) / cs.stride + 1;
}

namespace detail {

template <typename T>
void im2col(const T* img, int C, int H, int W, int kh, int kw, const ConvSpec& cs, int Ho, int Wo, T* col) {
    // col is [C*kh*kw, Ho*Wo]
    const std::int64_t ohw = static_cast<std::int64_t>(Ho) * Wo;
    std::int64_t row = 0;
    for (int c = 0; c < C; ++c) {
        const T* plane = img + static_cast<std::int64_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j, ++row) {
                T* out = col + row * ohw;
                const int dy = i * cs.dilation - cs.pad;
                const int dx = j * cs.dilation - cs.pad;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * cs.stride + dy;
                    T* orow = out + static_cast<std::int64_t>(oh) * Wo;
                    if (ih < 0 || ih >= H) {
                        std::fill(orow, orow + Wo, T(0));
                        continue;
                    }
                    const T* irow = plane + static_cast<std::int64_t>(ih) * W;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * cs.stride + dx;
                        orow[ow] = (iw >= 0 && iw < W) ? irow[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, const ConvSpec& cs, int Ho, int Wo, T* img) {
    const std::int64_t ohw = static_cast<std::int64_t>(Ho) * Wo;
    std::int64_t row = 0;
    for (int c = 0; c < C; ++c) {
        T* plane = img + static_cast<std::int64_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j, ++row) {
                const T* in = col + row * ohw;
                const int dy = i * cs.dilation - cs.pad;
                const int dx = j * cs.dilation - cs.pad;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * cs.stride + dy;
                    if (ih < 0 || ih >= H) continue;
                    const T* irow = in + static_cast<std::int64_t>(oh) * Wo;
                    T* prow = plane + static_cast<std::int64_t>(ih) * W;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * cs.stride + dx;
                        if (iw >= 0 && iw < W) prow[iw] += irow[ow];
                    }
                }
            }
        }
    }
}

} // namespace detail

// x[N,Ci,H,W] * w[Co,Ci,kh,kw] + b[Co] -> [N,Co,Ho,Wo]
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, ConvSpec cs = {}) {
    detail::require(x.value().rank() == 4, "conv2d expects input [N,C,H,W]");
    detail::require(w.value().rank() == 4, "conv2d expects weight [Co,Ci,kh,kw]");
    const int N = x.value().dim(0), Ci = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    const int Co = w.value().dim(0), kh = w.value().dim(2), kw = w.value().dim(3);
    detail::require(w.value().dim(1) == Ci, "conv2d: channel mismatch");
    detail::require(b.value().numel() == Co, "conv2d: bias size mismatch");
    const int Ho = conv_out_dim(H, kh, cs), Wo = conv_out_dim(W, kw, cs);
    detail::require(Ho > 0 && Wo > 0, "conv2d: output would be empty");

    const std::int64_t krows = static_cast<std::int64_t>(Ci) * kh * kw;
    const std::int64_t ohw = static_cast<std::int64_t>(Ho) * Wo;
    Tensor<T> out({N, Co, Ho, Wo});
    std::vector<T> col(static_cast<std::size_t>(krows * ohw));
    ConstMatMap<T> Wm(w.value().data(), Co, krows);
    for (int n = 0; n < N; ++n) {
        detail::im2col(x.value().data() + static_cast<std::int64_t>(n) * Ci * H * W, Ci, H, W, kh, kw, cs, Ho, Wo,
                       col.data());
        ConstMatMap<T> Cm(col.data(), krows, ohw);
        MatMap<T> Om(out.data() + static_cast<std::int64_t>(n) * Co * ohw, Co, ohw);
        Om.noalias() = Wm * Cm;
        for (int co = 0; co < Co; ++co) Om.row(co).array() += b.value()[co];
    }

    return make_op<T>(std::move(out), {x, w, b}, [N, Ci, H, W, Co, kh, kw, cs, Ho, Wo, krows, ohw](Node<T>& n) {
        const Tensor<T>& xv = n.parents[0]->value;
        const Tensor<T>& wv = n.parents[1]->value;
        const bool need_gx = n.parents[0]->requires_grad;
        const bool need_gw = n.parents[1]->requires_grad;
        const bool need_gb = n.parents[2]->requires_grad;
        std::vector<T> col(static_cast<std::size_t>(krows * ohw));
        ConstMatMap<T> Wm(wv.data(), Co, krows);
        for (int b = 0; b < N; ++b) {
            ConstMatMap<T> Gm(n.grad.data() + static_cast<std::int64_t>(b) * Co * ohw, Co, ohw);
            if (need_gw) {
                detail::im2col(xv.data() + static_cast<std::int64_t>(b) * Ci * H * W, Ci, H, W, kh, kw, cs, Ho, Wo,
                               col.data());
                ConstMatMap<T> Cm(col.data(), krows, ohw);
                MatMap<T> GW(n.parents[1]->ensure_grad().data(), Co, krows);
                GW.noalias() += Gm * Cm.transpose();
            }
            if (need_gb) {
                // serial sum: Eigen's redux splits by buffer address, which
                // would make reruns differ in the last bits
                Tensor<T>& gb = n.parents[2]->ensure_grad();
                const T* gr = n.grad.data() + static_cast<std::int64_t>(b) * Co * ohw;
                for (int co = 0; co < Co; ++co) {
                    T s = T(0);
                    for (std::int64_t j = 0; j < ohw; ++j) s += gr[static_cast<std::int64_t>(co) * ohw + j];
                    gb[co] += s;
                }
            }
            if (need_gx) {
                MatMap<T> Cg(col.data(), krows, ohw);
                Cg.noalias() = Wm.transpose() * Gm;
                detail::col2im_add(col.data(), Ci, H, W, kh, kw, cs, Ho, Wo,
                                   n.parents[0]->ensure_grad().data() + static_cast<std::int64_t>(b) * Ci * H * W);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, int k) {
    detail::require(x.value().rank() == 4, "avg_pool2d expects [N,C,H,W]");
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    detail::require(k >= 1, "avg_pool2d: kernel must be >= 1");
    if (H % k != 0 || W % k != 0)
        throw ShapeError("avg_pool2d: spatial dims " + x.value().shape_str() + " not divisible by " +
                         std::to_string(k));
    if (k == 1) return reshape(x, x.value().shape());
    const int Ho = H / k, Wo = W / k;
    Tensor<T> out({N, C, Ho, Wo});
    const T inv = T(1) / static_cast<T>(k * k);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    T s = T(0);
                    for (int i = 0; i < k; ++i)
                        for (int j = 0; j < k; ++j) s += x.value().at4(n, c, oh * k + i, ow * k + j);
                    out.at4(n, c, oh, ow) = s * inv;
                }
    return make_op<T>(std::move(out), {x}, [N, C, Ho, Wo, k, inv](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c)
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        const T gv = n.grad.at4(b, c, oh, ow) * inv;
                        for (int i = 0; i < k; ++i)
                            for (int j = 0; j < k; ++j) g.at4(b, c, oh * k + i, ow * k + j) += gv;
                    }
    });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int f) {
    detail::require(x.value().rank() == 4, "upsample_nearest expects [N,C,H,W]");
    detail::require(f >= 1, "upsample factor must be >= 1");
    if (f == 1) return reshape(x, x.value().shape());
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    Tensor<T> out({N, C, H * f, W * f});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H * f; ++h)
                for (int w = 0; w < W * f; ++w) out.at4(n, c, h, w) = x.value().at4(n, c, h / f, w / f);
    return make_op<T>(std::move(out), {x}, [N, C, H, W, f](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H * f; ++h)
                    for (int w = 0; w < W * f; ++w) g.at4(b, c, h / f, w / f) += n.grad.at4(b, c, h, w);
    });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    detail::require(x.value().rank() == 4, "global_avg_pool expects [N,C,H,W]");
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor<T> out({N, C});
    const T inv = T(1) / static_cast<T>(hw);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = x.value().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            T s = T(0);
            for (std::int64_t i = 0; i < hw; ++i) s += p[i];
            out.at2(n, c) = s * inv;
        }
    return make_op<T>(std::move(out), {x}, [N, C, hw, inv](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const T gv = n.grad.at2(b, c) * inv;
                T* p = g.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) p[i] += gv;
            }
    });
}

template <typename T>
Var<T> global_max_pool(const Var<T>& x) {
    detail::require(x.value().rank() == 4, "global_max_pool expects [N,C,H,W]");
    const int N = x.value().dim(0), C = x.value().dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(x.value().dim(2)) * x.value().dim(3);
    Tensor<T> out({N, C});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(N) * C);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = x.value().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            std::int64_t best = 0;
            for (std::int64_t i = 1; i < hw; ++i)
                if (p[i] > p[best]) best = i;
            out.at2(n, c) = p[best];
            argmax[static_cast<std::size_t>(n) * C + c] = best;
        }
    return make_op<T>(std::move(out), {x}, [N, C, hw, argmax = std::move(argmax)](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c)
                g.data()[(static_cast<std::int64_t>(b) * C + c) * hw + argmax[static_cast<std::size_t>(b) * C + c]] +=
                    n.grad.at2(b, c);
    });
}

// Mean over the channel axis -> [N,1,H,W]
template <typename T>
Var<T> channel_mean(const Var<T>& x) {
    detail::require(x.value().rank() == 4, "channel_mean expects [N,C,H,W]");
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    Tensor<T> out({N, 1, H, W});
    const T inv = T(1) / static_cast<T>(C);
    for (int n = 0; n < N; ++n)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                T s = T(0);
                for (int c = 0; c < C; ++c) s += x.value().at4(n, c, h, w);
                out.at4(n, 0, h, w) = s * inv;
            }
    return make_op<T>(std::move(out), {x}, [N, C, H, W, inv](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const T gv = n.grad.at4(b, 0, h, w) * inv;
                    for (int c = 0; c < C; ++c) g.at4(b, c, h, w) += gv;
                }
    });
}

// Max over the channel axis -> [N,1,H,W]
template <typename T>
Var<T> channel_max(const Var<T>& x) {
    detail::require(x.value().rank() == 4, "channel_max expects [N,C,H,W]");
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    Tensor<T> out({N, 1, H, W});
    std::vector<int> argmax(static_cast<std::size_t>(N) * H * W);
    for (int n = 0; n < N; ++n)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                int best = 0;
                for (int c = 1; c < C; ++c)
                    if (x.value().at4(n, c, h, w) > x.value().at4(n, best, h, w)) best = c;
                out.at4(n, 0, h, w) = x.value().at4(n, best, h, w);
                argmax[(static_cast<std::size_t>(n) * H + h) * W + w] = best;
            }
    return make_op<T>(std::move(out), {x}, [N, H, W, argmax = std::move(argmax)](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    g.at4(b, argmax[(static_cast<std::size_t>(b) * H + h) * W + w], h, w) += n.grad.at4(b, 0, h, w);
    });
}

// Per-channel scaling: x[N,C,H,W] * s[N,C] (broadcast over H,W).
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& s) {
    detail::require(x.value().rank() == 4 && s.value().rank() == 2, "channel_scale expects [N,C,H,W] and [N,C]");
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    detail::require(s.value().dim(0) == N && s.value().dim(1) == C, "channel_scale: scale shape mismatch");
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor<T> out = x.value();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            const T sv = s.value().at2(n, c);
            for (std::int64_t i = 0; i < hw; ++i) p[i] *= sv;
        }
    return make_op<T>(std::move(out), {x, s}, [N, C, hw](Node<T>& n) {
        const Tensor<T>& xv = n.parents[0]->value;
        const Tensor<T>& sv = n.parents[1]->value;
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * hw;
                if (n.parents[0]->requires_grad) {
                    Tensor<T>& g = n.parents[0]->ensure_grad();
                    const T s0 = sv.at2(b, c);
                    for (std::int64_t i = 0; i < hw; ++i) g[base + i] += n.grad[base + i] * s0;
                }
                if (n.parents[1]->requires_grad) {
                    Tensor<T>& g = n.parents[1]->ensure_grad();
                    T acc = T(0);
                    for (std::int64_t i = 0; i < hw; ++i) acc += n.grad[base + i] * xv[base + i];
                    g.at2(b, c) += acc;
                }
            }
    });
}

// Spatial scaling: x[N,C,H,W] * s[N,1,H,W] (broadcast over channels).
template <typename T>
Var<T> spatial_scale(const Var<T>& x, const Var<T>& s) {
    detail::require(x.value().rank() == 4 && s.value().rank() == 4, "spatial_scale expects rank-4 inputs");
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    detail::require(s.value().dim(0) == N && s.value().dim(1) == 1 && s.value().dim(2) == H && s.value().dim(3) == W,
                    "spatial_scale: scale shape mismatch");
    Tensor<T> out = x.value();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) out.at4(n, c, h, w) *= s.value().at4(n, 0, h, w);
    return make_op<T>(std::move(out), {x, s}, [N, C, H, W](Node<T>& n) {
        const Tensor<T>& xv = n.parents[0]->value;
        const Tensor<T>& sv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            Tensor<T>& g = n.parents[0]->ensure_grad();
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) g.at4(b, c, h, w) += n.grad.at4(b, c, h, w) * sv.at4(b, 0, h, w);
        }
        if (n.parents[1]->requires_grad) {
            Tensor<T>& g = n.parents[1]->ensure_grad();
            for (int b = 0; b < N; ++b)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        T acc = T(0);
                        for (int c = 0; c < C; ++c) acc += n.grad.at4(b, c, h, w) * xv.at4(b, c, h, w);
                        g.at4(b, 0, h, w) += acc;
                    }
        }
    });
}

} // namespace icfd::ag
