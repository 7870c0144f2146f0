#pragma once

#include <Eigen/Core>

#include <cmath>

#include "icfd/ops.hpp"

namespace icfd::ag {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Softmax attention rows for projected tokens q,k of shape [N*S, C].
// Returns A [N, heads, S, S]; every row is a probability vector.
template <typename T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, int N, int S, int heads) {
    const int C = q.dim(1);
    const int dh = C / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> A({N, heads, S, S});
    ConstMatMap<T> Q(q.data(), N * S, C), K(k.data(), N * S, C);
    for (int n = 0; n < N; ++n) {
        for (int h = 0; h < heads; ++h) {
            RowMat<T> scores = Q.block(n * S, h * dh, S, dh) * K.block(n * S, h * dh, S, dh).transpose() * scale;
            T* a = A.data() + ((static_cast<std::int64_t>(n) * heads + h) * S) * S;
            for (int i = 0; i < S; ++i) {
                T mx = scores(i, 0);
                for (int j = 1; j < S; ++j) mx = std::max(mx, scores(i, j));
                T sum = T(0);
                for (int j = 0; j < S; ++j) {
                    const T e = std::exp(scores(i, j) - mx);
                    a[static_cast<std::int64_t>(i) * S + j] = e;
                    sum += e;
                }
                const T inv = T(1) / sum;
                for (int j = 0; j < S; ++j) a[static_cast<std::int64_t>(i) * S + j] *= inv;
            }
        }
    }
    return A;
}

// Multi-head scaled dot-product self-attention over already-projected
// tokens q,k,v [N*S, C]. Heads are contiguous channel groups.
template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int N, int S, int heads) {
    const int C = q.value().dim(1);
    detail::require(q.value().rank() == 2 && q.value().same_shape(k.value()) && q.value().same_shape(v.value()),
                    "attention expects matching [N*S, C] q,k,v");
    detail::require(C % heads == 0, "attention: heads must divide channel width");
    detail::require(q.value().dim(0) == N * S, "attention: token count mismatch");
    const int dh = C / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> A = attention_probs(q.value(), k.value(), N, S, heads);
    Tensor<T> out({N * S, C});
    ConstMatMap<T> V(v.value().data(), N * S, C);
    MatMap<T> O(out.data(), N * S, C);
    for (int n = 0; n < N; ++n)
        for (int h = 0; h < heads; ++h) {
            ConstMatMap<T> Am(A.data() + ((static_cast<std::int64_t>(n) * heads + h) * S) * S, S, S);
            O.block(n * S, h * dh, S, dh).noalias() = Am * V.block(n * S, h * dh, S, dh);
        }

    return make_op<T>(std::move(out), {q, k, v}, [N, S, heads, C, dh, scale, A = std::move(A)](Node<T>& n) {
        ConstMatMap<T> G(n.grad.data(), N * S, C);
        ConstMatMap<T> Q(n.parents[0]->value.data(), N * S, C);
        ConstMatMap<T> K(n.parents[1]->value.data(), N * S, C);
        ConstMatMap<T> V(n.parents[2]->value.data(), N * S, C);
        const bool need_q = n.parents[0]->requires_grad;
        const bool need_k = n.parents[1]->requires_grad;
        const bool need_v = n.parents[2]->requires_grad;
        for (int b = 0; b < N; ++b) {
            for (int h = 0; h < heads; ++h) {
                ConstMatMap<T> Am(A.data() + ((static_cast<std::int64_t>(b) * heads + h) * S) * S, S, S);
                auto Gh = G.block(b * S, h * dh, S, dh);
                if (need_v) {
                    MatMap<T> GV(n.parents[2]->ensure_grad().data(), N * S, C);
                    GV.block(b * S, h * dh, S, dh).noalias() += Am.transpose() * Gh;
                }
                if (need_q || need_k) {
                    RowMat<T> gA = Gh * V.block(b * S, h * dh, S, dh).transpose();
                    // softmax backward per row
                    RowMat<T> gS(S, S);
                    for (int i = 0; i < S; ++i) {
                        T dot = T(0);
                        for (int j = 0; j < S; ++j) dot += gA(i, j) * Am(i, j);
                        for (int j = 0; j < S; ++j) gS(i, j) = Am(i, j) * (gA(i, j) - dot);
                    }
                    if (need_q) {
                        MatMap<T> GQ(n.parents[0]->ensure_grad().data(), N * S, C);
                        GQ.block(b * S, h * dh, S, dh).noalias() += gS * K.block(b * S, h * dh, S, dh) * scale;
                    }
                    if (need_k) {
                        MatMap<T> GK(n.parents[1]->ensure_grad().data(), N * S, C);
                        GK.block(b * S, h * dh, S, dh).noalias() += gS.transpose() * Q.block(b * S, h * dh, S, dh) * scale;
                    }
                }
            }
        }
    });
}

// [N,C,H,W] -> token matrix [N*S, C] with S = H*W (row t = spatial position).
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
    detail::require(x.value().rank() == 4, "to_tokens expects [N,C,H,W]");
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    const int S = H * W;
    Tensor<T> out({N * S, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = x.value().data() + (static_cast<std::int64_t>(n) * C + c) * S;
            for (int t = 0; t < S; ++t) out.at2(n * S + t, c) = p[t];
        }
    return make_op<T>(std::move(out), {x}, [N, C, S](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                T* p = g.data() + (static_cast<std::int64_t>(b) * C + c) * S;
                for (int t = 0; t < S; ++t) p[t] += n.grad.at2(b * S + t, c);
            }
    });
}

// Inverse of to_tokens.
template <typename T>
Var<T> from_tokens(const Var<T>& x, int N, int C, int H, int W) {
    detail::require(x.value().rank() == 2 && x.value().dim(0) == N * H * W && x.value().dim(1) == C,
                    "from_tokens: shape mismatch");
    const int S = H * W;
    Tensor<T> out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * S;
            for (int t = 0; t < S; ++t) p[t] = x.value().at2(n * S + t, c);
        }
    return make_op<T>(std::move(out), {x}, [N, C, S](Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const T* p = n.grad.data() + (static_cast<std::int64_t>(b) * C + c) * S;
                for (int t = 0; t < S; ++t) g.at2(b * S + t, c) += p[t];
            }
    });
}

} // namespace icfd::ag
