#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "icfd/ops.hpp"

namespace icfd::loss {

using ag::Var;

struct LossWeights {
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double lambda3 = 1.0;
    double xi = 1e-3;

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
            throw DomainError("loss weights must be non-negative");
        if (!(xi > 0)) throw DomainError("xi must be positive");
    }
};

namespace detail {

// 4-neighbor second difference with edge-clamped (Neumann) borders:
// out(p) = sum over in-bounds neighbors q of (x(q) - x(p)). In the interior
// this is the center -4 / cross +1 stencil; at the borders clamped samples
// cancel so flat images map to exactly zero everywhere.
template <typename T>
void laplacian_plane(const T* in, T* out, int H, int W) {
    for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) {
            const T c = in[static_cast<std::int64_t>(h) * W + w];
            T s = T(0);
            if (h > 0) s += in[static_cast<std::int64_t>(h - 1) * W + w] - c;
            if (h + 1 < H) s += in[static_cast<std::int64_t>(h + 1) * W + w] - c;
            if (w > 0) s += in[static_cast<std::int64_t>(h) * W + w - 1] - c;
            if (w + 1 < W) s += in[static_cast<std::int64_t>(h) * W + w + 1] - c;
            out[static_cast<std::int64_t>(h) * W + w] = s;
        }
    }
}

template <typename T>
Tensor<T> laplacian_tensor(const Tensor<T>& x) {
    if (x.rank() != 3 && x.rank() != 4) throw ShapeError("laplacian expects [C,H,W] or [N,C,H,W]");
    const int H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    if (H < 3 || W < 3) throw ShapeError("laplacian requires spatial dims >= 3");
    Tensor<T> out(x.shape());
    const std::int64_t planes = x.numel() / (static_cast<std::int64_t>(H) * W);
    for (std::int64_t p = 0; p < planes; ++p)
        laplacian_plane(x.data() + p * H * W, out.data() + p * H * W, H, W);
    return out;
}

} // namespace detail

// Discrete Laplacian on a plain image tensor.
template <typename T>
Tensor<T> laplacian(const Tensor<T>& x) {
    return detail::laplacian_tensor(x);
}

// Autograd Laplacian; the stencil is symmetric, so the backward pass is the
// same operator applied to the incoming gradient.
template <typename T>
Var<T> laplacian(const Var<T>& x) {
    Tensor<T> out = detail::laplacian_tensor(x.value());
    return ag::make_op<T>(std::move(out), {x}, [](ag::Node<T>& n) {
        ag::accumulate(*n.parents[0], detail::laplacian_tensor(n.grad));
    });
}

// Reconstruction loss: mean Charbonnier penalty on the Laplacian difference
// plus mean absolute error. Exactly xi when x == xhat.
template <typename T>
Var<T> common_loss(const Var<T>& x, const Var<T>& xhat, T xi) {
    if (!(xi > T(0))) throw DomainError("common_loss: xi must be positive");
    if (!x.value().same_shape(xhat.value()))
        throw ShapeError("common_loss: x " + x.value().shape_str() + " vs xhat " + xhat.value().shape_str());
    Var<T> dlap = ag::sub(laplacian(x), laplacian(xhat));
    Var<T> charb = ag::mean_all(ag::sqrt_op(ag::add_scalar(ag::square(dlap), xi * xi)));
    Var<T> l1 = ag::mean_all(ag::abs_op(ag::sub(x, xhat)));
    return ag::add(charb, l1);
}

// ---------------------------------------------------------------------------
// Per-sample classification loss primitives
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_logits(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + " expects logits [N,K]");
}

inline void check_labels(const std::vector<int>& labels, int N, int K, const char* op) {
    if (static_cast<int>(labels.size()) != N) throw ShapeError(std::string(op) + ": label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= K)
            throw DomainError(std::string(op) + ": label " + std::to_string(y) + " out of range [0," +
                              std::to_string(K) + ")");
}

// Row-wise log-softmax into `out`; returns nothing. Stable via max shift.
template <typename T>
void log_softmax_rows(const Tensor<T>& logits, Tensor<T>& out) {
    const int N = logits.dim(0), K = logits.dim(1);
    for (int n = 0; n < N; ++n) {
        const T* z = logits.data() + static_cast<std::int64_t>(n) * K;
        T* o = out.data() + static_cast<std::int64_t>(n) * K;
        T mx = z[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
        T sum = T(0);
        for (int k = 0; k < K; ++k) sum += std::exp(z[k] - mx);
        const T lse = mx + std::log(sum);
        for (int k = 0; k < K; ++k) o[k] = z[k] - lse;
    }
}

} // namespace detail

// Cross-entropy per sample: lse(logits) - logit[label], shape [N].
template <typename T>
Var<T> cross_entropy_per_sample(const Var<T>& logits, const std::vector<int>& labels) {
    detail::check_logits(logits.value(), "cross_entropy");
    const int N = logits.value().dim(0), K = logits.value().dim(1);
    detail::check_labels(labels, N, K, "cross_entropy");
    Tensor<T> logp({N, K});
    detail::log_softmax_rows(logits.value(), logp);
    Tensor<T> out({N});
    for (int n = 0; n < N; ++n) out[n] = -logp.at2(n, labels[n]);
    return ag::make_op<T>(std::move(out), {logits}, [labels, N, K, logp = std::move(logp)](ag::Node<T>& n) {
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int i = 0; i < N; ++i) {
            const T gi = n.grad[i];
            for (int k = 0; k < K; ++k) {
                T p = std::exp(logp.at2(i, k));
                if (k == labels[i]) p -= T(1);
                g.at2(i, k) += gi * p;
            }
        }
    });
}

// Mean-over-classes binary cross-entropy of sigmoid(scores) against the
// one-hot target, per sample, computed in the numerically stable
// logits form. Shape [N].
template <typename T>
Var<T> bce_per_sample(const Var<T>& scores, const std::vector<int>& labels) {
    detail::check_logits(scores.value(), "bce");
    const int N = scores.value().dim(0), K = scores.value().dim(1);
    detail::check_labels(labels, N, K, "bce");
    Tensor<T> out({N});
    for (int n = 0; n < N; ++n) {
        T acc = T(0);
        for (int k = 0; k < K; ++k) {
            const T s = scores.value().at2(n, k);
            const T t = (k == labels[n]) ? T(1) : T(0);
            acc += std::max(s, T(0)) - s * t + std::log1p(std::exp(-std::abs(s)));
        }
        out[n] = acc / static_cast<T>(K);
    }
    return ag::make_op<T>(std::move(out), {scores}, [labels, N, K](ag::Node<T>& n) {
        const Tensor<T>& sv = n.parents[0]->value;
        Tensor<T>& g = n.parents[0]->ensure_grad();
        for (int i = 0; i < N; ++i) {
            const T gi = n.grad[i] / static_cast<T>(K);
            for (int k = 0; k < K; ++k) {
                const T t = (k == labels[i]) ? T(1) : T(0);
                g.at2(i, k) += gi * (ag::stable_sigmoid(sv.at2(i, k)) - t);
            }
        }
    });
}

// KL(softmax(p) || softmax(q)) per sample, shape [N]. Stable via shifted
// logits; gradients flow to whichever argument requires them.
template <typename T>
Var<T> kl_per_sample(const Var<T>& p_logits, const Var<T>& q_logits) {
    detail::check_logits(p_logits.value(), "kl_divergence");
    if (!p_logits.value().same_shape(q_logits.value()))
        throw ShapeError("kl_divergence: mismatched logits shapes");
    const int N = p_logits.value().dim(0), K = p_logits.value().dim(1);
    Tensor<T> lp({N, K}), lq({N, K});
    detail::log_softmax_rows(p_logits.value(), lp);
    detail::log_softmax_rows(q_logits.value(), lq);
    Tensor<T> out({N});
    for (int n = 0; n < N; ++n) {
        T acc = T(0);
        for (int k = 0; k < K; ++k) acc += std::exp(lp.at2(n, k)) * (lp.at2(n, k) - lq.at2(n, k));
        out[n] = acc;
    }
    Tensor<T> kl = out;
    return ag::make_op<T>(std::move(out), {p_logits, q_logits},
                          [N, K, lp = std::move(lp), lq = std::move(lq), kl = std::move(kl)](ag::Node<T>& n) {
                              for (int i = 0; i < N; ++i) {
                                  const T gi = n.grad[i];
                                  if (n.parents[0]->requires_grad) {
                                      Tensor<T>& g = n.parents[0]->ensure_grad();
                                      for (int k = 0; k < K; ++k) {
                                          const T p = std::exp(lp.at2(i, k));
                                          g.at2(i, k) += gi * p * ((lp.at2(i, k) - lq.at2(i, k)) - kl[i]);
                                      }
                                  }
                                  if (n.parents[1]->requires_grad) {
                                      Tensor<T>& g = n.parents[1]->ensure_grad();
                                      for (int k = 0; k < K; ++k) {
                                          const T p = std::exp(lp.at2(i, k));
                                          const T q = std::exp(lq.at2(i, k));
                                          g.at2(i, k) += gi * (q - p);
                                      }
                                  }
                              }
                          });
}

// ---------------------------------------------------------------------------
// Batch-mean scalar losses
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Var<T> lift_logits(const Var<T>& v) {
    if (v.value().rank() == 1) return ag::reshape(v, {1, v.value().dim(0)});
    return v;
}

} // namespace detail

// Supervision of the specific head: mean over classes of BCE against the
// one-hot label, averaged over the batch.
template <typename T>
Var<T> specific_loss(const Var<T>& scores, const std::vector<int>& labels) {
    return ag::mean_all(bce_per_sample(detail::lift_logits(scores), labels));
}

template <typename T>
Var<T> specific_loss(const Var<T>& scores, int label) {
    return specific_loss(scores, std::vector<int>{label});
}

// KL divergence between softmax distributions given logits; batch mean.
template <typename T>
Var<T> kl_divergence(const Var<T>& p_logits, const Var<T>& q_logits) {
    return ag::mean_all(kl_per_sample(detail::lift_logits(p_logits), detail::lift_logits(q_logits)));
}

// Calibrated adversarial loss: per sample (1-beta_i)*CE(clean, y) +
// beta_i*KL(clean || adv) with the sample's class weight beta_i, averaged
// over the batch. When detach_clean_for_kl is set (the training semantic),
// the KL anchor is treated as a constant and gradients reach the clean
// logits only through the cross-entropy term.
template <typename T>
Var<T> calibrated_at_loss(const Var<T>& clean_logits_in, const Var<T>& adv_logits_in,
                          const std::vector<int>& labels, const std::vector<T>& betas,
                          bool detach_clean_for_kl = true) {
    Var<T> clean = detail::lift_logits(clean_logits_in);
    Var<T> adv = detail::lift_logits(adv_logits_in);
    const int N = clean.value().dim(0);
    if (static_cast<int>(betas.size()) != N) throw ShapeError("calibrated_at_loss: beta count mismatch");
    for (T b : betas)
        if (!(b >= T(0) && b < T(1)))
            throw DomainError("calibrated_at_loss: beta_i must lie in [0,1)");
    Tensor<T> wclean({N}), wrobust({N});
    for (int n = 0; n < N; ++n) {
        wclean[n] = T(1) - betas[n];
        wrobust[n] = betas[n];
    }
    Var<T> ce = cross_entropy_per_sample(clean, labels);
    Var<T> kl = kl_per_sample(detach_clean_for_kl ? clean.detach() : clean, adv);
    return ag::mean_all(ag::add(ag::mul_const(ce, std::move(wclean)), ag::mul_const(kl, std::move(wrobust))));
}

template <typename T>
Var<T> calibrated_at_loss(const Var<T>& clean_logits, const Var<T>& adv_logits, int label, T beta,
                          bool detach_clean_for_kl = true) {
    return calibrated_at_loss(clean_logits, adv_logits, std::vector<int>{label}, std::vector<T>{beta},
                              detach_clean_for_kl);
}

// Weighted total with the named components kept alongside.
template <typename T>
struct LossBundle {
    Var<T> l_c, l_s, l_at, total;
};

template <typename T>
LossBundle<T> total_loss(const Var<T>& l_c, const Var<T>& l_s, const Var<T>& l_at, const LossWeights& w) {
    w.validate();
    const struct {
        const char* name;
        const Var<T>& v;
    } comps[] = {{"l_c", l_c}, {"l_s", l_s}, {"l_at", l_at}};
    for (const auto& c : comps)
        if (!std::isfinite(static_cast<double>(c.v.item())))
            throw NumericError(std::string("total_loss: component ") + c.name + " is not finite");
    Var<T> total = ag::add(ag::add(ag::scale(l_c, static_cast<T>(w.lambda1)), ag::scale(l_s, static_cast<T>(w.lambda2))),
                           ag::scale(l_at, static_cast<T>(w.lambda3)));
    return LossBundle<T>{l_c, l_s, l_at, total};
}

} // namespace icfd::loss
