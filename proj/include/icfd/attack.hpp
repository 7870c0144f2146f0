#pragma once

#include <algorithm>
#include <cstring>
#include <random>
#include <vector>

#include "icfd/losses.hpp"

namespace icfd::adv {

using ag::Var;

struct AttackConfig {
    int steps = 10;
    double step_fraction = 0.25; // step size as a fraction of the sample's budget
    bool random_init = true;

    void validate() const {
        if (steps < 1) throw ConfigError("attack: steps must be >= 1");
        if (!(step_fraction > 0.0 && step_fraction <= 1.0))
            throw ConfigError("attack: step fraction must lie in (0,1]");
    }
};

template <typename T>
struct AttackStats {
    std::vector<T> kl_init;  // divergence at the (possibly randomized) start point
    std::vector<T> kl_final; // divergence at the returned point
};

namespace detail {

// Plain per-row KL(softmax(p) || softmax(q)) without building a graph.
template <typename T>
std::vector<T> softmax_kl_rows(const Tensor<T>& p_logits, const Tensor<T>& q_logits) {
    const int N = p_logits.dim(0), K = p_logits.dim(1);
    Tensor<T> lp({N, K}), lq({N, K});
    loss::detail::log_softmax_rows(p_logits, lp);
    loss::detail::log_softmax_rows(q_logits, lq);
    std::vector<T> out(N);
    for (int n = 0; n < N; ++n) {
        T acc = T(0);
        for (int k = 0; k < K; ++k) acc += std::exp(lp.at2(n, k)) * (lp.at2(n, k) - lq.at2(n, k));
        out[n] = acc;
    }
    return out;
}

} // namespace detail

// Sign-gradient ascent on KL(f(x_c) || f(x')) inside per-sample L-inf balls,
// projected after every step. The clean logits are a fixed anchor; the
// classifier's own parameters must have gradients disabled by the caller.
// Samples with a zero budget come back bit-identical to their input.
template <typename T, typename Forward>
Tensor<T> generate_adversarial(Forward&& classifier, const Tensor<T>& x_c, const Tensor<T>& clean_logits,
                               const std::vector<T>& eps, const AttackConfig& cfg, std::uint64_t seed,
                               AttackStats<T>* stats = nullptr) {
    cfg.validate();
    if (x_c.rank() != 4) throw ShapeError("generate_adversarial expects x_c [N,C,H,W]");
    const int N = x_c.dim(0);
    if (static_cast<int>(eps.size()) != N) throw ShapeError("generate_adversarial: eps count mismatch");
    for (T e : eps)
        if (!(e >= T(0))) throw DomainError("generate_adversarial: eps_i must be >= 0");
    const std::int64_t row = x_c.numel() / N;

    const bool any_budget = std::any_of(eps.begin(), eps.end(), [](T e) { return e > T(0); });
    if (!any_budget) {
        if (stats) {
            Var<T> logits = classifier(Var<T>::leaf(x_c, false));
            stats->kl_init = detail::softmax_kl_rows(clean_logits, logits.value());
            stats->kl_final = stats->kl_init;
        }
        return x_c;
    }

    Tensor<T> x_adv = x_c;
    std::mt19937_64 rng(seed);
    if (cfg.random_init) {
        for (int n = 0; n < N; ++n) {
            if (eps[n] <= T(0)) continue;
            std::uniform_real_distribution<T> dist(-eps[n], eps[n]);
            T* r = x_adv.data() + n * row;
            for (std::int64_t j = 0; j < row; ++j) r[j] += dist(rng);
        }
    }

    Var<T> anchor = Var<T>::leaf(clean_logits, false);
    for (int step = 0; step < cfg.steps; ++step) {
        Var<T> xv = Var<T>::leaf(x_adv, true);
        Var<T> logits = classifier(xv);
        if (stats && step == 0) stats->kl_init = detail::softmax_kl_rows(clean_logits, logits.value());
        Var<T> obj = ag::sum_all(loss::kl_per_sample(anchor, logits));
        obj.backward();
        const Tensor<T>& g = xv.grad();
        if (!g.all_finite())
            throw NumericError("generate_adversarial: non-finite gradient at step " + std::to_string(step));
        for (int n = 0; n < N; ++n) {
            if (eps[n] <= T(0)) continue;
            const T st = eps[n] * static_cast<T>(cfg.step_fraction);
            const T* base = x_c.data() + n * row;
            const T* gr = g.data() + n * row;
            T* r = x_adv.data() + n * row;
            for (std::int64_t j = 0; j < row; ++j) {
                const T s = gr[j] > T(0) ? T(1) : (gr[j] < T(0) ? T(-1) : T(0));
                r[j] = std::clamp(r[j] + st * s, base[j] - eps[n], base[j] + eps[n]);
            }
        }
    }

    for (int n = 0; n < N; ++n)
        if (eps[n] <= T(0))
            std::memcpy(x_adv.data() + n * row, x_c.data() + n * row, sizeof(T) * static_cast<std::size_t>(row));

    if (stats) {
        Var<T> final_logits = classifier(Var<T>::leaf(x_adv, false));
        stats->kl_final = detail::softmax_kl_rows(clean_logits, final_logits.value());
        if (stats->kl_init.empty()) stats->kl_init = stats->kl_final;
    }
    return x_adv;
}

} // namespace icfd::adv
