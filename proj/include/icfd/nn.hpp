#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "icfd/attention.hpp"
#include "icfd/ops.hpp"

namespace icfd::nn {

using ag::Var;

template <typename T>
struct NamedParam {
    std::string name;
    Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void set_requires_grad(ParamList<T>& params, bool rg) {
    for (auto& p : params) p.var.set_requires_grad(rg);
}

template <typename T>
void zero_grads(ParamList<T>& params) {
    for (auto& p : params) p.var.zero_grad();
}

template <typename T>
std::int64_t param_count(const ParamList<T>& params) {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.var.value().numel();
    return n;
}

template <typename T>
void kaiming_uniform(Tensor<T>& t, std::int64_t fan_in, std::mt19937_64& rng) {
    const T bound = std::sqrt(T(6) / static_cast<T>(fan_in));
    std::uniform_real_distribution<T> dist(-bound, bound);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
}

// ---------------------------------------------------------------------------
// Layers. Each owns leaf Vars, seeds them in init() and registers them
// under a dotted name for the optimizer and the checkpoint writer.
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int k, ag::ConvSpec cs = {})
        : in_ch_(in_ch), out_ch_(out_ch), k_(k), cs_(cs),
          weight_(Var<T>::leaf(Tensor<T>({out_ch, in_ch, k, k}), true)),
          bias_(Var<T>::leaf(Tensor<T>({out_ch}), true)) {}

    void init(std::mt19937_64& rng) {
        kaiming_uniform(weight_.value(), static_cast<std::int64_t>(in_ch_) * k_ * k_, rng);
        bias_.value().fill(T(0));
    }

    Var<T> forward(const Var<T>& x) const { return ag::conv2d(x, weight_, bias_, cs_); }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".weight", weight_});
        out.push_back({prefix + ".bias", bias_});
    }

private:
    int in_ch_ = 0, out_ch_ = 0, k_ = 0;
    ag::ConvSpec cs_{};
    Var<T> weight_, bias_;
};

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(int in_f, int out_f)
        : in_f_(in_f), weight_(Var<T>::leaf(Tensor<T>({out_f, in_f}), true)),
          bias_(Var<T>::leaf(Tensor<T>({out_f}), true)) {}

    void init(std::mt19937_64& rng) {
        kaiming_uniform(weight_.value(), in_f_, rng);
        bias_.value().fill(T(0));
    }

    Var<T> forward(const Var<T>& x) const { return ag::linear(x, weight_, bias_); }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".weight", weight_});
        out.push_back({prefix + ".bias", bias_});
    }

private:
    int in_f_ = 0;
    Var<T> weight_, bias_;
};

// Multi-head self-attention over the flattened spatial positions of a
// feature map. Channel width must be divisible by the head count.
template <typename T>
class MultiHeadSelfAttention {
public:
    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(int channels, int heads)
        : channels_(channels), heads_(heads), wq_(channels, channels), wk_(channels, channels),
          wv_(channels, channels), wo_(channels, channels) {
        if (heads < 1 || channels % heads != 0)
            throw ConfigError("attention heads (" + std::to_string(heads) + ") must divide channel width (" +
                              std::to_string(channels) + ")");
    }

    void init(std::mt19937_64& rng) {
        wq_.init(rng);
        wk_.init(rng);
        wv_.init(rng);
        wo_.init(rng);
    }

    Var<T> forward(const Var<T>& x) const {
        const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
        Var<T> t = ag::to_tokens(x);
        Var<T> att = ag::scaled_dot_attention(wq_.forward(t), wk_.forward(t), wv_.forward(t), N, H * W, heads_);
        return ag::from_tokens(wo_.forward(att), N, C, H, W);
    }

    // Forward-only probe of the attention rows, [N, heads, S, S].
    Tensor<T> attention_rows(const Tensor<T>& x) const {
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        Var<T> t = ag::to_tokens(Var<T>::leaf(x, false));
        Tensor<T> q = wq_.forward(t).value();
        Tensor<T> k = wk_.forward(t).value();
        return ag::attention_probs(q, k, N, H * W, heads_);
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        wq_.collect(prefix + ".wq", out);
        wk_.collect(prefix + ".wk", out);
        wv_.collect(prefix + ".wv", out);
        wo_.collect(prefix + ".wo", out);
    }

    int heads() const { return heads_; }

private:
    int channels_ = 0, heads_ = 0;
    Linear<T> wq_, wk_, wv_, wo_;
};

// ---------------------------------------------------------------------------
// SGD with momentum; the single logical writer of parameter values.
// ---------------------------------------------------------------------------

template <typename T>
class SgdMomentum {
public:
    SgdMomentum(T lr, T momentum) : lr_(lr), momentum_(momentum) {}

    void step(ParamList<T>& params) {
        for (auto& p : params) {
            // a parameter off the backward path keeps its default scalar grad
            if (!p.var.grad().same_shape(p.var.value())) continue;
            Tensor<T>& v = velocity_.try_emplace(p.var.node().get(), Tensor<T>::zeros(p.var.value().shape()))
                               .first->second;
            Tensor<T>& val = p.var.value();
            const Tensor<T>& g = p.var.grad();
            for (std::int64_t i = 0; i < val.numel(); ++i) {
                v[i] = momentum_ * v[i] + g[i];
                val[i] -= lr_ * v[i];
            }
        }
    }

private:
    T lr_, momentum_;
    std::unordered_map<void*, Tensor<T>> velocity_;
};

} // namespace icfd::nn
