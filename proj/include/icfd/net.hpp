#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "icfd/nn.hpp"

namespace icfd::net {

using ag::Var;

enum class HeadKind { specific, common };

inline const char* head_kind_name(HeadKind k) { return k == HeadKind::specific ? "specific" : "common"; }

struct IcfdConfig {
    int in_channels = 1;
    int base_width = 16;
    int depth = 2;            // outer encoder/decoder stages
    int block_down_steps = 2; // internal downsampling inside each block
    int attn_heads = 2;
    std::vector<int> dilation_rates{2, 3};
    std::vector<int> pool_levels{1, 2, 4};
    int feature_channels = 4;
    int num_classes = 4;
    HeadKind head = HeadKind::specific;

    void validate() const {
        if (in_channels < 1 || base_width < 1 || feature_channels < 1 || num_classes < 2)
            throw ConfigError("network: channel and class counts must be positive (>=2 classes)");
        if (depth < 1 || depth > 4) throw ConfigError("network: depth must lie in [1,4]");
        if (block_down_steps < 1 || block_down_steps > 3)
            throw ConfigError("network: block_down_steps must lie in [1,3]");
        if (dilation_rates.empty()) throw ConfigError("network: need at least one dilation rate");
        for (int d : dilation_rates)
            if (d < 1) throw ConfigError("network: dilation rates must be >= 1");
        if (pool_levels.empty()) throw ConfigError("network: need at least one pool level");
        for (int l : pool_levels)
            if (l < 1) throw ConfigError("network: pool levels must be >= 1");
        if (attn_heads < 1) throw ConfigError("network: attn_heads must be >= 1");
    }

    // Smallest spatial granularity the encoder/decoder path can digest.
    int spatial_multiple() const { return 1 << (depth + block_down_steps); }
};

template <typename T>
struct DecoupleOutput {
    Var<T> features; // [N, feature_channels, H, W]
    Var<T> head;     // specific: [N, K] logits; common: [N, 1, H, W] in (0,1)
    HeadKind kind = HeadKind::specific;
};

// Residual block: a small encode/attend/dilate/decode pipeline at constant
// channel width, added back onto its input. Self-attention runs on the
// innermost (coarsest) map so token count stays bounded.
template <typename T>
class ICBlock {
  public:
    ICBlock() = default;
    ICBlock(int ch, int down_steps, int heads, const std::vector<int>& dilations)
        : steps_(down_steps), attn_(ch, heads) {
        for (int i = 0; i < down_steps; ++i) down_.emplace_back(ch, ch, 3, ag::ConvSpec{2, 1, 1});
        for (int d : dilations) dil_.emplace_back(ch, ch, 3, ag::ConvSpec{1, d, d});
        for (int i = 0; i < down_steps; ++i) up_.emplace_back(ch, ch, 3, ag::ConvSpec{1, 1, 1});
    }

    void init(std::mt19937_64& rng) {
        for (auto& c : down_) c.init(rng);
        attn_.init(rng);
        for (auto& c : dil_) c.init(rng);
        for (auto& c : up_) c.init(rng);
    }

    Var<T> forward(const Var<T>& x) const {
        const int H = x.value().dim(2), W = x.value().dim(3);
        const int m = 1 << steps_;
        if (H % m != 0 || W % m != 0)
            throw ShapeError("block input " + x.value().shape_str() + " not divisible by " + std::to_string(m));
        Var<T> h = x;
        for (const auto& c : down_) h = ag::relu(c.forward(h));
        h = ag::add(h, attn_.forward(h));
        for (const auto& c : dil_) h = ag::relu(c.forward(h));
        for (const auto& c : up_) {
            h = ag::relu(c.forward(h));
            h = ag::upsample_nearest(h, 2);
        }
        return ag::add(x, h);
    }

    const nn::MultiHeadSelfAttention<T>& attention() const { return attn_; }

    void collect(const std::string& prefix, nn::ParamList<T>& out) {
        for (std::size_t i = 0; i < down_.size(); ++i) down_[i].collect(prefix + ".down" + std::to_string(i), out);
        attn_.collect(prefix + ".attn", out);
        for (std::size_t i = 0; i < dil_.size(); ++i) dil_[i].collect(prefix + ".dil" + std::to_string(i), out);
        for (std::size_t i = 0; i < up_.size(); ++i) up_[i].collect(prefix + ".up" + std::to_string(i), out);
    }

  private:
    int steps_ = 0;
    std::vector<nn::Conv2d<T>> down_;
    nn::MultiHeadSelfAttention<T> attn_;
    std::vector<nn::Conv2d<T>> dil_;
    std::vector<nn::Conv2d<T>> up_;
};

// Fuses the decoder output with average-pooled views of the raw input taken
// at several grid resolutions. The projection is a plain 1x1 convolution so
// the pooled context contributes even when the deep path is silent.
template <typename T>
class MultiLevelPoolFuse {
  public:
    MultiLevelPoolFuse() = default;
    MultiLevelPoolFuse(int deep_ch, int raw_ch, std::vector<int> levels)
        : levels_(std::move(levels)),
          proj_(deep_ch + raw_ch * static_cast<int>(levels_.size()), deep_ch, 1, ag::ConvSpec{1, 0, 1}) {}

    void init(std::mt19937_64& rng) { proj_.init(rng); }

    Var<T> forward(const Var<T>& deep, const Var<T>& raw) const {
        const int H = raw.value().dim(2), W = raw.value().dim(3);
        std::vector<Var<T>> parts{deep};
        for (int l : levels_) {
            if (H % l != 0)
                throw ShapeError("pool level " + std::to_string(l) + " does not divide height " + std::to_string(H));
            const int k = H / l;
            if (W % k != 0)
                throw ShapeError("pool window " + std::to_string(k) + " does not divide width " + std::to_string(W));
            parts.push_back(ag::upsample_nearest(ag::avg_pool2d(raw, k), k));
        }
        return proj_.forward(ag::concat_channels(parts));
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) { proj_.collect(prefix + ".proj", out); }

  private:
    std::vector<int> levels_;
    nn::Conv2d<T> proj_;
};

// Encoder/decoder feature extractor with per-stage residual blocks, skip
// connections, multilevel pooled-context fusion, and one task head.
template <typename T>
class ICFDNet {
  public:
    ICFDNet() = default;

    ICFDNet(const IcfdConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        const int b = cfg_.base_width;
        stem_ = nn::Conv2d<T>(cfg_.in_channels, b, 3, ag::ConvSpec{1, 1, 1});
        for (int i = 0; i < cfg_.depth; ++i) {
            const int w = b << i;
            enc_.emplace_back(w, cfg_.block_down_steps, cfg_.attn_heads, cfg_.dilation_rates);
            down_.emplace_back(w, w * 2, 3, ag::ConvSpec{2, 1, 1});
        }
        mid_ = ICBlock<T>(b << cfg_.depth, cfg_.block_down_steps, cfg_.attn_heads, cfg_.dilation_rates);
        for (int i = cfg_.depth - 1; i >= 0; --i) {
            const int w = b << i;
            up_.emplace_back(w * 2, w, 3, ag::ConvSpec{1, 1, 1});
            merge_.emplace_back(w * 2, w, 1, ag::ConvSpec{1, 0, 1});
        }
        fuse_ = MultiLevelPoolFuse<T>(b, cfg_.in_channels, cfg_.pool_levels);
        feature_conv_ = nn::Conv2d<T>(b, cfg_.feature_channels, 3, ag::ConvSpec{1, 1, 1});
        if (cfg_.head == HeadKind::specific)
            specific_head_ = nn::Linear<T>(b, cfg_.num_classes);
        else
            common_head_ = nn::Conv2d<T>(b, 1, 1, ag::ConvSpec{1, 0, 1});

        std::mt19937_64 rng(seed);
        stem_.init(rng);
        for (auto& e : enc_) e.init(rng);
        for (auto& d : down_) d.init(rng);
        mid_.init(rng);
        for (auto& u : up_) u.init(rng);
        for (auto& m : merge_) m.init(rng);
        fuse_.init(rng);
        feature_conv_.init(rng);
        if (cfg_.head == HeadKind::specific)
            specific_head_.init(rng);
        else
            common_head_.init(rng);

        stem_.collect("stem", params_);
        for (int i = 0; i < cfg_.depth; ++i) {
            enc_[i].collect("enc" + std::to_string(i), params_);
            down_[i].collect("down" + std::to_string(i), params_);
        }
        mid_.collect("mid", params_);
        for (int i = 0; i < cfg_.depth; ++i) {
            up_[i].collect("up" + std::to_string(i), params_);
            merge_[i].collect("merge" + std::to_string(i), params_);
        }
        fuse_.collect("fuse", params_);
        feature_conv_.collect("feature", params_);
        if (cfg_.head == HeadKind::specific)
            specific_head_.collect("head", params_);
        else
            common_head_.collect("head", params_);
    }

    DecoupleOutput<T> forward(const Var<T>& x) const {
        if (x.value().rank() != 4 || x.value().dim(1) != cfg_.in_channels)
            throw ShapeError("network expects [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                             x.value().shape_str());
        const int H = x.value().dim(2), W = x.value().dim(3);
        const int m = cfg_.spatial_multiple();
        if (H % m != 0 || W % m != 0)
            throw ShapeError("spatial dims " + x.value().shape_str() + " must be multiples of " + std::to_string(m));

        Var<T> h = ag::relu(stem_.forward(x));
        std::vector<Var<T>> skips;
        for (int i = 0; i < cfg_.depth; ++i) {
            h = enc_[i].forward(h);
            skips.push_back(h);
            h = ag::relu(down_[i].forward(h));
        }
        h = mid_.forward(h);
        for (int i = 0; i < cfg_.depth; ++i) {
            h = ag::relu(up_[i].forward(h));
            h = ag::upsample_nearest(h, 2);
            h = ag::relu(merge_[i].forward(ag::concat_channels<T>({h, skips[cfg_.depth - 1 - i]})));
        }
        Var<T> trunk = fuse_.forward(h, x);

        DecoupleOutput<T> out;
        out.kind = cfg_.head;
        out.features = ag::relu(feature_conv_.forward(trunk));
        if (cfg_.head == HeadKind::specific)
            out.head = specific_head_.forward(ag::global_avg_pool(trunk));
        else
            out.head = ag::sigmoid(common_head_.forward(trunk));
        return out;
    }

    nn::ParamList<T>& params() { return params_; }
    const nn::ParamList<T>& params() const { return params_; }
    std::int64_t parameter_count() const { return nn::param_count(params_); }
    const IcfdConfig& config() const { return cfg_; }
    const MultiLevelPoolFuse<T>& fusion() const { return fuse_; }
    const ICBlock<T>& block(int i) const { return i < cfg_.depth ? enc_[i] : mid_; }

  private:
    IcfdConfig cfg_;
    nn::Conv2d<T> stem_;
    std::vector<ICBlock<T>> enc_;
    std::vector<nn::Conv2d<T>> down_;
    ICBlock<T> mid_;
    std::vector<nn::Conv2d<T>> up_;
    std::vector<nn::Conv2d<T>> merge_;
    MultiLevelPoolFuse<T> fuse_;
    nn::Conv2d<T> feature_conv_;
    nn::Linear<T> specific_head_;
    nn::Conv2d<T> common_head_;
    nn::ParamList<T> params_;
};

} // namespace icfd::net
