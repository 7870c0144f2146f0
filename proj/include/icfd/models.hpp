#pragma once

#include <memory>
#include <string>
#include <vector>

#include "icfd/nn.hpp"

namespace icfd::models {

using ag::Var;

template <typename T>
class Classifier {
  public:
    virtual ~Classifier() = default;
    virtual Var<T> forward(const Var<T>& x) const = 0;
    virtual const std::string& name() const = 0;

    nn::ParamList<T>& params() { return params_; }
    const nn::ParamList<T>& params() const { return params_; }
    std::int64_t parameter_count() const { return nn::param_count(params_); }

  protected:
    nn::ParamList<T> params_;
};

namespace detail {

template <typename T>
struct BasicBlock {
    nn::Conv2d<T> c1, c2;

    BasicBlock() = default;
    explicit BasicBlock(int ch) : c1(ch, ch, 3, ag::ConvSpec{1, 1, 1}), c2(ch, ch, 3, ag::ConvSpec{1, 1, 1}) {}

    void init(std::mt19937_64& rng) {
        c1.init(rng);
        c2.init(rng);
    }

    Var<T> forward(const Var<T>& x) const {
        return ag::relu(ag::add(x, c2.forward(ag::relu(c1.forward(x)))));
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) {
        c1.collect(prefix + ".c1", out);
        c2.collect(prefix + ".c2", out);
    }
};

// Channel gate: squeeze with global pooling, excite through a bottleneck MLP.
template <typename T>
struct SqueezeExcite {
    nn::Linear<T> fc1, fc2;

    SqueezeExcite() = default;
    SqueezeExcite(int ch, int reduction) : fc1(ch, std::max(1, ch / reduction)), fc2(std::max(1, ch / reduction), ch) {}

    void init(std::mt19937_64& rng) {
        fc1.init(rng);
        fc2.init(rng);
    }

    Var<T> forward(const Var<T>& x) const {
        Var<T> s = ag::sigmoid(fc2.forward(ag::relu(fc1.forward(ag::global_avg_pool(x)))));
        return ag::channel_scale(x, s);
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

// Channel gate from avg+max statistics through a shared MLP, followed by a
// spatial gate from per-pixel channel statistics.
template <typename T>
struct CbamGate {
    nn::Linear<T> fc1, fc2;
    nn::Conv2d<T> spatial;

    CbamGate() = default;
    CbamGate(int ch, int reduction)
        : fc1(ch, std::max(1, ch / reduction)), fc2(std::max(1, ch / reduction), ch),
          spatial(2, 1, 3, ag::ConvSpec{1, 1, 1}) {}

    void init(std::mt19937_64& rng) {
        fc1.init(rng);
        fc2.init(rng);
        spatial.init(rng);
    }

    Var<T> forward(const Var<T>& x) const {
        Var<T> mlp_avg = fc2.forward(ag::relu(fc1.forward(ag::global_avg_pool(x))));
        Var<T> mlp_max = fc2.forward(ag::relu(fc1.forward(ag::global_max_pool(x))));
        Var<T> xc = ag::channel_scale(x, ag::sigmoid(ag::add(mlp_avg, mlp_max)));
        Var<T> stats = ag::concat_channels<T>({ag::channel_mean(xc), ag::channel_max(xc)});
        return ag::spatial_scale(xc, ag::sigmoid(spatial.forward(stats)));
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
        spatial.collect(prefix + ".spatial", out);
    }
};

// Squeeze to few channels with 1x1, expand back through parallel 1x1 and 3x3
// branches that are concatenated.
template <typename T>
struct Fire {
    nn::Conv2d<T> squeeze, e1, e3;

    Fire() = default;
    Fire(int in_ch, int sq, int ex)
        : squeeze(in_ch, sq, 1, ag::ConvSpec{1, 0, 1}), e1(sq, ex, 1, ag::ConvSpec{1, 0, 1}),
          e3(sq, ex, 3, ag::ConvSpec{1, 1, 1}) {}

    void init(std::mt19937_64& rng) {
        squeeze.init(rng);
        e1.init(rng);
        e3.init(rng);
    }

    Var<T> forward(const Var<T>& x) const {
        Var<T> s = ag::relu(squeeze.forward(x));
        return ag::concat_channels<T>({ag::relu(e1.forward(s)), ag::relu(e3.forward(s))});
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) {
        squeeze.collect(prefix + ".squeeze", out);
        e1.collect(prefix + ".e1", out);
        e3.collect(prefix + ".e3", out);
    }
};

} // namespace detail

enum class BlockGate { none, se, cbam };

// Two-stage residual classifier; optional per-block channel/spatial gates
// turn it into the SE / CBAM variants.
template <typename T>
class SmallResNet : public Classifier<T> {
  public:
    SmallResNet(std::string name, int in_ch, int num_classes, int width, BlockGate gate, std::uint64_t seed)
        : name_(std::move(name)), gate_(gate), stem_(in_ch, width, 3, ag::ConvSpec{2, 1, 1}),
          b1_(width), down_(width, width * 2, 3, ag::ConvSpec{2, 1, 1}), b2_(width * 2),
          head_(width * 2, num_classes) {
        if (gate == BlockGate::se) {
            se1_ = detail::SqueezeExcite<T>(width, 4);
            se2_ = detail::SqueezeExcite<T>(width * 2, 4);
        } else if (gate == BlockGate::cbam) {
            cbam1_ = detail::CbamGate<T>(width, 4);
            cbam2_ = detail::CbamGate<T>(width * 2, 4);
        }
        std::mt19937_64 rng(seed);
        stem_.init(rng);
        b1_.init(rng);
        if (gate == BlockGate::se) se1_.init(rng);
        if (gate == BlockGate::cbam) cbam1_.init(rng);
        down_.init(rng);
        b2_.init(rng);
        if (gate == BlockGate::se) se2_.init(rng);
        if (gate == BlockGate::cbam) cbam2_.init(rng);
        head_.init(rng);

        stem_.collect("stem", this->params_);
        b1_.collect("b1", this->params_);
        if (gate == BlockGate::se) se1_.collect("se1", this->params_);
        if (gate == BlockGate::cbam) cbam1_.collect("cbam1", this->params_);
        down_.collect("down", this->params_);
        b2_.collect("b2", this->params_);
        if (gate == BlockGate::se) se2_.collect("se2", this->params_);
        if (gate == BlockGate::cbam) cbam2_.collect("cbam2", this->params_);
        head_.collect("head", this->params_);
    }

    Var<T> forward(const Var<T>& x) const override {
        Var<T> h = ag::relu(stem_.forward(x));
        h = b1_.forward(h);
        h = gated(h, se1_, cbam1_);
        h = ag::relu(down_.forward(h));
        h = b2_.forward(h);
        h = gated(h, se2_, cbam2_);
        return head_.forward(ag::global_avg_pool(h));
    }

    const std::string& name() const override { return name_; }

  private:
    Var<T> gated(const Var<T>& h, const detail::SqueezeExcite<T>& se, const detail::CbamGate<T>& cbam) const {
        if (gate_ == BlockGate::se) return se.forward(h);
        if (gate_ == BlockGate::cbam) return cbam.forward(h);
        return h;
    }

    std::string name_;
    BlockGate gate_;
    nn::Conv2d<T> stem_;
    detail::BasicBlock<T> b1_;
    detail::SqueezeExcite<T> se1_;
    detail::CbamGate<T> cbam1_;
    nn::Conv2d<T> down_;
    detail::BasicBlock<T> b2_;
    detail::SqueezeExcite<T> se2_;
    detail::CbamGate<T> cbam2_;
    nn::Linear<T> head_;
};

template <typename T>
class SmallSqueezeNet : public Classifier<T> {
  public:
    SmallSqueezeNet(int in_ch, int num_classes, int width, std::uint64_t seed)
        : stem_(in_ch, width, 3, ag::ConvSpec{2, 1, 1}), f1_(width, width / 2, width),
          f2_(width * 2, width / 2, width), head_(width * 2, num_classes) {
        std::mt19937_64 rng(seed);
        stem_.init(rng);
        f1_.init(rng);
        f2_.init(rng);
        head_.init(rng);
        stem_.collect("stem", this->params_);
        f1_.collect("f1", this->params_);
        f2_.collect("f2", this->params_);
        head_.collect("head", this->params_);
    }

    Var<T> forward(const Var<T>& x) const override {
        Var<T> h = ag::relu(stem_.forward(x));
        h = f1_.forward(h);
        h = ag::avg_pool2d(h, 2);
        h = f2_.forward(h);
        return head_.forward(ag::global_avg_pool(h));
    }

    const std::string& name() const override { return name_; }

  private:
    std::string name_ = "small-squeezenet";
    nn::Conv2d<T> stem_;
    detail::Fire<T> f1_, f2_;
    nn::Linear<T> head_;
};

// Affine map on globally pooled channels; the weakest sensible baseline.
template <typename T>
class LinearProbe : public Classifier<T> {
  public:
    LinearProbe(int in_ch, int num_classes, std::uint64_t seed) : head_(in_ch, num_classes) {
        std::mt19937_64 rng(seed);
        head_.init(rng);
        head_.collect("head", this->params_);
    }

    Var<T> forward(const Var<T>& x) const override { return head_.forward(ag::global_avg_pool(x)); }

    const std::string& name() const override { return name_; }

  private:
    std::string name_ = "linear-probe";
    nn::Linear<T> head_;
};

inline const std::vector<std::string>& classifier_names() {
    static const std::vector<std::string> names{"small-resnet", "small-senet", "small-cbam", "small-squeezenet",
                                                "linear-probe"};
    return names;
}

template <typename T>
std::unique_ptr<Classifier<T>> build_classifier(const std::string& name, int in_channels, int num_classes,
                                                int width, std::uint64_t seed) {
    if (in_channels < 1 || num_classes < 2 || width < 2)
        throw ConfigError("classifier: need in_channels >= 1, classes >= 2, width >= 2");
    if (name == "small-resnet")
        return std::make_unique<SmallResNet<T>>(name, in_channels, num_classes, width, BlockGate::none, seed);
    if (name == "small-senet")
        return std::make_unique<SmallResNet<T>>(name, in_channels, num_classes, width, BlockGate::se, seed);
    if (name == "small-cbam")
        return std::make_unique<SmallResNet<T>>(name, in_channels, num_classes, width, BlockGate::cbam, seed);
    if (name == "small-squeezenet") return std::make_unique<SmallSqueezeNet<T>>(in_channels, num_classes, width, seed);
    if (name == "linear-probe") return std::make_unique<LinearProbe<T>>(in_channels, num_classes, seed);
    std::string valid;
    for (const auto& n : classifier_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown classifier '" + name + "'; valid names: " + valid);
}

} // namespace icfd::models
