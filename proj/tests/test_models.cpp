#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <random>

#include "icfd/models.hpp"

using namespace icfd;
using ag::Var;

namespace {

Tensor<float> random_batch(int n, int c, int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    Tensor<float> t({n, c, h, w});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

} // namespace

TEST_CASE("every registered backbone maps batches to class logits") {
    auto x = random_batch(2, 9, 32, 32, 1);
    for (const auto& name : models::classifier_names()) {
        auto clf = models::build_classifier<float>(name, 9, 4, 16, 5);
        CHECK(clf->name() == name);
        auto logits = clf->forward(Var<float>::leaf(x, false));
        REQUIRE(logits.value().rank() == 2);
        CHECK(logits.value().dim(0) == 2);
        CHECK(logits.value().dim(1) == 4);
        CHECK(logits.value().all_finite());
        CHECK(clf->parameter_count() > 0);
        CHECK(clf->parameter_count() < 2'000'000);
    }
}

TEST_CASE("backbones accept full-resolution single-channel input") {
    auto x = random_batch(1, 1, 64, 64, 2);
    for (const auto& name : models::classifier_names()) {
        auto clf = models::build_classifier<float>(name, 1, 4, 16, 6);
        auto logits = clf->forward(Var<float>::leaf(x, false));
        CHECK(logits.value().dim(1) == 4);
    }
}

TEST_CASE("unknown backbone names are rejected with the valid list") {
    try {
        models::build_classifier<float>("resnet-152", 9, 4, 16, 1);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("resnet-152") != std::string::npos);
        for (const auto& name : models::classifier_names())
            CHECK(msg.find(name) != std::string::npos);
    }
    CHECK_THROWS_AS(models::build_classifier<float>("small-resnet", 0, 4, 16, 1), ConfigError);
    CHECK_THROWS_AS(models::build_classifier<float>("small-resnet", 9, 1, 16, 1), ConfigError);
}

TEST_CASE("backbone construction is seed-deterministic") {
    auto a = models::build_classifier<float>("small-senet", 9, 4, 8, 11);
    auto b = models::build_classifier<float>("small-senet", 9, 4, 8, 11);
    auto c = models::build_classifier<float>("small-senet", 9, 4, 8, 12);
    REQUIRE(a->params().size() == b->params().size());
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a->params().size(); ++i) {
        const auto& va = a->params()[i].var.value();
        const auto& vb = b->params()[i].var.value();
        const auto& vc = c->params()[i].var.value();
        if (std::memcmp(va.data(), vb.data(), sizeof(float) * va.numel()) != 0) same = false;
        if (std::memcmp(va.data(), vc.data(), sizeof(float) * va.numel()) != 0) differs = true;
    }
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("gates change the function but keep the interface") {
    auto x = random_batch(2, 3, 16, 16, 3);
    auto plain = models::build_classifier<float>("small-resnet", 3, 2, 8, 21);
    auto se = models::build_classifier<float>("small-senet", 3, 2, 8, 21);
    auto cbam = models::build_classifier<float>("small-cbam", 3, 2, 8, 21);
    auto lp = plain->forward(Var<float>::leaf(x, false)).value();
    auto ls = se->forward(Var<float>::leaf(x, false)).value();
    auto lc = cbam->forward(Var<float>::leaf(x, false)).value();
    CHECK(std::memcmp(lp.data(), ls.data(), sizeof(float) * lp.numel()) != 0);
    CHECK(std::memcmp(lp.data(), lc.data(), sizeof(float) * lp.numel()) != 0);
    CHECK(se->parameter_count() > plain->parameter_count());
    CHECK(cbam->parameter_count() > plain->parameter_count());
}

TEST_CASE("linear probe is an affine map of channel means") {
    auto clf = models::build_classifier<float>("linear-probe", 3, 2, 8, 31);
    // two inputs with equal channel means must give equal logits
    Tensor<float> a({1, 3, 4, 4}), b({1, 3, 4, 4});
    std::mt19937_64 rng(32);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (int c = 0; c < 3; ++c) {
        float sum = 0;
        for (int j = 0; j < 16; ++j) {
            const float v = d(rng);
            a.at4(0, c, j / 4, j % 4) = v;
            sum += v;
        }
        b.at4(0, c, 0, 0) = sum; // same total mass, different layout
    }
    auto la = clf->forward(Var<float>::leaf(a, false)).value();
    auto lb = clf->forward(Var<float>::leaf(b, false)).value();
    for (std::int64_t i = 0; i < la.numel(); ++i)
        CHECK(la[i] == doctest::Approx(lb[i]).epsilon(1e-4));
}

TEST_CASE("classifier parameters feed the loss gradient") {
    auto clf = models::build_classifier<float>("small-squeezenet", 2, 3, 8, 41);
    auto x = random_batch(2, 2, 16, 16, 42);
    nn::zero_grads(clf->params());
    auto logits = clf->forward(Var<float>::leaf(x, false));
    ag::mean_all(ag::square(logits)).backward();
    int with_grad = 0;
    for (auto& p : clf->params()) {
        if (!p.var.grad().same_shape(p.var.value())) continue;
        float mx = 0;
        for (std::int64_t i = 0; i < p.var.grad().numel(); ++i)
            mx = std::max(mx, std::abs(p.var.grad()[i]));
        if (mx > 0) ++with_grad;
    }
    CHECK(with_grad >= static_cast<int>(clf->params().size()) - 1);
}
