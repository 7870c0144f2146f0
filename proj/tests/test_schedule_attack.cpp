#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <random>

#include "icfd/attack.hpp"
#include "icfd/nn.hpp"
#include "icfd/schedule.hpp"

using namespace icfd;
using ag::Var;

TEST_CASE("class_epsilon hand values") {
    const double eps = 8.0 / 255.0;
    CHECK(adv::class_epsilon(0.0, 0.5, eps) == doctest::Approx(4.0 / 255.0).epsilon(1e-12));
    CHECK(adv::class_epsilon(0.5, 0.5, eps) == doctest::Approx(eps).epsilon(1e-12));
    CHECK(adv::class_epsilon(1.0, 0.5, eps) == doctest::Approx(12.0 / 255.0).epsilon(1e-12));
    CHECK(adv::class_epsilon(0.3, 0.0, 1.0) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("class_beta hand values") {
    CHECK(adv::class_beta(0.0, 0.5, 6.0) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(adv::class_beta(0.5, 0.5, 6.0) == doctest::Approx(6.0 / 7.0).epsilon(1e-12));
    CHECK(adv::class_beta(1.0, 0.5, 6.0) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(adv::class_beta(0.7, 0.5, 0.0) == 0.0);
}

TEST_CASE("schedule primitives validate their domains") {
    CHECK_THROWS_AS(adv::class_epsilon(-0.1, 0.5, 1.0), DomainError);
    CHECK_THROWS_AS(adv::class_epsilon(1.1, 0.5, 1.0), DomainError);
    CHECK_THROWS_AS(adv::class_epsilon(0.5, -0.1, 1.0), DomainError);
    CHECK_THROWS_AS(adv::class_epsilon(0.5, 0.5, -1.0), DomainError);
    CHECK_THROWS_AS(adv::class_beta(-0.1, 0.5, 6.0), DomainError);
    CHECK_THROWS_AS(adv::class_beta(2.0, 0.5, 6.0), DomainError);
    CHECK_THROWS_AS(adv::class_beta(0.5, -1.0, 6.0), DomainError);
    CHECK_THROWS_AS(adv::class_beta(0.5, 0.5, -6.0), DomainError);
}

TEST_CASE("schedule values stay inside their documented ranges") {
    std::mt19937_64 rng(51);
    std::uniform_real_distribution<double> acc(0.0, 1.0), par(0.0, 4.0);
    for (int t = 0; t < 500; ++t) {
        const double a = acc(rng), sg = par(rng), mu = par(rng), ep = par(rng), be = par(rng);
        const double e = adv::class_epsilon(a, sg, ep);
        CHECK(e >= sg * ep - 1e-12);
        CHECK(e <= (sg + 1.0) * ep + 1e-12);
        const double b = adv::class_beta(a, mu, be);
        CHECK(b >= 0.0);
        CHECK(b < 1.0);
        // recompute from the closed forms
        CHECK(e == doctest::Approx((sg + a) * ep).epsilon(1e-12));
        CHECK(b == doctest::Approx((mu + a) * be / (1.0 + (mu + a) * be)).epsilon(1e-12));
    }
}

TEST_CASE("budgets and weights grow with class accuracy") {
    std::mt19937_64 rng(52);
    std::uniform_real_distribution<double> acc(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
        double a1 = acc(rng), a2 = acc(rng);
        if (a1 > a2) std::swap(a1, a2);
        if (a2 - a1 < 1e-9) continue;
        CHECK(adv::class_epsilon(a1, 0.5, 8.0 / 255) < adv::class_epsilon(a2, 0.5, 8.0 / 255));
        CHECK(adv::class_beta(a1, 0.5, 6.0) < adv::class_beta(a2, 0.5, 6.0));
    }
}

TEST_CASE("initial state starts at zero accuracy with floor budgets") {
    adv::ScheduleConfig c;
    auto s = adv::initial_state(4, c);
    CHECK(s.num_classes() == 4);
    for (int i = 0; i < 4; ++i) {
        CHECK(s.acc[i] == 0.0);
        CHECK(s.eps_i[i] == doctest::Approx(0.5 * 8.0 / 255.0).epsilon(1e-12));
        CHECK(s.beta_i[i] == doctest::Approx(0.75).epsilon(1e-12));
    }
    CHECK_THROWS_AS(adv::initial_state(0, c), ConfigError);
}

TEST_CASE("non-adaptive schedule pins budget and weight to their base values") {
    adv::ScheduleConfig c;
    c.adaptive = false;
    auto s = adv::initial_state(3, c);
    s.acc = {0.1, 0.5, 0.9};
    adv::refresh(s, c);
    for (int i = 0; i < 3; ++i) {
        CHECK(s.eps_i[i] == doctest::Approx(8.0 / 255.0).epsilon(1e-12));
        CHECK(s.beta_i[i] == doctest::Approx(6.0 / 7.0).epsilon(1e-12));
    }
}

TEST_CASE("update_class_stats counts per-class adversarial accuracy") {
    adv::ScheduleConfig c;
    auto s = adv::initial_state(3, c);
    // class 0: 3 of 4 correct; class 1: 0 of 2; class 2 absent
    std::vector<int> labels = {0, 0, 0, 0, 1, 1};
    std::vector<int> preds = {0, 0, 2, 0, 0, 2};
    const double prev_acc2 = s.acc[2];
    adv::update_class_stats(s, preds, labels, c);
    CHECK(s.acc[0] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(s.acc[1] == 0.0);
    CHECK(s.acc[2] == prev_acc2);
    CHECK(s.eps_i[0] == doctest::Approx(adv::class_epsilon(0.75, c.sigma, c.epsilon)).epsilon(1e-12));
    CHECK(s.beta_i[0] == doctest::Approx(adv::class_beta(0.75, c.mu, c.beta)).epsilon(1e-12));

    CHECK_THROWS_AS(adv::update_class_stats(s, {0}, {0, 1}, c), ShapeError);
    CHECK_THROWS_AS(adv::update_class_stats(s, {0}, {3}, c), DomainError);
    CHECK_THROWS_AS(adv::update_class_stats(s, {0}, {-1}, c), DomainError);
}

TEST_CASE("multi-epoch schedule replay matches an independent tally") {
    adv::ScheduleConfig c;
    std::mt19937_64 rng(53);
    const int K = 4;
    auto s = adv::initial_state(K, c);
    std::vector<double> expect_acc(K, 0.0);
    for (int epoch = 0; epoch < 5; ++epoch) {
        std::vector<int> labels, preds;
        for (int j = 0; j < 64; ++j) {
            labels.push_back(static_cast<int>(rng() % K));
            preds.push_back(static_cast<int>(rng() % K));
        }
        adv::update_class_stats(s, preds, labels, c);
        // independent tally with different bookkeeping
        std::vector<int> hit(K, 0), seen(K, 0);
        for (std::size_t j = 0; j < labels.size(); ++j) {
            seen[labels[j]]++;
            hit[labels[j]] += preds[j] == labels[j] ? 1 : 0;
        }
        for (int i = 0; i < K; ++i)
            if (seen[i]) expect_acc[i] = double(hit[i]) / seen[i];
        for (int i = 0; i < K; ++i) {
            CHECK(s.acc[i] == doctest::Approx(expect_acc[i]).epsilon(1e-12));
            CHECK(s.eps_i[i] == doctest::Approx((c.sigma + expect_acc[i]) * c.epsilon).epsilon(1e-12));
            const double w = (c.mu + expect_acc[i]) * c.beta;
            CHECK(s.beta_i[i] == doctest::Approx(w / (1 + w)).epsilon(1e-12));
        }
    }
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

namespace {

struct ToyClassifier {
    nn::Linear<float> lin;
    ToyClassifier(int in_feats, int k, std::uint64_t seed) : lin(in_feats, k) {
        std::mt19937_64 rng(seed);
        lin.init(rng);
    }
    Var<float> operator()(const Var<float>& x) const { return lin.forward(ag::flatten(x)); }
};

Tensor<float> random_batch(int n, int c, int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    Tensor<float> t({n, c, h, w});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

} // namespace

TEST_CASE("attack stays inside each per-sample ball") {
    ToyClassifier clf(3 * 6 * 6, 3, 60);
    auto x = random_batch(4, 3, 6, 6, 61);
    auto clean = clf(Var<float>::leaf(x, false)).value();
    std::vector<float> eps = {0.05f, 0.2f, 0.01f, 0.1f};
    adv::AttackConfig cfg;
    auto xa = adv::generate_adversarial(clf, x, clean, eps, cfg, 62);
    REQUIRE(xa.same_shape(x));
    const std::int64_t row = x.numel() / 4;
    for (int n = 0; n < 4; ++n) {
        float worst = 0;
        for (std::int64_t j = 0; j < row; ++j)
            worst = std::max(worst, std::abs(xa[n * row + j] - x[n * row + j]));
        CHECK(worst <= eps[static_cast<std::size_t>(n)] + 1e-7f);
        CHECK(worst > 0.0f);
    }
}

TEST_CASE("zero-budget samples come back bit-identical") {
    ToyClassifier clf(2 * 4 * 4, 2, 63);
    auto x = random_batch(4, 2, 4, 4, 64);
    auto clean = clf(Var<float>::leaf(x, false)).value();
    std::vector<float> eps = {0.1f, 0.0f, 0.05f, 0.0f};
    auto xa = adv::generate_adversarial(clf, x, clean, eps, adv::AttackConfig{}, 65);
    const std::int64_t row = x.numel() / 4;
    CHECK(std::memcmp(xa.data() + row, x.data() + row, sizeof(float) * row) == 0);
    CHECK(std::memcmp(xa.data() + 3 * row, x.data() + 3 * row, sizeof(float) * row) == 0);
    CHECK(std::memcmp(xa.data(), x.data(), sizeof(float) * row) != 0);

    std::vector<float> zeros(4, 0.0f);
    auto same = adv::generate_adversarial(clf, x, clean, zeros, adv::AttackConfig{}, 66);
    CHECK(std::memcmp(same.data(), x.data(), sizeof(float) * x.numel()) == 0);
}

TEST_CASE("attack is a pure function of its seed") {
    ToyClassifier clf(2 * 4 * 4, 3, 67);
    auto x = random_batch(3, 2, 4, 4, 68);
    auto clean = clf(Var<float>::leaf(x, false)).value();
    std::vector<float> eps(3, 0.1f);
    auto a = adv::generate_adversarial(clf, x, clean, eps, adv::AttackConfig{}, 69);
    auto b = adv::generate_adversarial(clf, x, clean, eps, adv::AttackConfig{}, 69);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0);
    auto c = adv::generate_adversarial(clf, x, clean, eps, adv::AttackConfig{}, 70);
    CHECK(std::memcmp(a.data(), c.data(), sizeof(float) * a.numel()) != 0);

    adv::AttackConfig det;
    det.random_init = false;
    auto d1 = adv::generate_adversarial(clf, x, clean, eps, det, 1);
    auto d2 = adv::generate_adversarial(clf, x, clean, eps, det, 2);
    CHECK(std::memcmp(d1.data(), d2.data(), sizeof(float) * d1.numel()) == 0);
}

TEST_CASE("ascent grows the divergence it maximizes") {
    ToyClassifier clf(3 * 6 * 6, 4, 71);
    auto x = random_batch(8, 3, 6, 6, 72);
    auto clean = clf(Var<float>::leaf(x, false)).value();
    std::vector<float> eps(8, 0.15f);
    adv::AttackStats<float> st;
    auto xa = adv::generate_adversarial(clf, x, clean, eps, adv::AttackConfig{}, 73, &st);
    REQUIRE(st.kl_init.size() == 8);
    REQUIRE(st.kl_final.size() == 8);
    double mi = 0, mf = 0;
    int non_decreasing = 0;
    for (int n = 0; n < 8; ++n) {
        mi += st.kl_init[n];
        mf += st.kl_final[n];
        CHECK(st.kl_final[n] > 0.0f);
        if (st.kl_final[n] >= st.kl_init[n] - 1e-6f) ++non_decreasing;
    }
    CHECK(mf > mi);
    CHECK(non_decreasing >= 7);

    // without random init the start point is the clean image, where the
    // divergence gradient vanishes exactly; the ascent is pinned there
    adv::AttackConfig det;
    det.random_init = false;
    adv::AttackStats<float> st2;
    auto xd = adv::generate_adversarial(clf, x, clean, eps, det, 74, &st2);
    for (int n = 0; n < 8; ++n) {
        CHECK(st2.kl_init[n] == 0.0f);
        CHECK(st2.kl_final[n] == st2.kl_init[n]);
    }
    CHECK(std::memcmp(xd.data(), x.data(), sizeof(float) * x.numel()) == 0);
}

TEST_CASE("attack input validation") {
    ToyClassifier clf(2 * 4 * 4, 2, 75);
    auto x = random_batch(2, 2, 4, 4, 76);
    auto clean = clf(Var<float>::leaf(x, false)).value();
    std::vector<float> eps(2, 0.1f);
    adv::AttackConfig cfg;

    std::vector<float> short_eps(1, 0.1f);
    CHECK_THROWS_AS(adv::generate_adversarial(clf, x, clean, short_eps, cfg, 1), ShapeError);
    std::vector<float> neg_eps = {0.1f, -0.1f};
    CHECK_THROWS_AS(adv::generate_adversarial(clf, x, clean, neg_eps, cfg, 1), DomainError);
    adv::AttackConfig bad;
    bad.steps = 0;
    CHECK_THROWS_AS(adv::generate_adversarial(clf, x, clean, eps, bad, 1), ConfigError);
    bad = adv::AttackConfig{};
    bad.step_fraction = 0.0;
    CHECK_THROWS_AS(adv::generate_adversarial(clf, x, clean, eps, bad, 1), ConfigError);
    bad = adv::AttackConfig{};
    bad.step_fraction = 1.5;
    CHECK_THROWS_AS(adv::generate_adversarial(clf, x, clean, eps, bad, 1), ConfigError);
    Tensor<float> flat({2, 32});
    CHECK_THROWS_AS(adv::generate_adversarial(clf, flat, clean, eps, cfg, 1), ShapeError);
}

TEST_CASE("non-finite attack gradients raise a numeric error") {
    ToyClassifier clf(2 * 4 * 4, 2, 77);
    // poison one weight so every gradient turns NaN
    clf.lin = nn::Linear<float>(2 * 4 * 4, 2);
    std::mt19937_64 rng(78);
    clf.lin.init(rng);
    nn::ParamList<float> ps;
    clf.lin.collect("w", ps);
    ps[0].var.value()[0] = std::numeric_limits<float>::quiet_NaN();
    auto x = random_batch(2, 2, 4, 4, 79);
    Tensor<float> clean({2, 2});
    std::vector<float> eps(2, 0.1f);
    CHECK_THROWS_AS(adv::generate_adversarial(clf, x, clean, eps, adv::AttackConfig{}, 80), NumericError);
}
