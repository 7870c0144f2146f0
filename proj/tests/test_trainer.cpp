#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "icfd/trainer.hpp"

using namespace icfd;
using ag::Var;
namespace fs = std::filesystem;

namespace {

cfg::RunConfig tiny_config(cfg::Variant v, const std::string& out) {
    cfg::RunConfig c;
    c.dataset.spec.num_classes = 2;
    c.dataset.spec.counts = {12, 12};
    c.dataset.spec.image_size = 16;
    c.dataset.spec.difficulty = {{2, 0.25, 0.40}, {3, 0.25, 0.60}};
    c.network.base_width = 4;
    c.network.depth = 1;
    c.network.block_down_steps = 1;
    c.network.dilation_rates = {2};
    c.network.pool_levels = {1, 2};
    c.network.feature_channels = 2;
    c.network.num_classes = 2;
    c.classifier = "linear-probe";
    c.classifier_width = 4;
    c.attack.steps = 2;
    c.optimizer.epochs = 1;
    c.optimizer.batch_size = 8;
    c.variant = v;
    c.out_dir = out;
    c.seed = 3;
    return c;
}

Tensor<float> probe_batch(int n, int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    Tensor<float> t({n, 1, size, size});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

bool grad_is_zero(const nn::NamedParam<float>& p) {
    if (!p.var.grad().same_shape(p.var.value())) return true;
    for (std::int64_t i = 0; i < p.var.grad().numel(); ++i)
        if (p.var.grad()[i] != 0.0f) return false;
    return true;
}

} // namespace

TEST_CASE("build_models wires the ensemble per variant") {
    auto c = tiny_config(cfg::Variant::full, "unused");
    auto m = train::build_models(c, 2);
    REQUIRE(m.ic1.has_value());
    REQUIRE(m.ic2.has_value());
    CHECK(m.ic1->config().head == net::HeadKind::specific);
    CHECK(m.ic2->config().head == net::HeadKind::common);
    CHECK(m.classifier_in_channels() == 2 * c.network.feature_channels + 1);
    CHECK(m.all_params.size() ==
          m.ic1->params().size() + m.ic2->params().size() + m.classifier->params().size());
    std::set<std::string> names;
    int ic1 = 0, ic2 = 0, clf = 0;
    for (const auto& p : m.all_params) {
        names.insert(p.name);
        ic1 += p.name.rfind("ic1.", 0) == 0;
        ic2 += p.name.rfind("ic2.", 0) == 0;
        clf += p.name.rfind("clf.", 0) == 0;
    }
    CHECK(names.size() == m.all_params.size());
    CHECK(ic1 == static_cast<int>(m.ic1->params().size()));
    CHECK(ic2 == static_cast<int>(m.ic2->params().size()));
    CHECK(clf == static_cast<int>(m.classifier->params().size()));

    auto mb = train::build_models(tiny_config(cfg::Variant::backbone, "unused"), 2);
    CHECK_FALSE(mb.ic1.has_value());
    CHECK_FALSE(mb.ic2.has_value());
    CHECK(mb.classifier_in_channels() == 1);

    CHECK_THROWS_AS(train::build_models(c, 1), ConfigError);
}

TEST_CASE("the two decoupler instances start from different weights") {
    auto m = train::build_models(tiny_config(cfg::Variant::full, "unused"), 2);
    const auto& w1 = m.ic1->params()[0].var.value();
    const auto& w2 = m.ic2->params()[0].var.value();
    REQUIRE(w1.same_shape(w2));
    CHECK(std::memcmp(w1.data(), w2.data(), sizeof(float) * w1.numel()) != 0);
}

TEST_CASE("train_step is deterministic given models, state, and seed") {
    auto c = tiny_config(cfg::Variant::full, "unused");
    auto run_once = [&]() {
        auto m = train::build_models(c, 2);
        nn::SgdMomentum<float> opt(0.01f, 0.9f);
        auto state = adv::initial_state(2, c.schedule);
        auto x = probe_batch(4, 16, 91);
        std::vector<int> labels = {0, 1, 0, 1};
        auto r = train::train_step(m, opt, x, labels, state, 77);
        return std::make_pair(r, train::clean_logits(m, x));
    };
    auto [r1, l1] = run_once();
    auto [r2, l2] = run_once();
    CHECK(r1.l_c == r2.l_c);
    CHECK(r1.l_s == r2.l_s);
    CHECK(r1.l_at == r2.l_at);
    CHECK(r1.total == r2.total);
    CHECK(r1.adv_predictions == r2.adv_predictions);
    CHECK(std::memcmp(l1.data(), l2.data(), sizeof(float) * l1.numel()) == 0);
}

TEST_CASE("repeated steps on one batch reduce the total loss") {
    auto c = tiny_config(cfg::Variant::decoupled, "unused");
    c.optimizer.lr = 5e-3;
    auto m = train::build_models(c, 2);
    nn::SgdMomentum<float> opt(static_cast<float>(c.optimizer.lr), 0.9f);
    auto state = adv::initial_state(2, c.schedule);
    auto x = probe_batch(6, 16, 92);
    std::vector<int> labels = {0, 1, 0, 1, 0, 1};
    double first = 0, last = 0;
    for (int i = 0; i < 8; ++i) {
        auto r = train::train_step(m, opt, x, labels, state, 50 + i);
        if (i == 0) first = r.total;
        last = r.total;
    }
    CHECK(last < first);
}

TEST_CASE("a zero adversarial weight keeps classifier parameters out of the update") {
    auto c = tiny_config(cfg::Variant::full, "unused");
    c.weights.lambda3 = 0.0;
    auto m = train::build_models(c, 2);
    nn::SgdMomentum<float> opt(0.01f, 0.9f);
    auto state = adv::initial_state(2, c.schedule);
    auto x = probe_batch(4, 16, 93);
    train::train_step(m, opt, x, {0, 1, 0, 1}, state, 5);
    for (const auto& p : m.all_params)
        if (p.name.rfind("clf.", 0) == 0) CHECK(grad_is_zero(p));
}

TEST_CASE("the classifier loss alone still reaches the decouplers") {
    auto c = tiny_config(cfg::Variant::full, "unused");
    c.weights.lambda1 = 0.0;
    c.weights.lambda2 = 0.0;
    auto m = train::build_models(c, 2);
    nn::SgdMomentum<float> opt(0.01f, 0.9f);
    auto state = adv::initial_state(2, c.schedule);
    auto x = probe_batch(4, 16, 94);
    train::train_step(m, opt, x, {0, 1, 0, 1}, state, 6);
    int ic_nonzero = 0, clf_nonzero = 0;
    for (const auto& p : m.all_params) {
        const bool zero = grad_is_zero(p);
        if (!zero && (p.name.rfind("ic1.", 0) == 0 || p.name.rfind("ic2.", 0) == 0)) ++ic_nonzero;
        if (!zero && p.name.rfind("clf.", 0) == 0) ++clf_nonzero;
    }
    CHECK(ic_nonzero > 0);
    CHECK(clf_nonzero > 0);
}

TEST_CASE("without the attack the robust term reduces to the clean loss") {
    auto c = tiny_config(cfg::Variant::decoupled, "unused");
    auto m = train::build_models(c, 2);
    nn::SgdMomentum<float> opt(0.01f, 0.9f);
    auto state = adv::initial_state(2, c.schedule);
    auto x = probe_batch(4, 16, 95);
    std::vector<int> labels = {0, 1, 0, 1};
    auto logits = train::clean_logits(m, x);
    auto ce = loss::cross_entropy_per_sample(Var<float>::leaf(logits, false), labels);
    double want = 0;
    for (int i = 0; i < 4; ++i) want += ce.value()[i];
    want /= 4;
    auto r = train::train_step(m, opt, x, labels, state, 7);
    CHECK(r.l_at == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("train writes bookkeeping and tracks the schedule") {
    const fs::path out = fs::temp_directory_path() / "icfd_train_smoke";
    fs::remove_all(out);
    auto c = tiny_config(cfg::Variant::full, (out / "run").string());
    c.optimizer.epochs = 2;
    auto res = train::train(c);
    REQUIRE(res.records.size() == 2);
    CHECK(fs::exists(out / "run" / "config.json"));
    CHECK(fs::exists(out / "run" / "metrics.csv"));
    CHECK(fs::exists(out / "run" / "checkpoint.icfd"));

    for (std::size_t e = 0; e < res.records.size(); ++e) {
        const auto& r = res.records[e];
        CHECK(r.epoch == static_cast<int>(e));
        CHECK(r.seconds >= 0.0);
        REQUIRE(r.acc.size() == 2);
        for (int i = 0; i < 2; ++i) {
            CHECK(r.acc[i] >= 0.0);
            CHECK(r.acc[i] <= 1.0);
            CHECK(r.eps_i[i] ==
                  doctest::Approx(adv::class_epsilon(r.acc[i], c.schedule.sigma, c.schedule.epsilon))
                      .epsilon(1e-12));
            CHECK(r.beta_i[i] ==
                  doctest::Approx(adv::class_beta(r.acc[i], c.schedule.mu, c.schedule.beta)).epsilon(1e-12));
        }
    }

    std::ifstream f(out / "run" / "metrics.csv");
    std::stringstream ss;
    ss << f.rdbuf();
    auto parsed = train::parse_metrics_csv(ss.str());
    REQUIRE(parsed.size() == res.records.size());
    for (std::size_t e = 0; e < parsed.size(); ++e) {
        CHECK(parsed[e].epoch == res.records[e].epoch);
        CHECK(parsed[e].l_c == res.records[e].l_c);
        CHECK(parsed[e].total == res.records[e].total);
        CHECK(parsed[e].acc == res.records[e].acc);
        CHECK(parsed[e].eps_i == res.records[e].eps_i);
        CHECK(parsed[e].beta_i == res.records[e].beta_i);
    }
    fs::remove_all(out);
}

TEST_CASE("training is reproducible end to end") {
    const fs::path out = fs::temp_directory_path() / "icfd_train_repro";
    fs::remove_all(out);
    auto c1 = tiny_config(cfg::Variant::full, (out / "a").string());
    c1.optimizer.epochs = 2;
    auto c2 = c1;
    c2.out_dir = (out / "b").string();
    auto r1 = train::train(c1);
    auto r2 = train::train(c2);
    REQUIRE(r1.records.size() == r2.records.size());
    for (std::size_t e = 0; e < r1.records.size(); ++e) {
        CHECK(r1.records[e].l_c == r2.records[e].l_c);
        CHECK(r1.records[e].l_s == r2.records[e].l_s);
        CHECK(r1.records[e].l_at == r2.records[e].l_at);
        CHECK(r1.records[e].total == r2.records[e].total);
        CHECK(r1.records[e].acc == r2.records[e].acc);
    }
    auto x = probe_batch(3, 16, 96);
    auto la = train::clean_logits(r1.models, x);
    auto lb = train::clean_logits(r2.models, x);
    CHECK(std::memcmp(la.data(), lb.data(), sizeof(float) * la.numel()) == 0);
    fs::remove_all(out);
}

TEST_CASE("metrics csv header and row formatting round-trip") {
    CHECK(train::metrics_csv_header(2) == "epoch,l_c,l_s,l_at,total,acc_0,acc_1,eps_0,eps_1,beta_0,beta_1,seconds");
    train::EpochRecord r;
    r.epoch = 4;
    r.l_c = 1.0 / 3.0;
    r.l_s = 2.0 / 7.0;
    r.l_at = 1e-17;
    r.total = 123.456789012345678;
    r.acc = {0.1, 1.0 / 3.0, 0.9999999999999};
    r.eps_i = {0.05, 0.031372549019607843, 0.07};
    r.beta_i = {0.75, 6.0 / 7.0, 0.9};
    r.seconds = 12.25;
    const std::string text = train::metrics_csv_header(3) + "\n" + train::metrics_csv_row(r) + "\n";
    auto back = train::parse_metrics_csv(text);
    REQUIRE(back.size() == 1);
    CHECK(back[0].epoch == 4);
    CHECK(back[0].l_c == r.l_c);
    CHECK(back[0].l_s == r.l_s);
    CHECK(back[0].l_at == r.l_at);
    CHECK(back[0].total == r.total);
    CHECK(back[0].acc == r.acc);
    CHECK(back[0].eps_i == r.eps_i);
    CHECK(back[0].beta_i == r.beta_i);
    CHECK(back[0].seconds == r.seconds);

    CHECK_THROWS_AS(train::parse_metrics_csv("nonsense,header\n"), IoError);
    CHECK_THROWS_AS(train::parse_metrics_csv(train::metrics_csv_header(2) + "\n1,2,3\n"), IoError);
}

TEST_CASE("checkpoints round-trip exactly") {
    const fs::path out = fs::temp_directory_path() / "icfd_ckpt";
    fs::remove_all(out);
    auto c = tiny_config(cfg::Variant::full, (out / "run").string());
    auto res = train::train(c);

    const fs::path ck = out / "run" / "checkpoint.icfd";
    auto lc = train::load_checkpoint(ck);
    CHECK(lc.state.acc == res.state.acc);
    CHECK(lc.state.eps_i == res.state.eps_i);
    CHECK(lc.state.beta_i == res.state.beta_i);
    CHECK(lc.models.num_classes == 2);
    CHECK(lc.models.config.classifier == c.classifier);

    auto x = probe_batch(4, 16, 97);
    auto la = train::clean_logits(res.models, x);
    auto lb = train::clean_logits(lc.models, x);
    CHECK(std::memcmp(la.data(), lb.data(), sizeof(float) * la.numel()) == 0);

    // save -> load -> save produces identical bytes
    const fs::path ck2 = out / "resaved.icfd";
    train::save_checkpoint(ck2, lc.models, lc.state);
    std::ifstream f1(ck, std::ios::binary), f2(ck2, std::ios::binary);
    std::stringstream b1, b2;
    b1 << f1.rdbuf();
    b2 << f2.rdbuf();
    CHECK(b1.str() == b2.str());
    CHECK(!b1.str().empty());
    fs::remove_all(out);
}

TEST_CASE("checkpoint loading rejects damaged files") {
    const fs::path out = fs::temp_directory_path() / "icfd_ckpt_bad";
    fs::remove_all(out);
    fs::create_directories(out);
    auto c = tiny_config(cfg::Variant::backbone, (out / "run").string());
    auto res = train::train(c);
    const fs::path ck = out / "run" / "checkpoint.icfd";

    std::ifstream in(ck, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();

    {
        std::ofstream trunc(out / "trunc.icfd", std::ios::binary);
        trunc.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(train::load_checkpoint(out / "trunc.icfd"), IoError);

    {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream mag(out / "magic.icfd", std::ios::binary);
        mag.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    }
    CHECK_THROWS_AS(train::load_checkpoint(out / "magic.icfd"), IoError);
    CHECK_THROWS_AS(train::load_checkpoint(out / "missing.icfd"), IoError);
    fs::remove_all(out);
}

TEST_CASE("folder datasets split 2:1 per class in stable order") {
    const fs::path root = fs::temp_directory_path() / "icfd_folder_split";
    fs::remove_all(root);
    data::DatasetSpec spec;
    spec.num_classes = 2;
    spec.counts = {9, 6};
    spec.difficulty = {{2, 0.2, 0.4}, {3, 0.2, 0.6}};
    spec.image_size = 16;
    auto s = data::generate_synthetic(spec);
    data::Dataset all = s.train;
    for (auto& it : s.test.items) all.items.push_back(it);
    data::export_dataset(all, root / "data");

    auto c = tiny_config(cfg::Variant::backbone, "unused");
    c.dataset.kind = "folder";
    c.dataset.folder = (root / "data").string();
    auto split = train::prepare_dataset(c);
    std::vector<int> tr(2, 0), te(2, 0);
    for (const auto& it : split.train.items) tr[it.label]++;
    for (const auto& it : split.test.items) te[it.label]++;
    CHECK(tr[0] == 6);
    CHECK(te[0] == 3);
    CHECK(tr[1] == 4);
    CHECK(te[1] == 2);
    fs::remove_all(root);
}
