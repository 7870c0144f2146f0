#include "icfd/trainer.hpp"

#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

#include "icfd/attack.hpp"
#include "json.hpp"

namespace icfd::train {

using ag::Var;
using nlohmann::json;

namespace {

// Restores parameter gradient tracking after the attack's input-only ascent.
struct GradOff {
    nn::ParamList<float>& params;
    explicit GradOff(nn::ParamList<float>& p) : params(p) { nn::set_requires_grad(params, false); }
    ~GradOff() { nn::set_requires_grad(params, true); }
};

std::vector<int> argmax_rows(const Tensor<float>& logits) {
    const int N = logits.dim(0), K = logits.dim(1);
    std::vector<int> out(N);
    for (int n = 0; n < N; ++n) {
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (logits.at2(n, k) > logits.at2(n, best)) best = k;
        out[n] = best;
    }
    return out;
}

Var<float> zero_scalar() { return Var<float>::leaf(Tensor<float>::scalar(0.0f), false); }

// Clean forward up to classifier logits; decoupler heads returned for the
// auxiliary losses when present.
struct CleanForward {
    Var<float> logits;
    Var<float> x_c;
    Var<float> scores; // ic1 head
    Var<float> xhat;   // ic2 head
};

CleanForward clean_forward(const ModelSet& m, const Var<float>& x) {
    CleanForward f;
    if (m.has_decouplers()) {
        net::DecoupleOutput<float> o1 = m.ic1->forward(x);
        net::DecoupleOutput<float> o2 = m.ic2->forward(x);
        f.scores = o1.head;
        f.xhat = o2.head;
        f.x_c = ag::concat_channels<float>({o1.features, o2.features, x});
    } else {
        f.x_c = x;
    }
    f.logits = m.classifier->forward(f.x_c);
    return f;
}

} // namespace

ModelSet build_models(const RunConfig& config, int num_classes) {
    config.validate();
    if (num_classes < 2) throw ConfigError("build_models: need at least 2 classes");
    ModelSet m;
    m.config = config;
    m.num_classes = num_classes;
    if (m.has_decouplers()) {
        net::IcfdConfig nc = config.network;
        nc.in_channels = 1;
        nc.num_classes = num_classes;
        nc.head = net::HeadKind::specific;
        m.ic1.emplace(nc, derive_seed(config.seed, 1));
        nc.head = net::HeadKind::common;
        m.ic2.emplace(nc, derive_seed(config.seed, 2));
    }
    m.classifier = models::build_classifier<float>(config.classifier, m.classifier_in_channels(), num_classes,
                                                   config.classifier_width, derive_seed(config.seed, 3));
    if (m.ic1)
        for (auto& p : m.ic1->params()) m.all_params.push_back({"ic1." + p.name, p.var});
    if (m.ic2)
        for (auto& p : m.ic2->params()) m.all_params.push_back({"ic2." + p.name, p.var});
    for (auto& p : m.classifier->params()) m.all_params.push_back({"clf." + p.name, p.var});
    return m;
}

StepResult train_step(ModelSet& m, nn::SgdMomentum<float>& opt, const Tensor<float>& images,
                      const std::vector<int>& labels, const adv::ClassState& state, std::uint64_t attack_seed) {
    const RunConfig& c = m.config;
    const int B = images.dim(0);
    if (static_cast<int>(labels.size()) != B) throw ShapeError("train_step: label count mismatch");

    Var<float> x = Var<float>::leaf(images, false);
    CleanForward f = clean_forward(m, x);

    Var<float> l_c = zero_scalar(), l_s = zero_scalar();
    if (m.has_decouplers()) {
        l_s = loss::specific_loss(f.scores, labels);
        l_c = loss::common_loss(x, f.xhat, static_cast<float>(c.weights.xi));
    }

    std::vector<float> betas(B, 0.0f);
    Var<float> adv_logits;
    const bool attacked = c.variant == Variant::full;
    if (attacked) {
        std::vector<float> eps(B);
        for (int j = 0; j < B; ++j) {
            eps[j] = static_cast<float>(state.eps_i[labels[j]]);
            betas[j] = static_cast<float>(state.beta_i[labels[j]]);
        }
        Tensor<float> x_adv;
        {
            GradOff guard(m.all_params);
            x_adv = adv::generate_adversarial(
                [&m](const Var<float>& v) { return m.classifier->forward(v); }, f.x_c.value(),
                f.logits.value(), eps, c.attack, attack_seed);
        }
        adv_logits = m.classifier->forward(Var<float>::leaf(x_adv, false));
    } else {
        adv_logits = f.logits.detach();
    }

    Var<float> l_at = loss::calibrated_at_loss(f.logits, adv_logits, labels, betas, true);
    loss::LossBundle<float> bundle = loss::total_loss(l_c, l_s, l_at, c.weights);
    nn::zero_grads(m.all_params);
    bundle.total.backward();
    opt.step(m.all_params);

    StepResult r;
    r.l_c = bundle.l_c.item();
    r.l_s = bundle.l_s.item();
    r.l_at = bundle.l_at.item();
    r.total = bundle.total.item();
    r.adv_predictions = argmax_rows(adv_logits.value());
    return r;
}

Tensor<float> clean_logits(const ModelSet& m, const Tensor<float>& images) {
    return clean_forward(m, Var<float>::leaf(images, false)).logits.value();
}

std::string metrics_csv_header(int num_classes) {
    std::ostringstream os;
    os << "epoch,l_c,l_s,l_at,total";
    for (const char* base : {"acc_", "eps_", "beta_"})
        for (int i = 0; i < num_classes; ++i) os << ',' << base << i;
    os << ",seconds";
    return os.str();
}

namespace {

void put(std::ostringstream& os, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << ',' << buf;
}

} // namespace

std::string metrics_csv_row(const EpochRecord& r) {
    std::ostringstream os;
    os << r.epoch;
    put(os, r.l_c);
    put(os, r.l_s);
    put(os, r.l_at);
    put(os, r.total);
    for (const std::vector<double>* v : {&r.acc, &r.eps_i, &r.beta_i})
        for (double x : *v) put(os, x);
    put(os, r.seconds);
    return os.str();
}

std::vector<EpochRecord> parse_metrics_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw IoError("metrics: empty file");
    int commas = 0;
    for (char ch : line) commas += (ch == ',');
    const int k3 = commas - 5;
    if (k3 < 3 || k3 % 3 != 0 || line.rfind("epoch,", 0) != 0)
        throw IoError("metrics: unrecognized header: " + line);
    const int K = k3 / 3;

    std::vector<EpochRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> vals;
        std::istringstream row(line);
        std::string cell;
        while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
        if (static_cast<int>(vals.size()) != commas + 1) throw IoError("metrics: malformed row: " + line);
        EpochRecord r;
        r.epoch = static_cast<int>(vals[0]);
        r.l_c = vals[1];
        r.l_s = vals[2];
        r.l_at = vals[3];
        r.total = vals[4];
        r.acc.assign(vals.begin() + 5, vals.begin() + 5 + K);
        r.eps_i.assign(vals.begin() + 5 + K, vals.begin() + 5 + 2 * K);
        r.beta_i.assign(vals.begin() + 5 + 2 * K, vals.begin() + 5 + 3 * K);
        r.seconds = vals.back();
        out.push_back(std::move(r));
    }
    return out;
}

data::SplitDataset prepare_dataset(const RunConfig& config) {
    if (config.dataset.kind == "synthetic") return data::generate_synthetic(config.dataset.spec);
    data::Dataset all = data::load_folder(config.dataset.folder, config.dataset.resize);
    data::SplitDataset split;
    split.train.num_classes = split.test.num_classes = all.num_classes;
    std::vector<int> seen(static_cast<std::size_t>(all.num_classes), 0);
    std::vector<int> totals(static_cast<std::size_t>(all.num_classes), 0);
    for (const auto& item : all.items) ++totals[item.label];
    for (auto& item : all.items) {
        const int n_train = (2 * totals[item.label] + 2) / 3;
        (seen[item.label]++ < n_train ? split.train : split.test).items.push_back(std::move(item));
    }
    return split;
}

TrainResult train(const RunConfig& config) { return train(config, prepare_dataset(config)); }

TrainResult train(const RunConfig& config, const data::SplitDataset& split) {
    config.validate();
    const data::Dataset& tr = split.train;
    if (tr.size() == 0) throw ConfigError("train: empty training split");
    const int K = tr.num_classes;

    ModelSet m = build_models(config, K);
    nn::SgdMomentum<float> opt(static_cast<float>(config.optimizer.lr),
                               static_cast<float>(config.optimizer.momentum));
    adv::ClassState state = adv::initial_state(K, config.schedule);

    const std::filesystem::path out_dir(config.out_dir);
    std::filesystem::create_directories(out_dir);
    cfg::save_config_file(config, out_dir / "config.json");
    std::ofstream metrics(out_dir / "metrics.csv");
    if (!metrics) throw IoError("train: cannot write metrics under " + out_dir.string());
    metrics << metrics_csv_header(K) << '\n';

    std::vector<EpochRecord> records;
    for (int epoch = 0; epoch < config.optimizer.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto batches =
            data::epoch_batches(tr.size(), config.optimizer.batch_size, derive_seed(config.seed, 5), epoch);
        double sum_c = 0, sum_s = 0, sum_at = 0, sum_total = 0;
        std::vector<int> epoch_preds, epoch_labels;
        epoch_preds.reserve(tr.size());
        epoch_labels.reserve(tr.size());
        for (std::size_t b = 0; b < batches.size(); ++b) {
            Tensor<float> images = data::stack_images<float>(tr, batches[b]);
            std::vector<int> labels = data::labels_of(tr, batches[b]);
            StepResult r = train_step(m, opt, images, labels, state,
                                      derive_seed(config.seed, 4, static_cast<std::uint64_t>(epoch), b));
            const double w = static_cast<double>(labels.size());
            sum_c += r.l_c * w;
            sum_s += r.l_s * w;
            sum_at += r.l_at * w;
            sum_total += r.total * w;
            epoch_preds.insert(epoch_preds.end(), r.adv_predictions.begin(), r.adv_predictions.end());
            epoch_labels.insert(epoch_labels.end(), labels.begin(), labels.end());
        }
        adv::update_class_stats(state, epoch_preds, epoch_labels, config.schedule);

        EpochRecord rec;
        rec.epoch = epoch;
        const double n = static_cast<double>(tr.size());
        rec.l_c = sum_c / n;
        rec.l_s = sum_s / n;
        rec.l_at = sum_at / n;
        rec.total = sum_total / n;
        rec.acc = state.acc;
        rec.eps_i = state.eps_i;
        rec.beta_i = state.beta_i;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        metrics << metrics_csv_row(rec) << '\n';
        metrics.flush();
        records.push_back(std::move(rec));

        save_checkpoint(out_dir / "checkpoint.icfd", m, state);
    }

    return TrainResult{std::move(m), std::move(state), std::move(records)};
}

// ---------------------------------------------------------------------------
// Checkpointing: magic + version + JSON header + raw little-endian f32 data.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'I', 'C', 'F', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

} // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelSet& m, const adv::ClassState& state) {
    json arrays = json::array();
    std::int64_t offset = 0;
    for (const auto& p : m.all_params) {
        const Tensor<float>& t = p.var.value();
        arrays.push_back({{"name", p.name}, {"shape", t.shape()}, {"offset", offset}, {"numel", t.numel()}});
        offset += t.numel();
    }
    json header{{"config", json::parse(cfg::dump_run_config(m.config))},
                {"num_classes", m.num_classes},
                {"class_state", {{"acc", state.acc}, {"eps", state.eps_i}, {"beta", state.beta_i}}},
                {"arrays", arrays}};
    const std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot write " + path.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint32_t ver = kVersion;
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    const std::uint64_t hlen = htext.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& p : m.all_params) {
        const Tensor<float>& t = p.var.value();
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path.string());
    char magic[8];
    std::uint32_t ver = 0;
    std::uint64_t hlen = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("checkpoint: not a checkpoint file: " + path.string());
    if (ver != kVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(ver) + " in " + path.string());
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("checkpoint: truncated header in " + path.string());

    json header;
    try {
        header = json::parse(htext);
    } catch (const json::exception& e) {
        throw IoError("checkpoint: corrupt header in " + path.string() + ": " + e.what());
    }

    LoadedCheckpoint lc;
    const RunConfig config = cfg::parse_run_config(header.at("config").dump());
    lc.models = build_models(config, header.at("num_classes").get<int>());
    header.at("class_state").at("acc").get_to(lc.state.acc);
    header.at("class_state").at("eps").get_to(lc.state.eps_i);
    header.at("class_state").at("beta").get_to(lc.state.beta_i);

    const json& arrays = header.at("arrays");
    if (arrays.size() != lc.models.all_params.size())
        throw IoError("checkpoint: parameter list mismatch in " + path.string());
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        const json& a = arrays[i];
        auto& p = lc.models.all_params[i];
        if (a.at("name").get<std::string>() != p.name ||
            a.at("shape").get<std::vector<int>>() != p.var.value().shape())
            throw IoError("checkpoint: array mismatch for '" + p.name + "' in " + path.string());
        Tensor<float>& t = p.var.value();
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!in) throw IoError("checkpoint: truncated data for '" + p.name + "' in " + path.string());
    }
    return lc;
}

} // namespace icfd::train
