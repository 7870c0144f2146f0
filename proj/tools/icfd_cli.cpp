#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "icfd/eval.hpp"

namespace {

using icfd::cfg::RunConfig;

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw icfd::IoError("cannot write " + path.string());
    out << text;
}

RunConfig load_or_default(const std::string& config_path) {
    if (config_path.empty()) return RunConfig{};
    return icfd::cfg::load_config_file(config_path);
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    RunConfig c = load_or_default(config_path);
    if (!out_dir.empty()) c.out_dir = out_dir;
    const icfd::data::SplitDataset split = icfd::train::prepare_dataset(c);
    icfd::train::TrainResult tr = icfd::train::train(c, split);
    icfd::eval::EvalReport rep = icfd::eval::evaluate(tr.models, split.test, 32, icfd::cfg::variant_name(c.variant));
    icfd::eval::RenderedReport rendered = icfd::eval::render_report({rep});
    std::cout << rendered.text;
    write_text(std::filesystem::path(c.out_dir) / "report.txt", rendered.text);
    write_text(std::filesystem::path(c.out_dir) / "report.csv", rendered.csv);
    std::cout << "checkpoint: " << (std::filesystem::path(c.out_dir) / "checkpoint.icfd").string() << '\n';
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir) {
    icfd::train::LoadedCheckpoint ck = icfd::train::load_checkpoint(checkpoint_path);
    icfd::data::Dataset ds;
    if (!data_dir.empty()) {
        const auto& dc = ck.models.config.dataset;
        const int resize = dc.kind == "synthetic" ? dc.spec.image_size : dc.resize;
        ds = icfd::data::load_folder(data_dir, resize);
    } else {
        ds = icfd::train::prepare_dataset(ck.models.config).test;
    }
    icfd::eval::EvalReport rep = icfd::eval::evaluate(ck.models, ds, 32, "eval");
    std::cout << icfd::eval::render_report({rep}).text;
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir, const std::string& backbone, int seeds) {
    RunConfig c = load_or_default(config_path);
    if (!out_dir.empty()) c.out_dir = out_dir;
    if (!backbone.empty()) c.classifier = backbone;
    icfd::eval::AblationResult res = icfd::eval::run_ablation(c, seeds);
    std::cout << res.rendered.text;
    write_text(std::filesystem::path(c.out_dir) / "report.txt", res.rendered.text);
    write_text(std::filesystem::path(c.out_dir) / "report.csv", res.rendered.csv);
    return 0;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
    RunConfig c = load_or_default(config_path);
    if (c.dataset.kind != "synthetic")
        throw icfd::ConfigError("gen-data: config must describe a synthetic dataset");
    const icfd::data::SplitDataset split = icfd::data::generate_synthetic(c.dataset.spec);
    icfd::data::export_dataset(split.train, std::filesystem::path(out_dir) / "train");
    icfd::data::export_dataset(split.test, std::filesystem::path(out_dir) / "test");
    std::cout << "wrote " << split.train.size() << " train / " << split.test.size() << " test images under "
              << out_dir << '\n';
    return 0;
}

int cmd_report(const std::string& out_dir) {
    const std::filesystem::path path = std::filesystem::path(out_dir) / "metrics.csv";
    std::ifstream in(path);
    if (!in) throw icfd::IoError("report: cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto records = icfd::train::parse_metrics_csv(text);
    if (records.empty()) throw icfd::IoError("report: no epochs in " + path.string());
    const int K = static_cast<int>(records.front().acc.size());
    std::printf("%5s %10s %10s %10s %10s", "epoch", "l_c", "l_s", "l_at", "total");
    for (int i = 0; i < K; ++i) std::printf(" %7s%d", "acc_", i);
    std::printf("\n");
    for (const auto& r : records) {
        std::printf("%5d %10.4f %10.4f %10.4f %10.4f", r.epoch, r.l_c, r.l_s, r.l_at, r.total);
        for (double a : r.acc) std::printf(" %8.3f", a);
        std::printf("\n");
    }
    const auto& last = records.back();
    std::printf("final epoch %d: total %.4f; eps", last.epoch, last.total);
    for (double e : last.eps_i) std::printf(" %.5f", e);
    std::printf("; beta");
    for (double b : last.beta_i) std::printf(" %.4f", b);
    std::printf("\n");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"feature-decoupling adversarial training workbench"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint_path, data_dir, backbone;
    int seeds = 5;

    CLI::App* train = app.add_subcommand("train", "train models from a config file");
    train->add_option("--config", config_path, "run config (JSON)");
    train->add_option("--out", out_dir, "output directory (overrides config)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "image folder (default: config's test split)");

    CLI::App* ablate = app.add_subcommand("ablate", "run the 3-variant ablation grid");
    ablate->add_option("--config", config_path, "run config (JSON)");
    ablate->add_option("--out", out_dir, "output directory (overrides config)");
    ablate->add_option("--backbone", backbone, "classifier backbone override");
    ablate->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);

    CLI::App* gen = app.add_subcommand("gen-data", "materialize a synthetic dataset");
    gen->add_option("--config", config_path, "run config (JSON)");
    gen->add_option("--out", out_dir, "destination directory")->required();

    CLI::App* report = app.add_subcommand("report", "render saved metrics");
    report->add_option("--out", out_dir, "run output directory containing metrics.csv")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, out_dir);
        if (eval->parsed()) return cmd_eval(checkpoint_path, data_dir);
        if (ablate->parsed()) return cmd_ablate(config_path, out_dir, backbone, seeds);
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir);
        if (report->parsed()) return cmd_report(out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
