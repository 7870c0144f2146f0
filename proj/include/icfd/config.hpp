#pragma once

#include <filesystem>
#include <string>

#include "icfd/attack.hpp"
#include "icfd/data.hpp"
#include "icfd/losses.hpp"
#include "icfd/net.hpp"
#include "icfd/schedule.hpp"

namespace icfd::cfg {

struct OptimizerConfig {
    // the decoupler has no normalization layers; 1e-2 with momentum 0.9
    // overshoots it at this scale, 3e-3 is stable across all variants
    double lr = 3e-3;
    double momentum = 0.9;
    int epochs = 30;
    int batch_size = 16;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("optimizer: lr must be > 0");
        if (momentum < 0 || momentum >= 1) throw ConfigError("optimizer: momentum must lie in [0,1)");
        if (epochs < 1) throw ConfigError("optimizer: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("optimizer: batch size must be >= 1");
    }
};

struct DatasetConfig {
    std::string kind = "synthetic"; // "synthetic" | "folder"
    std::string folder;
    int resize = 0;
    data::DatasetSpec spec;

    void validate() const {
        if (kind == "synthetic") {
            spec.validate();
        } else if (kind == "folder") {
            if (folder.empty()) throw ConfigError("dataset: folder kind needs a path");
            if (resize < 0) throw ConfigError("dataset: resize must be >= 0");
        } else {
            throw ConfigError("dataset: kind must be 'synthetic' or 'folder', got '" + kind + "'");
        }
    }
};

// Ablation variants: backbone = classifier on raw luma; decoupled = full
// pipeline without adversarial perturbation; full = the whole method.
enum class Variant { backbone, decoupled, full };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& s);

struct RunConfig {
    DatasetConfig dataset;
    net::IcfdConfig network;
    std::string classifier = "small-resnet";
    int classifier_width = 16;
    loss::LossWeights weights;
    adv::ScheduleConfig schedule;
    adv::AttackConfig attack;
    OptimizerConfig optimizer;
    std::uint64_t seed = 1;
    std::string out_dir = "runs/run";
    Variant variant = Variant::full;

    void validate() const {
        dataset.validate();
        network.validate();
        weights.validate();
        schedule.validate();
        attack.validate();
        optimizer.validate();
        if (classifier_width < 2) throw ConfigError("classifier width must be >= 2");
    }
};

// JSON text round-trips: parse(dump(c)) == c field-for-field, and dump is
// deterministic (sorted keys), which checkpointing relies on.
std::string dump_run_config(const RunConfig& c);
RunConfig parse_run_config(const std::string& text);

RunConfig load_config_file(const std::filesystem::path& path);
void save_config_file(const RunConfig& c, const std::filesystem::path& path);

} // namespace icfd::cfg
