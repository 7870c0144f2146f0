#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "icfd/config.hpp"
#include "icfd/models.hpp"

namespace icfd::train {

using cfg::RunConfig;
using cfg::Variant;

// The trainable ensemble: two decoupler instances (absent in the backbone
// variant) plus the classifier, with one flat union of their parameters.
struct ModelSet {
    RunConfig config;
    int num_classes = 0;
    std::optional<net::ICFDNet<float>> ic1; // specific head (class scores)
    std::optional<net::ICFDNet<float>> ic2; // common head (reconstruction)
    std::unique_ptr<models::Classifier<float>> classifier;
    nn::ParamList<float> all_params;

    ModelSet() = default;
    ModelSet(ModelSet&&) = default;
    ModelSet& operator=(ModelSet&&) = default;
    ModelSet(const ModelSet&) = delete;
    ModelSet& operator=(const ModelSet&) = delete;

    bool has_decouplers() const { return config.variant != Variant::backbone; }
    int classifier_in_channels() const {
        return has_decouplers() ? 2 * config.network.feature_channels + 1 : 1;
    }
};

ModelSet build_models(const RunConfig& config, int num_classes);

struct StepResult {
    double l_c = 0, l_s = 0, l_at = 0, total = 0;
    std::vector<int> adv_predictions; // feeds the per-class accuracy tracker
};

// One minibatch of the training loop: decouple, concatenate, attack under the
// frozen class schedule, combine the losses, and apply one optimizer update
// over the union of all parameters.
StepResult train_step(ModelSet& m, nn::SgdMomentum<float>& opt, const Tensor<float>& images,
                      const std::vector<int>& labels, const adv::ClassState& state, std::uint64_t attack_seed);

// Classifier logits on the clean combined input (no parameter updates).
Tensor<float> clean_logits(const ModelSet& m, const Tensor<float>& images);

struct EpochRecord {
    int epoch = 0;
    double l_c = 0, l_s = 0, l_at = 0, total = 0;
    std::vector<double> acc, eps_i, beta_i;
    double seconds = 0;
};

std::string metrics_csv_header(int num_classes);
std::string metrics_csv_row(const EpochRecord& r);
std::vector<EpochRecord> parse_metrics_csv(const std::string& text);

// Synthetic specs are generated (already split); folders are loaded and
// split 2:1 per class in stable order.
data::SplitDataset prepare_dataset(const RunConfig& config);

struct TrainResult {
    ModelSet models;
    adv::ClassState state;
    std::vector<EpochRecord> records;
};

// Full training loop. Writes config.json, metrics.csv, and checkpoint.icfd
// under config.out_dir; the checkpoint is refreshed after every completed
// epoch, so a numeric abort leaves the last good epoch on disk.
TrainResult train(const RunConfig& config);
TrainResult train(const RunConfig& config, const data::SplitDataset& split);

void save_checkpoint(const std::filesystem::path& path, const ModelSet& m, const adv::ClassState& state);

struct LoadedCheckpoint {
    ModelSet models;
    adv::ClassState state;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

} // namespace icfd::train
