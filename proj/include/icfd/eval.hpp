#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "icfd/trainer.hpp"

namespace icfd::eval {

// Percent value rounded to 2 decimals; reports store the rounded values so
// text, CSV, and in-memory representations agree exactly.
inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

struct EvalReport {
    std::string label;
    std::vector<double> per_class; // percent, 2 decimals; NaN when the class is absent
    std::vector<std::int64_t> class_counts;
    double average = 0; // micro accuracy (total correct / total), percent
    double gap = 0;     // max - min per-class percent over present classes
    std::vector<std::vector<std::int64_t>> confusion; // [true][predicted]

    int num_classes() const { return static_cast<int>(per_class.size()); }
};

// Best-worst spread of already-rounded per-class percentages.
double gap_from_per_class(const std::vector<double>& per_class);

// Unweighted mean of per-class percentages (NOT what `average` reports).
double macro_mean(const std::vector<double>& per_class);

EvalReport report_from_confusion(std::vector<std::vector<std::int64_t>> confusion, std::string label);

// Clean-input predictions via argmax of classifier logits.
EvalReport evaluate(const train::ModelSet& m, const data::Dataset& ds, int batch_size = 32,
                    std::string label = "eval");

struct RenderedReport {
    std::string text;
    std::string csv;
};

// Fixed-width table plus a CSV carrying identical values.
RenderedReport render_report(const std::vector<EvalReport>& reports);

struct AblationResult {
    std::vector<EvalReport> rows;      // seed x variant, then per-variant aggregates
    std::vector<EvalReport> aggregate; // one per variant, summed confusions
    RenderedReport rendered;
};

// Trains and evaluates the three variants (backbone, decoupled, full) on a
// shared dataset for each seed, then aggregates per variant and reports
// average/gap deltas against the backbone row.
AblationResult run_ablation(const cfg::RunConfig& base, int seeds);

} // namespace icfd::eval
