#include "icfd/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <sstream>

namespace icfd::eval {

double gap_from_per_class(const std::vector<double>& per_class) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : per_class) {
        if (std::isnan(v)) continue;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!std::isfinite(lo)) return 0.0;
    return round2(hi - lo);
}

double macro_mean(const std::vector<double>& per_class) {
    double sum = 0;
    int n = 0;
    for (double v : per_class) {
        if (std::isnan(v)) continue;
        sum += v;
        ++n;
    }
    return n == 0 ? 0.0 : round2(sum / n);
}

EvalReport report_from_confusion(std::vector<std::vector<std::int64_t>> confusion, std::string label) {
    const int K = static_cast<int>(confusion.size());
    EvalReport r;
    r.label = std::move(label);
    r.confusion = std::move(confusion);
    std::int64_t total = 0, correct = 0;
    for (int i = 0; i < K; ++i) {
        if (static_cast<int>(r.confusion[i].size()) != K) throw ShapeError("report: confusion matrix must be square");
        std::int64_t row = 0;
        for (std::int64_t v : r.confusion[i]) row += v;
        r.class_counts.push_back(row);
        r.per_class.push_back(row == 0 ? std::numeric_limits<double>::quiet_NaN()
                                       : round2(100.0 * static_cast<double>(r.confusion[i][i]) /
                                                static_cast<double>(row)));
        total += row;
        correct += r.confusion[i][i];
    }
    r.average = total == 0 ? 0.0 : round2(100.0 * static_cast<double>(correct) / static_cast<double>(total));
    r.gap = gap_from_per_class(r.per_class);
    return r;
}

EvalReport evaluate(const train::ModelSet& m, const data::Dataset& ds, int batch_size, std::string label) {
    if (ds.size() == 0) throw ConfigError("evaluate: empty dataset");
    const int K = m.num_classes;
    std::vector<std::vector<std::int64_t>> confusion(static_cast<std::size_t>(K),
                                                     std::vector<std::int64_t>(static_cast<std::size_t>(K), 0));
    for (int start = 0; start < ds.size(); start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
        Tensor<float> logits = train::clean_logits(m, data::stack_images<float>(ds, idx));
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const int y = ds.items[idx[b]].label;
            if (y < 0 || y >= K) throw DomainError("evaluate: label " + std::to_string(y) + " out of range");
            int best = 0;
            for (int k = 1; k < K; ++k)
                if (logits.at2(static_cast<int>(b), k) > logits.at2(static_cast<int>(b), best)) best = k;
            ++confusion[y][best];
        }
    }
    return report_from_confusion(std::move(confusion), std::move(label));
}

namespace {

std::string fmt2(double v) {
    if (std::isnan(v)) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

} // namespace

RenderedReport render_report(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw ConfigError("render_report: need at least one report");
    const int K = reports.front().num_classes();
    for (const auto& r : reports)
        if (r.num_classes() != K) throw ShapeError("render_report: reports disagree on class count");

    std::size_t label_w = 5;
    for (const auto& r : reports) label_w = std::max(label_w, r.label.size());

    std::ostringstream text, csv;
    csv << "label,n";
    for (int k = 0; k < K; ++k) csv << ",class_" << k;
    csv << ",average,gap\n";

    std::vector<std::string> headers{"n"};
    for (int k = 0; k < K; ++k) headers.push_back("class_" + std::to_string(k));
    headers.push_back("average");
    headers.push_back("gap");

    const int col_w = 9;
    text << std::string(label_w, ' ');
    for (const auto& h : headers) {
        text << ' ' << std::string(col_w > static_cast<int>(h.size()) ? col_w - h.size() : 0, ' ') << h;
    }
    text << '\n';

    for (const auto& r : reports) {
        std::int64_t n = 0;
        for (std::int64_t c : r.class_counts) n += c;
        std::vector<std::string> cells{std::to_string(n)};
        for (double v : r.per_class) cells.push_back(fmt2(v));
        cells.push_back(fmt2(r.average));
        cells.push_back(fmt2(r.gap));

        text << r.label << std::string(label_w - r.label.size(), ' ');
        for (const auto& cell : cells)
            text << ' ' << std::string(col_w > static_cast<int>(cell.size()) ? col_w - cell.size() : 0, ' ') << cell;
        text << '\n';

        csv << r.label << ',' << n;
        for (double v : r.per_class) csv << ',' << (std::isnan(v) ? "" : fmt2(v));
        csv << ',' << fmt2(r.average) << ',' << fmt2(r.gap) << '\n';
    }
    return RenderedReport{text.str(), csv.str()};
}

AblationResult run_ablation(const cfg::RunConfig& base, int seeds) {
    if (seeds < 1) throw ConfigError("run_ablation: seeds must be >= 1");
    const data::SplitDataset split = train::prepare_dataset(base);
    const cfg::Variant variants[] = {cfg::Variant::backbone, cfg::Variant::decoupled, cfg::Variant::full};

    AblationResult out;
    std::vector<std::vector<std::vector<std::int64_t>>> summed(3);
    for (int s = 0; s < seeds; ++s) {
        for (int v = 0; v < 3; ++v) {
            cfg::RunConfig c = base;
            c.seed = base.seed + static_cast<std::uint64_t>(s);
            c.variant = variants[v];
            c.out_dir = base.out_dir + "/seed" + std::to_string(s) + "_" + cfg::variant_name(variants[v]);
            train::TrainResult tr = train::train(c, split);
            EvalReport rep = evaluate(tr.models, split.test, 32,
                                      "seed" + std::to_string(s) + "/" + cfg::variant_name(variants[v]));
            if (summed[v].empty())
                summed[v] = rep.confusion;
            else
                for (std::size_t i = 0; i < rep.confusion.size(); ++i)
                    for (std::size_t j = 0; j < rep.confusion[i].size(); ++j) summed[v][i][j] += rep.confusion[i][j];
            out.rows.push_back(std::move(rep));
        }
    }
    for (int v = 0; v < 3; ++v)
        out.aggregate.push_back(
            report_from_confusion(summed[v], std::string("all/") + cfg::variant_name(variants[v])));

    std::vector<EvalReport> everything = out.rows;
    everything.insert(everything.end(), out.aggregate.begin(), out.aggregate.end());
    out.rendered = render_report(everything);

    std::ostringstream deltas;
    const EvalReport& ref = out.aggregate[0];
    deltas << "\ndeltas vs " << ref.label << ":\n";
    for (int v = 1; v < 3; ++v) {
        const EvalReport& r = out.aggregate[v];
        deltas << "  " << r.label << ": average " << (r.average >= ref.average ? "+" : "")
               << fmt2(round2(r.average - ref.average)) << ", gap " << (r.gap >= ref.gap ? "+" : "")
               << fmt2(round2(r.gap - ref.gap)) << '\n';
    }
    out.rendered.text += deltas.str();
    return out;
}

} // namespace icfd::eval
