#include "icfd/config.hpp"

#include <fstream>

#include "json.hpp"

namespace icfd::cfg {

using nlohmann::json;

namespace {

// Typo guard: every object in the config file may only carry known keys.
void check_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok) throw ConfigError(std::string("config: unknown key '") + key + "' in " + where);
    }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

json dataset_to_json(const DatasetConfig& d) {
    json j{{"kind", d.kind}};
    if (d.kind == "folder") {
        j["folder"] = d.folder;
        j["resize"] = d.resize;
        return j;
    }
    json diff = json::array();
    for (const auto& c : d.spec.difficulty)
        diff.push_back({{"grain", c.grain}, {"noise", c.noise}, {"brightness", c.brightness}});
    j["num_classes"] = d.spec.num_classes;
    j["counts"] = d.spec.counts;
    j["difficulty"] = diff;
    j["image_size"] = d.spec.image_size;
    j["seed"] = d.spec.seed;
    return j;
}

DatasetConfig dataset_from_json(const json& j) {
    check_keys(j, "dataset",
               {"kind", "folder", "resize", "num_classes", "counts", "difficulty", "image_size", "seed"});
    DatasetConfig d;
    get_to(j, "kind", d.kind);
    get_to(j, "folder", d.folder);
    get_to(j, "resize", d.resize);
    get_to(j, "num_classes", d.spec.num_classes);
    get_to(j, "counts", d.spec.counts);
    if (j.contains("difficulty")) {
        d.spec.difficulty.clear();
        for (const auto& e : j.at("difficulty")) {
            check_keys(e, "dataset.difficulty", {"grain", "noise", "brightness"});
            data::ClassDifficulty c;
            get_to(e, "grain", c.grain);
            get_to(e, "noise", c.noise);
            get_to(e, "brightness", c.brightness);
            d.spec.difficulty.push_back(c);
        }
    }
    get_to(j, "image_size", d.spec.image_size);
    get_to(j, "seed", d.spec.seed);
    return d;
}

json network_to_json(const net::IcfdConfig& n) {
    return json{{"base_width", n.base_width},
                {"depth", n.depth},
                {"block_down_steps", n.block_down_steps},
                {"attn_heads", n.attn_heads},
                {"dilation_rates", n.dilation_rates},
                {"pool_levels", n.pool_levels},
                {"feature_channels", n.feature_channels}};
}

net::IcfdConfig network_from_json(const json& j) {
    check_keys(j, "network",
               {"base_width", "depth", "block_down_steps", "attn_heads", "dilation_rates", "pool_levels",
                "feature_channels"});
    net::IcfdConfig n;
    get_to(j, "base_width", n.base_width);
    get_to(j, "depth", n.depth);
    get_to(j, "block_down_steps", n.block_down_steps);
    get_to(j, "attn_heads", n.attn_heads);
    get_to(j, "dilation_rates", n.dilation_rates);
    get_to(j, "pool_levels", n.pool_levels);
    get_to(j, "feature_channels", n.feature_channels);
    return n;
}

} // namespace

const char* variant_name(Variant v) {
    switch (v) {
    case Variant::backbone: return "backbone";
    case Variant::decoupled: return "decoupled";
    default: return "full";
    }
}

Variant variant_from_name(const std::string& s) {
    if (s == "backbone") return Variant::backbone;
    if (s == "decoupled") return Variant::decoupled;
    if (s == "full") return Variant::full;
    throw ConfigError("config: unknown variant '" + s + "' (expected backbone, decoupled, or full)");
}

std::string dump_run_config(const RunConfig& c) {
    json j{{"dataset", dataset_to_json(c.dataset)},
           {"network", network_to_json(c.network)},
           {"classifier", {{"name", c.classifier}, {"width", c.classifier_width}}},
           {"loss",
            {{"lambda1", c.weights.lambda1},
             {"lambda2", c.weights.lambda2},
             {"lambda3", c.weights.lambda3},
             {"xi", c.weights.xi}}},
           {"schedule",
            {{"epsilon", c.schedule.epsilon},
             {"beta", c.schedule.beta},
             {"sigma", c.schedule.sigma},
             {"mu", c.schedule.mu},
             {"adaptive", c.schedule.adaptive}}},
           {"attack",
            {{"steps", c.attack.steps},
             {"step_fraction", c.attack.step_fraction},
             {"random_init", c.attack.random_init}}},
           {"optimizer",
            {{"lr", c.optimizer.lr},
             {"momentum", c.optimizer.momentum},
             {"epochs", c.optimizer.epochs},
             {"batch_size", c.optimizer.batch_size}}},
           {"seed", c.seed},
           {"out_dir", c.out_dir},
           {"variant", variant_name(c.variant)}};
    return j.dump(2);
}

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(j, "config root",
               {"dataset", "network", "classifier", "loss", "schedule", "attack", "optimizer", "seed", "out_dir",
                "variant"});
    RunConfig c;
    if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("network")) c.network = network_from_json(j.at("network"));
    if (j.contains("classifier")) {
        const json& jc = j.at("classifier");
        check_keys(jc, "classifier", {"name", "width"});
        get_to(jc, "name", c.classifier);
        get_to(jc, "width", c.classifier_width);
    }
    if (j.contains("loss")) {
        const json& jl = j.at("loss");
        check_keys(jl, "loss", {"lambda1", "lambda2", "lambda3", "xi"});
        get_to(jl, "lambda1", c.weights.lambda1);
        get_to(jl, "lambda2", c.weights.lambda2);
        get_to(jl, "lambda3", c.weights.lambda3);
        get_to(jl, "xi", c.weights.xi);
    }
    if (j.contains("schedule")) {
        const json& js = j.at("schedule");
        check_keys(js, "schedule", {"epsilon", "beta", "sigma", "mu", "adaptive"});
        get_to(js, "epsilon", c.schedule.epsilon);
        get_to(js, "beta", c.schedule.beta);
        get_to(js, "sigma", c.schedule.sigma);
        get_to(js, "mu", c.schedule.mu);
        get_to(js, "adaptive", c.schedule.adaptive);
    }
    if (j.contains("attack")) {
        const json& ja = j.at("attack");
        check_keys(ja, "attack", {"steps", "step_fraction", "random_init"});
        get_to(ja, "steps", c.attack.steps);
        get_to(ja, "step_fraction", c.attack.step_fraction);
        get_to(ja, "random_init", c.attack.random_init);
    }
    if (j.contains("optimizer")) {
        const json& jo = j.at("optimizer");
        check_keys(jo, "optimizer", {"lr", "momentum", "epochs", "batch_size"});
        get_to(jo, "lr", c.optimizer.lr);
        get_to(jo, "momentum", c.optimizer.momentum);
        get_to(jo, "epochs", c.optimizer.epochs);
        get_to(jo, "batch_size", c.optimizer.batch_size);
    }
    get_to(j, "seed", c.seed);
    get_to(j, "out_dir", c.out_dir);
    if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
    c.validate();
    return c;
}

RunConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

void save_config_file(const RunConfig& c, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("config: cannot write " + path.string());
    out << dump_run_config(c) << '\n';
}

} // namespace icfd::cfg
