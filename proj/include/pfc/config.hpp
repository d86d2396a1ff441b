#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pfc/datasynth.hpp"
#include "pfc/error.hpp"
#include "pfc/margin.hpp"
#include "pfc/trainer.hpp"

namespace pfc {

// Sectioned key-value experiment configuration. Every field has a default,
// every file key must be known, and the effective config is echoed into
// the run directory for provenance.
struct ExperimentConfig {
    uint64_t seed = 1;

    // [data]
    std::string data_kind = "clean";  // clean | conflict | flip | longtail
    int64_t identities = 600;
    int64_t samples_min = 8;
    int64_t samples_max = 14;
    int64_t data_dim = 64;
    double noise = 0.1;
    int64_t split_identities = 200;
    int64_t split_into = 600;
    double flip_ratio = 0.4;
    int64_t head_count = 60;
    int64_t tail_min = 2;
    int64_t tail_max = 4;
    std::string data_path;  // dataset file consumed by train

    // [model]
    int64_t embed_dim = 64;
    int64_t hidden_dim = 96;

    // [pfc]
    double r = 1.0;
    int64_t shards = 1;
    std::string margin_name = "cosface-style";
    double margin_scale = std::nan("");  // per-kind default when unset
    double margin_m = std::nan("");
    double filter_threshold = 0.0;  // 0 = off
    double momentum = 0.9;
    double weight_decay = 5e-4;

    // [schedule]
    double base_lr = 0.05;
    double warmup_epochs = 2.0;
    int64_t epochs = 15;
    double power = 2.0;
    int64_t batch = 48;
    int64_t eval_every = 50;
    int64_t stop_after_step = 0;
    double eval_fraction = 0.1;
    double far_target = 1e-2;

    // [output]
    std::string out_dir;
    bool resume = false;

    // [bench]
    std::vector<int64_t> bench_shard_counts{8, 16, 32, 64};
    int64_t bench_classes_per_shard = 125000;
    int64_t bench_batch_per_worker = 128;
    int64_t bench_dim = 512;
    double bench_r = 0.1;
    int64_t bench_width_bytes = 2;

    MarginConfig margin() const {
        MarginConfig m;
        m.kind = margin_kind_from_name(margin_name);
        switch (m.kind) {
            case MarginKind::plain:
                m.scale = 1.0;
                m.margin = 0.0;
                break;
            case MarginKind::additive_cosine:
                m.scale = std::isnan(margin_scale) ? 64.0 : margin_scale;
                m.margin = std::isnan(margin_m) ? 0.4 : margin_m;
                break;
            case MarginKind::additive_angular:
                m.scale = std::isnan(margin_scale) ? 64.0 : margin_scale;
                m.margin = std::isnan(margin_m) ? 0.5 : margin_m;
                break;
        }
        m.validate();
        return m;
    }

    SynthConfig synth() const {
        SynthConfig s;
        s.num_identities = identities;
        s.samples_min = samples_min;
        s.samples_max = samples_max;
        s.dim = data_dim;
        s.noise = noise;
        s.seed = seed;
        return s;
    }

    TrainConfig trainer() const {
        TrainConfig t;
        t.r = r;
        t.margin = margin();
        if (filter_threshold > 0.0) t.filter_threshold = filter_threshold;
        t.shards = shards;
        t.batch = batch;
        t.epochs = epochs;
        t.seed = seed;
        t.eval_every = eval_every;
        t.hidden_dim = hidden_dim;
        t.embed_dim = embed_dim;
        t.base_lr = base_lr;
        t.warmup_epochs = warmup_epochs;
        t.power = power;
        t.momentum = momentum;
        t.weight_decay = weight_decay;
        t.eval_fraction = eval_fraction;
        t.far_target = far_target;
        t.stop_after_step = stop_after_step;
        t.resume = resume;
        return t;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline int64_t parse_int(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const int64_t v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + value + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + value + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" + value + "'");
}

inline std::vector<int64_t> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int64_t> out;
    std::istringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
    if (out.empty()) throw ConfigError("config: key '" + key + "' expects a list");
    return out;
}

} // namespace detail

// Parses the sectioned key=value text. Unknown sections or keys are
// rejected with the offending name.
inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream lines(text);
    std::string raw;
    std::string section;
    int lineno = 0;
    while (std::getline(lines, raw)) {
        ++lineno;
        std::string line = raw;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("config line " + std::to_string(lineno) + ": bad section header");
            }
            section = line.substr(1, line.size() - 2);
            if (section != "data" && section != "model" && section != "pfc" &&
                section != "schedule" && section != "output" && section != "bench") {
                throw ConfigError("config: unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        const std::string qualified = section.empty() ? key : section + "." + key;

        if (qualified == "seed") cfg.seed = static_cast<uint64_t>(detail::parse_int(key, value));
        else if (qualified == "data.kind") cfg.data_kind = value;
        else if (qualified == "data.identities") cfg.identities = detail::parse_int(key, value);
        else if (qualified == "data.samples_min") cfg.samples_min = detail::parse_int(key, value);
        else if (qualified == "data.samples_max") cfg.samples_max = detail::parse_int(key, value);
        else if (qualified == "data.dim") cfg.data_dim = detail::parse_int(key, value);
        else if (qualified == "data.noise") cfg.noise = detail::parse_double(key, value);
        else if (qualified == "data.split_identities") cfg.split_identities = detail::parse_int(key, value);
        else if (qualified == "data.split_into") cfg.split_into = detail::parse_int(key, value);
        else if (qualified == "data.flip_ratio") cfg.flip_ratio = detail::parse_double(key, value);
        else if (qualified == "data.head_count") cfg.head_count = detail::parse_int(key, value);
        else if (qualified == "data.tail_min") cfg.tail_min = detail::parse_int(key, value);
        else if (qualified == "data.tail_max") cfg.tail_max = detail::parse_int(key, value);
        else if (qualified == "data.path") cfg.data_path = value;
        else if (qualified == "model.embed_dim") cfg.embed_dim = detail::parse_int(key, value);
        else if (qualified == "model.hidden_dim") cfg.hidden_dim = detail::parse_int(key, value);
        else if (qualified == "pfc.r") cfg.r = detail::parse_double(key, value);
        else if (qualified == "pfc.shards") cfg.shards = detail::parse_int(key, value);
        else if (qualified == "pfc.margin") cfg.margin_name = value;
        else if (qualified == "pfc.scale") cfg.margin_scale = detail::parse_double(key, value);
        else if (qualified == "pfc.margin_m") cfg.margin_m = detail::parse_double(key, value);
        else if (qualified == "pfc.filter_threshold") cfg.filter_threshold = detail::parse_double(key, value);
        else if (qualified == "pfc.momentum") cfg.momentum = detail::parse_double(key, value);
        else if (qualified == "pfc.weight_decay") cfg.weight_decay = detail::parse_double(key, value);
        else if (qualified == "schedule.base_lr") cfg.base_lr = detail::parse_double(key, value);
        else if (qualified == "schedule.warmup_epochs") cfg.warmup_epochs = detail::parse_double(key, value);
        else if (qualified == "schedule.epochs") cfg.epochs = detail::parse_int(key, value);
        else if (qualified == "schedule.power") cfg.power = detail::parse_double(key, value);
        else if (qualified == "schedule.batch") cfg.batch = detail::parse_int(key, value);
        else if (qualified == "schedule.eval_every") cfg.eval_every = detail::parse_int(key, value);
        else if (qualified == "schedule.stop_after_step") cfg.stop_after_step = detail::parse_int(key, value);
        else if (qualified == "schedule.eval_fraction") cfg.eval_fraction = detail::parse_double(key, value);
        else if (qualified == "schedule.far_target") cfg.far_target = detail::parse_double(key, value);
        else if (qualified == "output.dir") cfg.out_dir = value;
        else if (qualified == "output.resume") cfg.resume = detail::parse_bool(key, value);
        else if (qualified == "bench.shard_counts") cfg.bench_shard_counts = detail::parse_int_list(key, value);
        else if (qualified == "bench.classes_per_shard") cfg.bench_classes_per_shard = detail::parse_int(key, value);
        else if (qualified == "bench.batch_per_worker") cfg.bench_batch_per_worker = detail::parse_int(key, value);
        else if (qualified == "bench.dim") cfg.bench_dim = detail::parse_int(key, value);
        else if (qualified == "bench.r") cfg.bench_r = detail::parse_double(key, value);
        else if (qualified == "bench.width_bytes") cfg.bench_width_bytes = detail::parse_int(key, value);
        else {
            throw ConfigError("config: unknown key '" + qualified + "'");
        }
    }
    return cfg;
}

// Canonical serialization of the effective config; what run directories
// record for provenance.
inline std::string config_text(const ExperimentConfig& c) {
    std::ostringstream o;
    o.precision(17);
    o << "seed = " << c.seed << "\n\n";
    o << "[data]\n";
    o << "kind = " << c.data_kind << "\n";
    o << "identities = " << c.identities << "\n";
    o << "samples_min = " << c.samples_min << "\n";
    o << "samples_max = " << c.samples_max << "\n";
    o << "dim = " << c.data_dim << "\n";
    o << "noise = " << c.noise << "\n";
    o << "split_identities = " << c.split_identities << "\n";
    o << "split_into = " << c.split_into << "\n";
    o << "flip_ratio = " << c.flip_ratio << "\n";
    o << "head_count = " << c.head_count << "\n";
    o << "tail_min = " << c.tail_min << "\n";
    o << "tail_max = " << c.tail_max << "\n";
    if (!c.data_path.empty()) o << "path = " << c.data_path << "\n";
    o << "\n[model]\n";
    o << "embed_dim = " << c.embed_dim << "\n";
    o << "hidden_dim = " << c.hidden_dim << "\n";
    o << "\n[pfc]\n";
    o << "r = " << c.r << "\n";
    o << "shards = " << c.shards << "\n";
    o << "margin = " << c.margin_name << "\n";
    const MarginConfig m = c.margin();
    o << "scale = " << m.scale << "\n";
    o << "margin_m = " << m.margin << "\n";
    o << "filter_threshold = " << c.filter_threshold << "\n";
    o << "momentum = " << c.momentum << "\n";
    o << "weight_decay = " << c.weight_decay << "\n";
    o << "\n[schedule]\n";
    o << "base_lr = " << c.base_lr << "\n";
    o << "warmup_epochs = " << c.warmup_epochs << "\n";
    o << "epochs = " << c.epochs << "\n";
    o << "power = " << c.power << "\n";
    o << "batch = " << c.batch << "\n";
    o << "eval_every = " << c.eval_every << "\n";
    o << "stop_after_step = " << c.stop_after_step << "\n";
    o << "eval_fraction = " << c.eval_fraction << "\n";
    o << "far_target = " << c.far_target << "\n";
    o << "\n[output]\n";
    if (!c.out_dir.empty()) o << "dir = " << c.out_dir << "\n";
    o << "resume = " << (c.resume ? "true" : "false") << "\n";
    o << "\n[bench]\n";
    o << "shard_counts = ";
    for (size_t i = 0; i < c.bench_shard_counts.size(); ++i) {
        if (i) o << ",";
        o << c.bench_shard_counts[i];
    }
    o << "\n";
    o << "classes_per_shard = " << c.bench_classes_per_shard << "\n";
    o << "batch_per_worker = " << c.bench_batch_per_worker << "\n";
    o << "dim = " << c.bench_dim << "\n";
    o << "r = " << c.bench_r << "\n";
    o << "width_bytes = " << c.bench_width_bytes << "\n";
    return o.str();
}

// Applies the corruption protocol named by [data].kind.
inline SyntheticDataset build_dataset(const ExperimentConfig& cfg) {
    const SyntheticDataset clean = generate(cfg.synth());
    if (cfg.data_kind == "clean") return clean;
    if (cfg.data_kind == "conflict") {
        SeededRng rng(cfg.seed, make_stream("conflict-split"));
        return conflict_split(clean, cfg.split_identities, cfg.split_into, rng);
    }
    if (cfg.data_kind == "flip") {
        SeededRng rng(cfg.seed, make_stream("flip-noise"));
        return flip_labels(clean, cfg.flip_ratio, rng);
    }
    if (cfg.data_kind == "longtail") {
        SeededRng rng(cfg.seed, make_stream("longtail"));
        return longtail_condense(clean, cfg.head_count, cfg.tail_min, cfg.tail_max, rng);
    }
    throw ConfigError("config: unknown data kind '" + cfg.data_kind +
                      "' (expected clean, conflict, flip, or longtail)");
}

} // namespace pfc
