// Batch front door: dataset synthesis, experiment runs, cost tables, and
// run-comparison reports. Everything is config-file driven; flags override
// file values; results are deterministic given (config, seed).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pfc/config.hpp"
#include "pfc/costmodel.hpp"
#include "pfc/datasynth.hpp"
#include "pfc/error.hpp"
#include "pfc/trainer.hpp"

namespace fs = std::filesystem;
using namespace pfc;

namespace {

struct Overrides {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<double> r;
    std::optional<int64_t> shards;
    std::optional<int64_t> batch;
    std::optional<double> filter_threshold;
    std::optional<std::string> margin;
    std::optional<std::string> out;
};

void add_common_flags(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--config", ov.config_path, "experiment config file");
    cmd->add_option("--seed", ov.seed, "global seed");
    cmd->add_option("--r", ov.r, "sampling ratio in (0, 1]");
    cmd->add_option("--shards", ov.shards, "number of simulated workers");
    cmd->add_option("--batch", ov.batch, "total batch size");
    cmd->add_option("--filter-threshold", ov.filter_threshold,
                    "abnormal inter-class filter threshold (0 disables)");
    cmd->add_option("--margin", ov.margin, "plain, cosface-style, or arcface-style")
        ->check(CLI::IsMember({"plain", "cosface-style", "arcface-style"}));
    cmd->add_option("--out", ov.out, "output directory");
}

ExperimentConfig load_config(const Overrides& ov) {
    ExperimentConfig cfg;
    if (!ov.config_path.empty()) {
        std::ifstream in(ov.config_path);
        if (!in) throw ConfigError("cannot read config file: " + ov.config_path);
        std::ostringstream text;
        text << in.rdbuf();
        cfg = parse_config_text(text.str());
    }
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.r) cfg.r = *ov.r;
    if (ov.shards) cfg.shards = *ov.shards;
    if (ov.batch) cfg.batch = *ov.batch;
    if (ov.filter_threshold) cfg.filter_threshold = *ov.filter_threshold;
    if (ov.margin) cfg.margin_name = *ov.margin;
    if (ov.out) cfg.out_dir = *ov.out;
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write: " + path.string());
    out << text;
    if (!out) throw DataError("write failed: " + path.string());
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ------------------------------------------------------------------ synth

int cmd_synth(const Overrides& ov) {
    const ExperimentConfig cfg = load_config(ov);
    if (cfg.out_dir.empty()) throw ConfigError("synth: --out (or [output] dir) is required");
    const SyntheticDataset ds = build_dataset(cfg);

    fs::create_directories(cfg.out_dir);
    const fs::path dir(cfg.out_dir);
    save_dataset(ds, (dir / "dataset.bin").string());
    write_text(dir / "dataset.summary.txt", dataset_summary(ds));
    write_text(dir / "config.ini", config_text(cfg));
    std::cout << (dir / "dataset.bin").string() << "\n";
    return exit_code::ok;
}

// ------------------------------------------------------------------ train

constexpr int kSummarySchema = 1;

struct FileSink : TrainSink {
    std::ofstream out;
    explicit FileSink(const fs::path& path, bool append)
        : out(path, append ? std::ios::app : std::ios::trunc) {
        if (!out) throw DataError("cannot open metrics stream: " + path.string());
    }
    void metrics_line(const std::string& line) override { out << line << "\n"; }
};

// Keeps only the first `lines` lines; resume replays nothing that the
// checkpoint already covers.
void truncate_lines(const fs::path& path, int64_t lines) {
    std::ifstream in(path);
    if (!in) throw DataError("resume: missing metrics stream " + path.string());
    std::string kept;
    std::string line;
    for (int64_t i = 0; i < lines && std::getline(in, line); ++i) kept += line + "\n";
    in.close();
    write_text(path, kept);
}

std::string summary_csv(const ExperimentConfig& cfg, const TrainResult& res,
                        const std::string& run_id) {
    const DiagnosticsSnapshot& last = res.diagnostics.back();
    std::ostringstream o;
    o << "schema_version,run,seed,r,shards,batch,epochs,margin,scale,margin_m,"
         "filter_threshold,steps,mean_loss,final_loss,final_apcs,final_amncs,"
         "final_amncs_conflicted,final_amncs_hard,mics_max,train_accuracy,tar,far_target\n";
    const MarginConfig m = cfg.margin();
    o << kSummarySchema << ',' << run_id << ',' << cfg.seed << ',' << format_double(cfg.r)
      << ',' << cfg.shards << ',' << cfg.batch << ',' << cfg.epochs << ',' << cfg.margin_name
      << ',' << format_double(m.scale) << ',' << format_double(m.margin) << ','
      << format_double(cfg.filter_threshold) << ',' << res.steps_run << ','
      << format_double(res.mean_loss) << ',' << format_double(res.final_loss) << ','
      << format_double(last.apcs) << ',' << format_double(last.amncs) << ','
      << (last.amncs_conflicted ? format_double(*last.amncs_conflicted) : "") << ','
      << (last.amncs_hard ? format_double(*last.amncs_hard) : "") << ','
      << format_double(res.mics_max) << ',' << format_double(res.train_accuracy) << ','
      << (res.verification ? format_double(res.verification->tar) : "") << ','
      << (res.verification ? format_double(res.verification->far_target) : "") << "\n";
    return o.str();
}

std::string verdicts_csv(const ExperimentConfig& cfg, const TrainResult& res,
                         int64_t expected_steps) {
    std::ostringstream o;
    o << "property,status,detail\n";
    o << "loss_finite," << (std::isfinite(res.final_loss) ? "PASS" : "FAIL") << ",final_loss="
      << format_double(res.final_loss) << "\n";
    o << "epoch_accounting," << (res.steps_run == expected_steps ? "PASS" : "FAIL")
      << ",expected=" << expected_steps << ";actual=" << res.steps_run << "\n";
    o << "verification_feasible," << (res.verification ? "PASS" : "FAIL") << ",far_target="
      << format_double(cfg.far_target) << "\n";
    return o.str();
}

int cmd_train(const Overrides& ov) {
    const ExperimentConfig cfg = load_config(ov);
    if (cfg.data_path.empty()) throw ConfigError("train: [data] path is required");
    if (cfg.out_dir.empty()) throw ConfigError("train: --out (or [output] dir) is required");

    // load before touching the filesystem: a missing dataset must not
    // leave a partial run directory behind
    const SyntheticDataset ds = load_dataset(cfg.data_path);
    if (ds.num_classes() < 2) throw DataError("train: dataset has fewer than 2 classes");

    const fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    const fs::path metrics_path = dir / "metrics.jsonl";
    const fs::path checkpoint_path = dir / "checkpoint.bin";

    TrainConfig t = cfg.trainer();
    t.checkpoint_path = checkpoint_path.string();
    if (cfg.resume) {
        truncate_lines(metrics_path, detail::peek_checkpoint_metrics_lines(t.checkpoint_path));
    }
    FileSink sink(metrics_path, cfg.resume);

    const TrainResult res = train(ds, t, &sink);
    write_text(dir / "config.ini", config_text(cfg));
    if (res.stopped_early) {
        std::cout << "stopped after " << res.steps_run << " steps; checkpoint at "
                  << checkpoint_path.string() << "\n";
        return exit_code::ok;
    }

    const auto [train_ids, eval_ids] = split_identities(ds, cfg.eval_fraction, cfg.seed);
    std::vector<uint8_t> is_eval(static_cast<size_t>(ds.num_identities()), 0);
    for (int64_t g : eval_ids) is_eval[static_cast<size_t>(g)] = 1;
    int64_t n_train = 0;
    for (int64_t i = 0; i < ds.num_points(); ++i)
        n_train += !is_eval[static_cast<size_t>(ds.true_identities[i])];
    const int64_t expected_steps = cfg.epochs * ((n_train + cfg.batch - 1) / cfg.batch);

    write_text(dir / "summary.csv", summary_csv(cfg, res, dir.filename().string()));
    write_text(dir / "verdicts.csv", verdicts_csv(cfg, res, expected_steps));
    std::cout << (dir / "summary.csv").string() << "\n";
    return exit_code::ok;
}

// ------------------------------------------------------------------ bench

int cmd_bench(const Overrides& ov) {
    const ExperimentConfig cfg = load_config(ov);
    const std::string table =
        scaling_report(cfg.bench_shard_counts, cfg.bench_classes_per_shard,
                       cfg.bench_batch_per_worker, cfg.bench_dim, cfg.bench_r,
                       cfg.bench_width_bytes);
    std::cout << table;
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        write_text(fs::path(cfg.out_dir) / "bench.csv", table);
        write_text(fs::path(cfg.out_dir) / "config.ini", config_text(cfg));
    }
    return exit_code::ok;
}

// ----------------------------------------------------------------- report

int cmd_report(const std::vector<std::string>& run_dirs, const std::optional<std::string>& out) {
    if (run_dirs.empty()) throw ConfigError("report: need at least one run directory");

    std::ostringstream table;
    table << "run,r,filter_threshold,final_apcs,final_amncs,mics_max,tar\n";
    for (const auto& dir : run_dirs) {
        const fs::path path = fs::path(dir) / "summary.csv";
        std::ifstream in(path);
        if (!in) throw DataError("report: missing " + path.string());
        std::string header, row;
        if (!std::getline(in, header) || !std::getline(in, row)) {
            throw DataError("report: malformed " + path.string());
        }
        std::vector<std::string> cells;
        std::istringstream ss(row);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        while (cells.size() < 22) cells.emplace_back();  // trailing empty fields
        if (cells[0] != std::to_string(kSummarySchema)) {
            throw DataError("report: incompatible schema version " + cells[0] + " in " +
                            path.string());
        }
        table << cells[1] << ',' << cells[3] << ',' << cells[10] << ',' << cells[14] << ','
              << cells[15] << ',' << cells[18] << ',' << cells[20] << "\n";
    }
    std::cout << table.str();
    if (out) write_text(*out, table.str());
    return exit_code::ok;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"partial-fc classification layer simulator"};
    app.require_subcommand(1);

    Overrides synth_ov, train_ov, bench_ov;
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset file");
    add_common_flags(synth, synth_ov);
    auto* trainc = app.add_subcommand("train", "run one training experiment");
    add_common_flags(trainc, train_ov);
    auto* bench = app.add_subcommand("bench", "emit the cost-model scaling table");
    add_common_flags(bench, bench_ov);

    std::vector<std::string> report_dirs;
    std::optional<std::string> report_out;
    auto* report = app.add_subcommand("report", "merge run summaries into one table");
    report->add_option("dirs", report_dirs, "run directories");
    report->add_option("--out", report_out, "write the merged table here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_code::config;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_ov);
        if (trainc->parsed()) return cmd_train(train_ov);
        if (bench->parsed()) return cmd_bench(bench_ov);
        if (report->parsed()) return cmd_report(report_dirs, report_out);
        return exit_code::config;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_code::config;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_code::data;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return exit_code::numerical;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code::config;
    }
}
