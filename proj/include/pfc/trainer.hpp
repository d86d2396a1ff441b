#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "pfc/datasynth.hpp"
#include "pfc/io.hpp"
#include "pfc/metrics.hpp"
#include "pfc/shardsim.hpp"

namespace pfc {

// Linear warmup to base_lr, then polynomial decay to zero at total_steps.
struct Schedule {
    double base_lr = 0.1;
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
    double power = 2.0;

    void validate() const {
        if (!(base_lr > 0.0)) throw ConfigError("schedule: base_lr must be positive");
        if (warmup_steps < 0 || warmup_steps >= total_steps) {
            throw ConfigError("schedule: need 0 <= warmup_steps < total_steps");
        }
        if (!(power > 0.0)) throw ConfigError("schedule: power must be positive");
    }
};

inline double lr_at(const Schedule& s, int64_t step) {
    if (step > s.total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " +
                            std::to_string(s.total_steps));
    }
    if (step < s.warmup_steps) {
        return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    }
    const double progress = static_cast<double>(step - s.warmup_steps) /
                            static_cast<double>(s.total_steps - s.warmup_steps);
    return s.base_lr * std::pow(1.0 - progress, s.power);
}

// Two-layer perceptron with tanh: input -> hidden -> embedding. Smooth
// everywhere, so finite-difference checks of the full pipeline stay tight.
struct Backbone {
    Matrix w1;  // hidden x input
    Matrix b1;  // hidden x 1
    Matrix w2;  // embed x hidden
    Matrix b2;  // embed x 1

    struct Activations {
        Matrix hidden;  // hidden x B, post-tanh
        Matrix output;  // embed x B
    };

    static Backbone init(int64_t input_dim, int64_t hidden_dim, int64_t embed_dim,
                         uint64_t seed) {
        Backbone bb;
        bb.w1 = Matrix(hidden_dim, input_dim);
        bb.b1 = Matrix(hidden_dim, 1);
        bb.w2 = Matrix(embed_dim, hidden_dim);
        bb.b2 = Matrix(embed_dim, 1);
        SeededRng r1(seed, make_stream("backbone-w1"));
        const double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
        for (double& v : bb.w1.flat()) v = r1.next_normal() * s1;
        SeededRng r2(seed, make_stream("backbone-w2"));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
        for (double& v : bb.w2.flat()) v = r2.next_normal() * s2;
        return bb;
    }

    Activations forward(const Matrix& inputs) const {
        if (inputs.rows() != w1.cols()) {
            throw ShapeError("backbone: input rows " + inputs.shape_string() + " vs w1 " +
                             w1.shape_string());
        }
        Activations act;
        act.hidden = matmul(w1, inputs);
        for (int64_t i = 0; i < act.hidden.rows(); ++i) {
            for (int64_t b = 0; b < act.hidden.cols(); ++b) {
                act.hidden(i, b) = std::tanh(act.hidden(i, b) + b1(i, 0));
            }
        }
        act.output = matmul(w2, act.hidden);
        for (int64_t i = 0; i < act.output.rows(); ++i) {
            for (int64_t b = 0; b < act.output.cols(); ++b) act.output(i, b) += b2(i, 0);
        }
        return act;
    }

    // SGD against d(loss)/d(output), reusing cached activations.
    void apply_gradient(const Matrix& inputs, const Activations& act, const Matrix& d_output,
                        double lr) {
        if (!d_output.same_shape(act.output)) {
            throw ShapeError("backbone: gradient " + d_output.shape_string() +
                             " vs output " + act.output.shape_string());
        }
        const Matrix d_w2 = matmul(d_output, transpose(act.hidden));
        Matrix d_hidden = matmul(transpose(w2), d_output);
        for (int64_t i = 0; i < d_hidden.rows(); ++i) {
            for (int64_t b = 0; b < d_hidden.cols(); ++b) {
                const double h = act.hidden(i, b);
                d_hidden(i, b) *= 1.0 - h * h;  // through tanh
            }
        }
        const Matrix d_w1 = matmul(d_hidden, transpose(inputs));

        for (int64_t i = 0; i < w2.rows(); ++i) {
            double db = 0.0;
            for (int64_t b = 0; b < d_output.cols(); ++b) db += d_output(i, b);
            b2(i, 0) -= lr * db;
            for (int64_t j = 0; j < w2.cols(); ++j) w2(i, j) -= lr * d_w2(i, j);
        }
        for (int64_t i = 0; i < w1.rows(); ++i) {
            double db = 0.0;
            for (int64_t b = 0; b < d_hidden.cols(); ++b) db += d_hidden(i, b);
            b1(i, 0) -= lr * db;
            for (int64_t j = 0; j < w1.cols(); ++j) w1(i, j) -= lr * d_w1(i, j);
        }
    }
};

// Spec surface: one forward pass plus an SGD update against the supplied
// feature gradient.
inline void backbone_forward_backward(Backbone& bb, const Matrix& inputs,
                                      const Matrix& d_features, double lr) {
    const auto act = bb.forward(inputs);
    bb.apply_gradient(inputs, act, d_features, lr);
}

struct TrainConfig {
    double r = 1.0;
    MarginConfig margin = MarginConfig::cosface_style();
    std::optional<double> filter_threshold;
    int64_t shards = 1;
    int64_t batch = 48;
    int64_t epochs = 15;
    uint64_t seed = 1;
    int64_t eval_every = 50;
    int64_t hidden_dim = 96;
    int64_t embed_dim = 64;
    double base_lr = 0.05;
    double warmup_epochs = 2.0;
    double power = 2.0;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    // Backbone steps at backbone_lr_scale * lr. A desk-scale MLP over a
    // few thousand points adapts orders of magnitude faster than a deep
    // CNN over millions of images; scaling its rate down restores the
    // paper's regime where centers move faster than features.
    double backbone_lr_scale = 1.0;
    double eval_fraction = 0.1;
    double far_target = 1e-2;
    int64_t stop_after_step = 0;  // run only this many steps (0 = all)
    std::string checkpoint_path;  // written when stopping and at the end
    bool resume = false;          // continue from checkpoint_path

    void validate() const {
        margin.validate();
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError("train: r must lie in (0, 1]");
        if (shards < 1) throw ConfigError("train: shards must be >= 1");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
        if (hidden_dim < 1 || embed_dim < 2) throw ConfigError("train: bad backbone dims");
        if (!(eval_fraction >= 0.0 && eval_fraction < 0.5)) {
            throw ConfigError("train: eval_fraction must lie in [0, 0.5)");
        }
        if (filter_threshold && !(*filter_threshold > 0.0 && *filter_threshold < 1.0)) {
            throw ConfigError("train: filter threshold must lie in (0, 1)");
        }
    }
};

// Receives one formatted metrics record per evaluation step.
struct TrainSink {
    virtual void metrics_line(const std::string& line) = 0;
    virtual ~TrainSink() = default;
};

struct TrainResult {
    Backbone backbone;
    std::vector<CenterShard> shards;
    std::vector<DiagnosticsSnapshot> diagnostics;
    std::optional<VerificationReport> verification;
    double mean_loss = 0.0;
    double final_loss = 0.0;
    double mics_max = -1.0;
    double train_accuracy = 0.0;
    int64_t steps_run = 0;
    bool stopped_early = false;
};

namespace detail {

inline std::string format_metrics_line(const DiagnosticsSnapshot& snap) {
    char buf[256];
    int n = std::snprintf(buf, sizeof(buf), R"({"iteration":%lld,"apcs":%.17g,"amncs":%.17g)",
                          static_cast<long long>(snap.iteration), snap.apcs, snap.amncs);
    std::string line(buf, static_cast<size_t>(n));
    if (snap.amncs_conflicted) {
        n = std::snprintf(buf, sizeof(buf), R"(,"amncs_conflicted":%.17g)",
                          *snap.amncs_conflicted);
        line.append(buf, static_cast<size_t>(n));
    }
    if (snap.amncs_hard) {
        n = std::snprintf(buf, sizeof(buf), R"(,"amncs_hard":%.17g)", *snap.amncs_hard);
        line.append(buf, static_cast<size_t>(n));
    }
    line += "}";
    return line;
}

inline uint64_t config_digest(const TrainConfig& cfg, const SyntheticDataset& ds) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "%a|%d|%a|%a|%a|%lld|%lld|%lld|%llu|%lld|%lld|%lld|%a|%a|%a|%a|%a|%a|%a|%lld|%lld|%lld",
                  cfg.r, static_cast<int>(cfg.margin.kind), cfg.margin.scale, cfg.margin.margin,
                  cfg.filter_threshold.value_or(-1.0), static_cast<long long>(cfg.shards),
                  static_cast<long long>(cfg.batch), static_cast<long long>(cfg.epochs),
                  static_cast<unsigned long long>(cfg.seed),
                  static_cast<long long>(cfg.eval_every), static_cast<long long>(cfg.hidden_dim),
                  static_cast<long long>(cfg.embed_dim), cfg.base_lr, cfg.warmup_epochs,
                  cfg.power, cfg.momentum, cfg.weight_decay, cfg.eval_fraction,
                  cfg.backbone_lr_scale, static_cast<long long>(ds.num_points()),
                  static_cast<long long>(ds.num_classes()), static_cast<long long>(ds.dim()));
    return fnv1a(buf);
}

inline constexpr uint64_t kCheckpointMagic = 0x54504b43444346ULL;  // "PFCDCKPT"
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointState {
    int64_t next_step = 0;
    double loss_sum = 0.0;
    Backbone backbone;
    std::vector<CenterShard> shards;
    std::vector<DiagnosticsSnapshot> diagnostics;
    int64_t metrics_lines = 0;
};

inline void save_checkpoint(const std::string& path, const CheckpointState& st,
                            uint64_t digest) {
    BinaryWriter w(path);
    w.put<uint64_t>(kCheckpointMagic);
    w.put<uint32_t>(kCheckpointVersion);
    w.put<uint64_t>(digest);
    w.put<int64_t>(st.next_step);
    w.put<double>(st.loss_sum);
    w.put<int64_t>(st.metrics_lines);
    w.put_matrix(st.backbone.w1);
    w.put_matrix(st.backbone.b1);
    w.put_matrix(st.backbone.w2);
    w.put_matrix(st.backbone.b2);
    w.put<int64_t>(static_cast<int64_t>(st.shards.size()));
    for (const auto& s : st.shards) {
        w.put<int64_t>(s.shard_id);
        w.put<int64_t>(s.class_begin);
        w.put<int64_t>(s.class_end);
        w.put_matrix(s.weights);
        w.put_matrix(s.momentum);
    }
    w.put<int64_t>(static_cast<int64_t>(st.diagnostics.size()));
    for (const auto& d : st.diagnostics) {
        w.put<int64_t>(d.iteration);
        w.put<double>(d.apcs);
        w.put<double>(d.amncs);
        w.put<uint8_t>(d.amncs_conflicted.has_value());
        w.put<double>(d.amncs_conflicted.value_or(0.0));
        w.put<uint8_t>(d.amncs_hard.has_value());
        w.put<double>(d.amncs_hard.value_or(0.0));
    }
    w.close();
}

// How many metrics lines the checkpoint covers, without a full load; lets
// the CLI trim its stream before resuming. Digest validation happens in
// load_checkpoint.
inline int64_t peek_checkpoint_metrics_lines(const std::string& path) {
    BinaryReader r(path);
    if (r.get<uint64_t>() != kCheckpointMagic) throw DataError("not a checkpoint: " + path);
    if (r.get<uint32_t>() != kCheckpointVersion) {
        throw DataError("checkpoint version mismatch: " + path);
    }
    r.get<uint64_t>();  // digest
    r.get<int64_t>();   // next_step
    r.get<double>();    // loss_sum
    return r.get<int64_t>();
}

inline CheckpointState load_checkpoint(const std::string& path, uint64_t expect_digest) {
    BinaryReader r(path);
    if (r.get<uint64_t>() != kCheckpointMagic) throw DataError("not a checkpoint: " + path);
    if (r.get<uint32_t>() != kCheckpointVersion) {
        throw DataError("checkpoint version mismatch: " + path);
    }
    if (r.get<uint64_t>() != expect_digest) {
        throw DataError("checkpoint was produced by a different config/dataset: " + path);
    }
    CheckpointState st;
    st.next_step = r.get<int64_t>();
    st.loss_sum = r.get<double>();
    st.metrics_lines = r.get<int64_t>();
    st.backbone.w1 = r.get_matrix();
    st.backbone.b1 = r.get_matrix();
    st.backbone.w2 = r.get_matrix();
    st.backbone.b2 = r.get_matrix();
    const auto num_shards = r.get<int64_t>();
    for (int64_t k = 0; k < num_shards; ++k) {
        CenterShard s;
        s.shard_id = r.get<int64_t>();
        s.class_begin = r.get<int64_t>();
        s.class_end = r.get<int64_t>();
        s.weights = r.get_matrix();
        s.momentum = r.get_matrix();
        st.shards.push_back(std::move(s));
    }
    const auto diags = r.get<int64_t>();
    for (int64_t i = 0; i < diags; ++i) {
        DiagnosticsSnapshot d;
        d.iteration = r.get<int64_t>();
        d.apcs = r.get<double>();
        d.amncs = r.get<double>();
        const bool has_c = r.get<uint8_t>() != 0;
        const double c = r.get<double>();
        const bool has_h = r.get<uint8_t>() != 0;
        const double h = r.get<double>();
        if (has_c) d.amncs_conflicted = c;
        if (has_h) d.amncs_hard = h;
        st.diagnostics.push_back(d);
    }
    return st;
}

} // namespace detail

// Identity-disjoint train/eval split: the last eval_fraction of a seeded
// identity shuffle is held out for open-set verification.
inline std::pair<std::vector<int64_t>, std::vector<int64_t>> split_identities(
    const SyntheticDataset& ds, double eval_fraction, uint64_t seed) {
    const int64_t identities = ds.num_identities();
    std::vector<int64_t> order(static_cast<size_t>(identities));
    std::iota(order.begin(), order.end(), 0);
    SeededRng rng(seed, make_stream("eval-split"));
    for (int64_t i = identities - 1; i > 0; --i) {
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(rng.next_below(static_cast<uint64_t>(i + 1)))]);
    }
    const auto eval_count =
        static_cast<int64_t>(eval_fraction * static_cast<double>(identities));
    std::vector<int64_t> train(order.begin(), order.end() - eval_count);
    std::vector<int64_t> eval(order.end() - eval_count, order.end());
    return {train, eval};
}

// End-to-end toy training loop over a synthetic dataset.
inline TrainResult train(const SyntheticDataset& ds, const TrainConfig& cfg,
                         TrainSink* sink = nullptr) {
    cfg.validate();
    ds.validate();
    const int64_t classes = ds.num_classes();
    const int64_t input_dim = ds.dim();
    const ShardLayout layout(classes, cfg.shards);

    // identity-disjoint split, then point index lists
    const auto [train_ids, eval_ids] = split_identities(ds, cfg.eval_fraction, cfg.seed);
    std::vector<uint8_t> is_eval_identity(static_cast<size_t>(ds.num_identities()), 0);
    for (int64_t g : eval_ids) is_eval_identity[static_cast<size_t>(g)] = 1;
    std::vector<int64_t> train_points, eval_points;
    for (int64_t i = 0; i < ds.num_points(); ++i) {
        if (is_eval_identity[static_cast<size_t>(ds.true_identities[i])]) {
            eval_points.push_back(i);
        } else {
            train_points.push_back(i);
        }
    }
    if (train_points.empty()) throw DataError("train: no training points after the split");

    const auto n_train = static_cast<int64_t>(train_points.size());
    const int64_t steps_per_epoch = (n_train + cfg.batch - 1) / cfg.batch;
    Schedule schedule;
    schedule.base_lr = cfg.base_lr;
    schedule.total_steps = cfg.epochs * steps_per_epoch;
    schedule.warmup_steps = static_cast<int64_t>(cfg.warmup_epochs *
                                                 static_cast<double>(steps_per_epoch));
    schedule.power = cfg.power;
    schedule.validate();

    const uint64_t digest = detail::config_digest(cfg, ds);

    TrainResult result;
    double loss_sum = 0.0;
    int64_t start_step = 0;
    if (cfg.resume) {
        auto st = detail::load_checkpoint(cfg.checkpoint_path, digest);
        result.backbone = std::move(st.backbone);
        result.shards = std::move(st.shards);
        result.diagnostics = std::move(st.diagnostics);
        loss_sum = st.loss_sum;
        start_step = st.next_step;
    } else {
        result.backbone = Backbone::init(input_dim, cfg.hidden_dim, cfg.embed_dim, cfg.seed);
        result.shards = init_center_shards(layout, cfg.embed_dim, cfg.seed);
    }

    const bool has_conflicts = std::any_of(ds.corruption.begin(), ds.corruption.end(),
                                           [](const CorruptionRecord& c) {
                                               return c.conflict_group >= 0;
                                           });

    std::vector<int64_t> epoch_order = train_points;
    int64_t shuffled_epoch = -1;
    auto shuffle_for_epoch = [&](int64_t epoch) {
        if (shuffled_epoch == epoch) return;
        epoch_order = train_points;
        SeededRng rng(cfg.seed, make_stream("shuffle", static_cast<uint64_t>(epoch)));
        for (int64_t i = n_train - 1; i > 0; --i) {
            std::swap(epoch_order[static_cast<size_t>(i)],
                      epoch_order[static_cast<size_t>(rng.next_below(static_cast<uint64_t>(i + 1)))]);
        }
        shuffled_epoch = epoch;
    };

    auto save_state = [&](int64_t next_step) {
        if (cfg.checkpoint_path.empty()) return;
        detail::CheckpointState st;
        st.next_step = next_step;
        st.loss_sum = loss_sum;
        st.backbone = result.backbone;
        st.shards = result.shards;
        st.diagnostics = result.diagnostics;
        st.metrics_lines = static_cast<int64_t>(result.diagnostics.size());
        detail::save_checkpoint(cfg.checkpoint_path, st, digest);
    };

    const int64_t total_steps = schedule.total_steps;
    for (int64_t step = start_step; step < total_steps; ++step) {
        const int64_t epoch = step / steps_per_epoch;
        const int64_t slot = step % steps_per_epoch;
        shuffle_for_epoch(epoch);

        const int64_t lo = slot * cfg.batch;
        const int64_t hi = std::min(lo + cfg.batch, n_train);
        const int64_t bsz = hi - lo;

        Matrix inputs(input_dim, bsz);
        FeatureBatch fb;
        fb.labels.resize(static_cast<size_t>(bsz));
        std::vector<int64_t> batch_identity(static_cast<size_t>(bsz));
        for (int64_t b = 0; b < bsz; ++b) {
            const int64_t p = epoch_order[static_cast<size_t>(lo + b)];
            for (int64_t d = 0; d < input_dim; ++d) inputs(d, b) = ds.points(d, p);
            fb.labels[static_cast<size_t>(b)] = ds.observed_labels[p];
            batch_identity[static_cast<size_t>(b)] = ds.true_identities[p];
        }

        const auto act = result.backbone.forward(inputs);
        fb.features = act.output;

        ConflictInfo conflict{ds.class_identity, batch_identity};
        StepConfig sc;
        sc.r = cfg.r;
        sc.margin = cfg.margin;
        sc.filter_threshold = cfg.filter_threshold;
        sc.lr = lr_at(schedule, step);
        sc.momentum = cfg.momentum;
        sc.weight_decay = cfg.weight_decay;
        sc.step_index = step;
        sc.with_diagnostics = (step % cfg.eval_every == 0) || step == total_steps - 1;
        sc.conflict = has_conflicts ? &conflict : nullptr;

        SeededRng iter_rng(cfg.seed, make_stream("iteration", static_cast<uint64_t>(step)));
        StepResult sr;
        try {
            sr = distributed_partial_step(result.shards, fb, sc, iter_rng);
        } catch (const NumericalError& e) {
            if (!cfg.checkpoint_path.empty()) {
                throw NumericalError(std::string(e.what()) + "; last good checkpoint: " +
                                     cfg.checkpoint_path);
            }
            throw;
        }
        loss_sum += sr.loss;
        result.final_loss = sr.loss;

        if (sc.lr > 0.0 && cfg.backbone_lr_scale > 0.0) {
            result.backbone.apply_gradient(inputs, act, sr.d_features,
                                           sc.lr * cfg.backbone_lr_scale);
        }

        if (sr.diagnostics) {
            result.diagnostics.push_back(*sr.diagnostics);
            if (sink != nullptr) {
                sink->metrics_line(detail::format_metrics_line(*sr.diagnostics));
            }
        }

        result.steps_run = step + 1;
        if (cfg.stop_after_step > 0 && step + 1 >= cfg.stop_after_step &&
            step + 1 < total_steps) {
            save_state(step + 1);
            result.stopped_early = true;
            result.mean_loss = loss_sum / static_cast<double>(result.steps_run);
            return result;
        }
    }
    result.mean_loss = total_steps > 0 ? loss_sum / static_cast<double>(total_steps) : 0.0;
    save_state(total_steps);

    // final-state diagnostics
    const auto mics_values = mics(result.shards);
    result.mics_max = *std::max_element(mics_values.begin(), mics_values.end());

    // nearest-center training accuracy over all train points
    {
        const Matrix centers = detail::gather_unit_centers(result.shards);  // C x D
        int64_t correct = 0;
        const int64_t chunk = 256;
        for (int64_t at = 0; at < n_train; at += chunk) {
            const int64_t n = std::min(chunk, n_train - at);
            Matrix inputs(input_dim, n);
            for (int64_t b = 0; b < n; ++b) {
                const int64_t p = train_points[static_cast<size_t>(at + b)];
                for (int64_t d = 0; d < input_dim; ++d) inputs(d, b) = ds.points(d, p);
            }
            const Matrix emb = l2_normalize_columns(result.backbone.forward(inputs).output);
            for (int64_t b = 0; b < n; ++b) {
                double best = -2.0;
                int64_t best_class = -1;
                for (int64_t c = 0; c < classes; ++c) {
                    double cosv = 0.0;
                    for (int64_t d = 0; d < cfg.embed_dim; ++d) cosv += emb(d, b) * centers(c, d);
                    if (cosv > best) {
                        best = cosv;
                        best_class = c;
                    }
                }
                correct += best_class ==
                           ds.observed_labels[train_points[static_cast<size_t>(at + b)]];
            }
        }
        result.train_accuracy = static_cast<double>(correct) / static_cast<double>(n_train);
    }

    // open-set verification on held-out identities
    if (!eval_points.empty()) {
        const auto n_eval = static_cast<int64_t>(eval_points.size());
        Matrix inputs(input_dim, n_eval);
        for (int64_t b = 0; b < n_eval; ++b) {
            const int64_t p = eval_points[static_cast<size_t>(b)];
            for (int64_t d = 0; d < input_dim; ++d) inputs(d, b) = ds.points(d, p);
        }
        const Matrix emb = l2_normalize_columns(result.backbone.forward(inputs).output);
        std::vector<double> genuine, impostor;
        for (int64_t i = 0; i < n_eval; ++i) {
            for (int64_t j = i + 1; j < n_eval; ++j) {
                double c = 0.0;
                for (int64_t d = 0; d < cfg.embed_dim; ++d) c += emb(d, i) * emb(d, j);
                const bool same = ds.true_identities[eval_points[static_cast<size_t>(i)]] ==
                                  ds.true_identities[eval_points[static_cast<size_t>(j)]];
                (same ? genuine : impostor).push_back(c);
            }
        }
        if (!genuine.empty() && !impostor.empty()) {
            try {
                result.verification = verify_tar_at_far(genuine, impostor, cfg.far_target);
            } catch (const CapacityError&) {
                // too few impostor pairs to resolve far_target; the report
                // carries an empty verification column instead
            }
        }
    }
    return result;
}

} // namespace pfc
