#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "pfc/loss.hpp"
#include "pfc/matrix.hpp"
#include "pfc/metrics.hpp"
#include "pfc/rng.hpp"
#include "pfc/sampler.hpp"
#include "pfc/types.hpp"

namespace pfc {

// Worker parallelism cap. PFC_SIM_THREADS only bounds how many OS threads
// execute shard tasks; every reduction runs in ascending shard order, so
// results are identical at any setting.
inline int worker_thread_cap() {
    if (const char* env = std::getenv("PFC_SIM_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<int>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(k) for k in [0, count); tasks must write disjoint state.
template <typename Fn>
inline void for_each_shard(int64_t count, Fn&& fn) {
    const int threads = std::min<int64_t>(worker_thread_cap(), count);
    if (threads <= 1) {
        for (int64_t k = 0; k < count; ++k) fn(k);
        return;
    }
    std::atomic<int64_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&]() {
            for (int64_t k = next.fetch_add(1); k < count; k = next.fetch_add(1)) fn(k);
        });
    }
    for (auto& th : pool) th.join();
}

// Center shards with unit-norm random columns. Each class' init stream is
// keyed by its global id, so the weights are identical for every K.
inline std::vector<CenterShard> init_center_shards(const ShardLayout& layout, int64_t dim,
                                                   uint64_t seed) {
    std::vector<CenterShard> shards;
    shards.reserve(static_cast<size_t>(layout.num_shards));
    for (int64_t k = 0; k < layout.num_shards; ++k) {
        CenterShard s;
        s.shard_id = k;
        s.class_begin = layout.owned_begin(k);
        s.class_end = layout.owned_end(k);
        s.weights = Matrix(dim, s.owned());
        s.momentum = Matrix(dim, s.owned());
        for (int64_t j = 0; j < s.owned(); ++j) {
            SeededRng rng(seed, make_stream("center-init",
                                            static_cast<uint64_t>(s.class_begin + j)));
            double norm = 0.0;
            for (int64_t d = 0; d < dim; ++d) {
                const double v = rng.next_normal();
                s.weights(d, j) = v;
                norm += v * v;
            }
            const double inv = 1.0 / std::max(std::sqrt(norm), 1e-12);
            for (int64_t d = 0; d < dim; ++d) s.weights(d, j) *= inv;
        }
        shards.push_back(std::move(s));
    }
    return shards;
}

// Concatenates per-worker feature blocks in shard order and accounts the
// gather bytes (totals across workers: each receives everyone else's block).
inline FeatureBatch all_gather_features(std::span<const FeatureBatch> per_worker,
                                        CollectiveTrace* trace = nullptr) {
    if (per_worker.empty()) throw ContractError("all_gather_features: no worker blocks");
    const int64_t dim = per_worker.front().dim();
    int64_t total = 0;
    for (const auto& blk : per_worker) {
        blk.validate();
        if (blk.dim() != dim) {
            throw ShapeError("all_gather_features: ragged feature dimension " +
                             std::to_string(blk.dim()) + " vs " + std::to_string(dim));
        }
        total += blk.batch();
    }
    FeatureBatch out;
    out.features = Matrix(dim, total);
    out.labels.reserve(static_cast<size_t>(total));
    int64_t col = 0;
    for (const auto& blk : per_worker) {
        for (int64_t b = 0; b < blk.batch(); ++b, ++col) {
            for (int64_t d = 0; d < dim; ++d) out.features(d, col) = blk.features(d, b);
        }
        out.labels.insert(out.labels.end(), blk.labels.begin(), blk.labels.end());
    }
    if (trace != nullptr) {
        const auto workers = static_cast<uint64_t>(per_worker.size());
        trace->allgather_bytes +=
            (workers - 1) * static_cast<uint64_t>(total) * static_cast<uint64_t>(dim) * 8;
    }
    return out;
}

struct StepConfig {
    double r = 0.1;
    MarginConfig margin = MarginConfig::cosface_style();
    std::optional<double> filter_threshold;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    bool with_diagnostics = false;
    const ConflictInfo* conflict = nullptr;  // optional diagnostics split
    int64_t step_index = -1;                 // error context only
};

struct StepResult {
    double loss = 0.0;
    Matrix d_features;  // D x B, gradient handed back to the backbone
    CollectiveTrace trace;
    std::optional<DiagnosticsSnapshot> diagnostics;
    std::vector<SampleBuffer> buffers;  // the iteration's class selection
};

// SGD with momentum and weight decay, applied to buffered columns only.
// Classes outside the buffer keep bit-identical weights and momentum.
inline void update_centers(CenterShard& shard, const Matrix& d_centers_buffer,
                           const SampleBuffer& buffer, double lr, double momentum,
                           double weight_decay) {
    if (d_centers_buffer.cols() != static_cast<int64_t>(buffer.class_indices.size()) ||
        d_centers_buffer.rows() != shard.weights.rows()) {
        throw ShapeError("update_centers: gradient block " + d_centers_buffer.shape_string() +
                         " does not match buffer of " +
                         std::to_string(buffer.class_indices.size()));
    }
    const int64_t dim = shard.weights.rows();
    for (size_t idx = 0; idx < buffer.class_indices.size(); ++idx) {
        const int64_t col = shard.local_col(buffer.class_indices[idx]);
        for (int64_t d = 0; d < dim; ++d) {
            const double g =
                d_centers_buffer(d, static_cast<int64_t>(idx)) + weight_decay * shard.weights(d, col);
            const double v = momentum * shard.momentum(d, col) + g;
            shard.momentum(d, col) = v;
            shard.weights(d, col) -= lr * v;
        }
    }
}

// One simulated model-parallel iteration: per-shard partial cosines
// against buffered centers, margin at the positive's owning shard,
// two-phase (max, sum) softmax reduction in ascending shard order, exact
// backprop, and sharded center updates. Only synchronization points are
// the collectives; shard tasks may run on any number of threads.
inline StepResult distributed_partial_step(std::vector<CenterShard>& shards,
                                           const FeatureBatch& batch, const StepConfig& cfg,
                                           const SeededRng& iteration_rng) {
    if (shards.empty()) throw ContractError("distributed_partial_step: no shards");
    batch.validate();
    cfg.margin.validate();
    if (!(cfg.lr >= 0.0)) throw ContractError("distributed_partial_step: lr must be >= 0");

    const auto num_shards = static_cast<int64_t>(shards.size());
    const int64_t classes = shards.back().class_end;
    const int64_t dim = batch.dim();
    const int64_t bsz = batch.batch();
    const ShardLayout layout(classes, num_shards);
    for (int64_t k = 0; k < num_shards; ++k) {
        if (shards[k].class_begin != layout.owned_begin(k) ||
            shards[k].class_end != layout.owned_end(k)) {
            throw ContractError("distributed_partial_step: shard " + std::to_string(k) +
                                " does not match the contiguous equal partition");
        }
    }

    StepResult result;
    result.buffers = build_buffers(layout, batch.labels, cfg.r, iteration_rng);
    const auto capacity = static_cast<int64_t>(result.buffers.front().class_indices.size());

    // Gather accounting: every worker receives all other workers' blocks.
    result.trace.allgather_bytes = static_cast<uint64_t>(num_shards - 1) *
                                   static_cast<uint64_t>(bsz) * static_cast<uint64_t>(dim) * 8;

    // Normalized features, rows contiguous per sample.
    std::vector<double> feat_norm(static_cast<size_t>(bsz));
    Matrix xnt(bsz, dim);
    for (int64_t b = 0; b < bsz; ++b) {
        double norm = 0.0;
        for (int64_t d = 0; d < dim; ++d) norm += batch.features(d, b) * batch.features(d, b);
        feat_norm[b] = std::sqrt(norm);
        const double inv = 1.0 / std::max(feat_norm[b], 1e-12);
        for (int64_t d = 0; d < dim; ++d) xnt(b, d) = batch.features(d, b) * inv;
    }

    // Per-row location of the ground-truth center.
    std::vector<int64_t> pos_shard(static_cast<size_t>(bsz));
    std::vector<int64_t> pos_col(static_cast<size_t>(bsz));
    for (int64_t b = 0; b < bsz; ++b) {
        const auto [s, c] = locate_positive(result.buffers, batch.labels[b], layout);
        pos_shard[b] = s;
        pos_col[b] = c;
    }

    struct ShardWork {
        Matrix cos;                 // B x cap raw cosines
        Matrix z;                   // margined logits, later exp(z - gmax)
        std::vector<uint8_t> mask;  // 1 = filtered out
        std::vector<double> local_max;
        std::vector<double> local_sum;
        Matrix wnt;                 // cap x D normalized centers
        std::vector<double> center_norm;
        Matrix d_centers;   // D x cap
        Matrix d_features;  // D x B partial
    };
    std::vector<ShardWork> work(static_cast<size_t>(num_shards));

    // Phase A: partial logits. Local compute only.
    for_each_shard(num_shards, [&](int64_t k) {
        ShardWork& w = work[static_cast<size_t>(k)];
        const CenterShard& shard = shards[static_cast<size_t>(k)];
        const auto& buffer = result.buffers[static_cast<size_t>(k)];

        w.wnt = Matrix(capacity, dim);
        w.center_norm.resize(static_cast<size_t>(capacity));
        for (int64_t j = 0; j < capacity; ++j) {
            const int64_t col = shard.local_col(buffer.class_indices[static_cast<size_t>(j)]);
            double norm = 0.0;
            for (int64_t d = 0; d < dim; ++d) {
                const double v = shard.weights(d, col);
                w.wnt(j, d) = v;
                norm += v * v;
            }
            w.center_norm[j] = std::sqrt(norm);
            const double inv = 1.0 / std::max(w.center_norm[j], 1e-12);
            for (int64_t d = 0; d < dim; ++d) w.wnt(j, d) *= inv;
        }

        w.cos = Matrix(bsz, capacity);
        for (int64_t b = 0; b < bsz; ++b) {
            const double* x = xnt.row_ptr(b);
            double* out = w.cos.row_ptr(b);
            for (int64_t j = 0; j < capacity; ++j) {
                out[j] = dot({x, static_cast<size_t>(dim)}, w.wnt.row(j));
            }
        }

        if (cfg.filter_threshold) {
            w.mask.assign(static_cast<size_t>(bsz * capacity), 0);
            for (int64_t b = 0; b < bsz; ++b) {
                for (int64_t j = 0; j < capacity; ++j) {
                    const bool is_pos = pos_shard[b] == k && pos_col[b] == j;
                    if (!is_pos && w.cos(b, j) > *cfg.filter_threshold) {
                        w.mask[static_cast<size_t>(b * capacity + j)] = 1;
                    }
                }
            }
        }

        w.z = Matrix(bsz, capacity);
        w.local_max.assign(static_cast<size_t>(bsz),
                           -std::numeric_limits<double>::infinity());
        for (int64_t b = 0; b < bsz; ++b) {
            for (int64_t j = 0; j < capacity; ++j) {
                const bool is_pos = pos_shard[b] == k && pos_col[b] == j;
                w.z(b, j) = apply_margin(w.cos(b, j), is_pos, cfg.margin);
                if (w.mask.empty() || w.mask[static_cast<size_t>(b * capacity + j)] == 0) {
                    w.local_max[b] = std::max(w.local_max[b], w.z(b, j));
                }
            }
        }
    });

    // Collective 1: max reduction, ascending shard order.
    std::vector<double> global_max(static_cast<size_t>(bsz),
                                   -std::numeric_limits<double>::infinity());
    for (int64_t k = 0; k < num_shards; ++k) {
        for (int64_t b = 0; b < bsz; ++b) {
            global_max[b] = std::max(global_max[b], work[static_cast<size_t>(k)].local_max[b]);
        }
    }
    std::vector<double> z_positive(static_cast<size_t>(bsz));
    for (int64_t b = 0; b < bsz; ++b) {
        if (!std::isfinite(global_max[b])) {
            throw ContractError("distributed_partial_step: all buffer columns masked for row " +
                                std::to_string(b));
        }
        z_positive[b] = work[static_cast<size_t>(pos_shard[b])].z(b, pos_col[b]);
    }

    // Phase B: local exponential sums against the global max.
    for_each_shard(num_shards, [&](int64_t k) {
        ShardWork& w = work[static_cast<size_t>(k)];
        w.local_sum.assign(static_cast<size_t>(bsz), 0.0);
        for (int64_t b = 0; b < bsz; ++b) {
            double s = 0.0;
            for (int64_t j = 0; j < capacity; ++j) {
                if (!w.mask.empty() && w.mask[static_cast<size_t>(b * capacity + j)]) {
                    w.z(b, j) = 0.0;
                    continue;
                }
                const double e = std::exp(w.z(b, j) - global_max[b]);
                w.z(b, j) = e;  // reuse storage: z now holds exp(z - gmax)
                s += e;
            }
            w.local_sum[b] = s;
        }
    });

    // Collective 2: sum reduction, ascending shard order.
    std::vector<double> global_sum(static_cast<size_t>(bsz), 0.0);
    for (int64_t k = 0; k < num_shards; ++k) {
        for (int64_t b = 0; b < bsz; ++b) global_sum[b] += work[static_cast<size_t>(k)].local_sum[b];
    }
    // Two scalar rounds (max, sum); ring all-reduce moves 2 n (K-1)/K
    // doubles per worker per round -> totals of 2 * 2 * B * 8 * (K-1).
    result.trace.reduce_scalar_bytes =
        static_cast<uint64_t>(num_shards - 1) * static_cast<uint64_t>(bsz) * 2 * 2 * 8;

    double loss_sum = 0.0;
    for (int64_t b = 0; b < bsz; ++b) {
        loss_sum += std::log(global_sum[b]) + global_max[b] - z_positive[b];
    }
    result.loss = loss_sum / static_cast<double>(bsz);
    if (!std::isfinite(result.loss)) {
        throw NumericalError("distributed_partial_step: non-finite loss at step " +
                             std::to_string(cfg.step_index));
    }

    // Phase C: probabilities -> exact gradients w.r.t. raw inputs.
    for_each_shard(num_shards, [&](int64_t k) {
        ShardWork& w = work[static_cast<size_t>(k)];
        w.d_centers = Matrix(dim, capacity);
        w.d_features = Matrix(dim, bsz);
        Matrix dwt(capacity, dim);  // accumulates sum_b g * xhat_b per buffer row
        std::vector<double> center_proj(static_cast<size_t>(capacity), 0.0);
        std::vector<double> row_accum(static_cast<size_t>(dim));

        for (int64_t b = 0; b < bsz; ++b) {
            double feat_proj = 0.0;
            std::fill(row_accum.begin(), row_accum.end(), 0.0);
            const double inv_sum = 1.0 / global_sum[b];
            for (int64_t j = 0; j < capacity; ++j) {
                if (!w.mask.empty() && w.mask[static_cast<size_t>(b * capacity + j)]) continue;
                const bool is_pos = pos_shard[b] == k && pos_col[b] == j;
                const double p = w.z(b, j) * inv_sum;
                const double gz = (p - (is_pos ? 1.0 : 0.0)) / static_cast<double>(bsz);
                if (gz == 0.0) continue;
                const double g = gz * margin_derivative(w.cos(b, j), is_pos, cfg.margin);
                const double c = w.cos(b, j);
                feat_proj += g * c;
                center_proj[j] += g * c;
                const double* wn = w.wnt.row_ptr(j);
                double* dw = dwt.row_ptr(j);
                const double* x = xnt.row_ptr(b);
                for (int64_t d = 0; d < dim; ++d) {
                    row_accum[d] += g * wn[d];
                    dw[d] += g * x[d];
                }
            }
            const double inv_norm = 1.0 / std::max(feat_norm[b], 1e-12);
            const double* x = xnt.row_ptr(b);
            for (int64_t d = 0; d < dim; ++d) {
                w.d_features(d, b) = (row_accum[d] - feat_proj * x[d]) * inv_norm;
            }
        }
        for (int64_t j = 0; j < capacity; ++j) {
            const double inv_norm = 1.0 / std::max(w.center_norm[j], 1e-12);
            const double* wn = w.wnt.row_ptr(j);
            const double* dw = dwt.row_ptr(j);
            for (int64_t d = 0; d < dim; ++d) {
                w.d_centers(d, j) = (dw[d] - center_proj[j] * wn[d]) * inv_norm;
            }
        }
    });

    // Collective 3: feature-gradient exchange, ascending shard order.
    result.d_features = Matrix(dim, bsz);
    for (int64_t k = 0; k < num_shards; ++k) {
        const Matrix& part = work[static_cast<size_t>(k)].d_features;
        for (int64_t d = 0; d < dim; ++d) {
            for (int64_t b = 0; b < bsz; ++b) result.d_features(d, b) += part(d, b);
        }
    }
    result.trace.reduce_grad_bytes = static_cast<uint64_t>(num_shards - 1) *
                                     static_cast<uint64_t>(bsz) * static_cast<uint64_t>(dim) * 2 *
                                     8;
    result.trace.reduce_ops = 3;
    require_finite(result.d_features, "distributed_partial_step d_features");

    if (cfg.with_diagnostics) {
        DiagnosticsSnapshot snap;
        snap.iteration = cfg.step_index;
        snap.apcs = apcs(batch, shards);
        const AmncsResult a = amncs(batch, shards, cfg.conflict);
        snap.amncs = a.amncs;
        snap.amncs_conflicted = a.conflicted;
        snap.amncs_hard = a.hard;
        result.diagnostics = snap;
    }

    // Sharded SGD update; foreign classes are untouched by construction.
    for_each_shard(num_shards, [&](int64_t k) {
        update_centers(shards[static_cast<size_t>(k)], work[static_cast<size_t>(k)].d_centers,
                       result.buffers[static_cast<size_t>(k)], cfg.lr, cfg.momentum,
                       cfg.weight_decay);
    });

    return result;
}

} // namespace pfc
