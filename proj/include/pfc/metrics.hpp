#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "pfc/matrix.hpp"
#include "pfc/types.hpp"

namespace pfc {

namespace detail {

// Normalized copy of one center column.
inline std::vector<double> unit_center(const CenterShard& shard, int64_t local_col) {
    const int64_t dim = shard.weights.rows();
    std::vector<double> w(static_cast<size_t>(dim));
    double norm = 0.0;
    for (int64_t d = 0; d < dim; ++d) {
        w[d] = shard.weights(d, local_col);
        norm += w[d] * w[d];
    }
    const double inv = 1.0 / std::max(std::sqrt(norm), 1e-12);
    for (double& x : w) x *= inv;
    return w;
}

inline int64_t total_classes(std::span<const CenterShard> shards) {
    int64_t c = 0;
    for (const auto& s : shards) c = std::max(c, s.class_end);
    return c;
}

// All centers, unit-normalized, as rows of a (C x D) matrix.
inline Matrix gather_unit_centers(std::span<const CenterShard> shards) {
    const int64_t classes = total_classes(shards);
    const int64_t dim = shards.empty() ? 0 : shards.front().weights.rows();
    Matrix rows(classes, dim);
    for (const auto& s : shards) {
        for (int64_t j = 0; j < s.owned(); ++j) {
            const auto w = unit_center(s, j);
            for (int64_t d = 0; d < dim; ++d) rows(s.class_begin + j, d) = w[d];
        }
    }
    return rows;
}

} // namespace detail

// Average cosine between each sample and its own class center
// (both normalized): the intra-class optimization indicator.
inline double apcs(const FeatureBatch& batch, std::span<const CenterShard> shards) {
    batch.validate();
    const Matrix xn = l2_normalize_columns(batch.features);
    double sum = 0.0;
    for (int64_t b = 0; b < batch.batch(); ++b) {
        const int64_t label = batch.labels[b];
        const CenterShard* owner = nullptr;
        for (const auto& s : shards) {
            if (s.owns(label)) {
                owner = &s;
                break;
            }
        }
        if (owner == nullptr) {
            throw ContractError("apcs: label " + std::to_string(label) + " owned by no shard");
        }
        const auto w = detail::unit_center(*owner, owner->local_col(label));
        double c = 0.0;
        for (int64_t d = 0; d < batch.dim(); ++d) c += xn(d, b) * w[d];
        sum += c;
    }
    return sum / static_cast<double>(batch.batch());
}

struct AmncsResult {
    double amncs = 0.0;
    std::optional<double> conflicted;
    std::optional<double> hard;
};

// Average over the batch of the maximum cosine to any negative class
// center, the exact cross-shard max over all C-1 negatives. With conflict
// ground truth, additionally splits the per-sample max into conflicted
// negatives (pseudo-siblings of the sample's true identity) and hard
// negatives (everything else).
inline AmncsResult amncs(const FeatureBatch& batch, std::span<const CenterShard> shards,
                         const ConflictInfo* split_by = nullptr) {
    batch.validate();
    const Matrix xn = l2_normalize_columns(batch.features);
    const Matrix centers = detail::gather_unit_centers(shards);  // C x D
    const int64_t classes = centers.rows();
    if (classes < 2) throw ContractError("amncs: needs at least two classes");

    double total = 0.0;
    double conflicted_total = 0.0;
    int64_t conflicted_rows = 0;
    double hard_total = 0.0;

    for (int64_t b = 0; b < batch.batch(); ++b) {
        const int64_t label = batch.labels[b];
        double best = -std::numeric_limits<double>::infinity();
        double best_conflicted = -std::numeric_limits<double>::infinity();
        double best_hard = -std::numeric_limits<double>::infinity();
        bool has_conflicted = false;
        for (int64_t j = 0; j < classes; ++j) {
            if (j == label) continue;
            double c = 0.0;
            const double* w = centers.row_ptr(j);
            for (int64_t d = 0; d < batch.dim(); ++d) c += xn(d, b) * w[d];
            best = std::max(best, c);
            if (split_by != nullptr) {
                const bool sibling = split_by->class_identity[j] ==
                                     split_by->sample_identity[b];
                if (sibling) {
                    has_conflicted = true;
                    best_conflicted = std::max(best_conflicted, c);
                } else {
                    best_hard = std::max(best_hard, c);
                }
            }
        }
        total += best;
        if (split_by != nullptr) {
            hard_total += best_hard;
            if (has_conflicted) {
                conflicted_total += best_conflicted;
                conflicted_rows++;
            }
        }
    }

    AmncsResult out;
    out.amncs = total / static_cast<double>(batch.batch());
    if (split_by != nullptr) {
        out.hard = hard_total / static_cast<double>(batch.batch());
        if (conflicted_rows > 0) {
            out.conflicted = conflicted_total / static_cast<double>(conflicted_rows);
        }
    }
    return out;
}

// Per class, max cosine to any other class center: the final-state
// inter-class discrepancy map. O(C^2 D), intended for desk-scale C.
inline std::vector<double> mics(std::span<const CenterShard> shards) {
    const Matrix centers = detail::gather_unit_centers(shards);
    const int64_t classes = centers.rows();
    if (classes < 2) throw ContractError("mics: needs at least two classes");
    std::vector<double> out(static_cast<size_t>(classes),
                            -std::numeric_limits<double>::infinity());
    for (int64_t i = 0; i < classes; ++i) {
        for (int64_t j = i + 1; j < classes; ++j) {
            const double c = dot(centers.row(i), centers.row(j));
            out[i] = std::max(out[i], c);
            out[j] = std::max(out[j], c);
        }
    }
    return out;
}

struct VerificationReport {
    double tar = 0.0;
    double far_target = 0.0;
    double threshold = 0.0;
    int64_t genuine_count = 0;
    int64_t impostor_count = 0;
};

// Open-set verification: the threshold is the smallest impostor-score
// quantile keeping measured FAR <= far_target (accept rule: score >
// threshold); TAR is the genuine acceptance rate there.
inline VerificationReport verify_tar_at_far(std::span<const double> genuine_scores,
                                            std::span<const double> impostor_scores,
                                            double far_target) {
    if (genuine_scores.empty() || impostor_scores.empty()) {
        throw ContractError("verify_tar_at_far: empty score list");
    }
    if (!(far_target > 0.0 && far_target < 1.0)) {
        throw ContractError("verify_tar_at_far: far_target must lie in (0, 1)");
    }
    const auto n_imp = static_cast<int64_t>(impostor_scores.size());
    if (1.0 / static_cast<double>(n_imp) > far_target) {
        throw CapacityError("verify_tar_at_far: " + std::to_string(n_imp) +
                            " impostor pairs cannot resolve FAR=" + std::to_string(far_target));
    }

    std::vector<double> imp(impostor_scores.begin(), impostor_scores.end());
    std::sort(imp.begin(), imp.end(), std::greater<>());
    const auto allowed = static_cast<int64_t>(static_cast<double>(n_imp) * far_target);

    VerificationReport report;
    report.far_target = far_target;
    report.threshold = imp[static_cast<size_t>(std::min(allowed, n_imp - 1))];
    report.impostor_count = n_imp;
    report.genuine_count = static_cast<int64_t>(genuine_scores.size());
    int64_t accepted = 0;
    for (double g : genuine_scores) accepted += (g > report.threshold);
    report.tar = static_cast<double>(accepted) / static_cast<double>(report.genuine_count);
    return report;
}

} // namespace pfc
