#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pfc/error.hpp"
#include "pfc/matrix.hpp"

namespace pfc {

// A gathered mini-batch: one embedding column per sample.
struct FeatureBatch {
    Matrix features;              // D x B
    std::vector<int64_t> labels;  // size B

    int64_t batch() const { return features.cols(); }
    int64_t dim() const { return features.rows(); }

    void validate() const {
        if (static_cast<int64_t>(labels.size()) != batch()) {
            throw ShapeError("FeatureBatch: label count != feature columns");
        }
    }
};

// One worker's slice of the center matrix plus its SGD momentum state.
struct CenterShard {
    int64_t shard_id = 0;
    int64_t class_begin = 0;
    int64_t class_end = 0;
    Matrix weights;   // D x owned
    Matrix momentum;  // D x owned

    int64_t owned() const { return class_end - class_begin; }
    bool owns(int64_t cls) const { return cls >= class_begin && cls < class_end; }
    int64_t local_col(int64_t cls) const {
        if (!owns(cls)) {
            throw ContractError("CenterShard " + std::to_string(shard_id) +
                                ": class " + std::to_string(cls) + " outside [" +
                                std::to_string(class_begin) + ", " + std::to_string(class_end) +
                                ")");
        }
        return cls - class_begin;
    }
};

// Exact byte/op accounting for the simulated collectives. Totals across
// all K workers; per-worker shares are totals / K on even splits.
struct CollectiveTrace {
    uint64_t allgather_bytes = 0;      // feature gather
    uint64_t reduce_scalar_bytes = 0;  // softmax max + sum rounds
    uint64_t reduce_grad_bytes = 0;    // feature-gradient exchange
    uint64_t reduce_ops = 0;           // number of reduction rounds

    uint64_t total_bytes() const {
        return allgather_bytes + reduce_scalar_bytes + reduce_grad_bytes;
    }

    CollectiveTrace& operator+=(const CollectiveTrace& other) {
        allgather_bytes += other.allgather_bytes;
        reduce_scalar_bytes += other.reduce_scalar_bytes;
        reduce_grad_bytes += other.reduce_grad_bytes;
        reduce_ops += other.reduce_ops;
        return *this;
    }
    friend bool operator==(const CollectiveTrace&, const CollectiveTrace&) = default;
};

// Real-time training diagnostics at one evaluation point.
struct DiagnosticsSnapshot {
    int64_t iteration = 0;
    double apcs = 0.0;
    double amncs = 0.0;
    std::optional<double> amncs_conflicted;
    std::optional<double> amncs_hard;
};

// Ground-truth corruption structure for splitting AMNCS into conflicted
// vs hard negatives: which true identity each observed class represents,
// and which true identity each batch sample carries.
struct ConflictInfo {
    std::span<const int64_t> class_identity;   // size C
    std::span<const int64_t> sample_identity;  // size B
};

} // namespace pfc
