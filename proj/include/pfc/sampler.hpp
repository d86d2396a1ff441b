#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pfc/error.hpp"
#include "pfc/rng.hpp"

namespace pfc {

// Column-wise partition of the center matrix over K workers: contiguous
// blocks of ceil(C/K) classes, so ownership lookups are O(1).
struct ShardLayout {
    int64_t num_classes = 0;  // C
    int64_t num_shards = 0;   // K

    ShardLayout(int64_t classes, int64_t shards) : num_classes(classes), num_shards(shards) {
        if (classes < 1 || shards < 1) {
            throw ContractError("ShardLayout: need at least one class and one shard");
        }
    }

    int64_t block() const { return (num_classes + num_shards - 1) / num_shards; }
    int64_t owner(int64_t cls) const { return cls / block(); }
    int64_t owned_begin(int64_t shard) const { return std::min(shard * block(), num_classes); }
    int64_t owned_end(int64_t shard) const {
        return std::min((shard + 1) * block(), num_classes);
    }
    int64_t owned_count(int64_t shard) const { return owned_end(shard) - owned_begin(shard); }
};

// One shard's class selection for one iteration: the shard's batch
// positives first (ascending), then sampled negatives, filled to exactly
// the common capacity.
struct SampleBuffer {
    int64_t shard_id = 0;
    std::vector<int64_t> class_indices;
    int64_t num_positives = 0;

    std::span<const int64_t> positives() const {
        return {class_indices.data(), static_cast<size_t>(num_positives)};
    }
};

// Per-shard buffer size: ceil(C * r / K). The buffer budget scales with the
// total class count and the sampling ratio, independent of the batch.
inline int64_t buffer_capacity(const ShardLayout& layout, double r) {
    if (!(r > 0.0 && r <= 1.0)) {
        throw ContractError("buffer_capacity: sampling ratio must lie in (0, 1]");
    }
    const double want = static_cast<double>(layout.num_classes) * r;
    const auto total = static_cast<int64_t>(std::ceil(want - 1e-9));
    return (total + layout.num_shards - 1) / layout.num_shards;
}

// Builds all K buffers for one iteration. Positives are routed to their
// owning shard; the remainder is drawn uniformly without replacement from
// that shard's other owned classes. Every buffer ends up at exactly
// `capacity` entries, which is what keeps per-worker load identical.
inline std::vector<SampleBuffer> build_buffers(const ShardLayout& layout,
                                               std::span<const int64_t> labels, double r,
                                               const SeededRng& iteration_rng) {
    const int64_t capacity = buffer_capacity(layout, r);

    std::vector<std::vector<int64_t>> positives(static_cast<size_t>(layout.num_shards));
    {
        std::vector<int64_t> sorted(labels.begin(), labels.end());
        std::sort(sorted.begin(), sorted.end());
        sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
        for (int64_t cls : sorted) {
            if (cls < 0 || cls >= layout.num_classes) {
                throw ContractError("build_buffers: label " + std::to_string(cls) +
                                    " outside [0, " + std::to_string(layout.num_classes) + ")");
            }
            positives[static_cast<size_t>(layout.owner(cls))].push_back(cls);
        }
    }

    std::vector<SampleBuffer> buffers;
    buffers.reserve(static_cast<size_t>(layout.num_shards));
    for (int64_t k = 0; k < layout.num_shards; ++k) {
        auto& pos = positives[static_cast<size_t>(k)];
        const auto npos = static_cast<int64_t>(pos.size());
        if (npos > capacity) {
            throw CapacityError("build_buffers: shard " + std::to_string(k) + " received " +
                                std::to_string(npos) + " distinct positives but capacity is " +
                                std::to_string(capacity) +
                                "; increase the sampling ratio r or the shard count");
        }
        if (layout.owned_count(k) < capacity) {
            throw CapacityError("build_buffers: shard " + std::to_string(k) + " owns only " +
                                std::to_string(layout.owned_count(k)) +
                                " classes but capacity is " + std::to_string(capacity) +
                                " (C must divide evenly enough across K at this r)");
        }

        SampleBuffer buf;
        buf.shard_id = k;
        buf.num_positives = npos;
        buf.class_indices = pos;  // already ascending

        const int64_t need = capacity - npos;
        if (need == layout.owned_count(k) - npos) {
            // full sampling: take every remaining owned class, ascending
            size_t p = 0;
            for (int64_t c = layout.owned_begin(k); c < layout.owned_end(k); ++c) {
                if (p < pos.size() && pos[p] == c) {
                    ++p;
                    continue;
                }
                buf.class_indices.push_back(c);
            }
        } else if (need > 0) {
            SeededRng shard_rng = iteration_rng.fork(static_cast<uint64_t>(k));
            auto negatives = sample_without_replacement(shard_rng, layout.owned_begin(k),
                                                        layout.owned_end(k), pos, need);
            buf.class_indices.insert(buf.class_indices.end(), negatives.begin(),
                                     negatives.end());
        }
        buffers.push_back(std::move(buf));
    }
    return buffers;
}

// (shard, column) of a batch label's center. Positives are sorted, so this
// is a binary search within the owning shard's positive section.
inline std::pair<int64_t, int64_t> locate_positive(std::span<const SampleBuffer> buffers,
                                                   int64_t label,
                                                   const ShardLayout& layout) {
    const int64_t shard = layout.owner(label);
    const auto pos = buffers[static_cast<size_t>(shard)].positives();
    const auto it = std::lower_bound(pos.begin(), pos.end(), label);
    if (it == pos.end() || *it != label) {
        throw ContractError("locate_positive: label " + std::to_string(label) +
                            " was not part of the batch that built these buffers");
    }
    return {shard, it - pos.begin()};
}

} // namespace pfc
