#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "pfc/error.hpp"
#include "pfc/types.hpp"

namespace pfc {

// Closed-form per-shard memory and compute for the classification layer.
// Backbone cost is out of scope: this model reproduces orderings and
// ratios, never absolute totals that include activations.
struct CostEstimate {
    uint64_t center_bytes = 0;       // per-shard slice of W
    uint64_t logits_bytes = 0;       // per-shard similarity block
    uint64_t flops = 0;              // per-shard fwd+bwd FC FLOPs per step
    uint64_t comm_bytes = 0;         // totals across workers, per step
    uint64_t allgather_bytes = 0;    //   of which: feature gather
    uint64_t reduce_scalar_bytes = 0;  //   of which: softmax max+sum rounds
    uint64_t reduce_grad_bytes = 0;  //   of which: gradient exchange
    int64_t width_bytes = 8;
};

struct CostInputs {
    int64_t classes = 0;      // C
    int64_t dim = 0;          // D
    int64_t batch_total = 0;  // B across all workers
    int64_t shards = 1;       // K
    double r = 1.0;
    int64_t width_bytes = 8;  // 2 models fp16 logits, 8 matches the simulator
};

inline CostEstimate estimate(const CostInputs& in) {
    if (in.classes < 1 || in.dim < 1 || in.batch_total < 1 || in.shards < 1 ||
        in.width_bytes < 1) {
        throw ContractError("costmodel: all dimensions must be positive");
    }
    if (!(in.r > 0.0 && in.r <= 1.0)) {
        throw ContractError("costmodel: r must lie in (0, 1]");
    }
    const auto C = static_cast<uint64_t>(in.classes);
    const auto D = static_cast<uint64_t>(in.dim);
    const auto B = static_cast<uint64_t>(in.batch_total);
    const auto K = static_cast<uint64_t>(in.shards);
    const auto W = static_cast<uint64_t>(in.width_bytes);

    const uint64_t centers_per_shard = (C + K - 1) / K;  // ceil(C/K)
    // ceil(C*r) with a guard against 0.1-style binary representation noise
    const auto total_buffered =
        static_cast<uint64_t>(std::ceil(static_cast<double>(in.classes) * in.r - 1e-9));
    const uint64_t buffer_per_shard = (total_buffered + K - 1) / K;

    CostEstimate out;
    out.width_bytes = in.width_bytes;
    out.center_bytes = D * centers_per_shard * W;
    out.logits_bytes = buffer_per_shard * B * W;
    // forward inner products: 2*D*cap*B, x3 for forward + backward
    out.flops = 2 * D * buffer_per_shard * B * 3;
    // mirrors shardsim's CollectiveTrace exactly
    out.allgather_bytes = (K - 1) * B * D * W;
    out.reduce_scalar_bytes = (K - 1) * B * 2 * 2 * W;
    out.reduce_grad_bytes = (K - 1) * B * D * 2 * W;
    out.comm_bytes = out.allgather_bytes + out.reduce_scalar_bytes + out.reduce_grad_bytes;
    return out;
}

// Fig-3-style sweep: K grows, C and the total batch grow with it, and the
// per-shard logits block is what explodes. Emits one CSV row per K for FC
// (r=1) and the requested PFC ratio.
inline std::string scaling_report(const std::vector<int64_t>& shard_counts,
                                  int64_t classes_per_shard, int64_t batch_per_worker,
                                  int64_t dim, double r, int64_t width_bytes) {
    if (shard_counts.empty() || classes_per_shard < 1 || batch_per_worker < 1) {
        throw ContractError("scaling_report: empty or non-positive ranges");
    }
    std::ostringstream out;
    out << "K,C,B_total,fc_logits_bytes,pfc_logits_bytes,center_bytes,fc_flops,pfc_flops,"
           "comm_bytes\n";
    for (int64_t k : shard_counts) {
        CostInputs in;
        in.classes = classes_per_shard * k;
        in.dim = dim;
        in.batch_total = batch_per_worker * k;
        in.shards = k;
        in.width_bytes = width_bytes;
        in.r = 1.0;
        const CostEstimate fc = estimate(in);
        in.r = r;
        const CostEstimate pfc = estimate(in);
        out << k << ',' << in.classes << ',' << in.batch_total << ',' << fc.logits_bytes << ','
            << pfc.logits_bytes << ',' << fc.center_bytes << ',' << fc.flops << ','
            << pfc.flops << ',' << fc.comm_bytes << "\n";
    }
    return out.str();
}

} // namespace pfc
