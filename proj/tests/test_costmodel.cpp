#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "oracles.hpp"
#include "pfc/costmodel.hpp"
#include "pfc/shardsim.hpp"

using namespace pfc;

TEST_CASE("paper-scale logits arithmetic", "[costmodel]") {
    // C=2M, K=8, B=1024, r=1, fp16: 250000 * 1024 * 2 bytes = 512 MB
    CostInputs in;
    in.classes = 2'000'000;
    in.dim = 512;
    in.batch_total = 1024;
    in.shards = 8;
    in.r = 1.0;
    in.width_bytes = 2;
    const CostEstimate fc = estimate(in);
    CHECK(fc.logits_bytes == 512'000'000ull);

    in.r = 0.1;
    const CostEstimate pfc = estimate(in);
    CHECK(pfc.logits_bytes == 51'200'000ull);  // exactly 0.1x
}

TEST_CASE("pfc logits bytes are exactly r times fc bytes", "[costmodel]") {
    // the proportionality claim concerns configurations where C*r/K is
    // whole, which is how the bench tables are laid out
    for (int64_t C : {1000, 4000, 600000}) {
        for (int64_t K : {1, 2, 4, 8}) {
            for (double r : {0.1, 0.25, 0.5, 1.0}) {
                const double cap = static_cast<double>(C) * r / static_cast<double>(K);
                if (cap != std::floor(cap)) continue;
                CostInputs in;
                in.classes = C;
                in.dim = 64;
                in.batch_total = 128;
                in.shards = K;
                in.width_bytes = 2;
                in.r = 1.0;
                const auto fc = estimate(in);
                in.r = r;
                const auto pfc = estimate(in);
                CHECK(static_cast<double>(pfc.logits_bytes) ==
                      Catch::Approx(r * static_cast<double>(fc.logits_bytes)));
                CHECK(static_cast<double>(pfc.flops) ==
                      Catch::Approx(r * static_cast<double>(fc.flops)));
            }
        }
    }
}

TEST_CASE("communication estimate equals the measured trace exactly", "[costmodel]") {
    const int64_t C = 1000, D = 64, B = 128, K = 4;
    auto shards = init_center_shards(ShardLayout(C, K), D, 5);
    SeededRng data_rng(5, make_stream("cost-live"));
    FeatureBatch batch;
    batch.features = oracle::random_matrix(data_rng, D, B, 1.0);
    batch.labels.resize(B);
    for (auto& l : batch.labels) l = static_cast<int64_t>(data_rng.next_below(C));

    StepConfig sc;
    sc.r = 0.5;
    sc.lr = 0.01;
    SeededRng iter_rng(5, make_stream("step", 0));
    const StepResult res = distributed_partial_step(shards, batch, sc, iter_rng);

    CostInputs in;
    in.classes = C;
    in.dim = D;
    in.batch_total = B;
    in.shards = K;
    in.r = sc.r;
    in.width_bytes = 8;
    const CostEstimate est = estimate(in);
    CHECK(est.allgather_bytes == res.trace.allgather_bytes);
    CHECK(est.reduce_scalar_bytes == res.trace.reduce_scalar_bytes);
    CHECK(est.reduce_grad_bytes == res.trace.reduce_grad_bytes);
    CHECK(est.comm_bytes == res.trace.total_bytes());
}

TEST_CASE("monotonicity in C, D, B, width; centers shrink with K", "[costmodel]") {
    CostInputs base;
    base.classes = 10000;
    base.dim = 64;
    base.batch_total = 256;
    base.shards = 4;
    base.r = 0.2;
    const CostEstimate b = estimate(base);

    auto grown = base;
    grown.classes *= 2;
    CHECK(estimate(grown).logits_bytes >= b.logits_bytes);
    grown = base;
    grown.dim *= 2;
    CHECK(estimate(grown).flops >= b.flops);
    grown = base;
    grown.batch_total *= 2;
    CHECK(estimate(grown).logits_bytes >= b.logits_bytes);
    grown = base;
    grown.width_bytes = 16;
    CHECK(estimate(grown).logits_bytes >= b.logits_bytes);
    grown = base;
    grown.shards *= 2;
    CHECK(estimate(grown).center_bytes <= b.center_bytes);
}

TEST_CASE("scaling report shows FC logits growing with K", "[costmodel]") {
    const std::string csv = scaling_report({8, 16, 32, 64}, 125000, 128, 512, 0.1, 2);
    std::istringstream lines(csv);
    std::string header;
    std::getline(lines, header);
    CHECK(header.find("fc_logits_bytes") != std::string::npos);

    uint64_t prev_fc = 0;
    std::string row;
    int rows = 0;
    while (std::getline(lines, row)) {
        ++rows;
        // columns: K,C,B,fc_logits,pfc_logits,...
        std::istringstream cells(row);
        std::string cell;
        std::getline(cells, cell, ',');  // K
        std::getline(cells, cell, ',');  // C
        std::getline(cells, cell, ',');  // B
        std::getline(cells, cell, ',');
        const uint64_t fc = std::stoull(cell);
        std::getline(cells, cell, ',');
        const uint64_t pfc = std::stoull(cell);
        CHECK(fc > prev_fc);  // grows with K since B rises with K
        CHECK(static_cast<double>(pfc) == Catch::Approx(0.1 * static_cast<double>(fc)));
        prev_fc = fc;
    }
    CHECK(rows == 4);

    // r=1 report: PFC column equals FC column identically
    const std::string same = scaling_report({2, 4}, 1000, 64, 64, 1.0, 8);
    std::istringstream l2(same);
    std::getline(l2, header);
    while (std::getline(l2, row)) {
        std::istringstream cells(row);
        std::string cell;
        for (int i = 0; i < 3; ++i) std::getline(cells, cell, ',');
        std::getline(cells, cell, ',');
        const uint64_t fc = std::stoull(cell);
        std::getline(cells, cell, ',');
        const uint64_t pfc = std::stoull(cell);
        CHECK(fc == pfc);
    }
}
