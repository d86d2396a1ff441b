#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>

#include "oracles.hpp"
#include "pfc/shardsim.hpp"

using namespace pfc;

namespace {

FeatureBatch random_batch(SeededRng& rng, int64_t dim, int64_t bsz, int64_t classes) {
    FeatureBatch batch;
    batch.features = oracle::random_matrix(rng, dim, bsz, 1.0);
    batch.labels.resize(static_cast<size_t>(bsz));
    for (auto& l : batch.labels) l = static_cast<int64_t>(rng.next_below(classes));
    return batch;
}

Matrix gather_weights(std::span<const CenterShard> shards) {
    const int64_t dim = shards.front().weights.rows();
    const int64_t classes = shards.back().class_end;
    Matrix w(dim, classes);
    for (const auto& s : shards) {
        for (int64_t j = 0; j < s.owned(); ++j) {
            for (int64_t d = 0; d < dim; ++d) w(d, s.class_begin + j) = s.weights(d, j);
        }
    }
    return w;
}

} // namespace

TEST_CASE("all_gather_features concatenates in shard order", "[shardsim]") {
    SeededRng rng(3, make_stream("gather"));
    // K=1 identity
    FeatureBatch single = random_batch(rng, 8, 5, 10);
    CollectiveTrace trace;
    FeatureBatch out = all_gather_features(std::vector<FeatureBatch>{single}, &trace);
    CHECK(out.features == single.features);
    CHECK(trace.allgather_bytes == 0);

    // K=4 blocks of 32 -> batch of 128
    std::vector<FeatureBatch> blocks;
    for (int k = 0; k < 4; ++k) blocks.push_back(random_batch(rng, 8, 32, 10));
    trace = {};
    FeatureBatch gathered = all_gather_features(blocks, &trace);
    CHECK(gathered.batch() == 128);
    CHECK(gathered.features(3, 32 * 2 + 7) == blocks[2].features(3, 7));
    CHECK(gathered.labels[32 * 3 + 1] == blocks[3].labels[1]);
    CHECK(trace.allgather_bytes == 3ull * 128 * 8 * 8);

    // split-then-gather round trip
    FeatureBatch whole = random_batch(rng, 8, 128, 10);
    std::vector<FeatureBatch> split;
    for (int k = 0; k < 4; ++k) {
        FeatureBatch blk;
        blk.features = Matrix(8, 32);
        for (int64_t b = 0; b < 32; ++b) {
            for (int64_t d = 0; d < 8; ++d) blk.features(d, b) = whole.features(d, k * 32 + b);
            blk.labels.push_back(whole.labels[static_cast<size_t>(k * 32 + b)]);
        }
        split.push_back(std::move(blk));
    }
    FeatureBatch round = all_gather_features(split);
    CHECK(round.features == whole.features);
    CHECK(round.labels == whole.labels);

    // ragged dimension rejected
    std::vector<FeatureBatch> ragged{random_batch(rng, 8, 4, 10), random_batch(rng, 6, 4, 10)};
    CHECK_THROWS_AS(all_gather_features(ragged), ShapeError);
}

TEST_CASE("update_centers unit behavior", "[shardsim]") {
    ShardLayout layout(8, 2);
    auto shards = init_center_shards(layout, 4, 99);
    CenterShard& s0 = shards[0];
    const Matrix before = s0.weights;

    SampleBuffer buf;
    buf.shard_id = 0;
    buf.class_indices = {1, 3};
    buf.num_positives = 1;

    // zero gradient, zero weight decay, fresh momentum: unchanged
    update_centers(s0, Matrix(4, 2), buf, 0.5, 0.9, 0.0);
    CHECK(s0.weights == before);

    // momentum=0, single step: column moves by exactly -lr * grad
    Matrix grad(4, 2);
    grad(2, 0) = 0.25;
    update_centers(s0, grad, buf, 0.1, 0.0, 0.0);
    CHECK(s0.weights(2, 1) == before(2, 1) - 0.1 * 0.25);
    CHECK(s0.weights(2, 3) == before(2, 3));

    // foreign class is a contract error
    SampleBuffer foreign;
    foreign.class_indices = {7};  // owned by shard 1
    CHECK_THROWS_AS(update_centers(s0, Matrix(4, 1), foreign, 0.1, 0.0, 0.0), ContractError);
}

TEST_CASE("full sampling matches the dense FC reference", "[shardsim]") {
    const int64_t C = 40, D = 12, B = 16, K = 4;
    ShardLayout layout(C, K);
    auto shards = init_center_shards(layout, D, 2024);

    oracle::DenseFcState dense{gather_weights(shards), Matrix(D, C)};

    SeededRng data_rng(5, make_stream("dense-cmp"));
    const StepConfig cfg{.r = 1.0,
                         .margin = MarginConfig::cosface_style(),
                         .filter_threshold = std::nullopt,
                         .lr = 0.05,
                         .momentum = 0.9,
                         .weight_decay = 5e-4};
    for (int step = 0; step < 5; ++step) {
        FeatureBatch batch = random_batch(data_rng, D, B, C);
        SeededRng iter_rng(2024, make_stream("step", static_cast<uint64_t>(step)));
        StepResult got = distributed_partial_step(shards, batch, cfg, iter_rng);
        oracle::DenseStepOut want = oracle::dense_fc_reference_step(
            dense, batch.features, batch.labels, cfg.margin, std::nullopt, cfg.lr, cfg.momentum,
            cfg.weight_decay);
        CHECK(oracle::rel_diff(got.loss, want.loss) < 1e-10);
        CHECK(oracle::max_rel_diff(got.d_features, want.d_features, 1e-6) < 1e-10);
        CHECK(oracle::max_rel_diff(gather_weights(shards), dense.weights, 1e-6) < 1e-10);
    }
}

TEST_CASE("filter on matches the dense reference with the same threshold", "[shardsim]") {
    const int64_t C = 30, D = 10, B = 12, K = 3;
    ShardLayout layout(C, K);
    auto shards = init_center_shards(layout, D, 77);
    oracle::DenseFcState dense{gather_weights(shards), Matrix(D, C)};

    SeededRng data_rng(6, make_stream("dense-filter"));
    StepConfig cfg;
    cfg.r = 1.0;
    cfg.margin = MarginConfig::cosface_style();
    cfg.filter_threshold = 0.1;  // low threshold so the mask actually bites
    cfg.lr = 0.05;
    for (int step = 0; step < 3; ++step) {
        FeatureBatch batch = random_batch(data_rng, D, B, C);
        SeededRng iter_rng(77, make_stream("step", static_cast<uint64_t>(step)));
        StepResult got = distributed_partial_step(shards, batch, cfg, iter_rng);
        oracle::DenseStepOut want = oracle::dense_fc_reference_step(
            dense, batch.features, batch.labels, cfg.margin, cfg.filter_threshold, cfg.lr,
            cfg.momentum, cfg.weight_decay);
        CHECK(oracle::rel_diff(got.loss, want.loss) < 1e-10);
        CHECK(oracle::max_rel_diff(got.d_features, want.d_features, 1e-6) < 1e-10);
    }
}

TEST_CASE("shard-count invariance at full sampling", "[shardsim]") {
    const int64_t C = 48, D = 8, B = 12;
    SeededRng data_rng(8, make_stream("kinv"));
    FeatureBatch batch = random_batch(data_rng, D, B, C);

    StepConfig cfg;
    cfg.r = 1.0;
    cfg.lr = 0.1;
    std::optional<double> base_loss;
    std::optional<Matrix> base_weights;
    for (int64_t K : {1, 2, 4, 8}) {
        auto shards = init_center_shards(ShardLayout(C, K), D, 31337);
        SeededRng iter_rng(31337, make_stream("step", 0));
        StepResult res = distributed_partial_step(shards, batch, cfg, iter_rng);
        Matrix w = gather_weights(shards);
        if (!base_loss) {
            base_loss = res.loss;
            base_weights = w;
        } else {
            CHECK(oracle::rel_diff(res.loss, *base_loss) < 1e-10);
            CHECK(oracle::max_rel_diff(w, *base_weights, 1e-6) < 1e-10);
        }
    }
}

TEST_CASE("loss agrees with the loss module on the concatenated buffer", "[shardsim]") {
    const int64_t C = 60, D = 9, B = 10, K = 3;
    ShardLayout layout(C, K);
    auto shards = init_center_shards(layout, D, 55);
    SeededRng data_rng(55, make_stream("concat"));
    FeatureBatch batch = random_batch(data_rng, D, B, C);

    StepConfig cfg;
    cfg.r = 0.5;
    cfg.margin = MarginConfig::arcface_style();
    cfg.filter_threshold = 0.4;
    cfg.lr = 0.1;

    auto shards_copy = shards;
    SeededRng iter_rng(55, make_stream("step", 4));
    StepResult res = distributed_partial_step(shards_copy, batch, cfg, iter_rng);

    // concatenate the buffers the step actually used
    SeededRng iter_rng2(55, make_stream("step", 4));
    auto buffers = build_buffers(layout, batch.labels, cfg.r, iter_rng2);
    std::vector<int64_t> concat;
    for (const auto& buf : buffers)
        concat.insert(concat.end(), buf.class_indices.begin(), buf.class_indices.end());

    Matrix centers(D, static_cast<int64_t>(concat.size()));
    for (size_t j = 0; j < concat.size(); ++j) {
        const auto& s = shards[static_cast<size_t>(layout.owner(concat[j]))];
        for (int64_t d = 0; d < D; ++d)
            centers(d, static_cast<int64_t>(j)) = s.weights(d, s.local_col(concat[j]));
    }
    PartialLossInput in;
    in.raw_features = batch.features;
    in.raw_centers_buffer = centers;
    in.filter_threshold = cfg.filter_threshold;
    in.positive_col.resize(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
        const auto it = std::find(concat.begin(), concat.end(), batch.labels[b]);
        REQUIRE(it != concat.end());
        in.positive_col[b] = static_cast<int32_t>(it - concat.begin());
    }
    const LossGrad module = compute_partial_loss(in, cfg.margin);
    CHECK(oracle::rel_diff(res.loss, module.loss) < 1e-12);
    CHECK(oracle::max_rel_diff(res.d_features, module.d_features, 1e-6) < 1e-10);
}

TEST_CASE("centers absent from every buffer stay bit-identical", "[shardsim]") {
    const int64_t C = 100, D = 8, B = 6, K = 2;
    auto shards = init_center_shards(ShardLayout(C, K), D, 13);
    const auto before = shards;

    SeededRng data_rng(13, make_stream("sparse"));
    FeatureBatch batch = random_batch(data_rng, D, B, C);
    StepConfig cfg;
    cfg.r = 0.2;
    cfg.lr = 0.1;
    SeededRng iter_rng(13, make_stream("step", 1));
    StepResult res = distributed_partial_step(shards, batch, cfg, iter_rng);

    std::set<int64_t> buffered;
    for (const auto& buf : res.buffers)
        buffered.insert(buf.class_indices.begin(), buf.class_indices.end());
    int64_t untouched = 0;
    for (int64_t k = 0; k < K; ++k) {
        for (int64_t j = 0; j < shards[k].owned(); ++j) {
            const int64_t cls = shards[k].class_begin + j;
            if (buffered.count(cls)) continue;
            ++untouched;
            for (int64_t d = 0; d < D; ++d) {
                REQUIRE(shards[k].weights(d, j) == before[k].weights(d, j));
                REQUIRE(shards[k].momentum(d, j) == before[k].momentum(d, j));
            }
        }
    }
    CHECK(untouched > 0);
}

TEST_CASE("communication trace matches closed forms", "[shardsim]") {
    const int64_t C = 64, D = 16, B = 8, K = 4;
    auto shards = init_center_shards(ShardLayout(C, K), D, 21);
    SeededRng data_rng(21, make_stream("trace"));
    FeatureBatch batch = random_batch(data_rng, D, B, C);
    StepConfig cfg;
    cfg.r = 0.5;
    cfg.lr = 0.1;
    SeededRng iter_rng(21, make_stream("step", 0));
    StepResult res = distributed_partial_step(shards, batch, cfg, iter_rng);

    // all-gather: per worker (K-1)/K * B * D * 8 bytes; totals are x K
    CHECK(res.trace.allgather_bytes == static_cast<uint64_t>(K - 1) * B * D * 8);
    CHECK(res.trace.allgather_bytes / K == static_cast<uint64_t>(K - 1) * B * D * 8 / K);
    // two scalar rounds (max, sum), ring form: 2 rounds * 2 * B * 8 * (K-1)
    CHECK(res.trace.reduce_scalar_bytes == static_cast<uint64_t>(K - 1) * B * 2 * 2 * 8);
    // gradient exchange: 2 * B * D * 8 * (K-1)
    CHECK(res.trace.reduce_grad_bytes == static_cast<uint64_t>(K - 1) * B * D * 2 * 8);
    CHECK(res.trace.reduce_ops == 3);
}

TEST_CASE("results do not depend on PFC_SIM_THREADS", "[shardsim]") {
    const int64_t C = 64, D = 12, B = 16, K = 8;
    SeededRng data_rng(99, make_stream("threads"));
    FeatureBatch batch = random_batch(data_rng, D, B, C);
    // two labels per shard, comfortably under the capacity of 2 at r=0.25
    for (int64_t b = 0; b < B; ++b) batch.labels[b] = (b % K) * 8 + (b / K);
    StepConfig cfg;
    cfg.r = 0.25;
    cfg.lr = 0.1;

    auto run = [&](const char* threads) {
        setenv("PFC_SIM_THREADS", threads, 1);
        auto shards = init_center_shards(ShardLayout(C, K), D, 4242);
        SeededRng iter_rng(4242, make_stream("step", 7));
        StepResult res = distributed_partial_step(shards, batch, cfg, iter_rng);
        return std::make_pair(res, gather_weights(shards));
    };
    auto [res1, w1] = run("1");
    auto [res4, w4] = run("4");
    unsetenv("PFC_SIM_THREADS");

    CHECK(res1.loss == res4.loss);
    CHECK(res1.d_features == res4.d_features);
    CHECK(w1 == w4);
}

TEST_CASE("passive update frequency of a fixed class approaches r", "[shardsim]") {
    // labels never touch shard 0, so class 5's update rate is exactly
    // capacity/owned = r
    const int64_t C = 200, D = 4, B = 4, K = 4;
    const double r = 0.2;
    auto shards = init_center_shards(ShardLayout(C, K), D, 7);
    StepConfig cfg;
    cfg.r = r;
    cfg.lr = 1e-4;

    const int trials = 3000;
    int updates = 0;
    SeededRng data_rng(7, make_stream("passive"));
    for (int t = 0; t < trials; ++t) {
        FeatureBatch batch;
        batch.features = oracle::random_matrix(data_rng, D, B, 1.0);
        batch.labels.resize(B);
        for (auto& l : batch.labels) l = 50 + static_cast<int64_t>(data_rng.next_below(150));
        SeededRng iter_rng(7, make_stream("step", static_cast<uint64_t>(t)));
        StepResult res = distributed_partial_step(shards, batch, cfg, iter_rng);
        for (int64_t c : res.buffers[0].class_indices) updates += (c == 5);
    }
    const double sigma = std::sqrt(trials * r * (1 - r));
    CHECK(std::abs(updates - trials * r) < 5.0 * sigma);
}

TEST_CASE("positive-only class update aligns with the attraction term", "[shardsim]") {
    // Every sample belongs to class 3; the update of W_3 should point
    // along sum_b (1 - p_b) xhat_b, the attraction term of the center
    // update rule, computed here by an independent dense pass.
    const int64_t C = 20, D = 6, B = 5;
    auto shards = init_center_shards(ShardLayout(C, 1), D, 3);
    oracle::DenseFcState dense{gather_weights(shards), Matrix(D, C)};

    SeededRng data_rng(3, make_stream("eq3"));
    FeatureBatch batch = random_batch(data_rng, D, B, C);
    for (auto& l : batch.labels) l = 3;

    const Matrix before = gather_weights(shards);
    StepConfig cfg;
    cfg.r = 1.0;
    cfg.margin = MarginConfig::plain();
    cfg.lr = 0.1;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    SeededRng iter_rng(3, make_stream("step", 0));
    distributed_partial_step(shards, batch, cfg, iter_rng);
    const Matrix after = gather_weights(shards);

    // independent probabilities for the attraction term
    std::vector<double> attraction(D, 0.0);
    const Matrix xn = l2_normalize_columns(batch.features);
    const Matrix wn = l2_normalize_columns(before);
    for (int64_t b = 0; b < B; ++b) {
        double denom = 0.0, num = 0.0;
        for (int64_t j = 0; j < C; ++j) {
            double c = 0.0;
            for (int64_t d = 0; d < D; ++d) c += xn(d, b) * wn(d, j);
            const double e = std::exp(c);
            denom += e;
            if (j == 3) num = e;
        }
        const double p = num / denom;
        for (int64_t d = 0; d < D; ++d) attraction[d] += (1.0 - p) * xn(d, b);
    }
    double align = 0.0, na = 0.0, nd = 0.0;
    for (int64_t d = 0; d < D; ++d) {
        const double delta = after(d, 3) - before(d, 3);
        align += delta * attraction[d];
        na += attraction[d] * attraction[d];
        nd += delta * delta;
    }
    CHECK(align / std::sqrt(na * nd) > 0.0);
}
