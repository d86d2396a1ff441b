#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

#include "pfc/error.hpp"

namespace pfc {

namespace detail {

// murmur3 64-bit finalizer; full avalanche.
inline uint64_t mix64(uint64_t x) {
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdULL;
    x ^= x >> 33;
    x *= 0xc4ceb9fe1a85ec53ULL;
    x ^= x >> 33;
    return x;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

// Counter-based random stream. Output i is a pure function of
// (seed, stream_id, i), so identical keys replay the exact same sequence
// on every platform and under any worker interleaving. Streams are cheap:
// derive one per (shard, iteration) instead of sharing state.
class SeededRng {
  public:
    SeededRng(uint64_t seed, uint64_t stream_id) : seed_(seed), stream_(stream_id) {}

    uint64_t seed() const { return seed_; }
    uint64_t stream_id() const { return stream_; }

    // Child stream keyed off this one; used for per-shard sampling inside
    // one iteration's stream.
    SeededRng fork(uint64_t label) const {
        return SeededRng(seed_, detail::mix64(stream_ ^ detail::mix64(label + 0x9e3779b97f4a7c15ULL)));
    }

    uint64_t next_u64() {
        const uint64_t k = detail::mix64(seed_ + 0x9e3779b97f4a7c15ULL) ^ detail::mix64(stream_);
        return detail::mix64(k + 0x9e3779b97f4a7c15ULL * ++counter_);
    }

    // Uniform on [0, 1): 53 mantissa bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1]; safe as a log() argument.
    double next_double_open() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    // Uniform integer in [0, n) via modulo rejection (exactly uniform).
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw ContractError("SeededRng::next_below: n must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return r % n;
    }

    // Standard normal via Box-Muller; avoids platform-dependent
    // std::normal_distribution internals.
    double next_normal() {
        const double u1 = next_double_open();
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

  private:
    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_ = 0;
};

// Builds a stream id from a purpose tag plus integer labels
// (shard id, iteration, epoch, ...).
inline uint64_t make_stream(std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = detail::fnv1a(tag);
    h = detail::mix64(h ^ detail::mix64(a + 0x9e3779b97f4a7c15ULL));
    h = detail::mix64(h ^ detail::mix64(b + 0x2545f4914f6cdd1dULL));
    return h;
}

// k distinct indices drawn uniformly from [lo, hi) minus `excluded`
// (sorted ascending). Partial Fisher-Yates over the materialized
// population, so the result is uniform over k-subsets.
inline std::vector<int64_t> sample_without_replacement(SeededRng& rng, int64_t lo, int64_t hi,
                                                       std::span<const int64_t> excluded,
                                                       int64_t k) {
    if (k < 0) throw ContractError("sample_without_replacement: negative k");
    std::vector<int64_t> pool;
    pool.reserve(static_cast<size_t>(hi - lo));
    size_t e = 0;
    for (int64_t v = lo; v < hi; ++v) {
        while (e < excluded.size() && excluded[e] < v) ++e;
        if (e < excluded.size() && excluded[e] == v) continue;
        pool.push_back(v);
    }
    if (static_cast<size_t>(k) > pool.size()) {
        throw CapacityError("sample_without_replacement: k=" + std::to_string(k) +
                            " exceeds population of " + std::to_string(pool.size()));
    }
    for (int64_t i = 0; i < k; ++i) {
        const uint64_t j = i + rng.next_below(pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(static_cast<size_t>(k));
    return pool;
}

} // namespace pfc
