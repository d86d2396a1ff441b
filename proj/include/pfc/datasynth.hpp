#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pfc/io.hpp"
#include "pfc/matrix.hpp"
#include "pfc/rng.hpp"

namespace pfc {

struct SynthConfig {
    int64_t num_identities = 600;
    int64_t samples_min = 8;
    int64_t samples_max = 14;
    int64_t dim = 64;
    double noise = 0.1;  // intra-class angular spread, radians
    uint64_t seed = 1;

    void validate() const {
        if (num_identities < 2) throw ConfigError("synth: need at least 2 identities");
        if (samples_min < 1 || samples_max < samples_min) {
            throw ConfigError("synth: samples range must satisfy 1 <= min <= max");
        }
        if (dim < 2) throw ConfigError("synth: dimension must be at least 2");
        if (!(noise >= 0.0 && noise < 3.141592653589793 / 4.0)) {
            throw ConfigError("synth: noise must lie in [0, pi/4)");
        }
    }
};

struct CorruptionRecord {
    uint8_t flipped = 0;
    int64_t conflict_group = -1;  // true identity when split into >=2 classes
};

// Labeled points on the unit hypersphere. `class_identity` maps every
// observed class back to the true identity it represents; clean data has
// the identity mapping. `prototypes` holds one unit column per observed
// class (pseudo-siblings share their identity's prototype).
struct SyntheticDataset {
    Matrix points;                        // D x N
    std::vector<int64_t> observed_labels; // N
    std::vector<int64_t> true_identities; // N
    Matrix prototypes;                    // D x C_observed
    std::vector<int64_t> class_identity;  // C_observed
    std::vector<CorruptionRecord> corruption;  // N

    int64_t dim() const { return points.rows(); }
    int64_t num_points() const { return points.cols(); }
    int64_t num_classes() const { return prototypes.cols(); }
    int64_t num_identities() const {
        int64_t m = -1;
        for (int64_t g : class_identity) m = std::max(m, g);
        return m + 1;
    }

    void validate() const {
        if (static_cast<int64_t>(observed_labels.size()) != num_points() ||
            static_cast<int64_t>(true_identities.size()) != num_points() ||
            static_cast<int64_t>(corruption.size()) != num_points() ||
            static_cast<int64_t>(class_identity.size()) != num_classes()) {
            throw DataError("SyntheticDataset: field lengths disagree");
        }
        for (int64_t l : observed_labels) {
            if (l < 0 || l >= num_classes()) throw DataError("SyntheticDataset: label out of range");
        }
    }
};

namespace detail {

// Unit vector with independent normal coordinates: uniform on the sphere.
inline std::vector<double> random_unit(SeededRng& rng, int64_t dim) {
    std::vector<double> v(static_cast<size_t>(dim));
    double norm = 0.0;
    for (auto& x : v) {
        x = rng.next_normal();
        norm += x * x;
    }
    const double inv = 1.0 / std::max(std::sqrt(norm), 1e-12);
    for (auto& x : v) x *= inv;
    return v;
}

} // namespace detail

// Clean dataset: one prototype per identity, points rotated away from the
// prototype by |N(0, noise)| radians along a random orthogonal direction.
inline SyntheticDataset generate(const SynthConfig& cfg) {
    cfg.validate();
    const int64_t C = cfg.num_identities;
    const int64_t D = cfg.dim;

    SyntheticDataset ds;
    ds.prototypes = Matrix(D, C);
    ds.class_identity.resize(static_cast<size_t>(C));
    std::vector<int64_t> counts(static_cast<size_t>(C));
    int64_t total = 0;
    for (int64_t g = 0; g < C; ++g) {
        ds.class_identity[g] = g;
        SeededRng proto_rng(cfg.seed, make_stream("synth-proto", static_cast<uint64_t>(g)));
        const auto p = detail::random_unit(proto_rng, D);
        for (int64_t d = 0; d < D; ++d) ds.prototypes(d, g) = p[d];
        counts[g] = cfg.samples_min +
                    static_cast<int64_t>(proto_rng.next_below(
                        static_cast<uint64_t>(cfg.samples_max - cfg.samples_min + 1)));
        total += counts[g];
    }

    ds.points = Matrix(D, total);
    ds.observed_labels.resize(static_cast<size_t>(total));
    ds.true_identities.resize(static_cast<size_t>(total));
    ds.corruption.resize(static_cast<size_t>(total));
    int64_t col = 0;
    for (int64_t g = 0; g < C; ++g) {
        SeededRng point_rng(cfg.seed, make_stream("synth-points", static_cast<uint64_t>(g)));
        for (int64_t s = 0; s < counts[g]; ++s, ++col) {
            const double theta = std::abs(point_rng.next_normal()) * cfg.noise;
            // orthogonal direction: random unit minus its prototype component
            auto u = detail::random_unit(point_rng, D);
            double proj = 0.0;
            for (int64_t d = 0; d < D; ++d) proj += u[d] * ds.prototypes(d, g);
            double norm = 0.0;
            for (int64_t d = 0; d < D; ++d) {
                u[d] -= proj * ds.prototypes(d, g);
                norm += u[d] * u[d];
            }
            const double inv = 1.0 / std::max(std::sqrt(norm), 1e-12);
            const double c = std::cos(theta), s_ = std::sin(theta);
            for (int64_t d = 0; d < D; ++d) {
                ds.points(d, col) = c * ds.prototypes(d, g) + s_ * u[d] * inv;
            }
            ds.observed_labels[col] = g;
            ds.true_identities[col] = g;
        }
    }
    return ds;
}

// Splits `num_to_split` randomly chosen identities across `extra_classes`
// pseudo classes (round-robin over each identity's points). Identities
// with fewer points than their pseudo-class share get one class per point.
// Operates on clean datasets (classes == identities).
inline SyntheticDataset conflict_split(const SyntheticDataset& ds, int64_t num_to_split,
                                       int64_t extra_classes, SeededRng& rng) {
    ds.validate();
    const int64_t C = ds.num_classes();
    if (C != ds.num_identities() || ds.class_identity[0] != 0) {
        throw ContractError("conflict_split: expects an unsplit dataset");
    }
    if (num_to_split > C) throw ContractError("conflict_split: cannot split more than C");
    if (extra_classes < num_to_split) {
        throw ContractError("conflict_split: extra_classes must be >= num_to_split");
    }

    auto chosen = sample_without_replacement(rng, 0, C, {}, num_to_split);
    std::sort(chosen.begin(), chosen.end());
    std::vector<uint8_t> is_split(static_cast<size_t>(C), 0);
    for (int64_t g : chosen) is_split[static_cast<size_t>(g)] = 1;

    // points per identity, needed for the degenerate-split cap
    std::vector<int64_t> points_of(static_cast<size_t>(C), 0);
    for (int64_t g : ds.true_identities) points_of[static_cast<size_t>(g)]++;

    // pseudo-class budget: even shares, remainder to the earliest chosen
    std::vector<int64_t> pseudo_count(static_cast<size_t>(C), 0);
    if (num_to_split > 0) {
        const int64_t share = extra_classes / num_to_split;
        int64_t remainder = extra_classes % num_to_split;
        for (int64_t g : chosen) {
            int64_t want = share + (remainder > 0 ? 1 : 0);
            if (remainder > 0) --remainder;
            pseudo_count[static_cast<size_t>(g)] = std::min(want, points_of[static_cast<size_t>(g)]);
        }
    }

    // new class numbering: unsplit identities first (ascending), then each
    // split identity's pseudo block (ascending identity)
    std::vector<int64_t> first_class(static_cast<size_t>(C), -1);
    int64_t next_class = 0;
    for (int64_t g = 0; g < C; ++g) {
        if (!is_split[static_cast<size_t>(g)]) first_class[static_cast<size_t>(g)] = next_class++;
    }
    for (int64_t g : chosen) {
        first_class[static_cast<size_t>(g)] = next_class;
        next_class += pseudo_count[static_cast<size_t>(g)];
    }

    SyntheticDataset out = ds;
    out.prototypes = Matrix(ds.dim(), next_class);
    out.class_identity.assign(static_cast<size_t>(next_class), -1);
    for (int64_t g = 0; g < C; ++g) {
        const int64_t n = is_split[static_cast<size_t>(g)] ? pseudo_count[static_cast<size_t>(g)] : 1;
        for (int64_t j = 0; j < n; ++j) {
            const int64_t cls = first_class[static_cast<size_t>(g)] + j;
            out.class_identity[static_cast<size_t>(cls)] = g;
            for (int64_t d = 0; d < ds.dim(); ++d) out.prototypes(d, cls) = ds.prototypes(d, g);
        }
    }

    std::vector<int64_t> seen(static_cast<size_t>(C), 0);
    for (int64_t i = 0; i < ds.num_points(); ++i) {
        const int64_t g = ds.true_identities[i];
        if (!is_split[static_cast<size_t>(g)]) {
            out.observed_labels[i] = first_class[static_cast<size_t>(g)];
            continue;
        }
        const int64_t n = pseudo_count[static_cast<size_t>(g)];
        out.observed_labels[i] = first_class[static_cast<size_t>(g)] + seen[static_cast<size_t>(g)] % n;
        seen[static_cast<size_t>(g)]++;
        if (n >= 2) out.corruption[i].conflict_group = g;
    }
    return out;
}

// Exactly floor(ratio * N) uniformly chosen points get a uniformly wrong
// label; the flip flag is recorded.
inline SyntheticDataset flip_labels(const SyntheticDataset& ds, double ratio, SeededRng& rng) {
    ds.validate();
    if (ds.num_classes() < 2) throw ContractError("flip_labels: need at least 2 classes");
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ContractError("flip_labels: ratio must lie in [0, 1)");

    SyntheticDataset out = ds;
    const auto n_flip = static_cast<int64_t>(ratio * static_cast<double>(ds.num_points()));
    const auto victims = sample_without_replacement(rng, 0, ds.num_points(), {}, n_flip);
    for (int64_t i : victims) {
        const int64_t old = out.observed_labels[i];
        int64_t wrong = static_cast<int64_t>(rng.next_below(ds.num_classes() - 1));
        if (wrong >= old) ++wrong;
        out.observed_labels[i] = wrong;
        out.corruption[i].flipped = 1;
    }
    return out;
}

// Long-tail condensation: `head_count` randomly chosen identities keep all
// their points; every other identity keeps a uniform count in
// [tail_min, tail_max] (or all, if it has fewer). The class set is
// unchanged.
inline SyntheticDataset longtail_condense(const SyntheticDataset& ds, int64_t head_count,
                                          int64_t tail_min, int64_t tail_max, SeededRng& rng) {
    ds.validate();
    if (tail_min < 1 || tail_max < tail_min) {
        throw ContractError("longtail_condense: need 1 <= tail_min <= tail_max");
    }
    const int64_t identities = ds.num_identities();
    auto head = sample_without_replacement(rng, 0, identities, {}, std::min(head_count, identities));
    std::vector<uint8_t> is_head(static_cast<size_t>(identities), 0);
    for (int64_t g : head) is_head[static_cast<size_t>(g)] = 1;

    // group point indices by identity (in point order)
    std::vector<std::vector<int64_t>> members(static_cast<size_t>(identities));
    for (int64_t i = 0; i < ds.num_points(); ++i) {
        members[static_cast<size_t>(ds.true_identities[i])].push_back(i);
    }

    std::vector<int64_t> keep;
    for (int64_t g = 0; g < identities; ++g) {
        const auto& pts = members[static_cast<size_t>(g)];
        if (is_head[static_cast<size_t>(g)] || pts.empty()) {
            keep.insert(keep.end(), pts.begin(), pts.end());
            continue;
        }
        const int64_t want = tail_min + static_cast<int64_t>(rng.next_below(
                                            static_cast<uint64_t>(tail_max - tail_min + 1)));
        if (want >= static_cast<int64_t>(pts.size())) {
            keep.insert(keep.end(), pts.begin(), pts.end());
            continue;
        }
        auto picked = sample_without_replacement(rng, 0, static_cast<int64_t>(pts.size()), {}, want);
        std::sort(picked.begin(), picked.end());
        for (int64_t p : picked) keep.push_back(pts[static_cast<size_t>(p)]);
    }
    std::sort(keep.begin(), keep.end());

    SyntheticDataset out;
    out.prototypes = ds.prototypes;
    out.class_identity = ds.class_identity;
    out.points = Matrix(ds.dim(), static_cast<int64_t>(keep.size()));
    out.observed_labels.reserve(keep.size());
    out.true_identities.reserve(keep.size());
    out.corruption.reserve(keep.size());
    int64_t col = 0;
    for (int64_t i : keep) {
        for (int64_t d = 0; d < ds.dim(); ++d) out.points(d, col) = ds.points(d, i);
        out.observed_labels.push_back(ds.observed_labels[i]);
        out.true_identities.push_back(ds.true_identities[i]);
        out.corruption.push_back(ds.corruption[i]);
        ++col;
    }
    return out;
}

// ---------------------------------------------------------------------
// Serialization: flat little-endian container, versioned header.
// ---------------------------------------------------------------------

inline constexpr uint64_t kDatasetMagic = 0x5445534444434650ULL;  // "PFCDDSET"
inline constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const SyntheticDataset& ds, const std::string& path) {
    ds.validate();
    BinaryWriter w(path);
    w.put<uint64_t>(kDatasetMagic);
    w.put<uint32_t>(kDatasetVersion);
    w.put<int64_t>(ds.dim());
    w.put<int64_t>(ds.num_points());
    w.put<int64_t>(ds.num_classes());
    w.put_matrix(ds.points);
    w.put_span<int64_t>(ds.observed_labels);
    w.put_span<int64_t>(ds.true_identities);
    w.put_matrix(ds.prototypes);
    w.put_span<int64_t>(ds.class_identity);
    std::vector<uint8_t> flips(ds.corruption.size());
    std::vector<int64_t> groups(ds.corruption.size());
    for (size_t i = 0; i < ds.corruption.size(); ++i) {
        flips[i] = ds.corruption[i].flipped;
        groups[i] = ds.corruption[i].conflict_group;
    }
    w.put_span<uint8_t>(flips);
    w.put_span<int64_t>(groups);
    w.close();
}

inline SyntheticDataset load_dataset(const std::string& path) {
    BinaryReader r(path);
    if (r.get<uint64_t>() != kDatasetMagic) throw DataError("not a dataset file: " + path);
    const auto version = r.get<uint32_t>();
    if (version != kDatasetVersion) {
        throw DataError("dataset version " + std::to_string(version) + " unsupported (want " +
                        std::to_string(kDatasetVersion) + "): " + path);
    }
    const auto dim = r.get<int64_t>();
    const auto n = r.get<int64_t>();
    const auto classes = r.get<int64_t>();
    SyntheticDataset ds;
    ds.points = r.get_matrix();
    ds.observed_labels = r.get_vector<int64_t>(static_cast<size_t>(n));
    ds.true_identities = r.get_vector<int64_t>(static_cast<size_t>(n));
    ds.prototypes = r.get_matrix();
    ds.class_identity = r.get_vector<int64_t>(static_cast<size_t>(classes));
    const auto flips = r.get_vector<uint8_t>(static_cast<size_t>(n));
    const auto groups = r.get_vector<int64_t>(static_cast<size_t>(n));
    ds.corruption.resize(static_cast<size_t>(n));
    for (size_t i = 0; i < ds.corruption.size(); ++i) {
        ds.corruption[i] = {flips[i], groups[i]};
    }
    if (ds.dim() != dim || ds.num_points() != n || ds.num_classes() != classes) {
        throw DataError("dataset header disagrees with payload: " + path);
    }
    ds.validate();
    return ds;
}

// Human-readable sidecar: class count, size histogram, corruption stats.
inline std::string dataset_summary(const SyntheticDataset& ds) {
    std::map<int64_t, int64_t> class_size;
    int64_t flipped = 0, conflicted = 0;
    for (int64_t i = 0; i < ds.num_points(); ++i) {
        class_size[ds.observed_labels[i]]++;
        flipped += ds.corruption[i].flipped;
        conflicted += ds.corruption[i].conflict_group >= 0;
    }
    std::vector<int64_t> sizes;
    sizes.reserve(static_cast<size_t>(ds.num_classes()));
    for (int64_t c = 0; c < ds.num_classes(); ++c) sizes.push_back(class_size[c]);
    std::sort(sizes.begin(), sizes.end());
    auto quantile = [&](double q) {
        return sizes[static_cast<size_t>(q * static_cast<double>(sizes.size() - 1))];
    };

    std::ostringstream out;
    out << "classes: " << ds.num_classes() << "\n";
    out << "identities: " << ds.num_identities() << "\n";
    out << "points: " << ds.num_points() << "\n";
    out << "dim: " << ds.dim() << "\n";
    out << "flipped: " << flipped << " ("
        << static_cast<double>(flipped) / static_cast<double>(ds.num_points()) << ")\n";
    out << "conflicted_points: " << conflicted << "\n";
    out << "class_size_min: " << sizes.front() << "\n";
    out << "class_size_p25: " << quantile(0.25) << "\n";
    out << "class_size_median: " << quantile(0.5) << "\n";
    out << "class_size_p75: " << quantile(0.75) << "\n";
    out << "class_size_max: " << sizes.back() << "\n";
    return out.str();
}

} // namespace pfc
