// Test-only oracles, deliberately independent of the library's compute
// paths: straight-line loops, direct exponential sums, no shared kernels.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "pfc/matrix.hpp"
#include "pfc/margin.hpp"
#include "pfc/rng.hpp"

namespace oracle {

using pfc::Matrix;

inline Matrix random_matrix(pfc::SeededRng& rng, int64_t r, int64_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) m(i, j) = scale * (2.0 * rng.next_double() - 1.0);
    return m;
}

// Central finite differences of a scalar function over every entry of a
// parameter matrix.
inline Matrix finite_difference(Matrix& param, const std::function<double()>& eval,
                                double h = 1e-5) {
    Matrix grad(param.rows(), param.cols());
    for (int64_t i = 0; i < param.rows(); ++i) {
        for (int64_t j = 0; j < param.cols(); ++j) {
            const double saved = param(i, j);
            param(i, j) = saved + h;
            const double up = eval();
            param(i, j) = saved - h;
            const double down = eval();
            param(i, j) = saved;
            grad(i, j) = (up - down) / (2.0 * h);
        }
    }
    return grad;
}

// max over entries of |a-b| / max(|a|, |b|, floor). The floor keeps
// near-zero entries from dividing finite-difference round-off (~1e-10)
// into a fake relative error.
inline double max_rel_diff(const Matrix& a, const Matrix& b, double floor = 1e-3) {
    double worst = 0.0;
    for (int64_t i = 0; i < a.rows(); ++i) {
        for (int64_t j = 0; j < a.cols(); ++j) {
            const double denom = std::max({std::abs(a(i, j)), std::abs(b(i, j)), floor});
            worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
        }
    }
    return worst;
}

inline double rel_diff(double a, double b, double floor = 1e-9) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Direct evaluation of the sampled softmax cross-entropy: plain
// exponential sums over the buffer columns, no max subtraction, no
// log-domain tricks. Margin injected through pfc::apply_margin (the shared
// scalar is part of the contract under test, not of the reduction).
inline double direct_sampled_softmax_loss(const Matrix& cosines,
                                          const std::vector<int32_t>& positive_col,
                                          const std::vector<uint8_t>& mask,
                                          const pfc::MarginConfig& cfg) {
    const int64_t batch = cosines.rows();
    const int64_t buf = cosines.cols();
    double total = 0.0;
    for (int64_t b = 0; b < batch; ++b) {
        double denom = 0.0;
        double znum = 0.0;
        for (int64_t j = 0; j < buf; ++j) {
            if (!mask.empty() && mask[static_cast<size_t>(b * buf + j)]) continue;
            const double z = pfc::apply_margin(cosines(b, j), j == positive_col[b], cfg);
            denom += std::exp(z);
            if (j == positive_col[b]) znum = std::exp(z);
        }
        total += -std::log(znum / denom);
    }
    return total / static_cast<double>(batch);
}

// ---------------------------------------------------------------------
// Dense single-worker FC reference: the full C-class margin softmax with
// its own margin arithmetic, its own softmax reduction, and its own SGD
// update. Nothing here calls into the sharded implementation.
// ---------------------------------------------------------------------

inline double ref_margin(double c, bool pos, const pfc::MarginConfig& cfg) {
    using pfc::MarginKind;
    if (cfg.kind == MarginKind::plain) return c;
    if (!pos) return cfg.scale * c;
    if (cfg.kind == MarginKind::additive_cosine) return cfg.scale * (c - cfg.margin);
    const double cc = std::clamp(c, -1.0 + pfc::kAngularClamp, 1.0 - pfc::kAngularClamp);
    return cfg.scale * std::cos(std::acos(cc) + cfg.margin);
}

inline double ref_margin_deriv(double c, bool pos, const pfc::MarginConfig& cfg) {
    using pfc::MarginKind;
    if (cfg.kind == MarginKind::plain) return 1.0;
    if (!pos || cfg.kind == MarginKind::additive_cosine) return cfg.scale;
    if (c <= -1.0 + pfc::kAngularClamp || c >= 1.0 - pfc::kAngularClamp) return 0.0;
    return cfg.scale * std::sin(std::acos(c) + cfg.margin) / std::sqrt(1.0 - c * c);
}

struct DenseFcState {
    Matrix weights;   // D x C
    Matrix momentum;  // D x C
};

struct DenseStepOut {
    double loss = 0.0;
    Matrix d_features;  // D x B
};

inline DenseStepOut dense_fc_reference_step(DenseFcState& state, const Matrix& features,
                                            const std::vector<int64_t>& labels,
                                            const pfc::MarginConfig& cfg,
                                            std::optional<double> filter_threshold, double lr,
                                            double momentum, double weight_decay) {
    const int64_t dim = features.rows();
    const int64_t batch = features.cols();
    const int64_t classes = state.weights.cols();

    // unit features / centers and their norms
    std::vector<double> fnorm(batch), wnorm(classes);
    Matrix xn(dim, batch), wn(dim, classes);
    for (int64_t b = 0; b < batch; ++b) {
        double s = 0.0;
        for (int64_t d = 0; d < dim; ++d) s += features(d, b) * features(d, b);
        fnorm[b] = std::sqrt(s);
        for (int64_t d = 0; d < dim; ++d) xn(d, b) = features(d, b) / std::max(fnorm[b], 1e-12);
    }
    for (int64_t j = 0; j < classes; ++j) {
        double s = 0.0;
        for (int64_t d = 0; d < dim; ++d) s += state.weights(d, j) * state.weights(d, j);
        wnorm[j] = std::sqrt(s);
        for (int64_t d = 0; d < dim; ++d)
            wn(d, j) = state.weights(d, j) / std::max(wnorm[j], 1e-12);
    }

    Matrix cosines(batch, classes);
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t j = 0; j < classes; ++j) {
            double c = 0.0;
            for (int64_t d = 0; d < dim; ++d) c += xn(d, b) * wn(d, j);
            cosines(b, j) = c;
        }
    }

    DenseStepOut out;
    out.d_features = Matrix(dim, batch);
    Matrix d_centers(dim, classes);
    double loss_sum = 0.0;

    for (int64_t b = 0; b < batch; ++b) {
        std::vector<double> z(classes);
        std::vector<uint8_t> masked(classes, 0);
        double zmax = -1e300;
        for (int64_t j = 0; j < classes; ++j) {
            const bool pos = j == labels[b];
            if (filter_threshold && !pos && cosines(b, j) > *filter_threshold) {
                masked[j] = 1;
                continue;
            }
            z[j] = ref_margin(cosines(b, j), pos, cfg);
            zmax = std::max(zmax, z[j]);
        }
        double denom = 0.0;
        for (int64_t j = 0; j < classes; ++j) {
            if (!masked[j]) denom += std::exp(z[j] - zmax);
        }
        loss_sum += std::log(denom) - (z[labels[b]] - zmax);

        double feat_proj = 0.0;
        std::vector<double> feat_acc(dim, 0.0);
        for (int64_t j = 0; j < classes; ++j) {
            if (masked[j]) continue;
            const bool pos = j == labels[b];
            const double p = std::exp(z[j] - zmax) / denom;
            const double g = (p - (pos ? 1.0 : 0.0)) / static_cast<double>(batch) *
                             ref_margin_deriv(cosines(b, j), pos, cfg);
            const double c = cosines(b, j);
            feat_proj += g * c;
            for (int64_t d = 0; d < dim; ++d) {
                feat_acc[d] += g * wn(d, j);
                d_centers(d, j) += g * (xn(d, b) - c * wn(d, j)) / std::max(wnorm[j], 1e-12);
            }
        }
        for (int64_t d = 0; d < dim; ++d) {
            out.d_features(d, b) =
                (feat_acc[d] - feat_proj * xn(d, b)) / std::max(fnorm[b], 1e-12);
        }
    }
    out.loss = loss_sum / static_cast<double>(batch);

    for (int64_t j = 0; j < classes; ++j) {
        for (int64_t d = 0; d < dim; ++d) {
            const double g = d_centers(d, j) + weight_decay * state.weights(d, j);
            const double v = momentum * state.momentum(d, j) + g;
            state.momentum(d, j) = v;
            state.weights(d, j) -= lr * v;
        }
    }
    return out;
}

// The classic softmax feature gradient for unnormalized logits
// W^T x: per sample, -((1 - p+) W+ - sum_j p_j W_j), i.e. sum_j (p_j -
// onehot_j) W_j, averaged over the batch.
inline Matrix textbook_feature_gradient(const Matrix& features, const Matrix& centers,
                                        const std::vector<int32_t>& labels) {
    const int64_t dim = features.rows();
    const int64_t batch = features.cols();
    const int64_t classes = centers.cols();
    Matrix grad(dim, batch);
    for (int64_t b = 0; b < batch; ++b) {
        std::vector<double> p(classes);
        double denom = 0.0;
        for (int64_t j = 0; j < classes; ++j) {
            double z = 0.0;
            for (int64_t d = 0; d < dim; ++d) z += centers(d, j) * features(d, b);
            p[j] = std::exp(z);
            denom += p[j];
        }
        for (int64_t j = 0; j < classes; ++j) {
            const double coeff = (p[j] / denom - (j == labels[b] ? 1.0 : 0.0)) /
                                 static_cast<double>(batch);
            for (int64_t d = 0; d < dim; ++d) grad(d, b) += coeff * centers(d, j);
        }
    }
    return grad;
}

} // namespace oracle
