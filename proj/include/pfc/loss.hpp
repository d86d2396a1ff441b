#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "pfc/margin.hpp"
#include "pfc/matrix.hpp"

namespace pfc {

// One iteration's similarity block: row per sample, column per buffered
// class. `positive_col[row]` is the buffer column holding the ground-truth
// center (-1 when this block does not contain it, e.g. a foreign shard's
// slice). `mask` marks entries excluded from the loss (1 = filtered out).
struct PartialLogits {
    Matrix similarities;                // B x |buffer|, cosine values
    std::vector<int32_t> positive_col;  // size B, -1 = absent
    std::vector<uint8_t> mask;          // size B * |buffer|, may be empty (= no mask)

    int64_t batch() const { return similarities.rows(); }
    int64_t buffer() const { return similarities.cols(); }

    bool masked(int64_t row, int64_t col) const {
        return !mask.empty() && mask[static_cast<size_t>(row * buffer() + col)] != 0;
    }

    void validate() const {
        if (static_cast<int64_t>(positive_col.size()) != batch()) {
            throw ShapeError("PartialLogits: positive_col size != batch rows");
        }
        if (!mask.empty() && static_cast<int64_t>(mask.size()) != batch() * buffer()) {
            throw ShapeError("PartialLogits: mask size != similarity block");
        }
        for (int64_t b = 0; b < batch(); ++b) {
            const int32_t p = positive_col[b];
            if (p >= 0 && masked(b, p)) {
                throw ContractError("PartialLogits: positive entry is masked in row " +
                                    std::to_string(b));
            }
        }
    }
};

// Loss value plus exact gradients w.r.t. the raw (pre-normalization)
// inputs. Center gradients exist only for buffered classes.
struct LossGrad {
    double loss = 0.0;
    Matrix d_features;        // D x B
    Matrix d_centers_buffer;  // D x |buffer|
};

// The softmax/margin stage alone: loss plus gradient w.r.t. the margined
// logits, (p - onehot) / B with masked entries exactly zero.
struct LogitsGrad {
    double loss = 0.0;
    Matrix d_logits;  // B x |buffer|
};

// Mean cross-entropy over the sampled buffer after margin injection.
// Probabilities are softmax over the unmasked columns of each row.
inline LogitsGrad partial_softmax_loss(const PartialLogits& logits, const MarginConfig& cfg) {
    logits.validate();
    const int64_t batch = logits.batch();
    const int64_t buf = logits.buffer();
    if (batch == 0) throw ContractError("partial_softmax_loss: empty batch");

    LogitsGrad out;
    out.d_logits = Matrix(batch, buf);
    double loss_sum = 0.0;

    std::vector<double> z(static_cast<size_t>(buf));
    for (int64_t b = 0; b < batch; ++b) {
        const int32_t pos = logits.positive_col[b];
        if (pos < 0) {
            throw ContractError("partial_softmax_loss: row " + std::to_string(b) +
                                " has no positive column (sampler bug)");
        }
        double zmax = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < buf; ++j) {
            if (logits.masked(b, j)) continue;
            z[j] = apply_margin(logits.similarities(b, j), j == pos, cfg);
            zmax = std::max(zmax, z[j]);
        }
        if (!std::isfinite(zmax)) {
            throw ContractError("partial_softmax_loss: all columns masked in row " +
                                std::to_string(b));
        }
        double denom = 0.0;
        for (int64_t j = 0; j < buf; ++j) {
            if (!logits.masked(b, j)) denom += std::exp(z[j] - zmax);
        }
        loss_sum += std::log(denom) - (z[pos] - zmax);
        for (int64_t j = 0; j < buf; ++j) {
            if (logits.masked(b, j)) continue;
            const double p = std::exp(z[j] - zmax) / denom;
            out.d_logits(b, j) = (p - (j == pos ? 1.0 : 0.0)) / static_cast<double>(batch);
        }
    }
    out.loss = loss_sum / static_cast<double>(batch);
    if (!std::isfinite(out.loss)) throw NumericalError("partial_softmax_loss: non-finite loss");
    return out;
}

// Chains d(loss)/d(margined logits) back to the raw features and buffered
// centers. With through_normalization the cosine Jacobian of x/|x| and
// w/|w| is applied exactly; without it the similarities are treated as
// plain inner products of the raw inputs (the dense-softmax textbook form).
inline LossGrad backprop_to_features_and_centers(const PartialLogits& logits,
                                                 const Matrix& grad_wrt_logits,
                                                 const Matrix& normalized_features,
                                                 const Matrix& normalized_centers_buffer,
                                                 const Matrix& raw_features,
                                                 const Matrix& raw_centers_buffer,
                                                 const MarginConfig& cfg,
                                                 bool through_normalization = true) {
    const int64_t batch = logits.batch();
    const int64_t buf = logits.buffer();
    const int64_t dim = raw_features.rows();
    if (!grad_wrt_logits.same_shape(logits.similarities)) {
        throw ShapeError("backprop: grad shape " + grad_wrt_logits.shape_string() +
                         " != logits " + logits.similarities.shape_string());
    }
    if (raw_features.cols() != batch || raw_centers_buffer.cols() != buf ||
        raw_centers_buffer.rows() != dim || !normalized_features.same_shape(raw_features) ||
        !normalized_centers_buffer.same_shape(raw_centers_buffer)) {
        throw ShapeError("backprop: feature/center shapes disagree with logits block");
    }

    LossGrad out;
    out.d_features = Matrix(dim, batch);
    out.d_centers_buffer = Matrix(dim, buf);

    // g = dL/d(cosine): margin jacobian applied entrywise; masked entries
    // carry zero gradient already.
    Matrix g(batch, buf);
    for (int64_t b = 0; b < batch; ++b) {
        const int32_t pos = logits.positive_col[b];
        for (int64_t j = 0; j < buf; ++j) {
            const double gz = grad_wrt_logits(b, j);
            if (gz == 0.0) continue;
            g(b, j) = gz * margin_derivative(logits.similarities(b, j), j == pos, cfg);
        }
    }

    if (!through_normalization) {
        // similarities = raw_centers^T raw_features
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t j = 0; j < buf; ++j) {
                const double gj = g(b, j);
                if (gj == 0.0) continue;
                for (int64_t d = 0; d < dim; ++d) {
                    out.d_features(d, b) += gj * raw_centers_buffer(d, j);
                    out.d_centers_buffer(d, j) += gj * raw_features(d, b);
                }
            }
        }
        return out;
    }

    // cosine c_bj = xhat_b . what_j with xhat = x/|x|, what = w/|w|:
    //   dL/dx_b = ( sum_j g_bj what_j - (sum_j g_bj c_bj) xhat_b ) / |x_b|
    //   dL/dw_j = ( sum_b g_bj xhat_b - (sum_b g_bj c_bj) what_j ) / |w_j|
    std::vector<double> feat_norm(static_cast<size_t>(batch));
    std::vector<double> center_norm(static_cast<size_t>(buf));
    for (int64_t b = 0; b < batch; ++b) feat_norm[b] = column_norm(raw_features, b);
    for (int64_t j = 0; j < buf; ++j) center_norm[j] = column_norm(raw_centers_buffer, j);

    std::vector<double> center_proj(static_cast<size_t>(buf), 0.0);
    for (int64_t b = 0; b < batch; ++b) {
        double feat_proj = 0.0;
        for (int64_t j = 0; j < buf; ++j) {
            const double gj = g(b, j);
            if (gj == 0.0) continue;
            const double c = logits.similarities(b, j);
            feat_proj += gj * c;
            center_proj[j] += gj * c;
            for (int64_t d = 0; d < dim; ++d) {
                out.d_features(d, b) += gj * normalized_centers_buffer(d, j);
                out.d_centers_buffer(d, j) += gj * normalized_features(d, b);
            }
        }
        const double inv = 1.0 / std::max(feat_norm[b], 1e-12);
        for (int64_t d = 0; d < dim; ++d) {
            out.d_features(d, b) =
                (out.d_features(d, b) - feat_proj * normalized_features(d, b)) * inv;
        }
    }
    for (int64_t j = 0; j < buf; ++j) {
        const double inv = 1.0 / std::max(center_norm[j], 1e-12);
        for (int64_t d = 0; d < dim; ++d) {
            out.d_centers_buffer(d, j) =
                (out.d_centers_buffer(d, j) - center_proj[j] * normalized_centers_buffer(d, j)) *
                inv;
        }
    }
    require_finite(out.d_features, "backprop d_features");
    require_finite(out.d_centers_buffer, "backprop d_centers");
    return out;
}

// Masks negative entries whose raw cosine exceeds the threshold (strictly).
// Positives are never masked. Returns a new block; the input is unchanged.
inline PartialLogits build_filter_mask(const PartialLogits& logits, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ContractError("build_filter_mask: threshold must lie in (0, 1)");
    }
    PartialLogits out = logits;
    if (out.mask.empty()) {
        out.mask.assign(static_cast<size_t>(out.batch() * out.buffer()), 0);
    }
    for (int64_t b = 0; b < out.batch(); ++b) {
        const int32_t pos = out.positive_col[b];
        for (int64_t j = 0; j < out.buffer(); ++j) {
            if (j == pos) continue;
            if (out.similarities(b, j) > threshold) {
                out.mask[static_cast<size_t>(b * out.buffer() + j)] = 1;
            }
        }
    }
    return out;
}

// Full single-buffer pipeline: normalize, cosine block, margin softmax,
// exact backprop. Shard-free reference path used by the trainer-free tests
// and by the K=1 fast path.
struct PartialLossInput {
    Matrix raw_features;        // D x B
    Matrix raw_centers_buffer;  // D x |buffer|
    std::vector<int32_t> positive_col;
    std::optional<double> filter_threshold;
    // When set, used verbatim instead of re-deriving from filter_threshold.
    // Lets finite-difference checks hold the mask fixed while perturbing.
    std::vector<uint8_t> fixed_mask;
};

inline LossGrad compute_partial_loss(const PartialLossInput& in, const MarginConfig& cfg,
                                     bool through_normalization = true) {
    PartialLogits logits;
    const Matrix xn = through_normalization ? l2_normalize_columns(in.raw_features)
                                            : in.raw_features;
    const Matrix wn = through_normalization ? l2_normalize_columns(in.raw_centers_buffer)
                                            : in.raw_centers_buffer;
    logits.similarities = matmul(transpose(xn), wn);
    logits.positive_col = in.positive_col;
    if (!in.fixed_mask.empty()) {
        logits.mask = in.fixed_mask;
    } else if (in.filter_threshold) {
        logits = build_filter_mask(logits, *in.filter_threshold);
    }
    const LogitsGrad lg = partial_softmax_loss(logits, cfg);
    LossGrad out = backprop_to_features_and_centers(logits, lg.d_logits, xn, wn, in.raw_features,
                                                    in.raw_centers_buffer, cfg,
                                                    through_normalization);
    out.loss = lg.loss;
    return out;
}

} // namespace pfc
