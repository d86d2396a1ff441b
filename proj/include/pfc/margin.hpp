#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "pfc/error.hpp"

namespace pfc {

enum class MarginKind { plain, additive_cosine, additive_angular };

// arccos input clamp: keeps the additive-angular Jacobian bounded
// (d/dc arccos is singular at +-1).
inline constexpr double kAngularClamp = 1e-7;

struct MarginConfig {
    MarginKind kind = MarginKind::additive_cosine;
    double scale = 64.0;
    double margin = 0.4;

    void validate() const {
        if (!(scale > 0.0)) throw ConfigError("margin: scale must be positive");
        if (margin < 0.0 || margin >= 1.0) throw ConfigError("margin: m must be in [0, 1)");
        if (kind == MarginKind::plain && (scale != 1.0 || margin != 0.0)) {
            throw ConfigError("margin: plain kind requires s=1, m=0");
        }
    }

    static MarginConfig plain() { return {MarginKind::plain, 1.0, 0.0}; }
    static MarginConfig cosface_style(double s = 64.0, double m = 0.4) {
        return {MarginKind::additive_cosine, s, m};
    }
    static MarginConfig arcface_style(double s = 64.0, double m = 0.5) {
        return {MarginKind::additive_angular, s, m};
    }
};

// Margin-injected logit. Negatives are only rescaled; the penalty applies
// to the ground-truth entry.
inline double apply_margin(double cosine, bool is_positive, const MarginConfig& cfg) {
    switch (cfg.kind) {
        case MarginKind::plain:
            return cosine;
        case MarginKind::additive_cosine:
            return cfg.scale * (is_positive ? cosine - cfg.margin : cosine);
        case MarginKind::additive_angular: {
            if (!is_positive) return cfg.scale * cosine;
            const double cc = std::clamp(cosine, -1.0 + kAngularClamp, 1.0 - kAngularClamp);
            return cfg.scale * std::cos(std::acos(cc) + cfg.margin);
        }
    }
    throw ContractError("apply_margin: unknown kind");
}

// d(apply_margin)/d(cosine) at the same point. Zero in the clamped region,
// matching the piecewise-constant clamp above.
inline double margin_derivative(double cosine, bool is_positive, const MarginConfig& cfg) {
    switch (cfg.kind) {
        case MarginKind::plain:
            return 1.0;
        case MarginKind::additive_cosine:
            return cfg.scale;
        case MarginKind::additive_angular: {
            if (!is_positive) return cfg.scale;
            if (cosine <= -1.0 + kAngularClamp || cosine >= 1.0 - kAngularClamp) return 0.0;
            const double theta = std::acos(cosine);
            return cfg.scale * std::sin(theta + cfg.margin) / std::sqrt(1.0 - cosine * cosine);
        }
    }
    throw ContractError("margin_derivative: unknown kind");
}

inline MarginKind margin_kind_from_name(const std::string& name) {
    if (name == "plain") return MarginKind::plain;
    if (name == "cosface-style") return MarginKind::additive_cosine;
    if (name == "arcface-style") return MarginKind::additive_angular;
    throw ConfigError("unknown margin kind '" + name +
                      "' (expected plain, cosface-style, or arcface-style)");
}

inline const char* margin_kind_name(MarginKind k) {
    switch (k) {
        case MarginKind::plain: return "plain";
        case MarginKind::additive_cosine: return "cosface-style";
        case MarginKind::additive_angular: return "arcface-style";
    }
    return "?";
}

} // namespace pfc
