#include "tad/coord.hpp"

#include <cmath>
#include <stdexcept>

#include "tad/errors.hpp"

namespace tad {

GridMode grid_mode_from_string(const std::string& s) {
    if (s == "unit_consistent") return GridMode::unit_consistent;
    if (s == "paper_literal") return GridMode::paper_literal;
    throw ConfigError("unknown coord.mode '" + s + "' (expected unit_consistent|paper_literal)");
}

std::string to_string(GridMode m) {
    return m == GridMode::unit_consistent ? "unit_consistent" : "paper_literal";
}

int level_length(int t1, int level) {
    int t = t1;
    for (int l = 2; l <= level; ++l) t = (t + 1) / 2;
    return t;
}

ReferenceGrid make_reference_grid(const VideoMeta& meta, int level, int num_levels,
                                  double base_scale, GridMode mode) {
    if (level < 1 || level > num_levels) {
        throw std::invalid_argument("make_reference_grid: level " + std::to_string(level) +
                                    " outside [1, " + std::to_string(num_levels) + "]");
    }
    if (!(base_scale > 0.0)) {
        throw std::invalid_argument("make_reference_grid: base_scale must be > 0");
    }
    const int tl = level_length(meta.num_features, level);
    const double pow2 = static_cast<double>(1 << (level - 1));

    ReferenceGrid grid;
    grid.level = level;
    grid.base_scale = base_scale;
    grid.mode = mode;
    grid.centers.resize(tl);
    if (mode == GridMode::unit_consistent) {
        // snippet midpoints: (t - 0.5) * stride * 2^{l-1} / fps for t = 1..T_l
        const double step = meta.stride * pow2 / meta.fps;
        for (int t = 1; t <= tl; ++t) grid.centers[t - 1] = (t - 0.5) * step;
        grid.width = base_scale * step;
    } else {
        // formula as printed: t * f / (w * 2^{l-1}) + w * 2^{l-1} / 2
        const double scale = meta.fps / (meta.stride * pow2);
        const double shift = meta.stride * pow2 / 2.0;
        for (int t = 1; t <= tl; ++t) grid.centers[t - 1] = t * scale + shift;
        grid.width = base_scale * meta.fps * pow2;
    }
    return grid;
}

Segment decode_time_aligned(double ref_center, double ref_width, const OffsetPair& off) {
    if (!(ref_width > 0.0)) throw std::invalid_argument("decode_time_aligned: ref_width <= 0");
    double center = ref_center + off.d_center * ref_width;
    // algebraically exp(ln(ref_width) + d_logwidth); this form keeps the
    // zero-offset fixed point bit-exact
    double width = ref_width * std::exp(off.d_logwidth);
    return Segment(center, width);
}

Segment refine_time_aligned(const Segment& prev, const OffsetPair& off) {
    return decode_time_aligned(prev.center(), prev.width(), off);
}

OffsetPair offsets_between(double ref_center, double ref_width, const Segment& target) {
    if (!(ref_width > 0.0)) throw std::invalid_argument("offsets_between: ref_width <= 0");
    return OffsetPair{(target.center() - ref_center) / ref_width,
                      std::log(target.width()) - std::log(ref_width)};
}

Segment decode_normalized_baseline(double raw_center, double raw_width, double duration) {
    if (!(duration > 0.0)) {
        throw std::invalid_argument("decode_normalized_baseline: duration <= 0");
    }
    double c = sigmoid(raw_center);
    double d = sigmoid(raw_width);
    return Segment(c * duration, d * duration);
}

double logit(double p) {
    if (!(p > 0.0) || !(p < 1.0)) {
        throw std::invalid_argument("logit: argument must lie strictly inside (0,1)");
    }
    return std::log(p / (1.0 - p));
}

std::pair<double, double> refine_normalized_baseline(const std::pair<double, double>& prev,
                                                     const OffsetPair& off) {
    return {sigmoid(logit(prev.first) + off.d_center),
            sigmoid(logit(prev.second) + off.d_logwidth)};
}

}  // namespace tad
