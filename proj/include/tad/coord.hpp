#pragma once

#include <vector>

#include "tad/timeline.hpp"

namespace tad {

/// How reference grids are constructed.
///  - unit_consistent (default): snippet midpoints on the actual timeline,
///    spacing and width in seconds.
///  - paper_literal: the printed formula kept verbatim for auditability, even
///    though its units do not reduce to seconds.
enum class GridMode { unit_consistent, paper_literal };

GridMode grid_mode_from_string(const std::string& s);  // throws ConfigError
std::string to_string(GridMode m);

/// Reference positions for one pyramid level: T_l centers (seconds) plus one
/// shared reference width (half-length, seconds).
struct ReferenceGrid {
    int level = 1;  // 1-based
    std::vector<double> centers;
    double width = 0.0;
    double base_scale = 0.0;
    GridMode mode = GridMode::unit_consistent;

    double spacing() const { return centers.size() > 1 ? centers[1] - centers[0] : 0.0; }
};

/// One predicted offset pair: d_center is dimensionless (scaled by the
/// reference width on decode), d_logwidth is additive in log-width.
struct OffsetPair {
    double d_center = 0.0;
    double d_logwidth = 0.0;
};

/// Number of positions at `level` given T1 level-1 positions (ceil halving).
int level_length(int t1, int level);

/// Fractional feature index of a time point at a pyramid level. This is the
/// single bridge between second-space segments and index-space sampling; both
/// the reference grids and deformable attention go through it.
inline double time_to_level_index(double time_sec, double fps, int stride, int level) {
    double step = static_cast<double>(stride) * static_cast<double>(1 << (level - 1)) / fps;
    return time_sec / step - 0.5;
}

inline double level_index_to_time(double index, double fps, int stride, int level) {
    double step = static_cast<double>(stride) * static_cast<double>(1 << (level - 1)) / fps;
    return (index + 0.5) * step;
}

ReferenceGrid make_reference_grid(const VideoMeta& meta, int level, int num_levels,
                                  double base_scale, GridMode mode);

/// Decode a time-aligned query from its reference:
/// center = ref_center + d_center * ref_width, width = exp(ln ref_width + d_logwidth).
Segment decode_time_aligned(double ref_center, double ref_width, const OffsetPair& off);

/// One layer of time-aligned segment refinement (same algebra as the decode,
/// anchored at the previous layer's output).
Segment refine_time_aligned(const Segment& prev, const OffsetPair& off);

/// Unique offsets that recover `target` from the given reference.
OffsetPair offsets_between(double ref_center, double ref_width, const Segment& target);

/// Duration-normalized sigmoid decode used by the baseline/ablation mode and
/// the noise probe: start = (sigmoid(c) - sigmoid(d)) * duration, end =
/// (sigmoid(c) + sigmoid(d)) * duration.
Segment decode_normalized_baseline(double raw_center, double raw_width, double duration);

/// Layer-wise refinement in normalized coordinates:
/// c' = sigmoid(logit(c) + d_center), d' = sigmoid(logit(d) + d_logwidth).
/// Inputs must be strictly inside (0,1).
std::pair<double, double> refine_normalized_baseline(const std::pair<double, double>& prev,
                                                     const OffsetPair& off);

inline double sigmoid(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double logit(double p);  // throws std::invalid_argument at 0 or 1

}  // namespace tad
