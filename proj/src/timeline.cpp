#include "tad/timeline.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tad {

void VideoMeta::validate() const {
    if (!(fps > 0.0)) throw std::invalid_argument("VideoMeta: fps must be > 0");
    if (stride <= 0) throw std::invalid_argument("VideoMeta: stride must be positive");
    if (num_features <= 0) throw std::invalid_argument("VideoMeta: num_features must be positive");
    if (channels <= 0) throw std::invalid_argument("VideoMeta: channels must be positive");
    if (!(duration_sec > 0.0)) throw std::invalid_argument("VideoMeta: duration must be > 0");
    double covered = static_cast<double>(num_features - 1) * stride / fps;
    if (duration_sec < covered - 1e-9) {
        throw std::invalid_argument("VideoMeta: duration shorter than feature timeline of " +
                                    video_id);
    }
}

Segment::Segment(double center, double width) : center_(center), width_(width) {
    if (!std::isfinite(center) || !std::isfinite(width)) {
        throw std::invalid_argument("Segment: non-finite coordinates");
    }
    if (!(width > 0.0)) throw std::invalid_argument("Segment: width must be > 0");
}

Segment Segment::from_start_end(double start, double end) {
    if (!(end > start)) throw std::invalid_argument("Segment: end must exceed start");
    return Segment(0.5 * (start + end), 0.5 * (end - start));
}

double interval_iou(double s1, double e1, double s2, double e2) {
    double inter = std::min(e1, e2) - std::max(s1, s2);
    if (inter <= 0.0) return 0.0;
    double uni = (e1 - s1) + (e2 - s2) - inter;
    return inter / uni;
}

double segment_iou(const Segment& a, const Segment& b) {
    return interval_iou(a.start(), a.end(), b.start(), b.end());
}

Segment clip_to_video(const Segment& seg, const VideoMeta& meta) {
    return clip_to_window(seg, meta.duration_sec);
}

Segment clip_to_window(const Segment& seg, double dur) {
    double s = std::clamp(seg.start(), 0.0, dur);
    double e = std::clamp(seg.end(), 0.0, dur);
    constexpr double kFloor = 1e-4;
    if (e - s >= kFloor) return Segment::from_start_end(s, e);
    // Collapsed: restore a minimal interval around the clamp point, shifted
    // to stay within the video.
    double len = std::min(kFloor, dur);
    double c = 0.5 * (s + e);
    double lo = c - 0.5 * len;
    double hi = c + 0.5 * len;
    if (lo < 0.0) {
        lo = 0.0;
        hi = len;
    } else if (hi > dur) {
        hi = dur;
        lo = dur - len;
    }
    return Segment::from_start_end(lo, hi);
}

void FeatureSequence::validate() const {
    meta.validate();
    if (values.rows() != meta.num_features || values.cols() != meta.channels) {
        throw std::invalid_argument("FeatureSequence: matrix shape does not match meta of " +
                                    meta.video_id);
    }
    if (!values.allFinite()) {
        throw std::invalid_argument("FeatureSequence: non-finite entries in " + meta.video_id);
    }
}

}  // namespace tad
