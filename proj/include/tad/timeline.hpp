#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace tad {

// Row-major everywhere: features and activations are (time x channels) and we
// gather rows constantly.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

/// Per-video timeline facts. fps is frames/second, stride the number of frames
/// consumed per feature step, so one snippet spans stride/fps seconds.
struct VideoMeta {
    std::string video_id;
    double fps = 0.0;
    int stride = 0;
    int num_features = 0;  // T0
    int channels = 0;      // C
    double duration_sec = 0.0;

    double snippet_duration() const { return static_cast<double>(stride) / fps; }

    // throws std::invalid_argument when invariants are violated
    void validate() const;
};

/// An interval on the actual video timeline, stored as center + half-length,
/// both in seconds. Start/end decode as center -/+ width, i.e. `width` is the
/// HALF length of the interval, matching the decode convention used by the
/// rest of this codebase.
class Segment {
  public:
    Segment(double center, double width);
    static Segment from_start_end(double start, double end);

    double center() const { return center_; }
    double width() const { return width_; }
    double start() const { return center_ - width_; }
    double end() const { return center_ + width_; }
    double length() const { return 2.0 * width_; }

  private:
    double center_;
    double width_;
};

struct ActionInstance {
    double start = 0.0;
    double end = 0.0;
    int label = 0;
};

struct FeatureSequence {
    VideoMeta meta;
    Mat values;  // num_features x channels

    void validate() const;
};

struct Detection {
    Segment segment;
    int label = 0;
    double score = 0.0;
};

/// Final scored, classified segments for one video. Also used as the shape
/// for ground-truth containers in evaluation code.
struct DetectionSet {
    std::string video_id;
    std::vector<Detection> items;
};

/// Intersection over union of two intervals; 0 when disjoint.
double segment_iou(const Segment& a, const Segment& b);

double interval_iou(double s1, double e1, double s2, double e2);

/// Clamp a segment to [0, duration]. A fully collapsed interval is replaced
/// by one of length 1e-4 s anchored at the clamp point (kept inside bounds).
Segment clip_to_video(const Segment& seg, const VideoMeta& meta);
Segment clip_to_window(const Segment& seg, double duration_sec);

}  // namespace tad
