#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tad/synth.hpp"
#include "tad/timeline.hpp"

namespace tad {

class Model;

struct EvalConfig {
    std::vector<double> iou_thresholds{0.3, 0.4, 0.5, 0.6, 0.7};
    std::optional<int> top_n_cap;
    /// XS/S/M/L/XL edges in seconds; when absent, quintiles of the evaluated
    /// ground-truth length distribution are used.
    std::optional<std::array<double, 4>> bucket_edges;

    void validate() const;
};

using GroundTruth = std::map<std::string, std::vector<ActionInstance>>;

/// AP for one class at one IoU threshold: predictions sorted by descending
/// score globally across videos (ties: earlier start, then video id), greedy
/// one-to-one assignment per ground truth, all-point interpolated PR area.
/// Returns NaN when the class has no ground truths (skipped in means).
double average_precision(const std::vector<DetectionSet>& preds, const GroundTruth& gts,
                         int label, double iou_thr);

struct MapTable {
    std::vector<double> thresholds;
    std::vector<double> per_threshold;
    double average = 0.0;
};

MapTable mean_ap(const std::vector<DetectionSet>& preds, const GroundTruth& gts,
                 const EvalConfig& cfg);

/// Classwise greedy suppression by descending score. Comparison tool only:
/// the default inference path never calls this.
DetectionSet nms(const DetectionSet& dets, double iou_thr);

struct FnBuckets {
    static constexpr const char* kLabels[5] = {"XS", "S", "M", "L", "XL"};
    std::array<double, 4> edges;   // seconds
    std::array<int, 5> gt_counts;
    std::array<int, 5> fn_counts;
    std::array<double, 5> rates;   // fn / gt, 0 for empty buckets
};

/// A ground truth is a false negative when no same-class prediction reaches
/// IoU >= 0.5 with it under greedy (score-ordered) matching.
FnBuckets false_negative_buckets(const std::vector<DetectionSet>& preds, const GroundTruth& gts,
                                 const EvalConfig& cfg);

/// Matched-query bookkeeping across epochs; IS between consecutive epochs is
/// the fraction of ground truths whose matched query slot changed.
class InstabilityLog {
  public:
    void record(int epoch, const std::string& video_id, std::vector<int> gt_to_query);
    double instability(int epoch) const;  // needs epoch and epoch-1 recorded
    bool has_epoch(int epoch) const { return per_epoch_.count(epoch) != 0; }
    const std::map<int, std::map<std::string, std::vector<int>>>& epochs() const {
        return per_epoch_;
    }

  private:
    std::map<int, std::map<std::string, std::vector<int>>> per_epoch_;
};

enum class NoiseTarget { center, width };
NoiseTarget noise_target_from_string(const std::string& s);

struct NoiseProbeResult {
    double clean_map = 0.0;
    double mean_delta = 0.0;  // mean over trials of mAP(perturbed) - mAP(clean)
    std::vector<double> per_trial_delta;
};

/// Perturb the final-layer offset of every prediction with eps ~ U(-alpha,
/// alpha), i.i.d. per prediction per trial. In normalized coordinate mode
/// this is exactly a pre-sigmoid injection; in time-aligned mode the same eps
/// lands on the dimensionless offset.
NoiseProbeResult noise_probe(const Model& model, const std::vector<const VideoSample*>& videos,
                             double noise_alpha, NoiseTarget target, int trials, uint64_t seed,
                             const EvalConfig& cfg);

}  // namespace tad
