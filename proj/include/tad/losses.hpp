#pragma once

#include <optional>
#include <vector>

#include "tad/autodiff.hpp"
#include "tad/detr_types.hpp"

namespace tad {

struct LossWeights {
    double w_cls = 2.0;
    double w_diou = 2.0;
    double w_logwidth = 1.0;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    bool aux_enabled = true;

    void validate() const;
};

/// One-to-one assignment. pairs are (query index, gt index); every ground
/// truth appears at most once, every query at most once, and
/// |pairs| = min(N_q, N_gt).
struct MatchResult {
    std::vector<std::pair<int, int>> pairs;
    std::vector<int> unmatched_queries;

    /// slot assignment per gt: query index or -1
    std::vector<int> gt_to_query(int num_gt) const;
};

/// Minimum-cost injective assignment of ground truths to queries
/// (Jonker-Volgenant shortest augmenting paths). cost is N_q x N_gt.
MatchResult hungarian_match(const Mat& cost);

/// Focal loss for one probability. Positives: -alpha*(1-p)^gamma*ln(p);
/// negatives: -(1-alpha)*p^gamma*ln(1-p). p must lie strictly inside (0,1).
double focal_loss(double prob, bool is_positive, double gamma, double alpha);

/// 1D DIoU: IoU minus (center distance / enclosing span)^2. Range (-1, 1],
/// equal to 1 iff the intervals coincide.
double interval_diou(double s1, double e1, double s2, double e2);
double segment_diou(const Segment& a, const Segment& b);

/// Matching cost between one prediction and one ground truth:
/// w_cls * (focal positive cost - focal negative cost of the gt-class prob)
/// + w_diou * (1 - DIoU) + w_logwidth * |ln(pred half-width) - ln(gt half-width)|.
double match_cost(const Segment& pred, double prob_of_gt_class, const ActionInstance& gt,
                  const LossWeights& w);

// ---- differentiable loss assembly ----

/// Per-decoder-layer variables: center (N_q x 1, seconds),
/// log_width (N_q x 1, ln seconds), class logits (N_q x C).
struct LayerVars {
    ad::Var center;
    ad::Var log_width;
    ad::Var logits;
};

/// Encoder first-stage variables; fg_logit is (P x 1).
struct EncoderVars {
    ad::Var center;
    ad::Var log_width;
    ad::Var fg_logit;
};

struct LossBreakdown {
    double total = 0.0;
    double cls = 0.0;        // unweighted sums over layers
    double diou = 0.0;
    double logwidth = 0.0;
    double encoder = 0.0;    // weighted encoder two-stage term
    std::vector<MatchResult> per_layer;
    MatchResult encoder_match;
};

struct TotalLossResult {
    ad::Var loss;  // 1 x 1
    LossBreakdown breakdown;
};

/// Eq.-8-style composite: per decoder layer an independent Hungarian match,
/// focal classification over all queries, DIoU + log-width regression on
/// matched pairs (all normalized by the matched count), plus a class-agnostic
/// encoder term matched the same way. With aux disabled only the final layer
/// contributes (the encoder term stays).
/// `fixed_matches` / `fixed_encoder_match` bypass matching (used by the
/// finite-difference tests, which hold the assignment constant).
TotalLossResult total_loss_ad(ad::Graph& g, const std::vector<LayerVars>& layers,
                              const EncoderVars* enc,
                              const std::vector<ActionInstance>& gt, const LossWeights& w,
                              const std::vector<MatchResult>* fixed_matches = nullptr,
                              const MatchResult* fixed_encoder_match = nullptr);

/// Value-level wrapper over total_loss_ad for plain predictions.
struct LayerPrediction {
    std::vector<Segment> segments;
    Mat class_logits;  // N_q x C
};
struct EncoderPrediction {
    std::vector<Segment> proposals;
    Vec foreground_logits;
};
LossBreakdown total_loss(const std::vector<LayerPrediction>& layers,
                         const EncoderPrediction* enc, const std::vector<ActionInstance>& gt,
                         const LossWeights& w);

}  // namespace tad
