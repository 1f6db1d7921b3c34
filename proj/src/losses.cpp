#include "tad/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "tad/errors.hpp"

namespace tad {

void LossWeights::validate() const {
    auto ok = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!ok(w_cls) || !ok(w_diou) || !ok(w_logwidth)) {
        throw ConfigError("loss weights must be finite and >= 0");
    }
    if (!std::isfinite(focal_gamma) || !std::isfinite(focal_alpha)) {
        throw ConfigError("focal parameters must be finite");
    }
}

std::vector<int> MatchResult::gt_to_query(int num_gt) const {
    std::vector<int> slot(num_gt, -1);
    for (auto [q, g] : pairs) slot[g] = q;
    return slot;
}

MatchResult hungarian_match(const Mat& cost) {
    const int nq = static_cast<int>(cost.rows());
    const int ng = static_cast<int>(cost.cols());
    MatchResult result;
    if (ng == 0 || nq == 0) {
        for (int q = 0; q < nq; ++q) result.unmatched_queries.push_back(q);
        return result;
    }
    if (!cost.allFinite()) throw NumericError("hungarian_match: non-finite cost matrix");

    // Solve with rows = the smaller side so every row gets assigned.
    const bool transposed = nq > ng;
    const int n = transposed ? ng : nq;  // rows of the solved matrix
    const int m = transposed ? nq : ng;
    auto at = [&](int i, int j) { return transposed ? cost(j, i) : cost(i, j); };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, false);
        do {
            used[j0] = true;
            int i0 = p[j0], j1 = 0;
            double delta = inf;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }

    std::vector<char> query_used(nq, false);
    for (int j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        int row = p[j] - 1, col = j - 1;
        int q = transposed ? col : row;
        int g = transposed ? row : col;
        result.pairs.emplace_back(q, g);
        query_used[q] = true;
    }
    std::sort(result.pairs.begin(), result.pairs.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    for (int q = 0; q < nq; ++q) {
        if (!query_used[q]) result.unmatched_queries.push_back(q);
    }
    return result;
}

double focal_loss(double prob, bool is_positive, double gamma, double alpha) {
    if (!(prob > 0.0) || !(prob < 1.0)) {
        throw std::invalid_argument("focal_loss: prob must lie strictly inside (0,1)");
    }
    if (is_positive) return -alpha * std::pow(1.0 - prob, gamma) * std::log(prob);
    return -(1.0 - alpha) * std::pow(prob, gamma) * std::log(1.0 - prob);
}

double interval_diou(double s1, double e1, double s2, double e2) {
    double iou = interval_iou(s1, e1, s2, e2);
    double c1 = 0.5 * (s1 + e1), c2 = 0.5 * (s2 + e2);
    double enclose = std::max(e1, e2) - std::min(s1, s2);
    double dist = c1 - c2;
    return iou - (dist * dist) / (enclose * enclose);
}

double segment_diou(const Segment& a, const Segment& b) {
    return interval_diou(a.start(), a.end(), b.start(), b.end());
}

namespace {

// focal positive cost minus focal negative cost, with the probability pulled
// off the exact 0/1 endpoints so the cost stays finite
double focal_cls_cost(double p, double gamma, double alpha) {
    p = std::clamp(p, 1e-12, 1.0 - 1e-12);
    double pos = -alpha * std::pow(1.0 - p, gamma) * std::log(p);
    double neg = -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
    return pos - neg;
}

}  // namespace

double match_cost(const Segment& pred, double prob_of_gt_class, const ActionInstance& gt,
                  const LossWeights& w) {
    if (!(gt.end > gt.start)) throw std::invalid_argument("match_cost: gt has zero length");
    double diou = interval_diou(pred.start(), pred.end(), gt.start, gt.end);
    double gt_half = 0.5 * (gt.end - gt.start);
    double lw = std::abs(std::log(pred.width()) - std::log(gt_half));
    return w.w_cls * focal_cls_cost(prob_of_gt_class, w.focal_gamma, w.focal_alpha) +
           w.w_diou * (1.0 - diou) + w.w_logwidth * lw;
}

namespace {

using ad::Var;

struct GtArrays {
    Mat center, half_width, start, end, log_half;
};

GtArrays gather_gt(const std::vector<ActionInstance>& gt, const std::vector<int>& order) {
    const int m = static_cast<int>(order.size());
    GtArrays a;
    a.center.resize(m, 1);
    a.half_width.resize(m, 1);
    a.start.resize(m, 1);
    a.end.resize(m, 1);
    a.log_half.resize(m, 1);
    for (int i = 0; i < m; ++i) {
        const ActionInstance& inst = gt[order[i]];
        double hw = 0.5 * (inst.end - inst.start);
        a.center(i, 0) = 0.5 * (inst.start + inst.end);
        a.half_width(i, 0) = hw;
        a.start(i, 0) = inst.start;
        a.end(i, 0) = inst.end;
        a.log_half(i, 0) = std::log(hw);
    }
    return a;
}

/// Regression terms on matched pairs: mean (1 - DIoU) and mean |d log width|.
std::pair<Var, Var> regression_terms(ad::Graph& g, Var center, Var log_width,
                                     const std::vector<int>& query_order,
                                     const GtArrays& gts) {
    Var c = ad::gather_rows(center, query_order);
    Var lw = ad::gather_rows(log_width, query_order);
    Var w = ad::exp_v(lw);
    Var starts = c - w;
    Var ends = ad::add(c, w);

    Var gs = g.constant(gts.start);
    Var ge = g.constant(gts.end);
    Var gc = g.constant(gts.center);
    Var glw = g.constant(gts.log_half);

    Var inter = ad::relu(ad::cmin(ends, ge) - ad::cmax(starts, gs));
    Var len_sum = (ends - starts) + (ge - gs);
    Var uni = len_sum - inter;
    Var iou = ad::div(inter, uni);
    Var enclose = ad::cmax(ends, ge) - ad::cmin(starts, gs);
    Var dist = c - gc;
    Var diou = iou - ad::div(ad::mul(dist, dist), ad::mul(enclose, enclose));

    const double inv_m = 1.0 / std::max<size_t>(1, query_order.size());
    Var diou_term = ad::scale(ad::sum_all(ad::add_scalar(ad::neg(diou), 1.0)), inv_m);
    Var lw_term = ad::scale(ad::sum_all(ad::abs_v(lw - glw)), inv_m);
    return {diou_term, lw_term};
}

/// Focal classification over a full logit matrix given a 0/1 target mask.
Var focal_term(ad::Graph& g, Var logits, const Mat& target_mask, double gamma, double alpha,
               int norm_count) {
    Var t = g.constant(target_mask);
    Var one_minus_t = g.constant((1.0 - target_mask.array()).matrix());
    // positives: -alpha * sigmoid(-x)^gamma * log_sigmoid(x)
    Var p_neg = ad::sigmoid_v(ad::neg(logits));  // = 1 - p
    Var pos = ad::scale(ad::mul(ad::pow_const(p_neg, gamma), ad::log_sigmoid(logits)), -alpha);
    // negatives: -(1-alpha) * sigmoid(x)^gamma * log_sigmoid(-x)
    Var p = ad::sigmoid_v(logits);
    Var negv = ad::scale(ad::mul(ad::pow_const(p, gamma), ad::log_sigmoid(ad::neg(logits))),
                         -(1.0 - alpha));
    Var combined = ad::add(ad::mul(t, pos), ad::mul(one_minus_t, negv));
    return ad::scale(ad::sum_all(combined), 1.0 / std::max(1, norm_count));
}

MatchResult run_matching(const std::vector<Segment>& segments, const Mat& probs_of_gt,
                         const std::vector<ActionInstance>& gt, const LossWeights& w) {
    const int nq = static_cast<int>(segments.size());
    const int ng = static_cast<int>(gt.size());
    Mat cost(nq, ng);
    for (int q = 0; q < nq; ++q) {
        for (int g = 0; g < ng; ++g) {
            cost(q, g) = match_cost(segments[q], probs_of_gt(q, g), gt[g], w);
        }
    }
    return hungarian_match(cost);
}

}  // namespace

TotalLossResult total_loss_ad(ad::Graph& g, const std::vector<LayerVars>& layers,
                              const EncoderVars* enc, const std::vector<ActionInstance>& gt,
                              const LossWeights& w,
                              const std::vector<MatchResult>* fixed_matches,
                              const MatchResult* fixed_encoder_match) {
    if (layers.empty()) throw std::invalid_argument("total_loss: at least one decoder layer");
    w.validate();
    const int ng = static_cast<int>(gt.size());

    TotalLossResult out;
    std::vector<Var> pieces;

    const size_t first_layer = w.aux_enabled ? 0 : layers.size() - 1;
    out.breakdown.per_layer.resize(layers.size());
    for (size_t li = first_layer; li < layers.size(); ++li) {
        const LayerVars& lv = layers[li];
        const int nq = lv.center.rows();
        const int nc = lv.logits.cols();

        // matching on plain values
        MatchResult match;
        if (fixed_matches) {
            match = (*fixed_matches)[li];
        } else {
            std::vector<Segment> segs;
            segs.reserve(nq);
            for (int q = 0; q < nq; ++q) {
                segs.emplace_back(lv.center.val()(q, 0), std::exp(lv.log_width.val()(q, 0)));
            }
            Mat probs(nq, ng);
            for (int q = 0; q < nq; ++q) {
                for (int gi = 0; gi < ng; ++gi) {
                    probs(q, gi) = sigmoid(lv.logits.val()(q, gt[gi].label));
                }
            }
            match = run_matching(segs, probs, gt, w);
        }
        out.breakdown.per_layer[li] = match;
        const int m = static_cast<int>(match.pairs.size());

        Mat target = Mat::Zero(nq, nc);
        std::vector<int> query_order, gt_order;
        for (auto [q, gi] : match.pairs) {
            target(q, gt[gi].label) = 1.0;
            query_order.push_back(q);
            gt_order.push_back(gi);
        }

        Var cls = focal_term(g, lv.logits, target, w.focal_gamma, w.focal_alpha, m);
        out.breakdown.cls += cls.scalar();
        pieces.push_back(ad::scale(cls, w.w_cls));
        if (m > 0) {
            GtArrays gts = gather_gt(gt, gt_order);
            auto [diou_term, lw_term] = regression_terms(g, lv.center, lv.log_width,
                                                         query_order, gts);
            out.breakdown.diou += diou_term.scalar();
            out.breakdown.logwidth += lw_term.scalar();
            pieces.push_back(ad::scale(diou_term, w.w_diou));
            pieces.push_back(ad::scale(lw_term, w.w_logwidth));
        }
    }

    if (enc != nullptr) {
        const int np = enc->fg_logit.rows();
        MatchResult match;
        if (fixed_encoder_match) {
            match = *fixed_encoder_match;
        } else {
            std::vector<Segment> segs;
            segs.reserve(np);
            for (int q = 0; q < np; ++q) {
                segs.emplace_back(enc->center.val()(q, 0), std::exp(enc->log_width.val()(q, 0)));
            }
            Mat probs(np, ng);
            for (int q = 0; q < np; ++q) {
                double p = sigmoid(enc->fg_logit.val()(q, 0));
                for (int gi = 0; gi < ng; ++gi) probs(q, gi) = p;
            }
            match = run_matching(segs, probs, gt, w);
        }
        out.breakdown.encoder_match = match;
        const int m = static_cast<int>(match.pairs.size());

        Mat target = Mat::Zero(np, 1);
        std::vector<int> query_order, gt_order;
        for (auto [q, gi] : match.pairs) {
            target(q, 0) = 1.0;
            query_order.push_back(q);
            gt_order.push_back(gi);
        }
        std::vector<Var> enc_pieces;
        enc_pieces.push_back(
            ad::scale(focal_term(g, enc->fg_logit, target, w.focal_gamma, w.focal_alpha, m),
                      w.w_cls));
        if (m > 0) {
            GtArrays gts = gather_gt(gt, gt_order);
            auto [diou_term, lw_term] = regression_terms(g, enc->center, enc->log_width,
                                                         query_order, gts);
            enc_pieces.push_back(ad::scale(diou_term, w.w_diou));
            enc_pieces.push_back(ad::scale(lw_term, w.w_logwidth));
        }
        Var enc_total = enc_pieces[0];
        for (size_t i = 1; i < enc_pieces.size(); ++i) enc_total = ad::add(enc_total, enc_pieces[i]);
        out.breakdown.encoder = enc_total.scalar();
        pieces.push_back(enc_total);
    }

    Var total = pieces[0];
    for (size_t i = 1; i < pieces.size(); ++i) total = ad::add(total, pieces[i]);
    out.loss = total;
    out.breakdown.total = total.scalar();
    return out;
}

LossBreakdown total_loss(const std::vector<LayerPrediction>& layers,
                         const EncoderPrediction* enc, const std::vector<ActionInstance>& gt,
                         const LossWeights& w) {
    ad::Graph g;
    std::vector<LayerVars> lvars;
    for (const auto& layer : layers) {
        const int nq = static_cast<int>(layer.segments.size());
        Mat c(nq, 1), lw(nq, 1);
        for (int q = 0; q < nq; ++q) {
            c(q, 0) = layer.segments[q].center();
            lw(q, 0) = std::log(layer.segments[q].width());
        }
        lvars.push_back(LayerVars{g.leaf(c), g.leaf(lw), g.leaf(layer.class_logits)});
    }
    EncoderVars evars;
    if (enc != nullptr) {
        const int np = static_cast<int>(enc->proposals.size());
        Mat c(np, 1), lw(np, 1), fg(np, 1);
        for (int q = 0; q < np; ++q) {
            c(q, 0) = enc->proposals[q].center();
            lw(q, 0) = std::log(enc->proposals[q].width());
            fg(q, 0) = enc->foreground_logits(q);
        }
        evars = EncoderVars{g.leaf(c), g.leaf(lw), g.leaf(fg)};
    }
    TotalLossResult res = total_loss_ad(g, lvars, enc ? &evars : nullptr, gt, w);
    return res.breakdown;
}

}  // namespace tad
