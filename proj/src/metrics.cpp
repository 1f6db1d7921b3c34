#include "tad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "tad/errors.hpp"
#include "tad/model.hpp"

namespace tad {

void EvalConfig::validate() const {
    if (iou_thresholds.empty()) throw ConfigError("eval.iou list must not be empty");
    for (size_t i = 0; i < iou_thresholds.size(); ++i) {
        if (!(iou_thresholds[i] > 0.0) || !(iou_thresholds[i] <= 1.0)) {
            throw ConfigError("eval.iou thresholds must lie in (0,1]");
        }
        if (i > 0 && !(iou_thresholds[i] > iou_thresholds[i - 1])) {
            throw ConfigError("eval.iou thresholds must be strictly increasing");
        }
    }
    if (top_n_cap && *top_n_cap < 1) throw ConfigError("eval.top_n_cap must be >= 1");
}

namespace {

struct FlatPred {
    const DetectionSet* set;
    int item;
    double score;
    double start;

    const Detection& det() const { return set->items[item]; }
};

// global ordering: score desc, then earlier start, then video id
bool pred_order(const FlatPred& a, const FlatPred& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.start != b.start) return a.start < b.start;
    if (a.set->video_id != b.set->video_id) return a.set->video_id < b.set->video_id;
    return a.item < b.item;
}

std::vector<FlatPred> collect_sorted(const std::vector<DetectionSet>& preds, int label,
                                     std::optional<int> cap) {
    std::vector<FlatPred> flat;
    for (const auto& ds : preds) {
        std::vector<FlatPred> per_video;
        for (size_t i = 0; i < ds.items.size(); ++i) {
            per_video.push_back(FlatPred{&ds, static_cast<int>(i), ds.items[i].score,
                                         ds.items[i].segment.start()});
        }
        if (cap && static_cast<int>(per_video.size()) > *cap) {
            std::sort(per_video.begin(), per_video.end(), pred_order);
            per_video.resize(*cap);
        }
        for (const auto& fp : per_video) {
            if (fp.det().label == label) flat.push_back(fp);
        }
    }
    std::sort(flat.begin(), flat.end(), pred_order);
    return flat;
}

std::set<int> label_set(const GroundTruth& gts) {
    std::set<int> labels;
    for (const auto& [id, list] : gts) {
        for (const auto& g : list) labels.insert(g.label);
    }
    return labels;
}

/// Greedy TP assignment in score order; returns per-prediction TP flags and
/// per-gt matched flags.
struct GreedyResult {
    std::vector<char> is_tp;
    std::map<std::string, std::vector<char>> gt_matched;
    int num_gt = 0;
};

GreedyResult greedy_assign(const std::vector<FlatPred>& flat, const GroundTruth& gts, int label,
                           double iou_thr) {
    GreedyResult res;
    for (const auto& [id, list] : gts) {
        auto& flags = res.gt_matched[id];
        flags.assign(list.size(), 0);
        for (const auto& g : list) {
            if (g.label == label) ++res.num_gt;
        }
    }
    res.is_tp.assign(flat.size(), 0);
    for (size_t i = 0; i < flat.size(); ++i) {
        const FlatPred& fp = flat[i];
        auto it = gts.find(fp.set->video_id);
        if (it == gts.end()) continue;
        const auto& list = it->second;
        auto& matched = res.gt_matched[fp.set->video_id];
        double best_iou = 0.0;
        int best = -1;
        for (size_t gi = 0; gi < list.size(); ++gi) {
            if (list[gi].label != label || matched[gi]) continue;
            double iou = interval_iou(fp.det().segment.start(), fp.det().segment.end(),
                                      list[gi].start, list[gi].end);
            if (iou > best_iou) {
                best_iou = iou;
                best = static_cast<int>(gi);
            }
        }
        if (best >= 0 && best_iou >= iou_thr) {
            res.is_tp[i] = 1;
            matched[best] = 1;
        }
    }
    return res;
}

}  // namespace

double average_precision(const std::vector<DetectionSet>& preds, const GroundTruth& gts,
                         int label, double iou_thr) {
    std::vector<FlatPred> flat = collect_sorted(preds, label, std::nullopt);
    GreedyResult greedy = greedy_assign(flat, gts, label, iou_thr);
    if (greedy.num_gt == 0) return std::numeric_limits<double>::quiet_NaN();
    if (flat.empty()) return 0.0;

    // all-point interpolation: area under the precision envelope
    const size_t n = flat.size();
    std::vector<double> precision(n), recall(n);
    int tp = 0;
    for (size_t i = 0; i < n; ++i) {
        tp += greedy.is_tp[i];
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / greedy.num_gt;
    }
    for (size_t i = n - 1; i > 0; --i) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

MapTable mean_ap(const std::vector<DetectionSet>& preds, const GroundTruth& gts,
                 const EvalConfig& cfg) {
    cfg.validate();
    std::vector<DetectionSet> capped;
    const std::vector<DetectionSet>* use = &preds;
    if (cfg.top_n_cap) {
        capped = preds;
        for (auto& ds : capped) {
            if (static_cast<int>(ds.items.size()) <= *cfg.top_n_cap) continue;
            std::vector<FlatPred> per;
            for (size_t i = 0; i < ds.items.size(); ++i) {
                per.push_back(
                    FlatPred{&ds, static_cast<int>(i), ds.items[i].score, ds.items[i].segment.start()});
            }
            std::sort(per.begin(), per.end(), pred_order);
            per.resize(*cfg.top_n_cap);
            std::vector<Detection> kept;
            for (const auto& fp : per) kept.push_back(fp.det());
            ds.items = std::move(kept);
        }
        use = &capped;
    }

    MapTable table;
    table.thresholds = cfg.iou_thresholds;
    std::set<int> labels = label_set(gts);
    for (double thr : cfg.iou_thresholds) {
        double sum = 0.0;
        int count = 0;
        for (int label : labels) {
            double ap = average_precision(*use, gts, label, thr);
            if (!std::isnan(ap)) {
                sum += ap;
                ++count;
            }
        }
        table.per_threshold.push_back(count > 0 ? sum / count : 0.0);
    }
    table.average = 0.0;
    for (double v : table.per_threshold) table.average += v;
    table.average /= static_cast<double>(table.per_threshold.size());
    return table;
}

DetectionSet nms(const DetectionSet& dets, double iou_thr) {
    if (!(iou_thr > 0.0) || !(iou_thr < 1.0)) {
        throw ConfigError("nms threshold must lie in (0,1)");
    }
    DetectionSet out;
    out.video_id = dets.video_id;
    std::set<int> labels;
    for (const auto& d : dets.items) labels.insert(d.label);
    std::vector<FlatPred> order;
    for (size_t i = 0; i < dets.items.size(); ++i) {
        order.push_back(FlatPred{&dets, static_cast<int>(i), dets.items[i].score,
                                 dets.items[i].segment.start()});
    }
    std::sort(order.begin(), order.end(), pred_order);
    for (int label : labels) {
        std::vector<const Detection*> kept;
        for (const auto& fp : order) {
            const Detection& d = fp.det();
            if (d.label != label) continue;
            bool suppressed = false;
            for (const Detection* k : kept) {
                if (segment_iou(d.segment, k->segment) > iou_thr) {
                    suppressed = true;
                    break;
                }
            }
            if (!suppressed) kept.push_back(&d);
        }
        for (const Detection* k : kept) out.items.push_back(*k);
    }
    // deterministic output order
    std::vector<FlatPred> final_order;
    for (size_t i = 0; i < out.items.size(); ++i) {
        final_order.push_back(FlatPred{&out, static_cast<int>(i), out.items[i].score,
                                       out.items[i].segment.start()});
    }
    std::sort(final_order.begin(), final_order.end(), pred_order);
    std::vector<Detection> sorted;
    for (const auto& fp : final_order) sorted.push_back(fp.det());
    out.items = std::move(sorted);
    return out;
}

FnBuckets false_negative_buckets(const std::vector<DetectionSet>& preds, const GroundTruth& gts,
                                 const EvalConfig& cfg) {
    FnBuckets out{};
    if (cfg.bucket_edges) {
        out.edges = *cfg.bucket_edges;
    } else {
        // quintiles of the evaluated gt length distribution
        std::vector<double> lengths;
        for (const auto& [id, list] : gts) {
            for (const auto& g : list) lengths.push_back(g.end - g.start);
        }
        if (lengths.empty()) throw DataError("false_negative_buckets: no ground truths");
        std::sort(lengths.begin(), lengths.end());
        for (int q = 1; q <= 4; ++q) {
            size_t idx = std::min(lengths.size() - 1, lengths.size() * q / 5);
            out.edges[q - 1] = lengths[idx];
        }
    }
    out.gt_counts.fill(0);
    out.fn_counts.fill(0);

    auto bucket_of = [&](double len) {
        for (int b = 0; b < 4; ++b) {
            if (len <= out.edges[b]) return b;
        }
        return 4;
    };

    std::set<int> labels = label_set(gts);
    for (int label : labels) {
        std::vector<FlatPred> flat = collect_sorted(preds, label, cfg.top_n_cap);
        GreedyResult res = greedy_assign(flat, gts, label, 0.5);
        for (const auto& [id, list] : gts) {
            const auto& matched = res.gt_matched.at(id);
            for (size_t gi = 0; gi < list.size(); ++gi) {
                if (list[gi].label != label) continue;
                int b = bucket_of(list[gi].end - list[gi].start);
                ++out.gt_counts[b];
                if (!matched[gi]) ++out.fn_counts[b];
            }
        }
    }
    for (int b = 0; b < 5; ++b) {
        out.rates[b] = out.gt_counts[b] > 0
                           ? static_cast<double>(out.fn_counts[b]) / out.gt_counts[b]
                           : 0.0;
    }
    return out;
}

void InstabilityLog::record(int epoch, const std::string& video_id,
                            std::vector<int> gt_to_query) {
    per_epoch_[epoch][video_id] = std::move(gt_to_query);
}

double InstabilityLog::instability(int epoch) const {
    auto cur = per_epoch_.find(epoch);
    auto prev = per_epoch_.find(epoch - 1);
    if (cur == per_epoch_.end() || prev == per_epoch_.end()) {
        throw DataError("instability: epochs " + std::to_string(epoch - 1) + "," +
                        std::to_string(epoch) + " not both recorded");
    }
    long total = 0, changed = 0;
    for (const auto& [video, slots] : cur->second) {
        auto pit = prev->second.find(video);
        if (pit == prev->second.end()) {
            throw DataError("instability: video " + video + " missing from epoch " +
                            std::to_string(epoch - 1));
        }
        const auto& prev_slots = pit->second;
        for (size_t gi = 0; gi < slots.size(); ++gi) {
            ++total;
            int before = gi < prev_slots.size() ? prev_slots[gi] : -1;
            if (slots[gi] != before) ++changed;
        }
    }
    if (total == 0) return 0.0;
    return static_cast<double>(changed) / static_cast<double>(total);
}

NoiseTarget noise_target_from_string(const std::string& s) {
    if (s == "center") return NoiseTarget::center;
    if (s == "width") return NoiseTarget::width;
    throw ConfigError("unknown noise target '" + s + "' (expected center|width)");
}

NoiseProbeResult noise_probe(const Model& model, const std::vector<const VideoSample*>& videos,
                             double noise_alpha, NoiseTarget target, int trials, uint64_t seed,
                             const EvalConfig& cfg) {
    if (noise_alpha < 0.0) throw ConfigError("noise alpha must be >= 0");
    if (trials < 1) throw ConfigError("noise probe needs trials >= 1");

    GroundTruth gts;
    std::vector<PredictDetail> details;
    std::vector<DetectionSet> clean;
    details.reserve(videos.size());
    for (const VideoSample* v : videos) {
        gts[v->features.meta.video_id] = v->annotations;
        details.push_back(model.predict_detail(v->features));
        clean.push_back(model.redecode_final(details.back(), nullptr, nullptr));
    }
    NoiseProbeResult res;
    res.clean_map = mean_ap(clean, gts, cfg).average;
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<DetectionSet> noisy;
        noisy.reserve(videos.size());
        for (size_t vi = 0; vi < videos.size(); ++vi) {
            const PredictDetail& det = details[vi];
            Rng rng(hash_combine(hash_combine(seed, static_cast<uint64_t>(trial)), det.video_id));
            Vec eps(det.prev_a.rows());
            for (int q = 0; q < eps.size(); ++q) eps(q) = rng.uniform(-noise_alpha, noise_alpha);
            noisy.push_back(model.redecode_final(det,
                                                 target == NoiseTarget::center ? &eps : nullptr,
                                                 target == NoiseTarget::width ? &eps : nullptr));
        }
        double m = mean_ap(noisy, gts, cfg).average;
        res.per_trial_delta.push_back(m - res.clean_map);
        res.mean_delta += m - res.clean_map;
    }
    res.mean_delta /= trials;
    return res;
}

}  // namespace tad
