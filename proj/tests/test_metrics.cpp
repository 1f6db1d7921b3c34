#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "tad/errors.hpp"
#include "tad/metrics.hpp"
#include "tad/rng.hpp"

using namespace tad;

namespace {

DetectionSet dets(const std::string& id,
                  std::vector<std::tuple<double, double, int, double>> items) {
    DetectionSet ds;
    ds.video_id = id;
    for (auto [s, e, label, score] : items) {
        ds.items.push_back(Detection{Segment::from_start_end(s, e), label, score});
    }
    return ds;
}

/// Independent AP reference for small inputs: enumerates every total order
/// consistent with the protocol's sort key (ties permuted exhaustively), runs
/// a naive quadratic greedy assignment for each, and checks all orders agree.
struct RefPred {
    std::string video;
    double start, end, score;
    int label;
};

double reference_ap(std::vector<RefPred> preds, const GroundTruth& gts, int label,
                    double iou_thr) {
    std::erase_if(preds, [&](const RefPred& p) { return p.label != label; });
    int num_gt = 0;
    for (const auto& [id, list] : gts) {
        for (const auto& g : list) num_gt += g.label == label;
    }
    if (num_gt == 0) return std::numeric_limits<double>::quiet_NaN();
    if (preds.empty()) return 0.0;

    std::sort(preds.begin(), preds.end(), [](const RefPred& a, const RefPred& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start != b.start) return a.start < b.start;
        return a.video < b.video;
    });
    // group exact ties on the full sort key
    std::vector<std::pair<size_t, size_t>> tie_groups;
    for (size_t i = 0; i < preds.size();) {
        size_t j = i + 1;
        while (j < preds.size() && preds[j].score == preds[i].score &&
               preds[j].start == preds[i].start && preds[j].video == preds[i].video) {
            ++j;
        }
        tie_groups.push_back({i, j});
        i = j;
    }

    auto run_order = [&](const std::vector<RefPred>& order) {
        std::map<std::string, std::vector<char>> used;
        for (const auto& [id, list] : gts) used[id].assign(list.size(), 0);
        int tp = 0;
        double ap = 0.0;
        std::vector<double> prec, rec;
        int seen = 0;
        for (const auto& p : order) {
            ++seen;
            auto it = gts.find(p.video);
            int best = -1;
            double best_iou = 0.0;
            if (it != gts.end()) {
                for (size_t gi = 0; gi < it->second.size(); ++gi) {
                    const auto& g = it->second[gi];
                    if (g.label != label || used[p.video][gi]) continue;
                    double iou = interval_iou(p.start, p.end, g.start, g.end);
                    if (iou > best_iou) {
                        best_iou = iou;
                        best = static_cast<int>(gi);
                    }
                }
            }
            if (best >= 0 && best_iou >= iou_thr) {
                used[p.video][best] = 1;
                ++tp;
            }
            prec.push_back(static_cast<double>(tp) / seen);
            rec.push_back(static_cast<double>(tp) / num_gt);
        }
        for (size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
        double prev = 0.0;
        for (size_t i = 0; i < prec.size(); ++i) {
            ap += (rec[i] - prev) * prec[i];
            prev = rec[i];
        }
        return ap;
    };

    // enumerate permutations within tie groups (inputs are small)
    std::vector<double> results;
    std::function<void(size_t, std::vector<RefPred>&)> rec_perm = [&](size_t gi,
                                                                      std::vector<RefPred>& cur) {
        if (gi == tie_groups.size()) {
            results.push_back(run_order(cur));
            return;
        }
        auto [b, e] = tie_groups[gi];
        std::sort(cur.begin() + b, cur.begin() + e,
                  [](const RefPred& x, const RefPred& y) { return x.end < y.end; });
        do {
            rec_perm(gi + 1, cur);
        } while (std::next_permutation(cur.begin() + b, cur.begin() + e,
                                       [](const RefPred& x, const RefPred& y) {
                                           return x.end < y.end;
                                       }));
    };
    std::vector<RefPred> cur = preds;
    rec_perm(0, cur);
    for (double r : results) CHECK(r == doctest::Approx(results[0]).epsilon(1e-12));
    return results[0];
}

}  // namespace

TEST_CASE("AP fixtures from first principles") {
    GroundTruth gts;
    gts["v"] = {{0, 1, 0}, {2, 3, 0}};
    std::vector<DetectionSet> preds{dets("v", {{0, 1, 0, .9}, {2, 3, 0, .8}, {4, 5, 0, .7}})};
    CHECK(average_precision(preds, gts, 0, 0.5) == doctest::Approx(1.0));

    GroundTruth g2;
    g2["v"] = {{0, 1, 0}};
    std::vector<DetectionSet> p2{dets("v", {{0.5, 1.5, 0, .9}})};
    CHECK(average_precision(p2, g2, 0, 0.5) == doctest::Approx(0.0));  // IoU 1/3 < 0.5

    std::vector<DetectionSet> p3{dets("v", {})};
    CHECK(average_precision(p3, g2, 0, 0.5) == doctest::Approx(0.0));

    // no ground truths of the class -> NaN, skipped by mean_ap
    CHECK(std::isnan(average_precision(p2, g2, 1, 0.5)));
}

TEST_CASE("mean_ap on the fixtures") {
    GroundTruth gts;
    gts["v"] = {{0, 1, 0}, {2, 3, 0}};
    std::vector<DetectionSet> preds{dets("v", {{0, 1, 0, .9}, {2, 3, 0, .8}, {4, 5, 0, .7}})};
    EvalConfig cfg;
    cfg.iou_thresholds = {0.3, 0.5, 0.7};
    MapTable t = mean_ap(preds, gts, cfg);
    for (double v : t.per_threshold) CHECK(v == doctest::Approx(1.0));
    CHECK(t.average == doctest::Approx(1.0));

    // insertion order must not matter
    std::vector<DetectionSet> shuffled{dets("v", {{4, 5, 0, .7}, {0, 1, 0, .9}, {2, 3, 0, .8}})};
    MapTable t2 = mean_ap(shuffled, gts, cfg);
    CHECK(t2.average == doctest::Approx(t.average));
}

TEST_CASE("AP equals the exhaustive reference on random small fixtures") {
    Rng rng(51);
    for (int trial = 0; trial < 250; ++trial) {
        GroundTruth gts;
        std::vector<DetectionSet> preds;
        std::vector<RefPred> ref;
        int num_videos = 1 + static_cast<int>(rng.below(3));
        for (int v = 0; v < num_videos; ++v) {
            std::string id = "v" + std::to_string(v);
            int ng = static_cast<int>(rng.below(4));
            auto& list = gts[id];
            for (int g = 0; g < ng; ++g) {
                double s = rng.uniform(0, 20);
                list.push_back({s, s + rng.log_uniform(0.5, 5), static_cast<int>(rng.below(2))});
            }
            DetectionSet ds;
            ds.video_id = id;
            int np = static_cast<int>(rng.below(8));
            for (int p = 0; p < np; ++p) {
                double s = rng.uniform(0, 20);
                double e = s + rng.log_uniform(0.5, 5);
                int label = static_cast<int>(rng.below(2));
                // quantized scores force occasional ties
                double score = std::floor(rng.uniform(0, 1) * 8) / 8.0;
                ds.items.push_back(Detection{Segment::from_start_end(s, e), label, score});
                ref.push_back(RefPred{id, s, e, score, label});
            }
            preds.push_back(ds);
        }
        for (int label = 0; label < 2; ++label) {
            for (double thr : {0.3, 0.5, 0.7}) {
                double got = average_precision(preds, gts, label, thr);
                double want = reference_ap(ref, gts, label, thr);
                if (std::isnan(want)) {
                    CHECK(std::isnan(got));
                } else {
                    CHECK(got == doctest::Approx(want).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("AP rank-only dependence and FP score drop") {
    GroundTruth gts;
    gts["v"] = {{0, 1, 0}, {5, 6, 0}};
    std::vector<DetectionSet> preds{
        dets("v", {{0, 1, 0, .9}, {5.2, 6.1, 0, .6}, {10, 11, 0, .3}})};
    EvalConfig cfg;
    cfg.iou_thresholds = {0.5};
    double base = mean_ap(preds, gts, cfg).average;

    // uniform positive rescaling preserves ranks
    std::vector<DetectionSet> scaled = preds;
    for (auto& d : scaled[0].items) d.score *= 0.37;
    CHECK(mean_ap(scaled, gts, cfg).average == doctest::Approx(base));

    // moving a FP's score below every TP cannot hurt
    std::vector<DetectionSet> high_fp{
        dets("v", {{0, 1, 0, .9}, {5.2, 6.1, 0, .6}, {10, 11, 0, .95}})};
    double with_high_fp = mean_ap(high_fp, gts, cfg).average;
    CHECK(base >= with_high_fp - 1e-12);
}

TEST_CASE("nms fixtures") {
    DetectionSet a = dets("v", {{0, 2, 0, .9}, {0, 2, 0, .8}});
    DetectionSet kept = nms(a, 0.5);
    REQUIRE(kept.items.size() == 1);
    CHECK(kept.items[0].score == doctest::Approx(.9));

    DetectionSet b = dets("v", {{0, 1, 0, .9}, {5, 6, 0, .8}});
    CHECK(nms(b, 0.5).items.size() == 2);

    // chain: a overlaps b, b overlaps c, a disjoint from c -> keep {a, c}
    DetectionSet c = dets("v", {{0.0, 1.0, 0, .9}, {0.6, 1.6, 0, .8}, {1.3, 2.3, 0, .7}});
    DetectionSet kept_c = nms(c, 0.2);
    REQUIRE(kept_c.items.size() == 2);
    CHECK(kept_c.items[0].segment.start() == doctest::Approx(0.0));
    CHECK(kept_c.items[1].segment.start() == doctest::Approx(1.3));

    CHECK_THROWS_AS(nms(a, 0.0), ConfigError);
}

TEST_CASE("nms subset and idempotence properties") {
    Rng rng(52);
    for (int trial = 0; trial < 200; ++trial) {
        DetectionSet ds;
        ds.video_id = "v";
        int n = static_cast<int>(rng.below(12));
        for (int i = 0; i < n; ++i) {
            double s = rng.uniform(0, 10);
            ds.items.push_back(Detection{Segment::from_start_end(s, s + rng.log_uniform(0.3, 3)),
                                         static_cast<int>(rng.below(2)), rng.uniform(0, 1)});
        }
        DetectionSet once = nms(ds, 0.4);
        CHECK(once.items.size() <= ds.items.size());
        for (const auto& k : once.items) {
            bool found = false;
            for (const auto& o : ds.items) {
                if (o.score == k.score && o.label == k.label &&
                    o.segment.start() == k.segment.start() &&
                    o.segment.end() == k.segment.end()) {
                    found = true;
                    break;
                }
            }
            CHECK(found);
        }
        DetectionSet twice = nms(once, 0.4);
        REQUIRE(twice.items.size() == once.items.size());
        for (size_t i = 0; i < once.items.size(); ++i) {
            CHECK(twice.items[i].score == once.items[i].score);
            CHECK(twice.items[i].segment.start() == once.items[i].segment.start());
        }
    }
}

TEST_CASE("instability fixtures") {
    InstabilityLog log;
    log.record(1, "a", {0, 1, 2});
    log.record(1, "b", {3, -1});

    SUBCASE("identical assignments give zero") {
        log.record(2, "a", {0, 1, 2});
        log.record(2, "b", {3, -1});
        CHECK(log.instability(2) == doctest::Approx(0.0));
    }
    SUBCASE("all changed gives one; unmatched transitions count") {
        log.record(2, "a", {1, 2, 0});
        log.record(2, "b", {-1, 3});
        CHECK(log.instability(2) == doctest::Approx(1.0));
    }
    SUBCASE("3 of 10 changed gives 0.3") {
        log.record(1, "c", {0, 1, 2, 3, 4});
        log.record(2, "a", {0, 1, 7});   // 1 change
        log.record(2, "b", {3, 5});      // 1 change (from -1)
        log.record(2, "c", {0, 1, 2, 3, 9});  // 1 change
        CHECK(log.instability(2) == doctest::Approx(0.3));
    }
    SUBCASE("missing prior epoch is an error") { CHECK_THROWS_AS(log.instability(5), DataError); }
}

TEST_CASE("instability invariant to consistent slot relabeling") {
    InstabilityLog a, b;
    a.record(1, "v", {0, 1, -1});
    a.record(2, "v", {0, 2, 1});
    // relabel slots q -> q + 10 in both epochs
    b.record(1, "v", {10, 11, -1});
    b.record(2, "v", {10, 12, 11});
    CHECK(a.instability(2) == doctest::Approx(b.instability(2)));
}

TEST_CASE("false negative buckets") {
    EvalConfig cfg;
    cfg.bucket_edges = {{1.0, 2.0, 4.0, 8.0}};
    GroundTruth gts;
    // four XL instances (length > 8)
    gts["v"] = {{0, 10, 0}, {20, 30, 0}, {40, 50, 0}, {60, 70, 0}};

    SUBCASE("perfect detector -> all zero") {
        std::vector<DetectionSet> preds{
            dets("v", {{0, 10, 0, .9}, {20, 30, 0, .9}, {40, 50, 0, .9}, {60, 70, 0, .9}})};
        FnBuckets fb = false_negative_buckets(preds, gts, cfg);
        for (double r : fb.rates) CHECK(r == 0.0);
    }
    SUBCASE("no detections -> nonempty buckets all one") {
        std::vector<DetectionSet> preds{dets("v", {})};
        FnBuckets fb = false_negative_buckets(preds, gts, cfg);
        CHECK(fb.rates[4] == doctest::Approx(1.0));
        CHECK(fb.gt_counts[4] == 4);
        CHECK(fb.rates[0] == 0.0);  // empty bucket reports 0
    }
    SUBCASE("one missed XL of four -> rate 0.25") {
        std::vector<DetectionSet> preds{
            dets("v", {{0, 10, 0, .9}, {20, 30, 0, .9}, {40, 50, 0, .9}})};
        FnBuckets fb = false_negative_buckets(preds, gts, cfg);
        CHECK(fb.rates[4] == doctest::Approx(0.25));
    }
}

TEST_CASE("fn bucket edges default to gt length quintiles") {
    GroundTruth gts;
    auto& list = gts["v"];
    for (int i = 1; i <= 10; ++i) list.push_back({0.0, static_cast<double>(i), 0});
    EvalConfig cfg;
    std::vector<DetectionSet> preds{dets("v", {})};
    FnBuckets fb = false_negative_buckets(preds, gts, cfg);
    CHECK(fb.edges[0] == doctest::Approx(3.0));
    CHECK(fb.edges[1] == doctest::Approx(5.0));
    CHECK(fb.edges[2] == doctest::Approx(7.0));
    CHECK(fb.edges[3] == doctest::Approx(9.0));
}
