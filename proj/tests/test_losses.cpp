#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tad/losses.hpp"
#include "tad/rng.hpp"

using namespace tad;

namespace {

/// Exhaustive minimum over all injective assignments (oracle).
double brute_force_min_cost(const Mat& cost) {
    const int nq = static_cast<int>(cost.rows());
    const int ng = static_cast<int>(cost.cols());
    const int k = std::min(nq, ng);
    if (k == 0) return 0.0;
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> queries(nq);
    std::iota(queries.begin(), queries.end(), 0);
    // recursively assign gts 0..k-1 (if ng<=nq) or queries (transposed)
    // no pruning: with negative entries a partial cost bounds nothing
    std::function<void(int, std::vector<char>&, double)> rec;
    if (ng <= nq) {
        std::vector<char> used(nq, 0);
        rec = [&](int g, std::vector<char>& u, double acc) {
            if (g == ng) {
                best = std::min(best, acc);
                return;
            }
            for (int q = 0; q < nq; ++q) {
                if (u[q]) continue;
                u[q] = 1;
                rec(g + 1, u, acc + cost(q, g));
                u[q] = 0;
            }
        };
        rec(0, used, 0.0);
    } else {
        std::vector<char> used(ng, 0);
        rec = [&](int q, std::vector<char>& u, double acc) {
            if (q == nq) {
                best = std::min(best, acc);
                return;
            }
            for (int g = 0; g < ng; ++g) {
                if (u[g]) continue;
                u[g] = 1;
                rec(q + 1, u, acc + cost(q, g));
                u[g] = 0;
            }
        };
        rec(0, used, 0.0);
    }
    return best;
}

double assignment_cost(const Mat& cost, const MatchResult& m) {
    double total = 0.0;
    for (auto [q, g] : m.pairs) total += cost(q, g);
    return total;
}

}  // namespace

TEST_CASE("hungarian fixtures") {
    Mat c(2, 2);
    c << 1, 2, 2, 1;
    MatchResult m = hungarian_match(c);
    REQUIRE(m.pairs.size() == 2);
    CHECK(m.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(m.pairs[1] == std::pair<int, int>{1, 1});
    CHECK(assignment_cost(c, m) == doctest::Approx(2.0));

    Mat single(1, 1);
    single << 0.0;
    MatchResult ms = hungarian_match(single);
    REQUIRE(ms.pairs.size() == 1);
    CHECK(ms.pairs[0] == std::pair<int, int>{0, 0});

    Mat empty(3, 0);
    MatchResult me = hungarian_match(empty);
    CHECK(me.pairs.empty());
    CHECK(me.unmatched_queries == std::vector<int>{0, 1, 2});
}

TEST_CASE("hungarian equals brute force on random rectangular matrices") {
    Rng rng(21);
    for (int trial = 0; trial < 300; ++trial) {
        int nq = 1 + static_cast<int>(rng.below(7));
        int ng = 1 + static_cast<int>(rng.below(7));
        Mat cost(nq, ng);
        for (long i = 0; i < cost.size(); ++i) cost.data()[i] = rng.uniform(-5, 5);
        MatchResult m = hungarian_match(cost);
        CHECK(static_cast<int>(m.pairs.size()) == std::min(nq, ng));
        CHECK(assignment_cost(cost, m) == doctest::Approx(brute_force_min_cost(cost)).epsilon(1e-9));

        // one-to-one: no index reused
        std::vector<char> qs(nq, 0), gs(ng, 0);
        for (auto [q, g] : m.pairs) {
            CHECK(!qs[q]);
            CHECK(!gs[g]);
            qs[q] = gs[g] = 1;
        }
        // determinism
        MatchResult m2 = hungarian_match(cost);
        CHECK(m.pairs == m2.pairs);
    }
}

TEST_CASE("focal loss fixtures") {
    // gamma=0, alpha=0.5 reduces to 0.5 * BCE
    CHECK(focal_loss(0.7, true, 0.0, 0.5) == doctest::Approx(0.5 * -std::log(0.7)));
    CHECK(focal_loss(0.7, false, 0.0, 0.5) == doctest::Approx(0.5 * -std::log(0.3)));
    CHECK(focal_loss(0.9, true, 2.0, 0.25) == doctest::Approx(2.634e-4).epsilon(1e-3));
    CHECK(focal_loss(0.5, true, 2.0, 0.5) == doctest::Approx(0.5 * 0.25 * std::log(2.0)));
    CHECK(focal_loss(0.5, false, 2.0, 0.5) == doctest::Approx(0.5 * 0.25 * std::log(2.0)));
    CHECK_THROWS_AS(focal_loss(0.0, true, 2.0, 0.25), std::invalid_argument);
    CHECK_THROWS_AS(focal_loss(1.0, false, 2.0, 0.25), std::invalid_argument);
}

TEST_CASE("diou fixtures and range") {
    // pred (0,1), gt (2,3): iou 0, centers 0.5/2.5, enclose 3
    CHECK(interval_diou(0, 1, 2, 3) == doctest::Approx(-4.0 / 9.0));
    CHECK(interval_diou(0, 1, 0, 1) == doctest::Approx(1.0));

    Rng rng(22);
    for (int i = 0; i < 3000; ++i) {
        double s1 = rng.uniform(0, 50), e1 = s1 + rng.log_uniform(0.01, 20);
        double s2 = rng.uniform(0, 50), e2 = s2 + rng.log_uniform(0.01, 20);
        double d = interval_diou(s1, e1, s2, e2);
        CHECK(d > -1.0);
        CHECK(d <= 1.0);
        bool identical = s1 == s2 && e1 == e2;
        if (d == doctest::Approx(1.0).epsilon(1e-15)) CHECK(identical);
    }
}

TEST_CASE("match_cost fixtures") {
    LossWeights w;
    w.w_cls = 2.0;
    w.w_diou = 2.0;
    w.w_logwidth = 1.0;
    ActionInstance gt{2.0, 3.0, 0};

    // perfect regression: only the classification term remains
    Segment perfect = Segment::from_start_end(2.0, 3.0);
    double c_perfect = match_cost(perfect, 0.99, gt, w);
    double cls_only = c_perfect;
    Segment shifted = Segment::from_start_end(0.0, 1.0);
    double c_shifted = match_cost(shifted, 0.99, gt, w);
    CHECK(c_shifted > cls_only);
    CHECK(c_shifted - cls_only == doctest::Approx(2.0 * (13.0 / 9.0)).epsilon(1e-12));

    // double width at same center: logwidth term = ln 2
    Segment wide(2.5, 1.0);  // gt half-width 0.5
    double c_wide = match_cost(wide, 0.99, gt, w);
    double diou_wide = segment_diou(wide, Segment::from_start_end(2.0, 3.0));
    CHECK(c_wide - cls_only ==
          doctest::Approx(2.0 * (1.0 - diou_wide) - 2.0 * 0.0 + std::log(2.0)).epsilon(1e-9));

    CHECK_THROWS_AS(match_cost(perfect, 0.5, ActionInstance{1.0, 1.0, 0}, w),
                    std::invalid_argument);
}

TEST_CASE("matching invariance properties") {
    Rng rng(23);
    LossWeights w;
    for (int trial = 0; trial < 200; ++trial) {
        int nq = 2 + static_cast<int>(rng.below(6));
        int ng = 1 + static_cast<int>(rng.below(4));
        std::vector<Segment> preds;
        std::vector<double> probs;
        std::vector<ActionInstance> gts;
        for (int q = 0; q < nq; ++q) {
            preds.emplace_back(rng.uniform(0, 60), rng.log_uniform(0.1, 10));
            probs.push_back(rng.uniform(0.05, 0.95));
        }
        for (int g = 0; g < ng; ++g) {
            double s = rng.uniform(0, 50);
            gts.push_back({s, s + rng.log_uniform(0.1, 10), 0});
        }
        auto build_cost = [&](double shift, double scale) {
            Mat cost(nq, ng);
            for (int q = 0; q < nq; ++q) {
                for (int g = 0; g < ng; ++g) {
                    Segment p((preds[q].center() + shift) * scale, preds[q].width() * scale);
                    ActionInstance a{(gts[g].start + shift) * scale, (gts[g].end + shift) * scale,
                                     0};
                    cost(q, g) = match_cost(p, probs[q], a, w);
                }
            }
            return cost;
        };
        MatchResult base = hungarian_match(build_cost(0, 1));
        MatchResult shifted = hungarian_match(build_cost(13.7, 1));
        CHECK(base.pairs == shifted.pairs);

        // scale invariance of the regression pieces is exact in value
        double s = rng.log_uniform(0.1, 10);
        for (int q = 0; q < std::min(nq, ng); ++q) {
            Segment p = preds[q];
            ActionInstance a = gts[q % ng];
            double d1 = 1.0 - segment_diou(p, Segment::from_start_end(a.start, a.end));
            Segment ps(p.center() * s, p.width() * s);
            double d2 =
                1.0 - segment_diou(ps, Segment::from_start_end(a.start * s, a.end * s));
            CHECK(d1 == doctest::Approx(d2).epsilon(1e-12));
            double lw1 = std::abs(std::log(p.width()) - std::log(0.5 * (a.end - a.start)));
            double lw2 =
                std::abs(std::log(ps.width()) - std::log(0.5 * s * (a.end - a.start)));
            CHECK(lw1 == doctest::Approx(lw2).epsilon(1e-9));
        }
    }
}

namespace {
LayerPrediction make_layer(const std::vector<Segment>& segs, const Mat& logits) {
    return LayerPrediction{segs, logits};
}
}  // namespace

TEST_CASE("total_loss: zero ground truth leaves only background focal") {
    LossWeights w;
    w.w_cls = 1.0;
    w.w_diou = 1.0;
    w.w_logwidth = 1.0;
    Mat logits(2, 3);
    logits << -1.0, 0.5, 0.0, 2.0, -0.3, 0.1;
    std::vector<Segment> segs{Segment(1.0, 0.5), Segment(4.0, 1.0)};
    LossBreakdown b = total_loss({make_layer(segs, logits)}, nullptr, {}, w);
    double expect = 0.0;
    for (int q = 0; q < 2; ++q) {
        for (int c = 0; c < 3; ++c) {
            expect += focal_loss(sigmoid(logits(q, c)), false, w.focal_gamma, w.focal_alpha);
        }
    }
    CHECK(b.total == doctest::Approx(expect).epsilon(1e-9));
    CHECK(b.diou == 0.0);
    CHECK(b.logwidth == 0.0);
}

TEST_CASE("total_loss: single query single gt equals hand-summed terms") {
    LossWeights w;
    w.w_cls = 1.0;
    w.w_diou = 1.0;
    w.w_logwidth = 1.0;
    Mat logits(1, 2);
    logits << 0.8, -0.4;
    Segment pred(2.4, 0.7);
    ActionInstance gt{2.0, 3.0, 0};
    LossBreakdown b = total_loss({make_layer({pred}, logits)}, nullptr, {gt}, w);

    double cls = focal_loss(sigmoid(0.8), true, w.focal_gamma, w.focal_alpha) +
                 focal_loss(sigmoid(-0.4), false, w.focal_gamma, w.focal_alpha);
    double diou = 1.0 - segment_diou(pred, Segment::from_start_end(2.0, 3.0));
    double lw = std::abs(std::log(0.7) - std::log(0.5));
    CHECK(b.total == doctest::Approx(cls + diou + lw).epsilon(1e-9));
    REQUIRE(b.per_layer.size() == 1);
    REQUIRE(b.per_layer[0].pairs.size() == 1);
    CHECK(b.per_layer[0].pairs[0] == std::pair<int, int>{0, 0});
}

TEST_CASE("total_loss: perfect predictions approach zero") {
    LossWeights w;
    std::vector<ActionInstance> gts{{1.0, 2.0, 0}, {5.0, 8.0, 1}};
    std::vector<Segment> segs{Segment::from_start_end(1.0, 2.0), Segment::from_start_end(5.0, 8.0)};
    Mat logits(2, 2);
    logits << 20.0, -20.0, -20.0, 20.0;  // prob -> 1 for the right class
    LossBreakdown b = total_loss({make_layer(segs, logits)}, nullptr, gts, w);
    CHECK(b.total <= 1e-6);
}

TEST_CASE("total_loss: aux off keeps only the final layer") {
    LossWeights w;
    Mat logits(1, 1);
    logits << 0.3;
    Mat logits2(1, 1);
    logits2 << -1.2;
    std::vector<ActionInstance> gts{{1.0, 2.0, 0}};
    LayerPrediction l1 = make_layer({Segment(10.0, 4.0)}, logits);
    LayerPrediction l2 = make_layer({Segment(1.4, 0.6)}, logits2);
    LossWeights aux_off = w;
    aux_off.aux_enabled = false;
    LossBreakdown with_aux = total_loss({l1, l2}, nullptr, gts, w);
    LossBreakdown without_aux = total_loss({l1, l2}, nullptr, gts, aux_off);
    LossBreakdown only_l2 = total_loss({l2}, nullptr, gts, w);
    CHECK(without_aux.total == doctest::Approx(only_l2.total).epsilon(1e-12));
    CHECK(with_aux.total > without_aux.total);
}

TEST_CASE("total_loss gradient check against finite differences") {
    Rng rng(24);
    LossWeights w;
    const int nq = 5, nc = 3, ng = 2;
    std::vector<ActionInstance> gts{{2.0, 5.0, 1}, {8.0, 9.5, 0}};

    Mat center(nq, 1), width(nq, 1), logits(nq, nc), fg(nq, 1), ec(nq, 1), ew(nq, 1);
    for (int q = 0; q < nq; ++q) {
        center(q, 0) = rng.uniform(0, 10);
        width(q, 0) = rng.log_uniform(0.3, 4);
        ec(q, 0) = rng.uniform(0, 10);
        ew(q, 0) = rng.log_uniform(0.3, 4);
        fg(q, 0) = rng.uniform(-2, 2);
        for (int c = 0; c < nc; ++c) logits(q, c) = rng.uniform(-2, 2);
    }

    // matching fixed across perturbations
    std::vector<MatchResult> fixed;
    MatchResult fixed_enc;
    {
        ad::Graph g;
        std::vector<LayerVars> layers{{g.leaf(center), ad::log_v(g.leaf(width)), g.leaf(logits)}};
        EncoderVars enc{g.leaf(ec), ad::log_v(g.leaf(ew)), g.leaf(fg)};
        TotalLossResult r = total_loss_ad(g, layers, &enc, gts, w);
        fixed = r.breakdown.per_layer;
        fixed_enc = r.breakdown.encoder_match;
    }

    auto eval = [&](Mat& grads_center, Mat& grads_width, Mat& grads_logits, bool want_grads) {
        ad::Graph g;
        ad::Var vc = g.leaf(center);
        ad::Var vw = g.leaf(width);
        ad::Var vl = g.leaf(logits);
        std::vector<LayerVars> layers{{vc, ad::log_v(vw), vl}};
        EncoderVars enc{g.leaf(ec), ad::log_v(g.leaf(ew)), g.leaf(fg)};
        TotalLossResult r = total_loss_ad(g, layers, &enc, gts, w, &fixed, &fixed_enc);
        if (want_grads) {
            g.backward(r.loss);
            grads_center = g.grad(vc.idx);
            grads_width = g.grad(vw.idx);
            grads_logits = g.grad(vl.idx);
        }
        return r.breakdown.total;
    };

    Mat gc, gw, gl;
    eval(gc, gw, gl, true);
    Mat dummy;
    const double h = 1e-6;
    auto fd_check = [&](Mat& target, const Mat& analytic) {
        for (long i = 0; i < target.size(); ++i) {
            double orig = target.data()[i];
            target.data()[i] = orig + h;
            double fp = eval(dummy, dummy, dummy, false);
            target.data()[i] = orig - h;
            double fm = eval(dummy, dummy, dummy, false);
            target.data()[i] = orig;
            double fd = (fp - fm) / (2 * h);
            double an = analytic.data()[i];
            double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-5});
            CHECK(rel <= 1e-5);
        }
    };
    fd_check(center, gc);
    fd_check(width, gw);
    fd_check(logits, gl);
}
