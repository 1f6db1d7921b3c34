#include <doctest.h>

#include "tad/pyramid.hpp"
#include "tad/rng.hpp"

using namespace tad;
using ad::Var;

namespace {
Mat random_mat(int r, int c, Rng& rng, double sd = 1.0) {
    Mat m(r, c);
    for (long i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0, sd);
    return m;
}
}  // namespace

TEST_CASE("embed shape, identity, and zero behavior") {
    nn::ParamStore ps;
    Rng rng(41);
    PyramidConfig cfg;
    cfg.model_dim = 16;
    cfg.num_levels = 3;
    Pyramid pyr(ps, cfg, 4, rng);

    ad::Graph g;
    nn::TapeBinding p(g, ps);
    Mat x = random_mat(8, 4, rng);
    Var z = pyr.embed(p, g.constant(x), 8);
    CHECK(z.rows() == 8);
    CHECK(z.cols() == 16);

    // zero input -> zero output (projection carries no bias)
    ad::Graph g2;
    nn::TapeBinding p2(g2, ps);
    Var z0 = pyr.embed(p2, g2.constant(Mat::Zero(8, 4)), 8);
    CHECK(z0.val().cwiseAbs().maxCoeff() == 0.0);

    // identity-initialized projection with D == C reproduces the input
    nn::ParamStore ps_id;
    PyramidConfig cfg_id;
    cfg_id.model_dim = 4;
    cfg_id.num_levels = 2;
    Rng rng2(42);
    Pyramid pyr_id(ps_id, cfg_id, 4, rng2);
    ps_id.value(ps_id.find("pyramid.embed.w")) = Mat::Identity(4, 4);
    ad::Graph g3;
    nn::TapeBinding p3(g3, ps_id);
    Var zi = pyr_id.embed(p3, g3.constant(x), 8);
    CHECK((zi.val() - x).cwiseAbs().maxCoeff() == 0.0);

    // channel mismatch
    ad::Graph g4;
    nn::TapeBinding p4(g4, ps);
    CHECK_THROWS(pyr.embed(p4, g4.constant(Mat::Zero(8, 5)), 8));
}

TEST_CASE("pyramid lengths follow ceil halving") {
    CHECK(pyramid_lengths(16, 3) == std::vector<int>{16, 8, 4});
    CHECK(pyramid_lengths(5, 3) == std::vector<int>{5, 3, 2});
    CHECK(pyramid_lengths(1, 4) == std::vector<int>{1, 1, 1, 1});

    nn::ParamStore ps;
    Rng rng(43);
    PyramidConfig cfg;
    cfg.model_dim = 8;
    cfg.num_levels = 3;
    Pyramid pyr(ps, cfg, 3, rng);
    ad::Graph g;
    nn::TapeBinding p(g, ps);
    Var z1 = pyr.embed(p, g.constant(random_mat(5, 3, rng)), 5);
    auto levels = pyr.build(p, z1, 5);
    CHECK(levels.valid_lengths == std::vector<int>{5, 3, 2});
    CHECK(levels.features[0].rows() == 5);
    CHECK(levels.features[1].rows() == 3);
    CHECK(levels.features[2].rows() == 2);
}

TEST_CASE("rows are standardized after layer normalization") {
    nn::ParamStore ps;
    Rng rng(44);
    PyramidConfig cfg;
    cfg.model_dim = 32;
    cfg.num_levels = 2;
    Pyramid pyr(ps, cfg, 8, rng);
    ad::Graph g;
    nn::TapeBinding p(g, ps);
    Var z1 = pyr.embed(p, g.constant(random_mat(16, 8, rng)), 16);
    auto levels = pyr.build(p, z1, 16);
    const Mat& l2 = levels.features[1].val();
    for (int r = 0; r < l2.rows(); ++r) {
        double mean = l2.row(r).mean();
        double var = (l2.row(r).array() - mean).square().mean();
        CHECK(std::abs(mean) <= 1e-5);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("no activation: pyramid is linear when normalization is skipped") {
    nn::ParamStore ps;
    Rng rng(45);
    PyramidConfig cfg;
    cfg.model_dim = 8;
    cfg.num_levels = 3;
    Pyramid pyr(ps, cfg, 4, rng);

    Mat a = random_mat(12, 4, rng);
    Mat b = random_mat(12, 4, rng);

    auto run = [&](const Mat& x) {
        ad::Graph g;
        nn::TapeBinding p(g, ps);
        Var z1 = pyr.embed(p, g.constant(x), 12);
        auto levels = pyr.build(p, z1, 12, /*apply_norm=*/false);
        return levels.features.back().val();
    };
    Mat sum = run(a + 2.0 * b);
    Mat parts = run(a) + 2.0 * run(b);
    CHECK((sum - parts).cwiseAbs().maxCoeff() <=
          1e-6 * std::max(1.0, parts.cwiseAbs().maxCoeff()));
}

TEST_CASE("pyramid parameter gradients match finite differences") {
    nn::ParamStore ps;
    Rng rng(46);
    PyramidConfig cfg;
    cfg.model_dim = 6;
    cfg.num_levels = 3;
    Pyramid pyr(ps, cfg, 3, rng);
    Mat x = random_mat(9, 3, rng);
    Mat readout_w;

    auto forward = [&](bool build_grads, std::vector<Mat>* grads) {
        ad::Graph g;
        nn::TapeBinding p(g, ps);
        Var z1 = pyr.embed(p, g.constant(x), 9);
        auto levels = pyr.build(p, z1, 9);
        Var all = ad::concat_rows(levels.features);
        if (readout_w.size() == 0) readout_w = random_mat(all.rows(), all.cols(), rng, 0.5);
        Var loss = ad::sum_all(ad::mul(all, g.constant(readout_w)));
        if (build_grads) {
            g.backward(loss);
            p.export_grads(*grads);
        }
        return loss.scalar();
    };

    std::vector<Mat> grads;
    forward(true, &grads);

    Rng pick(47);
    for (int trial = 0; trial < 60; ++trial) {
        int pid = static_cast<int>(pick.below(ps.count()));
        Mat& pv = ps.value(pid);
        long ci = static_cast<long>(pick.below(static_cast<uint64_t>(pv.size())));
        double orig = pv.data()[ci];
        double h = 1e-5 * std::max(1.0, std::abs(orig));
        pv.data()[ci] = orig + h;
        double fp = forward(false, nullptr);
        pv.data()[ci] = orig - h;
        double fm = forward(false, nullptr);
        pv.data()[ci] = orig;
        double fd = (fp - fm) / (2 * h);
        double an = grads[pid].data()[ci];
        double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
        CHECK(rel <= 1e-4);
    }
}
