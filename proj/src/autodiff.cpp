#include "tad/autodiff.hpp"

#include <cmath>
#include <memory>

namespace tad::ad {

void Graph::backward(Var root) {
    assert(root.g == this);
    assert(val(root.idx).rows() == 1 && val(root.idx).cols() == 1);
    grad(root.idx)(0, 0) = 1.0;
    for (int i = root.idx; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.needs_grad && n.grad_ready && n.backward) n.backward(*this);
    }
}

namespace {

inline bool wants(Var v) { return v.g->needs_grad(v.idx); }

inline Var unary(Var a, Mat value, std::function<void(Graph&, int, int)> bwd) {
    Graph& g = *a.g;
    bool ng = wants(a);
    int ai = a.idx;
    std::function<void(Graph&)> fn;
    if (ng) {
        // out index is known only after push; capture via shared slot
        auto out_slot = std::make_shared<int>(-1);
        fn = [bwd, ai, out_slot](Graph& gg) { bwd(gg, *out_slot, ai); };
        Var out = g.push(std::move(value), true, std::move(fn));
        *out_slot = out.idx;
        return out;
    }
    return g.push(std::move(value), false, nullptr);
}

inline Var binary(Var a, Var b, Mat value, std::function<void(Graph&, int, int, int)> bwd) {
    Graph& g = *a.g;
    assert(b.g == a.g);
    bool ng = wants(a) || wants(b);
    if (ng) {
        auto out_slot = std::make_shared<int>(-1);
        int ai = a.idx, bi = b.idx;
        auto fn = [bwd, ai, bi, out_slot](Graph& gg) { bwd(gg, *out_slot, ai, bi); };
        Var out = g.push(std::move(value), true, std::move(fn));
        *out_slot = out.idx;
        return out;
    }
    return g.push(std::move(value), false, nullptr);
}

}  // namespace

Var add(Var a, Var b) {
    assert(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols());
    return binary(a, b, a.val() + b.val(), [](Graph& g, int out, int ai, int bi) {
        const Mat& go = g.grad(out);
        if (g.needs_grad(ai)) g.grad(ai) += go;
        if (g.needs_grad(bi)) g.grad(bi) += go;
    });
}

Var sub(Var a, Var b) {
    assert(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols());
    return binary(a, b, a.val() - b.val(), [](Graph& g, int out, int ai, int bi) {
        const Mat& go = g.grad(out);
        if (g.needs_grad(ai)) g.grad(ai) += go;
        if (g.needs_grad(bi)) g.grad(bi) -= go;
    });
}

Var neg(Var a) {
    return unary(a, -a.val(), [](Graph& g, int out, int ai) { g.grad(ai) -= g.grad(out); });
}

Var mul(Var a, Var b) {
    assert(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols());
    return binary(a, b, a.val().cwiseProduct(b.val()), [](Graph& g, int out, int ai, int bi) {
        const Mat& go = g.grad(out);
        if (g.needs_grad(ai)) g.grad(ai) += go.cwiseProduct(g.val(bi));
        if (g.needs_grad(bi)) g.grad(bi) += go.cwiseProduct(g.val(ai));
    });
}

Var div(Var a, Var b) {
    assert(a.val().rows() == b.val().rows() && a.val().cols() == b.val().cols());
    return binary(a, b, a.val().cwiseQuotient(b.val()), [](Graph& g, int out, int ai, int bi) {
        const Mat& go = g.grad(out);
        const Mat& bv = g.val(bi);
        if (g.needs_grad(ai)) g.grad(ai) += go.cwiseQuotient(bv);
        if (g.needs_grad(bi)) {
            g.grad(bi) -= go.cwiseProduct(g.val(out)).cwiseQuotient(bv);
        }
    });
}

Var scale(Var a, double s) {
    return unary(a, a.val() * s,
                 [s](Graph& g, int out, int ai) { g.grad(ai) += g.grad(out) * s; });
}

Var add_scalar(Var a, double s) {
    return unary(a, a.val().array() + s,
                 [](Graph& g, int out, int ai) { g.grad(ai) += g.grad(out); });
}

Var relu(Var a) {
    return unary(a, a.val().cwiseMax(0.0), [](Graph& g, int out, int ai) {
        g.grad(ai) += g.grad(out).cwiseProduct(
            (g.val(ai).array() > 0.0).cast<double>().matrix());
    });
}

Var sigmoid_v(Var a) {
    Mat v = a.val().unaryExpr([](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
    });
    return unary(a, std::move(v), [](Graph& g, int out, int ai) {
        const Mat& y = g.val(out);
        g.grad(ai) += g.grad(out).cwiseProduct(
            y.cwiseProduct((1.0 - y.array()).matrix()));
    });
}

Var log_sigmoid(Var a) {
    // ln(sigmoid(x)) = -softplus(-x), stable at both tails
    Mat v = a.val().unaryExpr([](double x) {
        if (x >= 0.0) return -std::log1p(std::exp(-x));
        return x - std::log1p(std::exp(x));
    });
    return unary(a, std::move(v), [](Graph& g, int out, int ai) {
        // d/dx = sigmoid(-x)
        g.grad(ai) += g.grad(out).cwiseProduct(g.val(ai).unaryExpr([](double x) {
            if (x >= 0.0) {
                double e = std::exp(-x);
                return e / (1.0 + e);
            }
            return 1.0 / (1.0 + std::exp(x));
        }));
    });
}

Var exp_v(Var a) {
    return unary(a, a.val().array().exp(), [](Graph& g, int out, int ai) {
        g.grad(ai) += g.grad(out).cwiseProduct(g.val(out));
    });
}

Var log_v(Var a) {
    return unary(a, a.val().array().log(), [](Graph& g, int out, int ai) {
        g.grad(ai) += g.grad(out).cwiseQuotient(g.val(ai));
    });
}

Var abs_v(Var a) {
    return unary(a, a.val().cwiseAbs(), [](Graph& g, int out, int ai) {
        g.grad(ai) += g.grad(out).cwiseProduct(g.val(ai).unaryExpr(
            [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }));
    });
}

Var pow_const(Var a, double p) {
    return unary(a, a.val().array().pow(p), [p](Graph& g, int out, int ai) {
        g.grad(ai) += g.grad(out).cwiseProduct(
            (p * g.val(ai).array().pow(p - 1.0)).matrix());
    });
}

Var sin_v(Var a) {
    return unary(a, a.val().array().sin(), [](Graph& g, int out, int ai) {
        g.grad(ai) += g.grad(out).cwiseProduct(g.val(ai).array().cos().matrix());
    });
}

Var cos_v(Var a) {
    return unary(a, a.val().array().cos(), [](Graph& g, int out, int ai) {
        g.grad(ai) -= g.grad(out).cwiseProduct(g.val(ai).array().sin().matrix());
    });
}

Var cmin(Var a, Var b) {
    return binary(a, b, a.val().cwiseMin(b.val()), [](Graph& g, int out, int ai, int bi) {
        const Mat& go = g.grad(out);
        const Mat& av = g.val(ai);
        const Mat& bv = g.val(bi);
        Mat pick_a = (av.array() <= bv.array()).cast<double>();
        if (g.needs_grad(ai)) g.grad(ai) += go.cwiseProduct(pick_a);
        if (g.needs_grad(bi)) g.grad(bi) += go.cwiseProduct((1.0 - pick_a.array()).matrix());
    });
}

Var cmax(Var a, Var b) {
    return binary(a, b, a.val().cwiseMax(b.val()), [](Graph& g, int out, int ai, int bi) {
        const Mat& go = g.grad(out);
        const Mat& av = g.val(ai);
        const Mat& bv = g.val(bi);
        Mat pick_a = (av.array() >= bv.array()).cast<double>();
        if (g.needs_grad(ai)) g.grad(ai) += go.cwiseProduct(pick_a);
        if (g.needs_grad(bi)) g.grad(bi) += go.cwiseProduct((1.0 - pick_a.array()).matrix());
    });
}

Var matmul(Var a, Var b) {
    assert(a.val().cols() == b.val().rows());
    Mat v = a.val() * b.val();
    return binary(a, b, std::move(v), [](Graph& g, int out, int ai, int bi) {
        const Mat& go = g.grad(out);
        if (g.needs_grad(ai)) g.grad(ai).noalias() += go * g.val(bi).transpose();
        if (g.needs_grad(bi)) g.grad(bi).noalias() += g.val(ai).transpose() * go;
    });
}

Var matmul_nt(Var a, Var b) {
    assert(a.val().cols() == b.val().cols());
    Mat v = a.val() * b.val().transpose();
    return binary(a, b, std::move(v), [](Graph& g, int out, int ai, int bi) {
        const Mat& go = g.grad(out);
        if (g.needs_grad(ai)) g.grad(ai).noalias() += go * g.val(bi);
        if (g.needs_grad(bi)) g.grad(bi).noalias() += go.transpose() * g.val(ai);
    });
}

Var rowwise_add(Var a, Var r) {
    assert(r.val().rows() == 1 && r.val().cols() == a.val().cols());
    Mat v = a.val().rowwise() + r.val().row(0);
    return binary(a, r, std::move(v), [](Graph& g, int out, int ai, int ri) {
        const Mat& go = g.grad(out);
        if (g.needs_grad(ai)) g.grad(ai) += go;
        if (g.needs_grad(ri)) g.grad(ri) += go.colwise().sum();
    });
}

Var rowwise_mul(Var a, Var r) {
    assert(r.val().rows() == 1 && r.val().cols() == a.val().cols());
    Mat v = a.val().array().rowwise() * r.val().row(0).array();
    return binary(a, r, std::move(v), [](Graph& g, int out, int ai, int ri) {
        const Mat& go = g.grad(out);
        if (g.needs_grad(ai)) {
            g.grad(ai) += (go.array().rowwise() * g.val(ri).row(0).array()).matrix();
        }
        if (g.needs_grad(ri)) g.grad(ri) += go.cwiseProduct(g.val(ai)).colwise().sum();
    });
}

Var colwise_add(Var a, Var c) {
    assert(c.val().cols() == 1 && c.val().rows() == a.val().rows());
    Mat v = a.val().colwise() + c.val().col(0);
    return binary(a, c, std::move(v), [](Graph& g, int out, int ai, int ci) {
        const Mat& go = g.grad(out);
        if (g.needs_grad(ai)) g.grad(ai) += go;
        if (g.needs_grad(ci)) g.grad(ci) += go.rowwise().sum();
    });
}

Var colwise_mul(Var a, Var c) {
    assert(c.val().cols() == 1 && c.val().rows() == a.val().rows());
    Mat v = a.val().array().colwise() * c.val().col(0).array();
    return binary(a, c, std::move(v), [](Graph& g, int out, int ai, int ci) {
        const Mat& go = g.grad(out);
        if (g.needs_grad(ai)) {
            g.grad(ai) += (go.array().colwise() * g.val(ci).col(0).array()).matrix();
        }
        if (g.needs_grad(ci)) g.grad(ci) += go.cwiseProduct(g.val(ai)).rowwise().sum();
    });
}

Var sum_all(Var a) {
    Mat v(1, 1);
    v(0, 0) = a.val().sum();
    return unary(a, std::move(v), [](Graph& g, int out, int ai) {
        g.grad(ai).array() += g.grad(out)(0, 0);
    });
}

Var softmax_rows(Var a) { return softmax_groups(a, static_cast<int>(a.val().cols())); }

Var softmax_groups(Var a, int group) {
    const Mat& x = a.val();
    assert(x.cols() % group == 0);
    Mat y(x.rows(), x.cols());
    const int ngroups = static_cast<int>(x.cols()) / group;
    for (int i = 0; i < x.rows(); ++i) {
        for (int gi = 0; gi < ngroups; ++gi) {
            const int c0 = gi * group;
            double mx = x(i, c0);
            for (int j = 1; j < group; ++j) mx = std::max(mx, x(i, c0 + j));
            double sum = 0.0;
            for (int j = 0; j < group; ++j) {
                double e = std::exp(x(i, c0 + j) - mx);
                y(i, c0 + j) = e;
                sum += e;
            }
            for (int j = 0; j < group; ++j) y(i, c0 + j) /= sum;
        }
    }
    return unary(a, std::move(y), [group](Graph& g, int out, int ai) {
        const Mat& y2 = g.val(out);
        const Mat& go = g.grad(out);
        Mat& ga = g.grad(ai);
        const int ngroups = static_cast<int>(y2.cols()) / group;
        for (int i = 0; i < y2.rows(); ++i) {
            for (int gi = 0; gi < ngroups; ++gi) {
                const int c0 = gi * group;
                double dot = 0.0;
                for (int j = 0; j < group; ++j) dot += go(i, c0 + j) * y2(i, c0 + j);
                for (int j = 0; j < group; ++j) {
                    ga(i, c0 + j) += y2(i, c0 + j) * (go(i, c0 + j) - dot);
                }
            }
        }
    });
}

Var layer_norm_rows(Var a, double eps) {
    const Mat& x = a.val();
    const int d = static_cast<int>(x.cols());
    Mat y(x.rows(), d);
    Vec inv_sigma(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
        double mean = x.row(i).mean();
        double var = (x.row(i).array() - mean).square().sum() / d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma(i) = is;
        y.row(i) = ((x.row(i).array() - mean) * is).matrix();
    }
    auto isv = std::make_shared<Vec>(std::move(inv_sigma));
    return unary(a, std::move(y), [isv](Graph& g, int out, int ai) {
        const Mat& y2 = g.val(out);
        const Mat& go = g.grad(out);
        Mat& ga = g.grad(ai);
        for (int i = 0; i < y2.rows(); ++i) {
            double mean_g = go.row(i).mean();
            double dot = go.row(i).cwiseProduct(y2.row(i)).mean();
            ga.row(i) += (((go.row(i).array() - mean_g) - y2.row(i).array() * dot) *
                          (*isv)(i)).matrix();
        }
    });
}

Var slice_rows(Var a, int r0, int n) {
    assert(r0 >= 0 && r0 + n <= a.val().rows());
    return unary(a, a.val().middleRows(r0, n), [r0, n](Graph& g, int out, int ai) {
        g.grad(ai).middleRows(r0, n) += g.grad(out);
    });
}

Var slice_cols(Var a, int c0, int n) {
    assert(c0 >= 0 && c0 + n <= a.val().cols());
    return unary(a, a.val().middleCols(c0, n), [c0, n](Graph& g, int out, int ai) {
        g.grad(ai).middleCols(c0, n) += g.grad(out);
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    assert(!parts.empty());
    Graph& g = *parts[0].g;
    int rows = 0;
    const int cols = parts[0].cols();
    bool ng = false;
    for (const Var& p : parts) {
        assert(p.val().cols() == cols);
        rows += p.rows();
        ng = ng || wants(p);
    }
    Mat v(rows, cols);
    int r = 0;
    std::vector<std::pair<int, int>> spans;  // node idx, row offset
    for (const Var& p : parts) {
        v.middleRows(r, p.rows()) = p.val();
        spans.emplace_back(p.idx, r);
        r += p.rows();
    }
    if (!ng) return g.constant(std::move(v));
    auto out_slot = std::make_shared<int>(-1);
    auto fn = [spans, out_slot](Graph& gg) {
        const Mat& go = gg.grad(*out_slot);
        for (auto [idx, off] : spans) {
            if (gg.needs_grad(idx)) {
                int n = static_cast<int>(gg.val(idx).rows());
                gg.grad(idx) += go.middleRows(off, n);
            }
        }
    };
    Var out = g.push(std::move(v), true, std::move(fn));
    *out_slot = out.idx;
    return out;
}

Var concat_cols(const std::vector<Var>& parts) {
    assert(!parts.empty());
    Graph& g = *parts[0].g;
    int cols = 0;
    const int rows = parts[0].rows();
    bool ng = false;
    for (const Var& p : parts) {
        assert(p.val().rows() == rows);
        cols += p.cols();
        ng = ng || wants(p);
    }
    Mat v(rows, cols);
    int c = 0;
    std::vector<std::pair<int, int>> spans;
    for (const Var& p : parts) {
        v.middleCols(c, p.cols()) = p.val();
        spans.emplace_back(p.idx, c);
        c += p.cols();
    }
    if (!ng) return g.constant(std::move(v));
    auto out_slot = std::make_shared<int>(-1);
    auto fn = [spans, out_slot](Graph& gg) {
        const Mat& go = gg.grad(*out_slot);
        for (auto [idx, off] : spans) {
            if (gg.needs_grad(idx)) {
                int n = static_cast<int>(gg.val(idx).cols());
                gg.grad(idx) += go.middleCols(off, n);
            }
        }
    };
    Var out = g.push(std::move(v), true, std::move(fn));
    *out_slot = out.idx;
    return out;
}

Var gather_rows(Var a, std::vector<int> indices) {
    const Mat& x = a.val();
    Mat v(static_cast<int>(indices.size()), x.cols());
    for (size_t i = 0; i < indices.size(); ++i) {
        assert(indices[i] >= 0 && indices[i] < x.rows());
        v.row(static_cast<int>(i)) = x.row(indices[i]);
    }
    auto idxs = std::make_shared<std::vector<int>>(std::move(indices));
    return unary(a, std::move(v), [idxs](Graph& g, int out, int ai) {
        const Mat& go = g.grad(out);
        Mat& ga = g.grad(ai);
        for (size_t i = 0; i < idxs->size(); ++i) {
            ga.row((*idxs)[i]) += go.row(static_cast<int>(i));
        }
    });
}

Var zero_rows_after(Var a, int valid) {
    const Mat& x = a.val();
    if (valid >= x.rows()) {
        // nothing to mask; pass-through copy keeps the tape uniform
        return unary(a, x, [](Graph& g, int out, int ai) { g.grad(ai) += g.grad(out); });
    }
    Mat v = x;
    v.bottomRows(x.rows() - valid).setZero();
    return unary(a, std::move(v), [valid](Graph& g, int out, int ai) {
        g.grad(ai).topRows(valid) += g.grad(out).topRows(valid);
    });
}

Var unfold_rows(Var a, int kernel, int stride, int out_len, int valid_rows) {
    const Mat& x = a.val();
    const int cols = static_cast<int>(x.cols());
    const int pad = (kernel - 1) / 2;
    Mat v = Mat::Zero(out_len, kernel * cols);
    for (int j = 0; j < out_len; ++j) {
        for (int k = 0; k < kernel; ++k) {
            int src = j * stride - pad + k;
            if (src >= 0 && src < valid_rows) v.block(j, k * cols, 1, cols) = x.row(src);
        }
    }
    return unary(a, std::move(v), [kernel, stride, out_len, valid_rows, cols, pad](
                                      Graph& g, int out, int ai) {
        const Mat& go = g.grad(out);
        Mat& ga = g.grad(ai);
        for (int j = 0; j < out_len; ++j) {
            for (int k = 0; k < kernel; ++k) {
                int src = j * stride - pad + k;
                if (src >= 0 && src < valid_rows) {
                    ga.row(src) += go.block(j, k * cols, 1, cols);
                }
            }
        }
    });
}

Var freq_features(Var x, const std::vector<double>& freqs) {
    const Mat& xv = x.val();
    assert(xv.cols() == 1);
    const int n = static_cast<int>(xv.rows());
    const int f = static_cast<int>(freqs.size());
    Mat v(n, 2 * f);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < f; ++j) {
            double a = xv(i, 0) * freqs[j];
            v(i, 2 * j) = std::sin(a);
            v(i, 2 * j + 1) = std::cos(a);
        }
    }
    auto fr = std::make_shared<std::vector<double>>(freqs);
    return unary(x, std::move(v), [fr](Graph& g, int out, int ai) {
        const Mat& go = g.grad(out);
        const Mat& y = g.val(out);
        Mat& ga = g.grad(ai);
        const int f = static_cast<int>(fr->size());
        for (int i = 0; i < go.rows(); ++i) {
            double acc = 0.0;
            for (int j = 0; j < f; ++j) {
                // d sin = cos * w, d cos = -sin * w
                acc += go(i, 2 * j) * y(i, 2 * j + 1) * (*fr)[j];
                acc -= go(i, 2 * j + 1) * y(i, 2 * j) * (*fr)[j];
            }
            ga(i, 0) += acc;
        }
    });
}

namespace {

struct SamplePoint {
    int lo;
    int hi;
    double frac;
    bool interior;  // gradient w.r.t. location flows only when not clamped
};

inline SamplePoint resolve(double loc, int len) {
    SamplePoint s;
    if (len <= 1 || std::isnan(loc)) {
        s.lo = s.hi = 0;
        s.frac = 0.0;
        s.interior = false;
        return s;
    }
    double cl = loc;
    bool interior = true;
    if (cl <= 0.0) {
        cl = 0.0;
        interior = loc > 0.0;
    }
    if (cl >= len - 1) {
        cl = len - 1;
        interior = interior && loc < len - 1;
    }
    int lo = static_cast<int>(std::floor(cl));
    if (lo >= len - 1) lo = len - 2;
    s.lo = lo;
    s.hi = lo + 1;
    s.frac = cl - lo;
    s.interior = interior;
    return s;
}

}  // namespace

Var deformable_aggregate(Var values, Var loc, Var attn, const LevelLayout& layout,
                         int num_heads) {
    Graph& g = *values.g;
    const Mat& vals = values.val();
    const Mat& locs = loc.val();
    const Mat& wts = attn.val();
    const int n = static_cast<int>(locs.rows());
    const int d = static_cast<int>(vals.cols());
    const int dh = d / num_heads;
    const int num_levels = layout.num_levels();
    const int cols = static_cast<int>(locs.cols());
    const int points = cols / (num_heads * num_levels);
    assert(cols == num_heads * num_levels * points);
    assert(wts.rows() == n && wts.cols() == cols);
    assert(d % num_heads == 0);

    Mat out = Mat::Zero(n, d);
    const double* vp = vals.data();
    for (int i = 0; i < n; ++i) {
        double* op = out.data() + static_cast<long>(i) * d;
        for (int c = 0; c < cols; ++c) {
            const int h = c / (num_levels * points);
            const int l = (c / points) % num_levels;
            const double w = wts(i, c);
            SamplePoint s = resolve(locs(i, c), layout.lengths[l]);
            const double* rlo = vp + static_cast<long>(layout.offsets[l] + s.lo) * d + h * dh;
            const double* rhi = vp + static_cast<long>(layout.offsets[l] + s.hi) * d + h * dh;
            const double wlo = w * (1.0 - s.frac);
            const double whi = w * s.frac;
            double* o = op + h * dh;
            for (int k = 0; k < dh; ++k) o[k] += wlo * rlo[k] + whi * rhi[k];
        }
    }

    bool ng = wants(values) || wants(loc) || wants(attn);
    if (!ng) return g.constant(std::move(out));

    auto out_slot = std::make_shared<int>(-1);
    auto lay = std::make_shared<LevelLayout>(layout);
    int vi = values.idx, li = loc.idx, ai = attn.idx;
    auto fn = [out_slot, lay, vi, li, ai, num_heads](Graph& gg) {
        const Mat& go = gg.grad(*out_slot);
        const Mat& vals2 = gg.val(vi);
        const Mat& locs2 = gg.val(li);
        const Mat& wts2 = gg.val(ai);
        const int n2 = static_cast<int>(locs2.rows());
        const int d2 = static_cast<int>(vals2.cols());
        const int dh2 = d2 / num_heads;
        const int num_levels2 = lay->num_levels();
        const int cols2 = static_cast<int>(locs2.cols());
        const int points2 = cols2 / (num_heads * num_levels2);
        const bool need_v = gg.needs_grad(vi);
        const bool need_l = gg.needs_grad(li);
        const bool need_a = gg.needs_grad(ai);
        Mat* gv = need_v ? &gg.grad(vi) : nullptr;
        Mat* gl = need_l ? &gg.grad(li) : nullptr;
        Mat* ga = need_a ? &gg.grad(ai) : nullptr;
        const double* vp = vals2.data();
        for (int i = 0; i < n2; ++i) {
            const double* gout = go.data() + static_cast<long>(i) * d2;
            for (int c = 0; c < cols2; ++c) {
                const int h = c / (num_levels2 * points2);
                const int l = (c / points2) % num_levels2;
                const double w = wts2(i, c);
                SamplePoint s = resolve(locs2(i, c), lay->lengths[l]);
                const long lo_row = lay->offsets[l] + s.lo;
                const long hi_row = lay->offsets[l] + s.hi;
                const double* rlo = vp + lo_row * d2 + h * dh2;
                const double* rhi = vp + hi_row * d2 + h * dh2;
                const double* gh = gout + h * dh2;
                double dot_lo = 0.0, dot_hi = 0.0;
                for (int k = 0; k < dh2; ++k) {
                    dot_lo += gh[k] * rlo[k];
                    dot_hi += gh[k] * rhi[k];
                }
                if (need_a) {
                    (*ga)(i, c) += (1.0 - s.frac) * dot_lo + s.frac * dot_hi;
                }
                if (need_l && s.interior) {
                    (*gl)(i, c) += w * (dot_hi - dot_lo);
                }
                if (need_v) {
                    double* glo = gv->data() + lo_row * d2 + h * dh2;
                    double* ghi = gv->data() + hi_row * d2 + h * dh2;
                    const double wlo = w * (1.0 - s.frac);
                    const double whi = w * s.frac;
                    for (int k = 0; k < dh2; ++k) {
                        glo[k] += wlo * gh[k];
                        ghi[k] += whi * gh[k];
                    }
                }
            }
        }
    };
    Var outv = g.push(std::move(out), true, std::move(fn));
    *out_slot = outv.idx;
    return outv;
}

double finite_diff_rel_error(const std::function<double()>& f, double* x, const double* analytic,
                             const std::vector<int>& coords, double h) {
    double worst = 0.0;
    for (int c : coords) {
        const double orig = x[c];
        x[c] = orig + h;
        double fp = f();
        x[c] = orig - h;
        double fm = f();
        x[c] = orig;
        double fd = (fp - fm) / (2.0 * h);
        double denom = std::max({std::abs(fd), std::abs(analytic[c]), 1e-6});
        worst = std::max(worst, std::abs(fd - analytic[c]) / denom);
    }
    return worst;
}

}  // namespace tad::ad
