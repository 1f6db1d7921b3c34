#pragma once

#include <cassert>
#include <functional>
#include <vector>

#include "tad/timeline.hpp"

namespace tad::ad {

class Graph;

/// Handle to a node inside a Graph tape.
struct Var {
    Graph* g = nullptr;
    int idx = -1;

    bool valid() const { return g != nullptr && idx >= 0; }
    const Mat& val() const;
    int rows() const { return static_cast<int>(val().rows()); }
    int cols() const { return static_cast<int>(val().cols()); }
    double scalar() const { return val()(0, 0); }
};

/// Reverse-mode tape over row-major Eigen matrices. Nodes are created in
/// topological order by construction; backward() sweeps the tape in reverse.
/// A Graph is single-threaded; training uses one Graph per worker.
class Graph {
  public:
    struct Node {
        Mat value;
        Mat grad;                                // allocated lazily
        std::function<void(Graph&)> backward;    // empty for leaves/constants
        bool needs_grad = false;
        bool grad_ready = false;                 // grad allocated + zeroed
    };

    Var constant(Mat v) { return push(std::move(v), false, nullptr); }
    Var leaf(Mat v) { return push(std::move(v), true, nullptr); }

    Var push(Mat value, bool needs_grad, std::function<void(Graph&)> backward) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Mat& val(int i) const { return nodes_[i].value; }

    /// Gradient buffer for node i, allocated as zeros on first touch.
    Mat& grad(int i) {
        Node& n = nodes_[i];
        if (!n.grad_ready) {
            n.grad = Mat::Zero(n.value.rows(), n.value.cols());
            n.grad_ready = true;
        }
        return n.grad;
    }

    bool grad_ready(int i) const { return nodes_[i].grad_ready; }
    bool needs_grad(int i) const { return nodes_[i].needs_grad; }

    /// Seed d(root)/d(root) = 1 (root must be 1x1) and sweep the tape.
    void backward(Var root);

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }
    void reserve(size_t n) { nodes_.reserve(n); }

  private:
    std::vector<Node> nodes_;
};

inline const Mat& Var::val() const { return g->val(idx); }

// ---- elementwise / arithmetic ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var neg(Var a);
Var mul(Var a, Var b);  // elementwise
Var div(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var a);
Var sigmoid_v(Var a);
Var log_sigmoid(Var a);  // numerically stable ln(sigmoid(x))
Var exp_v(Var a);
Var log_v(Var a);
Var abs_v(Var a);
Var pow_const(Var a, double p);  // a > 0 assumed
Var sin_v(Var a);
Var cos_v(Var a);
Var cmin(Var a, Var b);  // elementwise min (ties route grad to a)
Var cmax(Var a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

// ---- linear algebra ----
Var matmul(Var a, Var b);     // a (n x k) * b (k x m)
Var matmul_nt(Var a, Var b);  // a (n x k) * b^T (m x k) -> n x m
Var rowwise_add(Var a, Var r);  // a (n x d) + r (1 x d) broadcast down rows
Var rowwise_mul(Var a, Var r);
Var colwise_add(Var a, Var c);  // a (n x m) + c (n x 1) broadcast across cols
Var colwise_mul(Var a, Var c);

// ---- reductions / shape ----
Var sum_all(Var a);  // 1 x 1
Var softmax_rows(Var a);
/// Softmax over each contiguous group of `group` columns within each row.
Var softmax_groups(Var a, int group);
/// Row-wise standardization (mean 0, variance 1, no affine part). The small
/// eps keeps the output variance within 1e-5 of unity for real feature rows.
Var layer_norm_rows(Var a, double eps = 1e-8);
Var slice_rows(Var a, int r0, int n);
Var slice_cols(Var a, int c0, int n);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(Var a, std::vector<int> indices);

/// Zero out rows at index >= valid (used to keep padded rows exactly zero).
Var zero_rows_after(Var a, int valid);

/// Sin/cos feature bank: x is (N x 1); output column 2i holds sin(x*freqs[i])
/// and column 2i+1 holds cos(x*freqs[i]).
Var freq_features(Var x, const std::vector<double>& freqs);

/// Sliding-window unfold with zero padding: row j of the output is the
/// concatenation of rows j*stride - pad + k (k = 0..kernel-1) of the input,
/// out-of-range rows read as zeros. Output is out_len x (kernel * cols).
Var unfold_rows(Var a, int kernel, int stride, int out_len, int valid_rows);

/// Layout of a multi-level memory matrix: levels are stacked row blocks.
struct LevelLayout {
    std::vector<int> offsets;  // physical row offset of each level block
    std::vector<int> lengths;  // VALID rows per level (sampling clamps here)
    int total_rows = 0;
    int num_levels() const { return static_cast<int>(offsets.size()); }
};

/// Fused multi-scale deformable sampling.
/// values: (total_rows x D); loc/attn: (N x H*L*K) where column
/// c = (h*L + l)*K + k; loc holds fractional row indices WITHIN level l
/// (clamped to [0, len_l - 1]); attn is expected to be normalized.
/// Head h reads and writes the column block [h*Dh, (h+1)*Dh), Dh = D/H.
/// out[n, h-block] = sum_{l,k} attn[n,c] * lerp(values_l, loc[n,c])[h-block].
Var deformable_aggregate(Var values, Var loc, Var attn, const LevelLayout& layout,
                         int num_heads);

/// Central finite-difference check helper for tests: returns the max relative
/// error between `analytic` and (f(x+h)-f(x-h))/2h over the given coordinates.
double finite_diff_rel_error(const std::function<double()>& f, double* x, const double* analytic,
                             const std::vector<int>& coords, double h);

}  // namespace tad::ad
