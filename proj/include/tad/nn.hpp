#pragma once

#include <map>
#include <string>
#include <vector>

#include "tad/autodiff.hpp"
#include "tad/rng.hpp"
#include "tad/timeline.hpp"

namespace tad::nn {

/// Flat registry of named parameter tensors. Values are shared read-only by
/// forward passes; gradients live per-worker (see TapeBinding).
class ParamStore {
  public:
    int add(const std::string& name, Mat init);
    int find(const std::string& name) const;  // -1 when absent

    int count() const { return static_cast<int>(tensors_.size()); }
    const std::string& name(int id) const { return names_[id]; }
    Mat& value(int id) { return tensors_[id]; }
    const Mat& value(int id) const { return tensors_[id]; }

    long total_coeffs() const;

    /// Flatten all tensors into one vector (used by optimizer + grad checks).
    void copy_to_flat(double* out) const;
    void load_from_flat(const double* in);

  private:
    std::vector<Mat> tensors_;
    std::vector<std::string> names_;
    std::map<std::string, int> index_;
};

/// Per-forward binding of parameters to tape leaves. Leaves are created
/// lazily: only parameters actually used by a pass enter the tape.
class TapeBinding {
  public:
    TapeBinding() = default;
    /// With constants=true parameters enter the tape as constants: the whole
    /// pass then skips gradient bookkeeping (inference mode).
    TapeBinding(ad::Graph& g, const ParamStore& store, bool constants = false)
        : g_(&g), store_(&store), constants_(constants) {}

    ad::Var operator[](int param_id);

    /// Accumulate d(loss)/d(param) into `grads` (one Mat per param id),
    /// in parameter-id order. Call after Graph::backward.
    void export_grads(std::vector<Mat>& grads) const;

  private:
    ad::Graph* g_ = nullptr;
    const ParamStore* store_ = nullptr;
    bool constants_ = false;
    mutable std::vector<int> leaf_of_;  // param id -> node idx (-1 unused)
};

struct Linear {
    int w = -1;  // (in x out)
    int b = -1;  // (1 x out), -1 when bias disabled

    static Linear create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                         double scale = -1.0, bool bias = true);
    static Linear zeros(ParamStore& ps, const std::string& name, int in, int out,
                        bool bias = true);
    ad::Var apply(TapeBinding& p, ad::Var x) const;
};

struct LayerNorm {
    int gamma = -1;
    int beta = -1;

    static LayerNorm create(ParamStore& ps, const std::string& name, int dim);
    ad::Var apply(TapeBinding& p, ad::Var x) const;
};

/// Temporal convolution as unfold + matmul. Weight layout: (kernel*in, out).
struct Conv1d {
    int w = -1;
    int b = -1;
    int kernel = 1;
    int stride = 1;

    static Conv1d create(ParamStore& ps, const std::string& name, int in, int out, int kernel,
                         int stride, Rng& rng, bool bias = true);
    /// x: (rows x in); valid_rows <= rows marks real (non-padded) input.
    /// Produces ceil(rows/stride) output rows; entries computed from padded
    /// region are zeroed by the caller when needed.
    ad::Var apply(TapeBinding& p, ad::Var x, int valid_rows) const;
    static int out_len(int in_len, int stride) { return (in_len + stride - 1) / stride; }
};

}  // namespace tad::nn
