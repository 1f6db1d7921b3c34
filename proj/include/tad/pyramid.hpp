#pragma once

#include <vector>

#include "tad/coord.hpp"
#include "tad/nn.hpp"

namespace tad {

struct PyramidConfig {
    int model_dim = 64;    // D
    int num_levels = 4;    // L
    int kernel_size = 3;   // odd, for the stride-2 convolutions

    void validate() const;
};

/// Input projection + L-level temporal pyramid. Level 1 keeps the input
/// length; each further level is a stride-2 convolution followed by layer
/// normalization, with no activation in between. Lengths follow ceil halving
/// so the last position of an odd-length level is never dropped.
class Pyramid {
  public:
    Pyramid() = default;
    Pyramid(nn::ParamStore& ps, const PyramidConfig& cfg, int in_channels, Rng& rng);

    /// Project input features (rows x C, rows >= valid_len) to model width.
    /// Output rows beyond valid_len are exactly zero.
    ad::Var embed(nn::TapeBinding& p, ad::Var features, int valid_len) const;

    struct Levels {
        std::vector<ad::Var> features;   // level l: physical rows x D
        std::vector<int> valid_lengths;  // logical T_l per level
    };

    /// Build levels 1..L from the level-1 embedding. `apply_norm=false` is a
    /// test hook that drops the normalization to expose the linear path.
    Levels build(nn::TapeBinding& p, ad::Var z1, int valid_len, bool apply_norm = true) const;

    const PyramidConfig& config() const { return cfg_; }

  private:
    PyramidConfig cfg_;
    nn::Conv1d embed_;
    std::vector<nn::Conv1d> convs_;      // levels 2..L
    std::vector<nn::LayerNorm> norms_;   // levels 2..L
};

/// ceil-halving lengths [T1, ..., TL]
std::vector<int> pyramid_lengths(int t1, int num_levels);

}  // namespace tad
