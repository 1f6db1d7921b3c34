#pragma once

#include <filesystem>
#include <memory>
#include <optional>

#include "tad/detr_types.hpp"
#include "tad/losses.hpp"
#include "tad/pyramid.hpp"
#include "tad/query_select.hpp"

namespace tad {

enum class CoordExpression { time_aligned, normalized };
CoordExpression coord_expression_from_string(const std::string& s);
std::string to_string(CoordExpression c);

enum class SelectMode { adaptive, fixed };
SelectMode select_mode_from_string(const std::string& s);
std::string to_string(SelectMode m);

struct SelectConfig {
    SelectMode mode = SelectMode::adaptive;
    int t_sector = 219;  // level-1 timesteps; ~70 s at fps 25 / stride 8
    int k = 10;
    int fixed_n = 40;
};

struct ModelConfig {
    PyramidConfig pyramid;
    AttentionConfig attn;
    SelectConfig select;
    int in_channels = 32;
    int num_classes = 5;
    int ffn_dim = 128;
    CoordExpression coord = CoordExpression::time_aligned;
    GridMode grid_mode = GridMode::unit_consistent;
    double base_scale = 2.0;
    bool use_pos_enc = true;
    uint64_t init_seed = 1;

    void validate() const;
};

/// Plain nearest-two-positions linear interpolation read from a feature
/// matrix; out-of-range locations clamp to [0, T-1].
Vec deformable_sample(const Mat& level_features, double location);

/// Fixed sinusoidal positional encoding over the per-level index.
Mat sinusoidal_position_encoding(int len, int dim);

struct PredictOptions {
    std::optional<int> top_n_cap;
};

/// Everything needed to cheaply re-decode the final layer (noise probes) and
/// to inspect intermediate state in tests.
struct PredictDetail {
    std::string video_id;
    double duration_sec = 0.0;
    CoordExpression coord = CoordExpression::time_aligned;
    EncoderOutput encoder;
    QuerySet queries;
    std::vector<std::vector<Segment>> layer_segments;  // (L_D + 1) x N_q
    Mat final_logits;  // N_q x C
    // state of layer L_D-1 plus the final layer's raw offsets; representation
    // depends on coord mode (seconds/log-seconds vs raw logits)
    Mat prev_a, prev_b;      // N_q x 1 each
    Mat final_dc, final_dd;  // N_q x 1 each
};

class Model {
  public:
    explicit Model(const ModelConfig& cfg);
    ~Model();
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    /// Differentiable forward artifacts. `values` may carry extra zero rows
    /// past meta.num_features (padded batching); all results are computed for
    /// the valid positions only.
    struct Forward {
        ad::LevelLayout layout;
        ad::Var memory;  // physical rows x D, post-encoder
        EncoderOutput encoder;
        EncoderVars encoder_vars;  // valid positions
        QuerySet queries;
        std::vector<LayerVars> layers;       // L_D entries
        std::vector<std::vector<Segment>> layer_segments;  // (L_D+1) x N_q plain
        Mat enc_attention;  // first-layer encoder attention weights (valid rows), for tests
        nn::TapeBinding binding;  // parameter leaves; export_grads after backward
    };
    /// `query_perm`, when given, reorders the selected query set before the
    /// decoder runs (test hook for set-equivariance checks).
    Forward forward(ad::Graph& g, const VideoMeta& meta, const Mat& values,
                    bool constant_params = false,
                    const std::vector<int>* query_perm = nullptr) const;

    /// forward + total loss for one video.
    struct LossResult {
        TotalLossResult loss;
        Forward fwd;
    };
    LossResult forward_loss(ad::Graph& g, const FeatureSequence& video,
                            const std::vector<ActionInstance>& gt, const LossWeights& w,
                            const std::vector<MatchResult>* fixed_matches = nullptr,
                            const MatchResult* fixed_encoder_match = nullptr) const;

    /// NMS-free inference: final-layer segments, one top class per query,
    /// clipped to the video bounds. No suppression beyond the optional cap.
    DetectionSet predict(const FeatureSequence& video, const PredictOptions& opts = {}) const;

    PredictDetail predict_detail(const FeatureSequence& video) const;

    /// Re-decode the final layer from a PredictDetail with optional additive
    /// perturbations of the final center/width offsets (one entry per query).
    DetectionSet redecode_final(const PredictDetail& detail, const Vec* eps_center,
                                const Vec* eps_width,
                                const PredictOptions& opts = {}) const;

    void save_checkpoint(const std::filesystem::path& path,
                         const std::map<std::string, std::string>& extra_scalars = {},
                         const std::vector<std::pair<std::string, Mat>>& extra_tensors = {}) const;

    struct LoadedCheckpoint {
        std::unique_ptr<Model> model;
        std::map<std::string, std::string> extra_scalars;
        std::vector<std::pair<std::string, Mat>> extra_tensors;
    };
    static LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

  private:
    struct EncoderLayer;
    struct DecoderLayer;

    ModelConfig cfg_;
    nn::ParamStore params_;
    Pyramid pyramid_;
    std::vector<EncoderLayer> enc_layers_;
    std::vector<DecoderLayer> dec_layers_;
    // encoder proposal heads (shared over levels/positions)
    nn::Linear enc_fg_head_;
    nn::Linear enc_off_hidden_, enc_off_out_;
    // query init + positional embedding
    nn::Linear query_init_;
    nn::LayerNorm query_init_norm_;
    int const_query_embed_ = -1;  // used when decoder cross-attention is ablated
    nn::Linear pos_hidden_, pos_out_;
    nn::Linear dec_value_proj_;  // shared across decoder layers
    std::vector<double> center_freqs_, width_freqs_;
};

class Config;
ModelConfig model_config_from(const Config& cfg, int in_channels, int num_classes);

}  // namespace tad
