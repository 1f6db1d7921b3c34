#pragma once

#include "tad/metrics.hpp"
#include "tad/model.hpp"
#include "tad/synth.hpp"

namespace tad {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 4;  // videos per optimizer step
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    double grad_clip_norm = 1.0;
    uint64_t seed = 1;
    int eval_every = 0;       // epochs between val evaluations; 0 = never
    std::string checkpoint_dir;  // empty = no checkpoints written
    int checkpoint_every = 0;    // 0 = final epoch only
    int threads = 0;             // 0 = auto

    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double loss_total = 0.0;
    double loss_cls = 0.0;
    double loss_diou = 0.0;
    double loss_logwidth = 0.0;
    double loss_encoder = 0.0;
    double instability = std::numeric_limits<double>::quiet_NaN();  // from epoch 2 on
    double map_avg = std::numeric_limits<double>::quiet_NaN();      // when evaluated
    double wall_sec = 0.0;  // informational; excluded from reproducible outputs
};

struct TrainResult {
    std::vector<EpochStats> history;
    InstabilityLog is_log;
};

/// Deterministic full-video training (no windows, no crops): per step the
/// batch gradient is the mean of per-video gradients, clipped by global norm,
/// applied with decoupled-weight-decay Adam. Batches group videos of similar
/// length; batch order is a pure function of (seed, epoch). Per-video passes
/// inside a batch may run on worker threads; gradients are reduced in video
/// order so results are identical for any thread count.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg,
                  const LossWeights& weights, const EvalConfig& eval_cfg,
                  const Model::LoadedCheckpoint* resume = nullptr);

}  // namespace tad
