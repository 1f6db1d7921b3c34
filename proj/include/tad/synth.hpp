#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "tad/rng.hpp"
#include "tad/timeline.hpp"

namespace tad {

struct GenConfig {
    uint64_t seed = 1;
    int num_videos = 250;
    double min_sec = 30.0;   // length law: log-uniform [min_sec, max_sec]
    double max_sec = 1200.0;
    double fps = 25.0;
    int stride = 8;
    int channels = 32;
    int num_classes = 5;
    double instances_per_minute = 2.0;
    int class_signature_dim = 16;
    double noise_std = 0.10;
    double min_gap_sec = 1.0;
    double val_fraction = 0.2;

    void validate() const;  // throws ConfigError
};

struct VideoSample {
    FeatureSequence features;
    std::vector<ActionInstance> annotations;
    bool is_val = false;
};

struct Dataset {
    std::vector<VideoSample> videos;
    std::vector<std::string> label_names;
    int dropped_instances = 0;  // instances removed to satisfy packing

    std::vector<const VideoSample*> split(bool val) const;
    std::map<std::string, std::vector<ActionInstance>> ground_truth(bool val) const;
};

/// Deterministic synthetic dataset: durations log-uniform, instance count
/// grows with duration (Poisson, floor 1), per-class signature vectors added
/// over each instance's snippets with a triangular envelope so boundaries are
/// inferable from the features. Fully determined by cfg.seed; per-video
/// generation is independent given hash(seed, index).
Dataset generate(const GenConfig& cfg);

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace tad
