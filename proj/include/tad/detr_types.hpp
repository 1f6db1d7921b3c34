#pragma once

#include <string>
#include <vector>

#include "tad/coord.hpp"
#include "tad/timeline.hpp"

namespace tad {

/// Architecture switches. The three toggles exist for the attention-role
/// ablations; everything else is a size.
struct AttentionConfig {
    int num_heads = 4;
    int points_per_level = 4;  // K sampling points
    int num_encoder_layers = 2;
    int num_decoder_layers = 4;  // L_D
    bool encoder_self_attn = true;
    bool decoder_self_attn = true;
    bool decoder_cross_attn = true;

    void validate() const;
};

/// Flattened position identity inside the pyramid: level is 1-based, t is the
/// 0-based index within the level, time_sec the reference center time.
struct EncoderPosition {
    int level = 1;
    int t = 0;
    double time_sec = 0.0;
};

/// Plain (value-typed) view of the encoder stage: per-level memory, one
/// foreground score / offset pair / decoded proposal per valid position.
struct EncoderOutput {
    std::vector<Mat> memory;                 // level l: T_l x D, valid rows only
    std::vector<EncoderPosition> positions;  // flattened (level-major) ordering
    std::vector<double> foreground_scores;   // in (0,1)
    std::vector<OffsetPair> offsets;
    std::vector<Segment> proposals;          // decoded first-stage segments

    int total_positions() const { return static_cast<int>(positions.size()); }
};

/// One selected query feeding the decoder.
struct QueryItem {
    double center = 0.0;  // seconds
    double width = 0.0;   // half-length, seconds
    double score = 0.0;
    int t = 0;
    int level = 1;
    int sector = 0;
    int flat_index = 0;  // index into EncoderOutput flattened arrays
};

struct QuerySet {
    std::vector<QueryItem> items;
    Mat content_seeds;  // N_q x D, encoder memory rows of the selected positions

    int size() const { return static_cast<int>(items.size()); }
};

/// Per-layer decoder outputs (plain view; layer 0 is the selected query set).
struct DecoderState {
    Mat query_embeddings;                      // N_q x D after the last layer
    std::vector<std::vector<Segment>> segments;  // (L_D + 1) x N_q
    std::vector<Mat> class_logits;               // L_D x (N_q x num_classes)
};

}  // namespace tad
