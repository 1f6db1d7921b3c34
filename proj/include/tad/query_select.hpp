#pragma once

#include "tad/detr_types.hpp"

namespace tad {

/// Partition of the level-1 timeline into sectors of at least `sector_len`
/// timesteps. Remainder timesteps are spread so no sector ends up short.
struct SectorPlan {
    int sector_len = 1;           // T_sector
    int num_sectors = 1;          // S
    std::vector<int> boundaries;  // S+1 increasing level-1 indices, [0 .. T1]
    double level1_step_sec = 0.0;

    /// Sector containing the given time; coarse-level positions past the last
    /// boundary clamp into the final sector.
    int sector_of_time(double time_sec) const;
};

SectorPlan plan_sectors(int t1, int t_sector, double level1_step_sec);

/// Adaptive query selection: per sector, the top-K positions (over all
/// levels, membership by reference-center time) ranked by foreground score.
/// Ties break toward earlier center time, then lower level. N_q = S*K.
QuerySet select_adaptive(const EncoderOutput& enc, const SectorPlan& plan, int k);

/// Fixed global top-N baseline with identical scoring/tie rules.
QuerySet select_fixed_topk(const EncoderOutput& enc, int n);

}  // namespace tad
