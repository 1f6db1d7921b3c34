#include "tad/query_select.hpp"

#include <algorithm>
#include <stdexcept>

#include "tad/errors.hpp"

namespace tad {

SectorPlan plan_sectors(int t1, int t_sector, double level1_step_sec) {
    if (t1 < 1) throw std::invalid_argument("plan_sectors: T1 must be >= 1");
    if (t_sector < 1) throw std::invalid_argument("plan_sectors: T_sector must be >= 1");
    SectorPlan plan;
    plan.sector_len = t_sector;
    plan.num_sectors = std::max(1, t1 / t_sector);
    plan.level1_step_sec = level1_step_sec;
    plan.boundaries.resize(plan.num_sectors + 1);
    for (int s = 0; s <= plan.num_sectors; ++s) {
        plan.boundaries[s] = static_cast<int>((static_cast<long long>(s) * t1) / plan.num_sectors);
    }
    return plan;
}

int SectorPlan::sector_of_time(double time_sec) const {
    double idx = time_sec / level1_step_sec;  // continuous level-1 coordinate
    for (int s = 0; s < num_sectors; ++s) {
        if (idx < boundaries[s + 1]) return s;
    }
    return num_sectors - 1;
}

namespace {

// score desc, then earlier center time, then lower level
bool rank_before(const EncoderOutput& enc, int a, int b) {
    double sa = enc.foreground_scores[a];
    double sb = enc.foreground_scores[b];
    if (sa != sb) return sa > sb;
    double ta = enc.positions[a].time_sec;
    double tb = enc.positions[b].time_sec;
    if (ta != tb) return ta < tb;
    if (enc.positions[a].level != enc.positions[b].level) {
        return enc.positions[a].level < enc.positions[b].level;
    }
    return a < b;
}

QuerySet build_query_set(const EncoderOutput& enc,
                         const std::vector<std::pair<int, int>>& picks) {
    QuerySet qs;
    const int d = enc.memory.empty() ? 0 : static_cast<int>(enc.memory[0].cols());
    qs.content_seeds = Mat::Zero(static_cast<int>(picks.size()), d);
    qs.items.reserve(picks.size());
    for (size_t i = 0; i < picks.size(); ++i) {
        auto [flat, sector] = picks[i];
        const EncoderPosition& pos = enc.positions[flat];
        QueryItem item;
        item.center = enc.proposals[flat].center();
        item.width = enc.proposals[flat].width();
        item.score = enc.foreground_scores[flat];
        item.t = pos.t;
        item.level = pos.level;
        item.sector = sector;
        item.flat_index = flat;
        qs.items.push_back(item);
        qs.content_seeds.row(static_cast<int>(i)) = enc.memory[pos.level - 1].row(pos.t);
    }
    return qs;
}

}  // namespace

QuerySet select_adaptive(const EncoderOutput& enc, const SectorPlan& plan, int k) {
    if (k < 1) throw std::invalid_argument("select_adaptive: K must be >= 1");
    std::vector<std::vector<int>> buckets(plan.num_sectors);
    for (int i = 0; i < enc.total_positions(); ++i) {
        buckets[plan.sector_of_time(enc.positions[i].time_sec)].push_back(i);
    }
    std::vector<std::pair<int, int>> picks;
    picks.reserve(static_cast<size_t>(plan.num_sectors) * k);
    for (int s = 0; s < plan.num_sectors; ++s) {
        auto& bucket = buckets[s];
        if (static_cast<int>(bucket.size()) < k) {
            throw ConfigError("select.k=" + std::to_string(k) + " exceeds the population " +
                              std::to_string(bucket.size()) + " of sector " + std::to_string(s));
        }
        std::partial_sort(bucket.begin(), bucket.begin() + k, bucket.end(),
                          [&](int a, int b) { return rank_before(enc, a, b); });
        for (int i = 0; i < k; ++i) picks.emplace_back(bucket[i], s);
    }
    return build_query_set(enc, picks);
}

QuerySet select_fixed_topk(const EncoderOutput& enc, int n) {
    if (n < 1) throw std::invalid_argument("select_fixed_topk: N must be >= 1");
    if (n > enc.total_positions()) {
        throw ConfigError("select.fixed_n=" + std::to_string(n) +
                          " exceeds the total position count " +
                          std::to_string(enc.total_positions()));
    }
    std::vector<int> order(enc.total_positions());
    for (int i = 0; i < enc.total_positions(); ++i) order[i] = i;
    std::partial_sort(order.begin(), order.begin() + n, order.end(),
                      [&](int a, int b) { return rank_before(enc, a, b); });
    std::vector<std::pair<int, int>> picks;
    picks.reserve(n);
    for (int i = 0; i < n; ++i) picks.emplace_back(order[i], 0);
    return build_query_set(enc, picks);
}

}  // namespace tad
