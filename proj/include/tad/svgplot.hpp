#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace tad::svg {

struct Series {
    std::string label;
    std::vector<double> xs;
    std::vector<double> ys;
};

/// Minimal deterministic SVG renderers: same inputs produce byte-identical
/// files (fixed %.6g formatting, no timestamps).
void write_line_chart(const std::filesystem::path& path, const std::string& title,
                      const std::string& x_label, const std::string& y_label,
                      const std::vector<Series>& series);

void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::string>& categories,
                     const std::vector<Series>& groups);  // Series.ys only

}  // namespace tad::svg
