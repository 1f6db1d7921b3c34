#include "tad/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "tad/errors.hpp"

namespace tad::svg {

namespace {

constexpr int kW = 640, kH = 420;
constexpr int kL = 70, kR = 20, kT = 40, kB = 50;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                         "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

struct Range {
    double lo = 0.0, hi = 1.0;
    double map(double v, double px_lo, double px_hi) const {
        double t = (hi > lo) ? (v - lo) / (hi - lo) : 0.5;
        return px_lo + t * (px_hi - px_lo);
    }
};

Range span(const std::vector<double>& vals) {
    Range r;
    if (vals.empty()) return r;
    r.lo = *std::min_element(vals.begin(), vals.end());
    r.hi = *std::max_element(vals.begin(), vals.end());
    if (r.hi == r.lo) {
        r.lo -= 0.5;
        r.hi += 0.5;
    } else {
        double pad = 0.05 * (r.hi - r.lo);
        r.lo -= pad;
        r.hi += pad;
    }
    return r;
}

std::ofstream open(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write plot file " + path.string());
    return out;
}

void header(std::ofstream& out, const std::string& title) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
        << "\" font-family=\"monospace\" font-size=\"12\">\n"
        << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n"
        << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
        << escape(title) << "</text>\n";
}

void axes(std::ofstream& out, const Range& xr, const Range& yr, const std::string& xl,
          const std::string& yl) {
    out << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << kW - kL - kR
        << "\" height=\"" << kH - kT - kB << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        double ty = yr.lo + (yr.hi - yr.lo) * i / 4.0;
        double py = yr.map(ty, kH - kB, kT);
        out << "<text x=\"" << kL - 6 << "\" y=\"" << num(py + 4)
            << "\" text-anchor=\"end\">" << num(ty) << "</text>\n";
        double tx = xr.lo + (xr.hi - xr.lo) * i / 4.0;
        double px = xr.map(tx, kL, kW - kR);
        out << "<text x=\"" << num(px) << "\" y=\"" << kH - kB + 18
            << "\" text-anchor=\"middle\">" << num(tx) << "</text>\n";
    }
    out << "<text x=\"" << (kL + kW - kR) / 2 << "\" y=\"" << kH - 12
        << "\" text-anchor=\"middle\">" << escape(xl) << "</text>\n";
    out << "<text x=\"16\" y=\"" << (kT + kH - kB) / 2
        << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (kT + kH - kB) / 2 << ")\">"
        << escape(yl) << "</text>\n";
}

}  // namespace

void write_line_chart(const std::filesystem::path& path, const std::string& title,
                      const std::string& x_label, const std::string& y_label,
                      const std::vector<Series>& series) {
    std::vector<double> all_x, all_y;
    for (const auto& s : series) {
        all_x.insert(all_x.end(), s.xs.begin(), s.xs.end());
        all_y.insert(all_y.end(), s.ys.begin(), s.ys.end());
    }
    Range xr = span(all_x), yr = span(all_y);
    auto out = open(path);
    header(out, title);
    axes(out, xr, yr, x_label, y_label);
    for (size_t si = 0; si < series.size(); ++si) {
        const Series& s = series[si];
        const char* color = kColors[si % 8];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < s.xs.size(); ++i) {
            out << num(xr.map(s.xs[i], kL, kW - kR)) << "," << num(yr.map(s.ys[i], kH - kB, kT))
                << " ";
        }
        out << "\"/>\n";
        for (size_t i = 0; i < s.xs.size(); ++i) {
            out << "<circle cx=\"" << num(xr.map(s.xs[i], kL, kW - kR)) << "\" cy=\""
                << num(yr.map(s.ys[i], kH - kB, kT)) << "\" r=\"2.5\" fill=\"" << color
                << "\"/>\n";
        }
        out << "<text x=\"" << kW - kR - 8 << "\" y=\"" << kT + 16 + 16 * static_cast<int>(si)
            << "\" text-anchor=\"end\" fill=\"" << color << "\">" << escape(s.label)
            << "</text>\n";
    }
    out << "</svg>\n";
}

void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::string>& categories,
                     const std::vector<Series>& groups) {
    std::vector<double> all_y{0.0};
    for (const auto& g : groups) all_y.insert(all_y.end(), g.ys.begin(), g.ys.end());
    Range yr = span(all_y);
    yr.lo = std::min(yr.lo, 0.0);
    auto out = open(path);
    header(out, title);
    axes(out, Range{0.0, static_cast<double>(categories.size())}, yr, "", "");
    const double plot_w = kW - kL - kR;
    const double cat_w = plot_w / std::max<size_t>(1, categories.size());
    const double bar_w = cat_w / (groups.size() + 1);
    for (size_t ci = 0; ci < categories.size(); ++ci) {
        out << "<text x=\"" << num(kL + cat_w * (ci + 0.5)) << "\" y=\"" << kH - kB + 34
            << "\" text-anchor=\"middle\">" << escape(categories[ci]) << "</text>\n";
        for (size_t gi = 0; gi < groups.size(); ++gi) {
            if (ci >= groups[gi].ys.size()) continue;
            double v = groups[gi].ys[ci];
            double y0 = yr.map(0.0, kH - kB, kT);
            double y1 = yr.map(v, kH - kB, kT);
            out << "<rect x=\"" << num(kL + cat_w * ci + bar_w * (gi + 0.5)) << "\" y=\""
                << num(std::min(y0, y1)) << "\" width=\"" << num(bar_w) << "\" height=\""
                << num(std::abs(y0 - y1)) << "\" fill=\"" << kColors[gi % 8] << "\"/>\n";
        }
    }
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        out << "<text x=\"" << kW - kR - 8 << "\" y=\"" << kT + 16 + 16 * static_cast<int>(gi)
            << "\" text-anchor=\"end\" fill=\"" << kColors[gi % 8] << "\">"
            << escape(groups[gi].label) << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace tad::svg
