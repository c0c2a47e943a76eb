#pragma once

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "joadaa/ablation.hpp"
#include "joadaa/evaluation.hpp"

namespace joadaa {

/// One labelled band of a timeline figure: frames x classes values in [0, 1].
struct TimelineBand {
  std::string title;
  Matrix<double> values;
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt2(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

}  // namespace detail

/// Stacked heat-strips, one row per class per band. Output depends only on
/// the inputs, so regenerating a figure gives identical bytes.
inline std::string render_timeline_svg(const std::string& title, const std::vector<TimelineBand>& bands,
                                       const ActionVocabulary& vocab) {
  const double cell_w = 3.0, cell_h = 8.0, label_w = 90.0, gap = 22.0, top = 24.0;
  Eigen::Index frames = 0;
  for (const auto& b : bands) frames = std::max(frames, b.values.rows());
  const int classes = vocab.num_classes();
  const double width = label_w + cell_w * static_cast<double>(frames) + 10.0;
  const double band_h = cell_h * classes + gap;
  const double height = top + band_h * static_cast<double>(bands.size());
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fmt2(width) << "\" height=\""
     << detail::fmt2(height) << "\" font-family=\"monospace\" font-size=\"8\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"4\" y=\"12\" font-size=\"10\">" << detail::svg_escape(title) << "</text>\n";
  for (std::size_t b = 0; b < bands.size(); ++b) {
    const double y0 = top + band_h * static_cast<double>(b);
    os << "<text x=\"4\" y=\"" << detail::fmt2(y0 + 10.0) << "\" font-size=\"9\">" << detail::svg_escape(bands[b].title)
       << "</text>\n";
    for (int c = 0; c < classes; ++c) {
      const double y = y0 + 14.0 + cell_h * c;
      os << "<text x=\"4\" y=\"" << detail::fmt2(y + cell_h - 1.0) << "\">"
         << detail::svg_escape(vocab.actions()[static_cast<std::size_t>(c)]) << "</text>\n";
      const auto& v = bands[b].values;
      for (Eigen::Index f = 0; f < v.rows(); ++f) {
        const double a = std::clamp(v(f, c), 0.0, 1.0);
        if (a < 0.005) continue;
        os << "<rect x=\"" << detail::fmt2(label_w + cell_w * static_cast<double>(f)) << "\" y=\"" << detail::fmt2(y)
           << "\" width=\"" << detail::fmt2(cell_w) << "\" height=\"" << detail::fmt2(cell_h - 1.0)
           << "\" fill=\"#1f4e9c\" fill-opacity=\"" << detail::fmt2(a) << "\"/>\n";
      }
    }
  }
  os << "</svg>\n";
  return os.str();
}

/// Markdown table of per-cell medians followed by every per-seed row.
inline std::string ablation_markdown(const AblationTable& table) {
  std::ostringstream os;
  auto pct = [](double x) { return std::isnan(x) ? std::string("-") : detail::fmt2(100.0 * x); };
  os << "| cell | seeds | median OAD mAP |";
  for (int h : table.horizons) os << " median AA@" << h << " |";
  os << "\n|---|---|---|";
  for (std::size_t i = 0; i < table.horizons.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& s : summarize(table.rows, table.horizons)) {
    os << "| " << s.cell << " | " << s.seeds << " | " << pct(s.median_oad) << " |";
    for (int h : table.horizons) os << " " << pct(s.median_aa.at(h)) << " |";
    os << "\n";
  }
  os << "\n| cell | seed | OAD mAP |";
  for (int h : table.horizons) os << " AA@" << h << " |";
  os << "\n|---|---|---|";
  for (std::size_t i = 0; i < table.horizons.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& r : table.rows) {
    os << "| " << r.cell << " | " << r.seed << " | " << pct(r.oad_map) << " |";
    for (int h : table.horizons) os << " " << pct(r.aa(h)) << " |";
    os << "\n";
  }
  return os.str();
}

}  // namespace joadaa
