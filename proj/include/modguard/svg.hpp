#pragma once

// Minimal SVG output for security curves and 2-D feature projections.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "modguard/eval.hpp"

namespace modguard::svg {

namespace detail {

inline constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79"};

struct Frame {
  double x0, x1, y0, y1;
  double width = 640, height = 420, margin = 50;

  double px(double x) const { return margin + (x - x0) / (x1 - x0) * (width - 2 * margin); }
  double py(double y) const { return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin); }
};

inline void axes(std::ostringstream& os, const Frame& f, const std::string& xlabel, const std::string& ylabel) {
  os << "<rect x=\"0\" y=\"0\" width=\"" << f.width << "\" height=\"" << f.height << "\" fill=\"white\"/>\n";
  os << "<line x1=\"" << f.margin << "\" y1=\"" << f.height - f.margin << "\" x2=\"" << f.width - f.margin
     << "\" y2=\"" << f.height - f.margin << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << f.margin << "\" y1=\"" << f.margin << "\" x2=\"" << f.margin << "\" y2=\""
     << f.height - f.margin << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << f.width / 2 << "\" y=\"" << f.height - 12 << "\" text-anchor=\"middle\" font-size=\"13\">"
     << xlabel << "</text>\n";
  os << "<text x=\"14\" y=\"" << f.height / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 14 "
     << f.height / 2 << ")\">" << ylabel << "</text>\n";
  os << "<text x=\"" << f.margin - 6 << "\" y=\"" << f.py(f.y0) << "\" text-anchor=\"end\" font-size=\"10\">" << f.y0
     << "</text>\n";
  os << "<text x=\"" << f.margin - 6 << "\" y=\"" << f.py(f.y1) << "\" text-anchor=\"end\" font-size=\"10\">" << f.y1
     << "</text>\n";
  os << "<text x=\"" << f.px(f.x0) << "\" y=\"" << f.height - f.margin + 14 << "\" text-anchor=\"middle\" "
     << "font-size=\"10\">" << f.x0 << "</text>\n";
  os << "<text x=\"" << f.px(f.x1) << "\" y=\"" << f.height - f.margin + 14 << "\" text-anchor=\"middle\" "
     << "font-size=\"10\">" << f.x1 << "</text>\n";
}

} // namespace detail

/// Accuracy against PNR, one polyline per curve. Clean points (-inf) are skipped.
inline std::string curves_plot(std::span<const SecurityCurve> curves) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  for (const auto& c : curves)
    for (const auto& p : c.points)
      if (std::isfinite(p.pnr_db)) {
        xmin = std::min(xmin, p.pnr_db);
        xmax = std::max(xmax, p.pnr_db);
      }
  if (!std::isfinite(xmin)) xmin = -1, xmax = 0;
  if (xmax == xmin) xmax = xmin + 1;
  detail::Frame f{xmin, xmax, 0.0, 1.0};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height << "\">\n";
  detail::axes(os, f, "PNR (dB)", "accuracy");
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* color = detail::kPalette[i % std::size(detail::kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : curves[i].points)
      if (std::isfinite(p.pnr_db)) os << f.px(p.pnr_db) << ',' << f.py(p.accuracy) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << f.width - f.margin - 90 << "\" y=\"" << f.margin + 14 * static_cast<double>(i)
       << "\" font-size=\"11\" fill=\"" << color << "\">" << curves[i].variant << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Scatter of the first two PCA coordinates, coloured by label.
inline std::string pca_scatter(const PcaResult& p, std::span<const std::size_t> labels, const std::string& title) {
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  const std::size_t n = labels.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = p.coords[i * p.dims], y = p.dims > 1 ? p.coords[i * p.dims + 1] : 0.0;
    xmin = std::min(xmin, x), xmax = std::max(xmax, x), ymin = std::min(ymin, y), ymax = std::max(ymax, y);
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  detail::Frame f{xmin, xmax, ymin, ymax};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height << "\">\n";
  detail::axes(os, f, "pc1", "pc2");
  os << "<text x=\"" << f.width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double x = p.coords[i * p.dims], y = p.dims > 1 ? p.coords[i * p.dims + 1] : 0.0;
    os << "<circle cx=\"" << f.px(x) << "\" cy=\"" << f.py(y) << "\" r=\"2.5\" fill=\""
       << detail::kPalette[labels[i] % std::size(detail::kPalette)] << "\" fill-opacity=\"0.7\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

} // namespace modguard::svg
