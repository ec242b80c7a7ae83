#pragma once

#include "btr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

// Self-contained SVG line charts with optional shaded bands.

namespace btr {

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::vector<double> lo, hi;  // optional band, same length as y
};

namespace plot_detail {

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                           "#9467bd", "#8c564b", "#e377c2", "#17becf"};

inline std::string esc(const std::string& s) {
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

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string tick(double v) {
  char buf[32];
  const double a = std::abs(v);
  if (a >= 1e6)
    std::snprintf(buf, sizeof(buf), "%gM", v / 1e6);
  else if (a >= 1e4)
    std::snprintf(buf, sizeof(buf), "%gk", v / 1e3);
  else
    std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace plot_detail

/// Renders series as polylines; NaN points split a line. Bands are drawn
/// underneath as filled polygons.
inline std::string svg_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                             const std::vector<Series>& series) {
  using namespace plot_detail;
  const double W = 720, H = 440, L = 70, R = 170, T = 40, Bm = 55;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  auto extend = [&](double x, double y) {
    if (!std::isfinite(x) || !std::isfinite(y)) return;
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  };
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      extend(s.x[i], s.y[i]);
      if (!s.lo.empty()) extend(s.x[i], s.lo[i]);
      if (!s.hi.empty()) extend(s.x[i], s.hi[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - Bm - (y - y0) / (y1 - y0) * (H - T - Bm); };

  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) + "\" viewBox=\"0 0 " +
       num(W) + " " + num(H) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + num(W) + "\" height=\"" + num(H) + "\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(W / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + esc(title) + "</text>\n";
  // axes and ticks
  s += "<g stroke=\"#444\" stroke-width=\"1\">\n";
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(H - Bm) + "\" x2=\"" + num(W - R) + "\" y2=\"" + num(H - Bm) + "\"/>\n";
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" + num(H - Bm) + "\"/>\n";
  s += "</g>\n<g fill=\"#444\">\n";
  for (int k = 0; k <= 5; ++k) {
    const double xv = x0 + (x1 - x0) * k / 5.0, yv = y0 + (y1 - y0) * k / 5.0;
    s += "<text x=\"" + num(px(xv)) + "\" y=\"" + num(H - Bm + 18) + "\" text-anchor=\"middle\">" + tick(xv) + "</text>\n";
    s += "<text x=\"" + num(L - 6) + "\" y=\"" + num(py(yv) + 4) + "\" text-anchor=\"end\">" + tick(yv) + "</text>\n";
    s += "<line x1=\"" + num(L) + "\" y1=\"" + num(py(yv)) + "\" x2=\"" + num(W - R) + "\" y2=\"" + num(py(yv)) +
         "\" stroke=\"#e5e5e5\"/>\n";
  }
  s += "<text x=\"" + num((L + W - R) / 2) + "\" y=\"" + num(H - 12) + "\" text-anchor=\"middle\">" + esc(xlabel) +
       "</text>\n";
  s += "<text transform=\"translate(18 " + num((T + H - Bm) / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
       esc(ylabel) + "</text>\n</g>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& se = series[k];
    const std::string color = kPalette[k % std::size(kPalette)];
    if (!se.lo.empty() && se.lo.size() == se.x.size() && se.hi.size() == se.x.size()) {
      std::string pts;
      for (std::size_t i = 0; i < se.x.size(); ++i)
        if (std::isfinite(se.hi[i])) pts += num(px(se.x[i])) + "," + num(py(se.hi[i])) + " ";
      for (std::size_t i = se.x.size(); i-- > 0;)
        if (std::isfinite(se.lo[i])) pts += num(px(se.x[i])) + "," + num(py(se.lo[i])) + " ";
      if (!pts.empty())
        s += "<polygon points=\"" + pts + "\" fill=\"" + color + "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
    }
    std::string pts;
    auto flush = [&] {
      if (!pts.empty())
        s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
      pts.clear();
    };
    for (std::size_t i = 0; i < se.x.size(); ++i) {
      if (!std::isfinite(se.y[i])) {
        flush();
        continue;
      }
      pts += num(px(se.x[i])) + "," + num(py(se.y[i])) + " ";
    }
    flush();
    const double ly = T + 10 + 20.0 * static_cast<double>(k);
    s += "<line x1=\"" + num(W - R + 12) + "\" y1=\"" + num(ly) + "\" x2=\"" + num(W - R + 32) + "\" y2=\"" + num(ly) +
         "\" stroke=\"" + color + "\" stroke-width=\"3\"/>\n";
    s += "<text x=\"" + num(W - R + 38) + "\" y=\"" + num(ly + 4) + "\">" + esc(se.label) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

/// One metrics column as a series; `band` adds ci_low/ci_high.
inline Series metrics_series(const std::string& label, const std::vector<MetricsRow>& rows, double MetricsRow::*field,
                             bool band = false) {
  Series s;
  s.label = label;
  for (const auto& r : rows) {
    s.x.push_back(static_cast<double>(r.frame));
    s.y.push_back(r.*field);
    if (band) {
      s.lo.push_back(r.ci_low);
      s.hi.push_back(r.ci_high);
    }
  }
  return s;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

}  // namespace btr
