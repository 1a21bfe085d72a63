#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "vitbind/analysis.hpp"
#include "vitbind/errors.hpp"

namespace vitbind::svg {

struct Series {
  std::string name;
  std::vector<double> x, y;
  std::vector<int> tag;  // scatter colour index, empty for one colour
};

namespace detail {

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
inline constexpr double kWidth = 480, kHeight = 320, kMargin = 40;

struct Bounds {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;

  void include(std::span<const double> xs, std::span<const double> ys) {
    for (double v : xs) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : ys) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  void pad() {
    if (!(x1 > x0)) x0 -= 0.5, x1 += 0.5;
    if (!(y1 > y0)) y0 -= 0.5, y1 += 0.5;
  }
  double px(double x) const { return kMargin + (x - x0) / (x1 - x0) * (kWidth - 2 * kMargin); }
  double py(double y) const { return kHeight - kMargin - (y - y0) / (y1 - y0) * (kHeight - 2 * kMargin); }
};

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string header(const std::string& title, const Bounds& b) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" + num(kHeight) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(kWidth / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" + title + "</text>\n";
  s += "<rect x=\"" + num(kMargin) + "\" y=\"" + num(kMargin) + "\" width=\"" + num(kWidth - 2 * kMargin) + "\" height=\"" +
       num(kHeight - 2 * kMargin) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  s += "<text x=\"" + num(kMargin) + "\" y=\"" + num(kHeight - 24) + "\" font-size=\"10\">" + num(b.x0) + "</text>\n";
  s += "<text x=\"" + num(kWidth - kMargin) + "\" y=\"" + num(kHeight - 24) + "\" font-size=\"10\" text-anchor=\"end\">" + num(b.x1) + "</text>\n";
  s += "<text x=\"4\" y=\"" + num(kHeight - kMargin) + "\" font-size=\"10\">" + num(b.y0) + "</text>\n";
  s += "<text x=\"4\" y=\"" + num(kMargin + 8) + "\" font-size=\"10\">" + num(b.y1) + "</text>\n";
  return s;
}

inline void write(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << body << "</svg>\n";
}

}  // namespace detail

inline void line_plot(const std::string& path, const std::string& title, std::span<const Series> series) {
  detail::Bounds b;
  for (const auto& s : series) b.include(s.x, s.y);
  b.pad();
  std::string body = detail::header(title, b);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* colour = detail::kPalette[k % std::size(detail::kPalette)];
    body += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) body += detail::num(b.px(s.x[i])) + "," + detail::num(b.py(s.y[i])) + " ";
    body += "\"/>\n<text x=\"" + detail::num(detail::kWidth - detail::kMargin - 4) + "\" y=\"" +
            detail::num(detail::kMargin + 14 + 12.0 * static_cast<double>(k)) + "\" font-size=\"10\" text-anchor=\"end\" fill=\"" + colour +
            "\">" + s.name + "</text>\n";
  }
  detail::write(path, body);
}

inline void scatter_plot(const std::string& path, const std::string& title, const Series& s, std::size_t max_points = 5000) {
  detail::Bounds b;
  b.include(s.x, s.y);
  b.pad();
  std::string body = detail::header(title, b);
  const std::size_t stride = std::max<std::size_t>(1, s.x.size() / max_points);
  for (std::size_t i = 0; i < s.x.size(); i += stride) {
    const int t = s.tag.empty() ? 0 : s.tag[i];
    body += "<circle cx=\"" + detail::num(b.px(s.x[i])) + "\" cy=\"" + detail::num(b.py(s.y[i])) + "\" r=\"2\" fill=\"" +
            detail::kPalette[static_cast<std::size_t>(t) % std::size(detail::kPalette)] + "\"/>\n";
  }
  detail::write(path, body);
}

inline void heatmap(const std::string& path, const std::string& title, const ScoreMap& map) {
  detail::Bounds b;
  b.x0 = 0, b.x1 = static_cast<double>(map.side), b.y0 = 0, b.y1 = static_cast<double>(map.side);
  std::string body = detail::header(title, b);
  const double cw = (detail::kWidth - 2 * detail::kMargin) / static_cast<double>(map.side);
  const double ch = (detail::kHeight - 2 * detail::kMargin) / static_cast<double>(map.side);
  for (std::size_t r = 0; r < map.side; ++r)
    for (std::size_t c = 0; c < map.side; ++c) {
      const int level = static_cast<int>(std::clamp(map.at(r, c), 0.0, 1.0) * 255.0);
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02x%02x", level, level / 2, 255 - level);
      body += "<rect x=\"" + detail::num(detail::kMargin + cw * static_cast<double>(c)) + "\" y=\"" +
              detail::num(detail::kMargin + ch * static_cast<double>(r)) + "\" width=\"" + detail::num(cw) + "\" height=\"" +
              detail::num(ch) + "\" fill=\"" + fill + "\"/>\n";
    }
  detail::write(path, body);
}

inline void kde_plot(const std::string& path, const std::string& title, std::span<const KdeCurve> curves) {
  std::vector<Series> s;
  for (const auto& c : curves)
    if (!c.flagged) s.push_back({c.group, c.x, c.density, {}});
  line_plot(path, title, s);
}

inline void pca_plot(const std::string& path, const std::string& title, const DeltaPcaResult& r) {
  Series s{"deltas", {}, {}, {}};
  for (std::size_t i = 0; i < r.coords.rows(); ++i) {
    s.x.push_back(r.coords(i, 0));
    s.y.push_back(r.coords.cols() > 1 ? r.coords(i, 1) : 0.0);
    s.tag.push_back(static_cast<int>(r.tags[i]));
  }
  scatter_plot(path, title, s);
}

inline void curve_plot(const std::string& path, const std::string& title, const LayerAccuracyCurve& curve) {
  Series acc{"accuracy", {}, {}, {}}, base{"baseline", {}, {}, {}};
  for (const auto& p : curve.points) {
    acc.x.push_back(static_cast<double>(p.layer));
    acc.y.push_back(p.accuracy);
    base.x.push_back(static_cast<double>(p.layer));
    base.y.push_back(p.baseline);
  }
  const std::vector<Series> s = {acc, base};
  line_plot(path, title, s);
}

}  // namespace vitbind::svg
