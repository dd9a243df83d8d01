#pragma once

#include "astc/common.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace astc::svg {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  /// Draw as a step line instead of straight segments.
  bool steps = false;
};

struct Bars {
  std::string label;
  std::vector<double> edges;   // n+1
  std::vector<double> heights; // n
};

namespace detail {

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  return palette[i % 6];
}

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline std::string num(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << v;
  return s.str();
}

class Canvas {
 public:
  Canvas(double xmin, double xmax, double ymin, double ymax) : x0_(xmin), x1_(xmax), y0_(ymin), y1_(ymax) {
    if (!(x1_ > x0_)) x1_ = x0_ + 1.0;
    if (!(y1_ > y0_)) y1_ = y0_ + 1.0;
  }
  double px(double x) const { return kLeft + (x - x0_) / (x1_ - x0_) * (kW - kLeft - kRight); }
  double py(double y) const { return kH - kBottom - (y - y0_) / (y1_ - y0_) * (kH - kTop - kBottom); }

  std::string frame(const std::string& title, const std::string& xlabel, const std::string& ylabel) const {
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << esc(title) << "</text>\n";
    o << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
      << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      double xv = x0_ + (x1_ - x0_) * i / 4.0, yv = y0_ + (y1_ - y0_) * i / 4.0;
      o << "<text x=\"" << num(px(xv)) << "\" y=\"" << kH - kBottom + 15 << "\" text-anchor=\"middle\" font-size=\"10\">"
        << num(xv) << "</text>\n";
      o << "<text x=\"" << kLeft - 5 << "\" y=\"" << num(py(yv) + 3) << "\" text-anchor=\"end\" font-size=\"10\">"
        << num(yv) << "</text>\n";
    }
    o << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 5 << "\" text-anchor=\"middle\" font-size=\"12\">" << esc(xlabel)
      << "</text>\n";
    o << "<text x=\"14\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
      << kH / 2 << ")\">" << esc(ylabel) << "</text>\n";
    return o.str();
  }

  static std::string legend(const std::vector<std::string>& labels) {
    std::ostringstream o;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      double y = kTop + 5 + 15.0 * static_cast<double>(i);
      o << "<rect x=\"" << kW - kRight - 150 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\"" << color(i)
        << "\"/>\n";
      o << "<text x=\"" << kW - kRight - 135 << "\" y=\"" << y + 9 << "\" font-size=\"11\">" << esc(labels[i])
        << "</text>\n";
    }
    return o.str();
  }

  static constexpr int kW = 640, kH = 400, kLeft = 60, kRight = 20, kTop = 30, kBottom = 45;

 private:
  double x0_, x1_, y0_, y1_;
};

}  // namespace detail

inline std::string line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                             const std::vector<Series>& series) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmin > xmax) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  double pad = 0.05 * (ymax - ymin);
  detail::Canvas c(xmin, xmax, ymin - pad, ymax + pad);
  std::ostringstream o;
  o << c.frame(title, xlabel, ylabel);
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    labels.push_back(s.label);
    o << "<polyline fill=\"none\" stroke=\"" << detail::color(k) << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (s.steps && i > 0) o << detail::num(c.px(s.x[i])) << ',' << detail::num(c.py(s.y[i - 1])) << ' ';
      o << detail::num(c.px(s.x[i])) << ',' << detail::num(c.py(s.y[i])) << ' ';
    }
    o << "\"/>\n";
  }
  o << detail::Canvas::legend(labels) << "</svg>\n";
  return o.str();
}

/// Overlaid outline histograms sharing one axis.
inline std::string histogram_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                  const std::vector<Bars>& bars) {
  double xmin = 1e300, xmax = -1e300, ymax = 0.0;
  for (const auto& b : bars) {
    if (b.edges.empty()) continue;
    xmin = std::min(xmin, b.edges.front());
    xmax = std::max(xmax, b.edges.back());
    for (double h : b.heights) ymax = std::max(ymax, h);
  }
  if (xmin > xmax) xmin = 0, xmax = 1;
  detail::Canvas c(xmin, xmax, 0.0, ymax * 1.05);
  std::ostringstream o;
  o << c.frame(title, xlabel, ylabel);
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < bars.size(); ++k) {
    const auto& b = bars[k];
    labels.push_back(b.label);
    for (std::size_t i = 0; i < b.heights.size(); ++i) {
      double x = c.px(b.edges[i]), w = c.px(b.edges[i + 1]) - x, y = c.py(b.heights[i]);
      o << "<rect x=\"" << detail::num(x) << "\" y=\"" << detail::num(y) << "\" width=\"" << detail::num(w)
        << "\" height=\"" << detail::num(c.py(0.0) - y) << "\" fill=\"" << detail::color(k)
        << "\" fill-opacity=\"0.3\" stroke=\"" << detail::color(k) << "\"/>\n";
    }
  }
  o << detail::Canvas::legend(labels) << "</svg>\n";
  return o.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << content;
}

}  // namespace astc::svg
