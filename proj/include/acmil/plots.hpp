#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "acmil/canvas.hpp"

namespace acmil {

namespace plot_detail {

struct Frame {
  int x0, y0, x1, y1;  // plot area in pixels (y grows downward)
  double xmin, xmax, ymin, ymax;
  int px(double x) const {
    return x0 + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (x1 - x0)));
  }
  int py(double y) const {
    return y1 - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (y1 - y0)));
  }
};

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline Frame draw_axes(Canvas& cv, const std::string& title,
                       const std::string& xlabel, const std::string& ylabel,
                       double xmin, double xmax, double ymin, double ymax) {
  if (xmax - xmin < 1e-12) xmax = xmin + 1;
  if (ymax - ymin < 1e-12) ymax = ymin + 1;
  Frame f{70, 40, cv.width() - 25, cv.height() - 50, xmin, xmax, ymin, ymax};
  cv.rect(f.x0, f.y0, f.x1, f.y1, palette::black);
  cv.text((cv.width() - Canvas::text_width(title)) / 2, 12, title, palette::black);
  cv.text((f.x0 + f.x1) / 2 - Canvas::text_width(xlabel) / 2, cv.height() - 18,
          xlabel, palette::black);
  cv.text(6, 16, ylabel, palette::black);
  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4;
    const double yv = ymin + (ymax - ymin) * i / 4;
    const int xp = f.px(xv), yp = f.py(yv);
    cv.line(xp, f.y1, xp, f.y1 + 4, palette::black);
    cv.text(xp - Canvas::text_width(fmt(xv)) / 2, f.y1 + 8, fmt(xv), palette::black);
    cv.line(f.x0 - 4, yp, f.x0, yp, palette::black);
    cv.text(f.x0 - 8 - Canvas::text_width(fmt(yv)), yp - 3, fmt(yv), palette::black);
  }
  return f;
}

}  // namespace plot_detail

struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
};

/// Line plot (used for ROC curves; draws the chance diagonal when the
/// frame is the unit square).
inline void line_plot(const std::filesystem::path& path,
                      const std::vector<PlotSeries>& series,
                      const std::string& title, const std::string& xlabel,
                      const std::string& ylabel, bool unit_square = false) {
  Canvas cv(640, 480);
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (unit_square) {
    xmin = ymin = 0;
    xmax = ymax = 1;
  }
  auto f = plot_detail::draw_axes(cv, title, xlabel, ylabel, xmin, xmax, ymin, ymax);
  if (unit_square)
    for (int i = 0; i <= 200; ++i) {  // dashed chance diagonal
      if ((i / 5) % 2) continue;
      const double t = i / 200.0;
      cv.set(f.px(t), f.py(t), palette::grey);
    }
  int li = 0;
  for (const auto& s : series) {
    const Color c = palette::series(li);
    for (size_t i = 0; i + 1 < s.x.size(); ++i)
      cv.line(f.px(s.x[i]), f.py(s.y[i]), f.px(s.x[i + 1]), f.py(s.y[i + 1]), c);
    cv.fill_rect(f.x1 - 150, f.y0 + 8 + 14 * li, f.x1 - 140, f.y0 + 16 + 14 * li, c);
    cv.text(f.x1 - 134, f.y0 + 8 + 14 * li, s.label, palette::black);
    ++li;
  }
  cv.save_png(path);
}

/// Box-and-whisker plot: median, quartile box, min/max whiskers per group.
inline void box_plot(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, std::vector<double>>>& groups,
                     const std::string& title, const std::string& ylabel) {
  check(!groups.empty(), "box_plot: no groups");
  Canvas cv(640, 480);
  double ymin = 1e300, ymax = -1e300;
  for (const auto& [label, vals] : groups)
    for (double v : vals) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  if (ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  const double pad = std::max(1e-6, (ymax - ymin) * 0.08);
  auto f = plot_detail::draw_axes(cv, title, "", ylabel, 0, double(groups.size()),
                                  ymin - pad, ymax + pad);
  auto quantile = [](std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * (v.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - lo) * (v[hi] - v[lo]);
  };
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& vals = groups[gi].second;
    const Color c = palette::series(static_cast<int>(gi));
    const int cx = f.px(double(gi) + 0.5);
    const int halfw = std::max(8, (f.x1 - f.x0) / int(groups.size()) / 4);
    if (!vals.empty()) {
      const double q1 = quantile(vals, 0.25), q2 = quantile(vals, 0.5),
                   q3 = quantile(vals, 0.75);
      const double lo = *std::min_element(vals.begin(), vals.end());
      const double hi = *std::max_element(vals.begin(), vals.end());
      cv.line(cx, f.py(lo), cx, f.py(q1), c);
      cv.line(cx, f.py(q3), cx, f.py(hi), c);
      cv.line(cx - halfw / 2, f.py(lo), cx + halfw / 2, f.py(lo), c);
      cv.line(cx - halfw / 2, f.py(hi), cx + halfw / 2, f.py(hi), c);
      cv.rect(cx - halfw, f.py(q3), cx + halfw, f.py(q1), c);
      cv.line(cx - halfw, f.py(q2), cx + halfw, f.py(q2), palette::black);
    }
    cv.text(cx - Canvas::text_width(groups[gi].first) / 2, f.y1 + 22,
            groups[gi].first, palette::black);
  }
  cv.save_png(path);
}

/// Scatter plot of labeled 2-D point groups.
inline void scatter_plot(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& groups,
                         const std::string& title, const std::string& xlabel,
                         const std::string& ylabel) {
  Canvas cv(640, 480);
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& [label, pts] : groups)
    for (const auto& [x, y] : pts) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmin > xmax) {
    xmin = ymin = 0;
    xmax = ymax = 1;
  }
  const double padx = std::max(1e-6, (xmax - xmin) * 0.06);
  const double pady = std::max(1e-6, (ymax - ymin) * 0.06);
  auto f = plot_detail::draw_axes(cv, title, xlabel, ylabel, xmin - padx,
                                  xmax + padx, ymin - pady, ymax + pady);
  int li = 0;
  for (const auto& [label, pts] : groups) {
    const Color c = palette::series(li);
    for (const auto& [x, y] : pts) cv.disc(f.px(x), f.py(y), 2, c);
    cv.fill_rect(f.x1 - 150, f.y0 + 8 + 14 * li, f.x1 - 140, f.y0 + 16 + 14 * li, c);
    cv.text(f.x1 - 134, f.y0 + 8 + 14 * li, label, palette::black);
    ++li;
  }
  cv.save_png(path);
}

}  // namespace acmil
