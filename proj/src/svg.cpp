// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/svg.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace kvpareto {

namespace {

std::string escape(const std::string& s) {
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

std::string star(double cx, double cy, double r) {
  std::string pts;
  for (int i = 0; i < 10; ++i) {
    const double rad = (i % 2 == 0) ? r : r * 0.45;
    const double a = -M_PI / 2 + i * M_PI / 5;
    pts += fmt::format("{}{:.2f},{:.2f}", i ? " " : "", cx + rad * std::cos(a),
                       cy + rad * std::sin(a));
  }
  return pts;
}

}  // namespace

std::string render_scatter_svg(const std::vector<ResultRow>& rows, const ScatterOptions& opt) {
  const double w = 720, h = 480, left = 80, right = 30, top = 40, bottom = 60;
  const double pw = w - left - right, ph = h - top - bottom;

  auto xval = [&](double m) { return opt.log_x ? std::log10(std::max(m, 1.0)) : m; };
  double xmin = 0, xmax = 1;
  if (!rows.empty()) {
    xmin = xmax = xval(rows.front().total_mem_bytes);
    for (const auto& r : rows) {
      xmin = std::min(xmin, xval(r.total_mem_bytes));
      xmax = std::max(xmax, xval(r.total_mem_bytes));
    }
  }
  if (xmax - xmin < 1e-12) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  const double pad = (xmax - xmin) * 0.05;
  xmin -= pad;
  xmax += pad;
  auto px = [&](double m) { return left + (xval(m) - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double a) { return top + (1.0 - a) * ph; };

  std::string s;
  s += fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" "
      "viewBox=\"0 0 {0} {1}\">\n",
      w, h);
  s += fmt::format("<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n", w, h);
  s += fmt::format("<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" "
                   "text-anchor=\"middle\">{}</text>\n",
                   w / 2, escape(opt.title));
  // Axes and ticks.
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", left,
                   top + ph, left + pw);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", left,
                   top, top + ph);
  for (int i = 0; i <= 5; ++i) {
    const double a = i / 5.0;
    s += fmt::format(
        "<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\" "
        "text-anchor=\"end\">{:.1f}</text>\n",
        left - 6, py(a) + 4, a);
    const double xv = xmin + (xmax - xmin) * i / 5.0;
    const double bytes = opt.log_x ? std::pow(10.0, xv) : xv;
    s += fmt::format(
        "<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\" "
        "text-anchor=\"middle\">{:.3g}</text>\n",
        left + pw * i / 5.0, top + ph + 16, bytes / 1e9);
  }
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" "
                   "text-anchor=\"middle\">total memory (GB{})</text>\n",
                   left + pw / 2, h - 16, opt.log_x ? ", log scale" : "");
  s += fmt::format("<text x=\"18\" y=\"{0}\" font-family=\"sans-serif\" font-size=\"13\" "
                   "text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">accuracy</text>\n",
                   top + ph / 2);
  if (opt.baseline_accuracy) {
    s += fmt::format(
        "<line class=\"baseline\" x1=\"{0}\" y1=\"{1:.2f}\" x2=\"{2}\" y2=\"{1:.2f}\" "
        "stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n",
        left, py(*opt.baseline_accuracy), left + pw);
  }
  for (const auto& r : rows) {
    s += fmt::format(
        "<circle class=\"point\" cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"4\" fill=\"steelblue\" "
        "fill-opacity=\"0.7\"><title>{} ({:.4f})</title></circle>\n",
        px(r.total_mem_bytes), py(r.accuracy), escape(r.config), r.accuracy);
  }
  for (const auto& r : rows) {
    if (!r.on_frontier) continue;
    s += fmt::format(
        "<polygon class=\"star\" points=\"{}\" fill=\"crimson\"><title>{}</title></polygon>\n",
        star(px(r.total_mem_bytes), py(r.accuracy), 9), escape(r.config));
  }
  s += "</svg>\n";
  return s;
}

}  // namespace kvpareto
