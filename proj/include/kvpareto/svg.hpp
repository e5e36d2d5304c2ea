// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kvpareto/results_io.hpp"

namespace kvpareto {

struct ScatterOptions {
  bool log_x = false;
  std::optional<double> baseline_accuracy;  // horizontal reference line
  std::string title = "accuracy vs total memory";
};

// Static scatter: memory on x, accuracy on y. One <circle class="point">
// per row, plus a <polygon class="star"> over each frontier row.
std::string render_scatter_svg(const std::vector<ResultRow>& rows, const ScatterOptions& opt);

}  // namespace kvpareto
