// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvpareto/pareto.hpp"

namespace kvpareto {

struct CsvError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exact header line, without the newline.
const std::string& results_csv_header();

// One row of the results CSV, as read back.
struct ResultRow {
  std::string config;
  int w_bits = 16;
  int k_bits = 16;
  int v_bits = 16;
  std::string granularity;  // per-token | per-seq | per-tensor | none
  std::size_t group = 0;
  bool smoothing = false;
  std::string chunk;  // "full" or a token count
  double total_mem_bytes = 0;
  double model_bytes = 0;
  double kv_bytes = 0;
  double peak_bytes = 0;
  double accuracy = 0;
  double top1_agreement = 0;
  double rel_logit_err = 0;
  bool on_frontier = false;
};

ResultRow to_row(const EvalPoint& p);
std::string format_row(const ResultRow& r);

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows);
void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
// Throws CsvError with the line number on a malformed file.
std::vector<ResultRow> read_results_csv(const std::filesystem::path& path);

// Recomputes on_frontier from (total_mem_bytes, accuracy) and returns the
// frontier rows sorted by memory ascending.
std::vector<ResultRow> frontier_rows(std::vector<ResultRow>& rows);

void write_summary_json(const std::filesystem::path& path, const SweepResult& result);

}  // namespace kvpareto
