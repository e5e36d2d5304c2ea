// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic retrieval tasks for the accuracy axis. A task is a token sequence
// with key tokens that occur exactly twice. At the second occurrence (the
// query) the correct next token is the one that followed the first.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "kvpareto/tensor.hpp"

namespace kvpareto {

struct TaskError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InductionQuery {
  std::size_t position = 0;          // second occurrence of the key
  std::size_t first_occurrence = 0;  // earlier occurrence, < position - 1
  int answer = 0;                    // tokens[first_occurrence + 1]
  friend bool operator==(const InductionQuery&, const InductionQuery&) = default;
};

struct InductionTask {
  std::uint64_t seed = 0;
  std::size_t length = 0;
  std::size_t vocab = 0;
  std::vector<int> tokens;
  std::vector<InductionQuery> queries;  // ascending position

  // Throws TaskError when a query's key is not unique or its answer does not
  // follow the earlier occurrence.
  void validate() const;
  friend bool operator==(const InductionTask&, const InductionTask&) = default;
};

// max(1, M / 16) keys. For M >= 160 every depth decile holds a query.
// Needs V >= 8, M >= 16 and at least two non-key tokens; throws TaskError.
InductionTask generate_task(std::uint64_t seed, std::size_t length, std::size_t vocab);

// logits: [M x V'] next-token logits for every position, V' >= vocab.
double score_exact_match(const Tensor& logits, const InductionTask& task);
// predictions: one token per query, in query order.
double score_exact_match(std::span<const int> predictions, const InductionTask& task);
std::size_t count_exact_match(const Tensor& logits, const InductionTask& task);

// Rows of `logits` at the query positions, [Q x V'].
Tensor query_rows(const Tensor& logits, const InductionTask& task);

struct FidelityReport {
  double top1_agreement = 1.0;
  double rel_logit_err = 0.0;  // mean over rows of |c - b| / |b|
  double cosine = 1.0;         // mean over rows
  std::size_t rows = 0;
};

// Row-wise comparison of [N x V] logits, each row the final-position logits
// of one prompt.
FidelityReport fidelity(const Tensor& baseline, const Tensor& candidate);

// Accumulates rows from several tensors.
class FidelityAccumulator {
 public:
  void add(const Tensor& baseline, const Tensor& candidate);
  FidelityReport report() const;

 private:
  std::size_t rows_ = 0;
  std::size_t agree_ = 0;
  double rel_sum_ = 0.0;
  double cos_sum_ = 0.0;
};

void save_task(const std::filesystem::path& path, const InductionTask& task);
InductionTask load_task(const std::filesystem::path& path);

}  // namespace kvpareto
