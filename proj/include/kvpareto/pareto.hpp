// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kvpareto/evaltasks.hpp"
#include "kvpareto/memmodel.hpp"
#include "kvpareto/model.hpp"
#include "kvpareto/quant.hpp"
#include "kvpareto/weightquant.hpp"

namespace kvpareto {

enum class WeightChoice { kW16, kW4, kW4Awq };

std::string_view weight_choice_name(WeightChoice w);  // "w16", "w4", "w4awq"
WeightChoice parse_weight_choice(std::string_view s);
int weight_choice_bits(WeightChoice w);

struct KvPair {
  int k_bits = 16;
  int v_bits = 16;
  bool pass_through() const { return k_bits == 16 && v_bits == 16; }
  friend auto operator<=>(const KvPair&, const KvPair&) = default;
};

// The precision pairs a sweep may use: 16/16, 8/8, 8/4, 8/2, 4/4, 4/2, 2/2.
const std::vector<KvPair>& allowed_kv_pairs();
KvPair parse_kv_pair(std::string_view s);  // "8/4" or "8,4"

// One point of the configuration space.
struct SweepConfig {
  WeightChoice weights = WeightChoice::kW16;
  KvPair kv;
  Granularity granularity = Granularity::kPerTokenGroup;
  std::size_t group = 32;
  bool smoothing = false;
  std::optional<std::size_t> chunk;  // nullopt: full prefill

  // e.g. w4a16_k8v2_pt_g64_sm_pc256, w16a16_k16v16_full
  std::string name() const;
  QuantSpec k_spec() const;
  QuantSpec v_spec() const;
  friend bool operator==(const SweepConfig&, const SweepConfig&) = default;
};

struct ModelSource {
  enum class Kind { kInduction, kWeightFile } kind = Kind::kInduction;
  std::size_t vocab = 48;                  // induction model vocabulary
  InductionTemplate induction;             // seed included
  std::filesystem::path weight_file;       // for kWeightFile
};

struct TaskSpec {
  std::size_t length = 512;
  std::size_t vocab = 48;
  std::size_t seeds = 8;
  std::uint64_t base_seed = 0;
};

struct MemorySettings {
  std::uint64_t context = 10240;
  std::optional<std::filesystem::path> arch_file;  // default: derived from the model
  double activation_bytes = 2.0;
  bool count_group_overhead = false;
};

struct SweepSpec {
  std::vector<KvPair> kv;
  std::vector<Granularity> granularities;
  std::vector<std::size_t> groups;
  std::vector<bool> smoothing;
  std::vector<std::optional<std::size_t>> chunks;
  std::vector<WeightChoice> weights;
  ModelSource model;
  TaskSpec task;
  MemorySettings memory;
  std::uint64_t calibration_seed = 0;

  void validate() const;  // throws std::invalid_argument
};

struct SkippedConfig {
  std::string name;
  std::string reason;
};

struct Enumeration {
  std::vector<SweepConfig> configs;
  std::vector<SkippedConfig> skipped;
};

// Nested loops in the order weights, kv, granularity, group, smoothing,
// chunk, each in the order listed by the sweep spec. Redundant or invalid
// combinations are skipped with a reason.
Enumeration enumerate(const SweepSpec& spec, std::size_t head_dim);

struct EvalPoint {
  SweepConfig config;
  std::string name;
  MemoryProfile memory;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t queries = 0;
  FidelityReport fidelity;
  double simulated_kv_bytes = 0.0;  // at the task length
  bool on_frontier = false;
};

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Holds the model variants, tasks and baseline logits shared by every
// evaluation of a sweep. evaluate() is safe to call from several threads.
class Evaluator {
 public:
  Evaluator(const SweepSpec& spec, Weights base);

  // Builds or loads the model named by spec.model.
  static Evaluator from_spec(const SweepSpec& spec);

  EvalPoint evaluate(const SweepConfig& config) const;

  const Weights& weights_for(WeightChoice w) const;
  const ArchSpec& arch() const { return arch_; }
  const std::vector<InductionTask>& tasks() const { return tasks_; }
  const ModelConfig& model_config() const { return base_.config; }
  MemQuery memory_query(const SweepConfig& config) const;
  double baseline_accuracy() const;

 private:
  SweepSpec spec_;
  Weights base_;
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
  mutable std::map<WeightChoice, std::shared_ptr<const Weights>> variants_;
  ArchSpec arch_;
  std::vector<InductionTask> tasks_;
  std::vector<Tensor> baseline_rows_;  // per task, [Q x V]
  std::size_t baseline_correct_ = 0;
  std::size_t total_queries_ = 0;
};

// Memory (minimise) and accuracy (maximise).
struct FrontierPoint {
  double memory = 0.0;
  double accuracy = 0.0;
  std::string name;
};

// Non-dominated subset sorted by memory ascending. Of exact duplicates the
// lexicographically smallest name survives.
std::vector<FrontierPoint> frontier(std::vector<FrontierPoint> points);
// Marks on_frontier in place.
void mark_frontier(std::vector<EvalPoint>& points);

struct SweepResult {
  std::vector<EvalPoint> points;  // enumeration order
  std::vector<SkippedConfig> skipped;
  double baseline_accuracy = 0.0;
};

// Evaluates every config with up to `jobs` worker threads. Output does not
// depend on `jobs`. A failing config raises EvalError naming it.
SweepResult run_sweep(const SweepSpec& spec, std::size_t jobs);
SweepResult run_sweep(const Evaluator& ev, const SweepSpec& spec, std::size_t jobs);

}  // namespace kvpareto
