// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/pareto.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "kvpareto/weights_io.hpp"

namespace kvpareto {

std::string_view weight_choice_name(WeightChoice w) {
  switch (w) {
    case WeightChoice::kW16: return "w16";
    case WeightChoice::kW4: return "w4";
    case WeightChoice::kW4Awq: return "w4awq";
  }
  return "?";
}

WeightChoice parse_weight_choice(std::string_view s) {
  for (auto w : {WeightChoice::kW16, WeightChoice::kW4, WeightChoice::kW4Awq}) {
    if (s == weight_choice_name(w)) return w;
  }
  throw std::invalid_argument(fmt::format("unknown weight mode '{}' (w16, w4, w4awq)", s));
}

int weight_choice_bits(WeightChoice w) { return w == WeightChoice::kW16 ? 16 : 4; }

const std::vector<KvPair>& allowed_kv_pairs() {
  static const std::vector<KvPair> pairs{{16, 16}, {8, 8}, {8, 4}, {8, 2},
                                         {4, 4},   {4, 2}, {2, 2}};
  return pairs;
}

KvPair parse_kv_pair(std::string_view s) {
  const auto sep = s.find_first_of("/,");
  KvPair p;
  try {
    if (sep == std::string_view::npos) throw std::invalid_argument("no separator");
    std::size_t used = 0;
    const std::string k(s.substr(0, sep)), v(s.substr(sep + 1));
    p.k_bits = std::stoi(k, &used);
    if (used != k.size()) throw std::invalid_argument("k");
    p.v_bits = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument("v");
  } catch (const std::exception&) {
    throw std::invalid_argument(fmt::format("bad kv pair '{}' (expected K/V, e.g. 8/4)", s));
  }
  const auto& ok = allowed_kv_pairs();
  if (std::find(ok.begin(), ok.end(), p) == ok.end()) {
    throw std::invalid_argument(fmt::format(
        "kv pair {}/{} not in {{16/16, 8/8, 8/4, 8/2, 4/4, 4/2, 2/2}}", p.k_bits, p.v_bits));
  }
  return p;
}

std::string SweepConfig::name() const {
  std::string n = fmt::format("w{}", weights == WeightChoice::kW16 ? "16a16" : "4a16");
  if (weights == WeightChoice::kW4Awq) n += "awq";
  n += fmt::format("_k{}v{}", kv.k_bits, kv.v_bits);
  if (!kv.pass_through()) {
    n += fmt::format("_{}", granularity_short_name(granularity));
    if (granularity != Granularity::kPerTensor) n += fmt::format("_g{}", group);
    if (smoothing) n += "_sm";
  }
  n += chunk ? fmt::format("_pc{}", *chunk) : std::string("_full");
  return n;
}

QuantSpec SweepConfig::k_spec() const {
  if (kv.k_bits == 16) return QuantSpec::pass_through();
  return {kv.k_bits, granularity, group, smoothing};
}

QuantSpec SweepConfig::v_spec() const {
  if (kv.v_bits == 16) return QuantSpec::pass_through();
  return {kv.v_bits, granularity, group, false};
}

void SweepSpec::validate() const {
  auto nonempty = [](bool empty, const char* what) {
    if (empty) throw std::invalid_argument(fmt::format("sweep: '{}' list is empty", what));
  };
  nonempty(kv.empty(), "kv");
  nonempty(granularities.empty(), "granularity");
  nonempty(groups.empty(), "group");
  nonempty(smoothing.empty(), "smoothing");
  nonempty(chunks.empty(), "chunk");
  nonempty(weights.empty(), "weights");
  for (auto g : groups) {
    if (g == 0) throw std::invalid_argument("sweep: group sizes must be positive");
  }
  for (const auto& c : chunks) {
    if (c && *c == 0) throw std::invalid_argument("sweep: chunk sizes must be positive");
  }
  if (task.seeds == 0) throw std::invalid_argument("sweep: task.seeds must be positive");
  if (memory.context == 0) throw std::invalid_argument("sweep: memory.context must be positive");
}

Enumeration enumerate(const SweepSpec& spec, std::size_t head_dim) {
  spec.validate();
  Enumeration out;
  for (auto w : spec.weights) {
    for (const auto& kv : spec.kv) {
      for (std::size_t gi = 0; gi < spec.granularities.size(); ++gi) {
        for (std::size_t gs = 0; gs < spec.groups.size(); ++gs) {
          for (std::size_t si = 0; si < spec.smoothing.size(); ++si) {
            for (const auto& chunk : spec.chunks) {
              SweepConfig c;
              c.weights = w;
              c.kv = kv;
              c.granularity = spec.granularities[gi];
              c.group = spec.groups[gs];
              c.smoothing = spec.smoothing[si];
              c.chunk = chunk;
              if (kv.pass_through()) {
                if (gi != 0 || gs != 0 || si != 0) {
                  out.skipped.push_back(
                      {fmt::format("{} [{} g{}{}]", c.name(),
                                   granularity_short_name(spec.granularities[gi]),
                                   spec.groups[gs], spec.smoothing[si] ? " sm" : ""),
                       "pass-through KV ignores granularity, group and smoothing"});
                  continue;
                }
                c.smoothing = false;
                out.configs.push_back(c);
                continue;
              }
              if (c.granularity == Granularity::kPerTensor && gs != 0) {
                out.skipped.push_back(
                    {fmt::format("{} [g{}]", c.name(), c.group),
                     "per-tensor uses one group for the whole tensor; group size is redundant"});
                continue;
              }
              if (c.granularity == Granularity::kPerTokenGroup && head_dim % c.group != 0) {
                out.skipped.push_back(
                    {c.name(), fmt::format("per-token group {} does not divide head_dim {}",
                                           c.group, head_dim)});
                continue;
              }
              out.configs.push_back(c);
            }
          }
        }
      }
    }
  }
  return out;
}

Evaluator::Evaluator(const SweepSpec& spec, Weights base)
    : spec_(spec), base_(std::move(base)) {
  spec_.validate();
  base_.validate();
  const auto& cfg = base_.config;
  if (spec_.task.vocab > cfg.vocab_size) {
    throw std::invalid_argument(fmt::format("task vocab {} exceeds model vocab {}",
                                            spec_.task.vocab, cfg.vocab_size));
  }
  if (spec_.task.length > cfg.max_positions) {
    throw std::invalid_argument(fmt::format("task length {} exceeds max_positions {}",
                                            spec_.task.length, cfg.max_positions));
  }
  arch_ = spec_.memory.arch_file ? load_arch(*spec_.memory.arch_file) : arch_from_model(cfg);

  RunConfig run;
  run.kv_cache = cache_config_for(cfg, QuantSpec::pass_through(), QuantSpec::pass_through());
  for (std::size_t i = 0; i < spec_.task.seeds; ++i) {
    tasks_.push_back(
        generate_task(spec_.task.base_seed + i, spec_.task.length, spec_.task.vocab));
    KVCache cache(run.kv_cache);
    const Tensor logits =
        forward_prefill(base_, run, tasks_.back().tokens, cache, LogitsMode::kAllPositions);
    baseline_correct_ += count_exact_match(logits, tasks_.back());
    total_queries_ += tasks_.back().queries.size();
    baseline_rows_.push_back(query_rows(logits, tasks_.back()));
  }
}

Evaluator Evaluator::from_spec(const SweepSpec& spec) {
  if (spec.model.kind == ModelSource::Kind::kWeightFile) {
    return Evaluator(spec, load_model(spec.model.weight_file));
  }
  return Evaluator(spec, build_induction_model(spec.model.vocab, spec.model.induction));
}

double Evaluator::baseline_accuracy() const {
  return total_queries_ ? static_cast<double>(baseline_correct_) /
                              static_cast<double>(total_queries_)
                        : 0.0;
}

const Weights& Evaluator::weights_for(WeightChoice w) const {
  if (w == WeightChoice::kW16) return base_;
  std::lock_guard lock(*mu_);
  auto it = variants_.find(w);
  if (it != variants_.end()) return *it->second;
  WeightQuantSpec ws;
  std::shared_ptr<const Weights> q;
  if (w == WeightChoice::kW4Awq) {
    ws.scaling = WeightScaling::kActivationAware;
    CalibrationOptions opt;
    opt.seed = spec_.calibration_seed;
    const CalibrationSet calib = collect_calibration(base_, opt);
    q = std::make_shared<const Weights>(quantize_weights(base_, ws, &calib));
  } else {
    q = std::make_shared<const Weights>(quantize_weights(base_, ws));
  }
  variants_.emplace(w, q);
  return *q;
}

MemQuery Evaluator::memory_query(const SweepConfig& c) const {
  MemQuery q;
  q.context = spec_.memory.context;
  q.weight_bits = weight_choice_bits(c.weights);
  q.k_bits = c.kv.k_bits;
  q.v_bits = c.kv.v_bits;
  q.k_smoothing = c.smoothing && c.kv.k_bits < 16;
  q.activation_bytes = spec_.memory.activation_bytes;
  q.count_group_overhead = spec_.memory.count_group_overhead;
  if (c.chunk) {
    q.attention = AttentionKind::kSdpaChunked;
    q.chunk = std::min<std::uint64_t>(*c.chunk, q.context);
  }
  const std::uint64_t pass = q.chunk ? q.chunk : q.context;
  switch (c.granularity) {
    case Granularity::kPerTokenGroup: q.kv_group_size = c.group; break;
    case Granularity::kPerSequenceGroup: q.kv_group_size = c.group * arch_.head_dim; break;
    case Granularity::kPerTensor:
      q.kv_group_size = static_cast<std::size_t>(pass * arch_.kv_heads * arch_.head_dim);
      break;
  }
  return q;
}

EvalPoint Evaluator::evaluate(const SweepConfig& c) const {
  EvalPoint p;
  p.config = c;
  p.name = c.name();
  try {
    const Weights& w = weights_for(c.weights);
    RunConfig run;
    run.chunk_size = c.chunk;
    run.kv_cache = cache_config_for(w.config, c.k_spec(), c.v_spec());
    run.weight_mode =
        c.weights == WeightChoice::kW16 ? WeightMode::kFullPrecision : WeightMode::kQuantized4;
    StorageAccounting acct;
    acct.count_group_overhead = spec_.memory.count_group_overhead;
    FidelityAccumulator fid;
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      KVCache cache(run.kv_cache);
      const Tensor logits =
          forward_prefill(w, run, tasks_[i].tokens, cache, LogitsMode::kAllPositions);
      p.correct += count_exact_match(logits, tasks_[i]);
      p.queries += tasks_[i].queries.size();
      fid.add(baseline_rows_[i], query_rows(logits, tasks_[i]));
      p.simulated_kv_bytes = cache.stored_bytes(acct);
    }
    p.accuracy = p.queries ? static_cast<double>(p.correct) / static_cast<double>(p.queries) : 0.0;
    p.fidelity = fid.report();
    p.memory = total_memory(memory_query(c), arch_);
  } catch (const std::exception& e) {
    throw EvalError(fmt::format("config {}: {}", p.name, e.what()));
  }
  return p;
}

std::vector<FrontierPoint> frontier(std::vector<FrontierPoint> points) {
  std::sort(points.begin(), points.end(), [](const FrontierPoint& a, const FrontierPoint& b) {
    if (a.memory != b.memory) return a.memory < b.memory;
    if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
    return a.name < b.name;
  });
  std::vector<FrontierPoint> out;
  for (auto& p : points) {
    if (out.empty() || p.accuracy > out.back().accuracy) out.push_back(std::move(p));
  }
  return out;
}

void mark_frontier(std::vector<EvalPoint>& points) {
  std::vector<FrontierPoint> fp;
  for (const auto& p : points) fp.push_back({p.memory.total_bytes, p.accuracy, p.name});
  std::set<std::string> names;
  for (const auto& f : frontier(std::move(fp))) names.insert(f.name);
  for (auto& p : points) p.on_frontier = names.contains(p.name);
}

SweepResult run_sweep(const Evaluator& ev, const SweepSpec& spec, std::size_t jobs) {
  Enumeration en = enumerate(spec, ev.model_config().head_dim);
  SweepResult res;
  res.skipped = std::move(en.skipped);
  res.baseline_accuracy = ev.baseline_accuracy();
  // Weight variants first, so workers never wait on calibration.
  for (const auto& c : en.configs) ev.weights_for(c.weights);

  const std::size_t n = en.configs.size();
  std::vector<std::optional<EvalPoint>> slots(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        slots[i] = ev.evaluate(en.configs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (auto& s : slots) res.points.push_back(std::move(*s));
  mark_frontier(res.points);
  return res;
}

SweepResult run_sweep(const SweepSpec& spec, std::size_t jobs) {
  const Evaluator ev = Evaluator::from_spec(spec);
  return run_sweep(ev, spec, jobs);
}

}  // namespace kvpareto
