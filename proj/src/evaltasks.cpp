// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/evaltasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "kvpareto/rng.hpp"

namespace kvpareto {

void InductionTask::validate() const {
  if (tokens.size() != length) {
    throw TaskError(fmt::format("task has {} tokens, length says {}", tokens.size(), length));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw TaskError(fmt::format("token {} outside vocab {}", t, vocab));
    }
  }
  for (const auto& q : queries) {
    if (q.position >= length || q.first_occurrence + 1 >= q.position) {
      throw TaskError(fmt::format("query at {} with first occurrence {} is malformed",
                                  q.position, q.first_occurrence));
    }
    const int key = tokens[q.position];
    std::size_t seen = 0;
    for (std::size_t i = 0; i < q.position; ++i) seen += tokens[i] == key;
    if (seen != 1 || tokens[q.first_occurrence] != key) {
      throw TaskError(fmt::format("key {} at {} has {} earlier occurrences", key, q.position,
                                  seen));
    }
    if (tokens[q.first_occurrence + 1] != q.answer) {
      throw TaskError(fmt::format("answer {} for query at {} does not follow position {}",
                                  q.answer, q.position, q.first_occurrence));
    }
  }
}

InductionTask generate_task(std::uint64_t seed, std::size_t length, std::size_t vocab) {
  if (vocab < 8 || length < 16) {
    throw TaskError(fmt::format("task needs V >= 8 and M >= 16 (got V={}, M={})", vocab, length));
  }
  const std::size_t nq = std::max<std::size_t>(1, length / 16);
  if (vocab < nq + 2) {
    throw TaskError(fmt::format("vocab {} too small for {} unique keys plus fillers at M={}",
                                vocab, nq, length));
  }
  Rng rng(seed);
  enum Slot : char { kFree, kKey, kAnswer };
  const bool stratify = length >= 160;
  std::vector<Slot> slot;
  std::vector<std::size_t> query_pos(nq), first_pos(nq);

  // One placement attempt; false when some query has no room left.
  auto place = [&]() -> bool {
    slot.assign(length, kFree);
    for (std::size_t q = 0; q < nq; ++q) {
      std::size_t lo = 2, hi = length;
      if (stratify) {
        const std::size_t d = q % 10;
        lo = std::max<std::size_t>(2, d * length / 10);
        hi = (d + 1) * length / 10;
      }
      std::vector<std::size_t> free;
      for (std::size_t t = lo; t < hi; ++t) {
        if (slot[t] == kFree) free.push_back(t);
      }
      if (free.empty()) return false;
      query_pos[q] = free[rng.uniform_index(free.size())];
      slot[query_pos[q]] = kKey;
    }
    std::sort(query_pos.begin(), query_pos.end());
    for (std::size_t q = 0; q < nq; ++q) {
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i + 1 < query_pos[q]; ++i) {
        if (slot[i] == kFree && slot[i + 1] != kKey) free.push_back(i);
      }
      if (free.empty()) return false;
      const std::size_t i = free[rng.uniform_index(free.size())];
      slot[i] = kKey;
      slot[i + 1] = kAnswer;
      first_pos[q] = i;
    }
    return true;
  };
  bool placed = false;
  for (int attempt = 0; attempt < 64 && !placed; ++attempt) placed = place();
  if (!placed) {
    throw TaskError(fmt::format("could not place {} queries in length {}", nq, length));
  }

  std::vector<int> perm(vocab);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = vocab - 1; i > 0; --i) {
    std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
  }
  const std::vector<int> keys(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(nq));
  const std::vector<int> fillers(perm.begin() + static_cast<std::ptrdiff_t>(nq), perm.end());

  InductionTask task;
  task.seed = seed;
  task.length = length;
  task.vocab = vocab;
  task.tokens.resize(length);
  for (std::size_t p = 0; p < length; ++p) {
    task.tokens[p] = fillers[rng.uniform_index(fillers.size())];
  }
  for (std::size_t q = 0; q < nq; ++q) {
    task.tokens[query_pos[q]] = keys[q];
    task.tokens[first_pos[q]] = keys[q];
  }
  for (std::size_t q = 0; q < nq; ++q) {
    task.queries.push_back({query_pos[q], first_pos[q], task.tokens[first_pos[q] + 1]});
  }
  task.validate();
  return task;
}

namespace {

void check_logits(const Tensor& logits, const InductionTask& task) {
  if (logits.rank() != 2 || logits.dim(0) != task.length || logits.dim(1) < task.vocab) {
    throw DimensionError(fmt::format("logits {} do not cover a task of length {} and vocab {}",
                                     shape_str(logits.shape()), task.length, task.vocab));
  }
}

int row_argmax(const Tensor& t, std::size_t row) {
  const std::size_t n = t.dim(1);
  const auto r = t.data().subspan(row * n, n);
  return static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
}

}  // namespace

std::size_t count_exact_match(const Tensor& logits, const InductionTask& task) {
  check_logits(logits, task);
  std::size_t hits = 0;
  for (const auto& q : task.queries) hits += row_argmax(logits, q.position) == q.answer;
  return hits;
}

double score_exact_match(const Tensor& logits, const InductionTask& task) {
  if (task.queries.empty()) return 0.0;
  return static_cast<double>(count_exact_match(logits, task)) /
         static_cast<double>(task.queries.size());
}

double score_exact_match(std::span<const int> predictions, const InductionTask& task) {
  if (predictions.size() != task.queries.size()) {
    throw DimensionError(fmt::format("{} predictions for {} queries", predictions.size(),
                                     task.queries.size()));
  }
  if (task.queries.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    hits += predictions[i] == task.queries[i].answer;
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

Tensor query_rows(const Tensor& logits, const InductionTask& task) {
  check_logits(logits, task);
  const std::size_t v = logits.dim(1);
  Tensor out({task.queries.size(), v});
  for (std::size_t i = 0; i < task.queries.size(); ++i) {
    const auto src = logits.data().subspan(task.queries[i].position * v, v);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * v));
  }
  return out;
}

void FidelityAccumulator::add(const Tensor& b, const Tensor& c) {
  if (b.shape() != c.shape() || b.rank() != 2) {
    throw DimensionError(fmt::format("fidelity: shapes {} and {} differ", shape_str(b.shape()),
                                     shape_str(c.shape())));
  }
  const std::size_t n = b.dim(0), v = b.dim(1);
  for (std::size_t r = 0; r < n; ++r) {
    double bb = 0, cc = 0, bc = 0, dd = 0;
    for (std::size_t j = 0; j < v; ++j) {
      const double x = b.at(r, j), y = c.at(r, j);
      bb += x * x;
      cc += y * y;
      bc += x * y;
      dd += (y - x) * (y - x);
    }
    agree_ += row_argmax(b, r) == row_argmax(c, r);
    rel_sum_ += bb > 0 ? std::sqrt(dd) / std::sqrt(bb) : (dd > 0 ? 1.0 : 0.0);
    double cosine = 1.0;
    if (bb > 0 && cc > 0) {
      cosine = std::clamp(bc / (std::sqrt(bb) * std::sqrt(cc)), -1.0, 1.0);
    } else if (bb > 0 || cc > 0) {
      cosine = 0.0;
    }
    cos_sum_ += cosine;
    ++rows_;
  }
}

FidelityReport FidelityAccumulator::report() const {
  FidelityReport r;
  r.rows = rows_;
  if (rows_ == 0) return r;
  const double n = static_cast<double>(rows_);
  r.top1_agreement = static_cast<double>(agree_) / n;
  r.rel_logit_err = rel_sum_ / n;
  r.cosine = cos_sum_ / n;
  return r;
}

FidelityReport fidelity(const Tensor& baseline, const Tensor& candidate) {
  FidelityAccumulator acc;
  acc.add(baseline, candidate);
  return acc.report();
}

void save_task(const std::filesystem::path& path, const InductionTask& task) {
  nlohmann::json j;
  j["seed"] = task.seed;
  j["length"] = task.length;
  j["vocab"] = task.vocab;
  j["tokens"] = task.tokens;
  auto& qs = j["queries"] = nlohmann::json::array();
  for (const auto& q : task.queries) {
    qs.push_back({{"position", q.position},
                  {"first_occurrence", q.first_occurrence},
                  {"answer", q.answer}});
  }
  std::ofstream out(path);
  if (!out) throw TaskError(fmt::format("cannot write task dump '{}'", path.string()));
  out << j.dump(1) << "\n";
}

InductionTask load_task(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TaskError(fmt::format("cannot open task dump '{}'", path.string()));
  InductionTask t;
  try {
    const auto j = nlohmann::json::parse(in);
    t.seed = j.at("seed").get<std::uint64_t>();
    t.length = j.at("length").get<std::size_t>();
    t.vocab = j.at("vocab").get<std::size_t>();
    t.tokens = j.at("tokens").get<std::vector<int>>();
    for (const auto& q : j.at("queries")) {
      t.queries.push_back({q.at("position").get<std::size_t>(),
                           q.at("first_occurrence").get<std::size_t>(),
                           q.at("answer").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw TaskError(fmt::format("'{}': {}", path.string(), e.what()));
  }
  t.validate();
  return t;
}

}  // namespace kvpareto
