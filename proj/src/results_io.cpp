// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/results_io.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace kvpareto {

const std::string& results_csv_header() {
  static const std::string h =
      "config,w_bits,k_bits,v_bits,granularity,group,smoothing,chunk,total_mem_bytes,"
      "model_bytes,kv_bytes,peak_bytes,accuracy,top1_agreement,rel_logit_err,on_frontier";
  return h;
}

ResultRow to_row(const EvalPoint& p) {
  const auto& c = p.config;
  ResultRow r;
  r.config = p.name;
  r.w_bits = weight_choice_bits(c.weights);
  r.k_bits = c.kv.k_bits;
  r.v_bits = c.kv.v_bits;
  if (c.kv.pass_through()) {
    r.granularity = "none";
  } else {
    r.granularity = std::string(granularity_name(c.granularity));
    r.group = c.granularity == Granularity::kPerTensor ? 0 : c.group;
    r.smoothing = c.smoothing;
  }
  r.chunk = c.chunk ? std::to_string(*c.chunk) : "full";
  r.total_mem_bytes = p.memory.total_bytes;
  r.model_bytes = p.memory.model_bytes;
  r.kv_bytes = p.memory.kv_bytes;
  r.peak_bytes = p.memory.peak_activation_bytes;
  r.accuracy = p.accuracy;
  r.top1_agreement = p.fidelity.top1_agreement;
  r.rel_logit_err = p.fidelity.rel_logit_err;
  r.on_frontier = p.on_frontier;
  return r;
}

std::string format_row(const ResultRow& r) {
  return fmt::format("{},{},{},{},{},{},{},{},{:.0f},{:.0f},{:.0f},{:.0f},{:.6f},{:.6f},{:.6e},{}",
                     r.config, r.w_bits, r.k_bits, r.v_bits, r.granularity, r.group,
                     r.smoothing ? "on" : "off", r.chunk, r.total_mem_bytes, r.model_bytes,
                     r.kv_bytes, r.peak_bytes, r.accuracy, r.top1_agreement, r.rel_logit_err,
                     r.on_frontier ? 1 : 0);
}

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << results_csv_header() << "\n";
  for (const auto& r : rows) out << format_row(r) << "\n";
}

void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CsvError(fmt::format("cannot write '{}'", path.string()));
  write_results_csv(out, rows);
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CsvError(fmt::format("cannot open '{}'", path.string()));
  std::vector<ResultRow> rows;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header) {
      if (line != results_csv_header()) {
        throw CsvError(fmt::format("{}:{}: unexpected header", path.string(), lineno));
      }
      header = true;
      continue;
    }
    const auto f = split(line);
    if (f.size() != 16) {
      throw CsvError(fmt::format("{}:{}: expected 16 fields, got {}", path.string(), lineno,
                                 f.size()));
    }
    ResultRow r;
    try {
      std::size_t i = 0;
      r.config = f[i++];
      r.w_bits = std::stoi(f[i++]);
      r.k_bits = std::stoi(f[i++]);
      r.v_bits = std::stoi(f[i++]);
      r.granularity = f[i++];
      r.group = std::stoul(f[i++]);
      const auto& sm = f[i++];
      if (sm != "on" && sm != "off") throw std::invalid_argument("smoothing");
      r.smoothing = sm == "on";
      r.chunk = f[i++];
      r.total_mem_bytes = std::stod(f[i++]);
      r.model_bytes = std::stod(f[i++]);
      r.kv_bytes = std::stod(f[i++]);
      r.peak_bytes = std::stod(f[i++]);
      r.accuracy = std::stod(f[i++]);
      r.top1_agreement = std::stod(f[i++]);
      r.rel_logit_err = std::stod(f[i++]);
      const auto& fr = f[i++];
      if (fr != "0" && fr != "1") throw std::invalid_argument("on_frontier");
      r.on_frontier = fr == "1";
    } catch (const std::exception& e) {
      throw CsvError(fmt::format("{}:{}: bad field ({})", path.string(), lineno, e.what()));
    }
    rows.push_back(std::move(r));
  }
  if (!header) throw CsvError(fmt::format("{}: missing header", path.string()));
  return rows;
}

std::vector<ResultRow> frontier_rows(std::vector<ResultRow>& rows) {
  std::vector<FrontierPoint> pts;
  for (const auto& r : rows) pts.push_back({r.total_mem_bytes, r.accuracy, r.config});
  const auto front = frontier(std::move(pts));
  std::map<std::string, std::size_t> rank;
  for (std::size_t i = 0; i < front.size(); ++i) rank[front[i].name] = i;
  std::vector<ResultRow> out(front.size());
  for (auto& r : rows) {
    auto it = rank.find(r.config);
    r.on_frontier = it != rank.end();
    if (r.on_frontier) out[it->second] = r;
  }
  return out;
}

void write_summary_json(const std::filesystem::path& path, const SweepResult& result) {
  using nlohmann::json;
  json j;
  j["baseline_accuracy"] = result.baseline_accuracy;
  j["configs"] = result.points.size();
  auto& sk = j["skipped"] = json::array();
  for (const auto& s : result.skipped) sk.push_back({{"config", s.name}, {"reason", s.reason}});
  auto& fr = j["frontier"] = json::array();
  std::vector<const EvalPoint*> front;
  for (const auto& p : result.points) {
    if (p.on_frontier) front.push_back(&p);
  }
  std::sort(front.begin(), front.end(), [](const EvalPoint* a, const EvalPoint* b) {
    return a->memory.total_bytes < b->memory.total_bytes;
  });
  for (const auto* p : front) fr.push_back(p->name);
  auto& pts = j["points"] = json::array();
  for (const auto& p : result.points) {
    pts.push_back({{"config", p.name},
                   {"accuracy", p.accuracy},
                   {"correct", p.correct},
                   {"queries", p.queries},
                   {"on_frontier", p.on_frontier},
                   {"memory",
                    {{"model_bytes", p.memory.model_bytes},
                     {"kv_bytes", p.memory.kv_bytes},
                     {"mha_peak_bytes", p.memory.mha_peak_bytes},
                     {"lm_head_peak_bytes", p.memory.lm_head_peak_bytes},
                     {"peak_activation_bytes", p.memory.peak_activation_bytes},
                     {"total_bytes", p.memory.total_bytes},
                     {"breakdown", p.memory.breakdown()}}},
                   {"simulated_kv_bytes", p.simulated_kv_bytes},
                   {"fidelity",
                    {{"top1_agreement", p.fidelity.top1_agreement},
                     {"rel_logit_err", p.fidelity.rel_logit_err},
                     {"cosine", p.fidelity.cosine}}}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CsvError(fmt::format("cannot write '{}'", path.string()));
  out << j.dump(2) << "\n";
}

}  // namespace kvpareto
