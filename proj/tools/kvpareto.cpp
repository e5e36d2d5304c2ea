// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0
//
// kvpareto: sweeps, frontier extraction, memory queries, single evaluations.
// Exit codes: 0 ok, 2 bad input (flags, sweep file, weight file, CSV),
// 3 evaluation failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "kvpareto/evaltasks.hpp"
#include "kvpareto/memmodel.hpp"
#include "kvpareto/pareto.hpp"
#include "kvpareto/results_io.hpp"
#include "kvpareto/svg.hpp"
#include "kvpareto/sweep_file.hpp"
#include "kvpareto/weights_io.hpp"

namespace fs = std::filesystem;
using namespace kvpareto;
using nlohmann::json;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitEval = 3;

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by memory and eval.
struct ConfigFlags {
  std::string kv = "16,16";
  std::string granularity = "per-token";
  std::size_t group = 32;
  std::string smooth = "off";
  std::string chunk = "full";
  std::string weights = "w16";

  void add(CLI::App* app) {
    app->add_option("--kv", kv, "KV bits as K,V (16,16 8,8 8,4 8,2 4,4 4,2 2,2)");
    app->add_option("--granularity", granularity, "per-token, per-seq or per-tensor")
        ->check(CLI::IsMember({"per-token", "per-seq", "per-tensor"}));
    app->add_option("--group", group, "quantization group size")
        ->check(CLI::IsMember({32, 64, 128}));
    app->add_option("--smooth", smooth, "K smoothing")->check(CLI::IsMember({"on", "off"}));
    app->add_option("--chunk", chunk, "prefill chunk size or 'full'");
    app->add_option("--weights", weights, "weight mode")
        ->check(CLI::IsMember({"w16", "w4", "w4awq"}));
  }

  SweepConfig config() const {
    SweepConfig c;
    try {
      c.kv = parse_kv_pair(kv);
      c.weights = parse_weight_choice(weights);
      c.granularity = parse_granularity(granularity);
    } catch (const std::exception& e) {
      throw InputError(e.what());
    }
    c.group = group;
    c.smoothing = smooth == "on" && !c.kv.pass_through();
    if (chunk != "full") {
      std::size_t used = 0;
      unsigned long long n = 0;
      try {
        n = std::stoull(chunk, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != chunk.size() || n == 0) {
        throw InputError(fmt::format("--chunk '{}' must be a positive integer or 'full'", chunk));
      }
      c.chunk = static_cast<std::size_t>(n);
    }
    return c;
  }
};

std::size_t resolve_jobs(std::optional<std::size_t> flag, std::optional<std::size_t> file) {
  if (flag) return std::max<std::size_t>(1, *flag);
  if (const char* env = std::getenv("KVPARETO_JOBS")) {
    try {
      const auto n = std::stoul(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
    std::cerr << fmt::format("warning: ignoring KVPARETO_JOBS='{}'\n", env);
  }
  return file.value_or(1);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError(fmt::format("cannot write '{}'", path.string()));
  out << text;
}

void write_svg(const fs::path& path, const std::vector<ResultRow>& rows, bool log_x) {
  ScatterOptions opt;
  opt.log_x = log_x;
  for (const auto& r : rows) {
    if (r.w_bits == 16 && r.k_bits == 16 && r.v_bits == 16 && r.chunk == "full") {
      opt.baseline_accuracy = r.accuracy;
    }
  }
  write_text(path, render_scatter_svg(rows, opt));
}

json profile_json(const MemoryProfile& p) {
  return {{"model_bytes", p.model_bytes},
          {"kv_bytes", p.kv_bytes},
          {"mha_peak_bytes", p.mha_peak_bytes},
          {"lm_head_peak_bytes", p.lm_head_peak_bytes},
          {"peak_activation_bytes", p.peak_activation_bytes},
          {"total_bytes", p.total_bytes}};
}

// ---- sweep ----

struct SweepArgs {
  std::string sweep;
  std::string out;
  std::optional<std::size_t> jobs;
  std::optional<std::uint64_t> seed;
  std::string svg;
  bool log_x = false;
};

int cmd_sweep(const SweepArgs& a) {
  SweepFile f = load_sweep_file(a.sweep);
  if (a.seed) f.spec.task.base_seed = *a.seed;
  const fs::path out = !a.out.empty() ? fs::path(a.out) : f.out_dir.value_or("kvpareto_out");
  const std::size_t jobs = resolve_jobs(a.jobs, f.jobs);

  std::optional<Evaluator> ev;
  try {
    ev.emplace(Evaluator::from_spec(f.spec));
  } catch (const FormatError&) {
    throw;
  } catch (const ArchError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  const SweepResult res = run_sweep(*ev, f.spec, jobs);

  std::vector<ResultRow> rows;
  for (const auto& p : res.points) rows.push_back(to_row(p));
  fs::create_directories(out);
  write_results_csv(out / "results.csv", rows);
  std::vector<ResultRow> copy = rows;
  write_results_csv(out / "frontier.csv", frontier_rows(copy));
  write_summary_json(out / "summary.json", res);
  std::optional<fs::path> svg;
  if (!a.svg.empty()) svg = a.svg;
  else if (f.svg) svg = *f.svg;
  if (svg) write_svg(*svg, rows, a.log_x);

  std::size_t on = 0;
  for (const auto& r : rows) on += r.on_frontier;
  std::cout << fmt::format("{} configs evaluated ({} skipped), {} on the frontier\n",
                           rows.size(), res.skipped.size(), on);
  std::cout << fmt::format("baseline accuracy {:.6f}\n", res.baseline_accuracy);
  std::cout << fmt::format("wrote {}\n", (out / "results.csv").string());
  return 0;
}

// ---- memory ----

struct MemoryArgs {
  std::string arch;
  std::uint64_t context = 10240;
  ConfigFlags cfg;
  std::string attention = "sdpa";
  std::uint64_t block_q = 128;
  std::uint64_t block_kv = 128;
  double delta = 0.0;
  double act_bytes = 2.0;
  std::uint64_t batch = 1;
  bool overhead = false;
  std::string json_path;
};

int cmd_memory(const MemoryArgs& a) {
  const ArchSpec arch = load_arch(a.arch);
  const SweepConfig c = a.cfg.config();
  MemQuery q;
  q.context = a.context;
  q.batch = a.batch;
  q.weight_bits = weight_choice_bits(c.weights);
  q.k_bits = c.kv.k_bits;
  q.v_bits = c.kv.v_bits;
  q.k_smoothing = c.smoothing;
  q.activation_bytes = a.act_bytes;
  q.count_group_overhead = a.overhead;
  q.kv_group_size = c.granularity == Granularity::kPerSequenceGroup ? c.group * arch.head_dim
                                                                    : c.group;
  if (c.chunk) q.chunk = std::min<std::uint64_t>(*c.chunk, a.context);
  if (a.attention == "flash") {
    q.attention = AttentionKind::kFlash;
    q.block_q = a.block_q;
    q.block_kv = a.block_kv;
    q.flash_workspace = a.delta;
  } else if (c.chunk && a.context > 0) {
    q.attention = AttentionKind::kSdpaChunked;
  }
  MemQuery base;
  base.context = a.context;
  base.batch = a.batch;
  base.activation_bytes = a.act_bytes;

  MemoryProfile p, b;
  try {
    p = total_memory(q, arch);
    b = total_memory(base, arch);
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  const double red = b.total_bytes > 0 ? memory_reduction(b, p) : 0.0;
  std::cout << fmt::format("arch {} at {} tokens, {}\n", arch.name, a.context, c.name());
  std::cout << fmt::format("  config:   {}\n", p.breakdown());
  std::cout << fmt::format("  baseline: {}\n", b.breakdown());
  std::cout << fmt::format("  reduction vs bf16 baseline: {:.1f}%\n", red);

  json j{{"arch", arch.name},
         {"context", a.context},
         {"config", c.name()},
         {"attention", a.attention},
         {"profile", profile_json(p)},
         {"baseline", profile_json(b)},
         {"reduction_percent", red}};
  if (a.json_path == "-") std::cout << j.dump(2) << "\n";
  else if (!a.json_path.empty()) write_text(a.json_path, j.dump(2) + "\n");
  return 0;
}

// ---- frontier ----

struct FrontierArgs {
  std::string csv;
  std::string out;
  std::string svg;
  bool log_x = false;
};

int cmd_frontier(const FrontierArgs& a) {
  std::vector<ResultRow> rows;
  if (fs::exists(a.csv) && fs::file_size(a.csv) == 0) {
    std::cerr << fmt::format("warning: '{}' is empty\n", a.csv);
  } else {
    rows = read_results_csv(a.csv);
  }
  if (rows.empty()) std::cerr << "warning: no result rows; frontier is empty\n";
  const auto front = frontier_rows(rows);
  std::ostringstream ss;
  write_results_csv(ss, front);
  if (a.out.empty()) std::cout << ss.str();
  else write_text(a.out, ss.str());
  if (!a.svg.empty()) write_svg(a.svg, rows, a.log_x);
  std::cerr << fmt::format("{} of {} rows on the frontier\n", front.size(), rows.size());
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string model;
  std::size_t vocab = 48;
  std::size_t length = 512;
  std::size_t tasks = 4;
  std::uint64_t seed = 0;
  ConfigFlags cfg;
  std::string arch;
  std::uint64_t context = 10240;
  std::string dump_task;
  std::string json_path;
};

int cmd_eval(const EvalArgs& a) {
  SweepSpec spec;
  const SweepConfig c = a.cfg.config();
  spec.kv = {c.kv};
  spec.granularities = {c.granularity};
  spec.groups = {c.group};
  spec.smoothing = {c.smoothing};
  spec.chunks = {c.chunk};
  spec.weights = {c.weights};
  spec.task = {a.length, a.vocab, a.tasks, a.seed};
  spec.memory.context = a.context;
  if (!a.arch.empty()) spec.memory.arch_file = a.arch;
  spec.calibration_seed = a.seed;
  spec.model.vocab = a.vocab;
  spec.model.induction.seed = a.seed;
  if (!a.model.empty()) {
    spec.model.kind = ModelSource::Kind::kWeightFile;
    spec.model.weight_file = a.model;
  }
  std::optional<Evaluator> ev;
  try {
    ev.emplace(Evaluator::from_spec(spec));
  } catch (const FormatError&) {
    throw;
  } catch (const ArchError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  if (!a.dump_task.empty()) save_task(a.dump_task, ev->tasks().front());
  const EvalPoint p = ev->evaluate(c);
  json j{{"config", p.name},
         {"accuracy", p.accuracy},
         {"baseline_accuracy", ev->baseline_accuracy()},
         {"correct", p.correct},
         {"queries", p.queries},
         {"fidelity",
          {{"top1_agreement", p.fidelity.top1_agreement},
           {"rel_logit_err", p.fidelity.rel_logit_err},
           {"cosine", p.fidelity.cosine}}},
         {"simulated_kv_bytes", p.simulated_kv_bytes},
         {"memory", profile_json(p.memory)}};
  if (a.json_path.empty() || a.json_path == "-") std::cout << j.dump(2) << "\n";
  else write_text(a.json_path, j.dump(2) + "\n");
  return 0;
}

// ---- export-model ----

struct ExportArgs {
  std::string out;
  std::size_t vocab = 48;
  std::uint64_t seed = 0;
  bool f16 = false;
};

int cmd_export(const ExportArgs& a) {
  InductionTemplate t;
  t.seed = a.seed;
  Weights w;
  try {
    w = build_induction_model(a.vocab, t);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
  save_weights(a.out, w, a.f16 ? DType::kF16 : DType::kF32);
  std::cout << fmt::format("wrote {} ({} layers, hidden {}, vocab {})\n", a.out,
                           w.config.layers, w.config.hidden(), w.config.vocab_size);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KV cache quantization and chunked-prefill Pareto explorer"};
  app.require_subcommand(1);

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "evaluate every config of a sweep file");
  sweep->add_option("--sweep", sa.sweep, "sweep YAML file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", sa.out, "output directory (results.csv, frontier.csv, summary.json)");
  sweep->add_option("--jobs", sa.jobs, "worker threads (fallback: KVPARETO_JOBS)");
  sweep->add_option("--seed", sa.seed, "override the task seed");
  sweep->add_option("--svg", sa.svg, "write a scatter plot");
  sweep->add_flag("--log-x", sa.log_x, "log-scale memory axis in the plot");

  MemoryArgs ma;
  auto* memory = app.add_subcommand("memory", "analytic memory for one config");
  memory->add_option("--arch", ma.arch, "architecture YAML file")->required();
  memory->add_option("--context", ma.context, "context length in tokens");
  ma.cfg.add(memory);
  memory->add_option("--attention", ma.attention, "sdpa or flash")
      ->check(CLI::IsMember({"sdpa", "flash"}));
  memory->add_option("--block-q", ma.block_q, "flash query block");
  memory->add_option("--block-kv", ma.block_kv, "flash key/value block");
  memory->add_option("--delta", ma.delta, "flash workspace, elements");
  memory->add_option("--act-bytes", ma.act_bytes, "bytes per activation element");
  memory->add_option("--batch", ma.batch, "batch size");
  memory->add_flag("--overhead", ma.overhead, "count scale/zero-point overhead");
  memory->add_option("--json", ma.json_path, "write JSON ('-' for stdout)");

  FrontierArgs fa;
  auto* front = app.add_subcommand("frontier", "recompute the frontier of a results CSV");
  front->add_option("csv", fa.csv, "results CSV")->required()->check(CLI::ExistingFile);
  front->add_option("--out", fa.out, "frontier CSV (default stdout)");
  front->add_option("--svg", fa.svg, "write a scatter plot");
  front->add_flag("--log-x", fa.log_x, "log-scale memory axis");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate one config");
  eval->add_option("--model", ea.model, "weight file (default: built induction model)");
  eval->add_option("--vocab", ea.vocab, "task (and induction model) vocabulary");
  eval->add_option("--length", ea.length, "task length M");
  eval->add_option("--tasks", ea.tasks, "number of task seeds");
  eval->add_option("--seed", ea.seed, "base seed");
  ea.cfg.add(eval);
  eval->add_option("--arch", ea.arch, "architecture YAML for the memory axis");
  eval->add_option("--context", ea.context, "reporting context for the memory axis");
  eval->add_option("--dump-task", ea.dump_task, "write the first task as JSON");
  eval->add_option("--json", ea.json_path, "write JSON (default stdout)");

  ExportArgs xa;
  auto* exp = app.add_subcommand("export-model", "write the induction model as a weight file");
  exp->add_option("--out", xa.out, "weight file")->required();
  exp->add_option("--vocab", xa.vocab, "vocabulary");
  exp->add_option("--seed", xa.seed, "rotation seed");
  exp->add_flag("--f16", xa.f16, "store half precision");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitInput;
  }

  try {
    if (*sweep) return cmd_sweep(sa);
    if (*memory) return cmd_memory(ma);
    if (*front) return cmd_frontier(fa);
    if (*eval) return cmd_eval(ea);
    if (*exp) return cmd_export(xa);
  } catch (const SweepFileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const FormatError& e) {
    std::cerr << "error: bad weight file: " << e.what() << "\n";
    return kExitInput;
  } catch (const ArchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const CsvError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const TaskError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const EvalError& e) {
    std::cerr << "error: evaluation failed: " << e.what() << "\n";
    return kExitEval;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitEval;
  }
  return 0;
}
