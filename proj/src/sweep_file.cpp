// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/sweep_file.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

namespace kvpareto {

SweepFileError::SweepFileError(const std::string& msg, int l, int c)
    : std::runtime_error(msg), line(l), column(c) {}

namespace {

class Parser {
 public:
  Parser(std::string origin, std::filesystem::path base)
      : origin_(std::move(origin)), base_(std::move(base)) {}

  [[noreturn]] void fail(const YAML::Node& n, const std::string& msg) const {
    const auto m = n.Mark();
    const int line = m.line >= 0 ? m.line + 1 : 0;
    const int col = m.column >= 0 ? m.column + 1 : 0;
    throw SweepFileError(fmt::format("{}:{}:{}: {}", origin_, line, col, msg), line, col);
  }

  using Handler = std::function<void(const YAML::Node&)>;

  // Dispatches each key of a mapping; unknown keys are errors.
  void mapping(const YAML::Node& n, const std::string& where,
               const std::map<std::string, Handler>& handlers) const {
    if (!n.IsMap()) fail(n, fmt::format("'{}' must be a mapping", where));
    for (const auto& kv : n) {
      const auto key = kv.first.as<std::string>();
      auto it = handlers.find(key);
      if (it == handlers.end()) {
        std::string known;
        for (const auto& [k, h] : handlers) known += (known.empty() ? "" : ", ") + k;
        fail(kv.first, fmt::format("unknown key '{}' in {} (expected one of: {})", key, where,
                                   known));
      }
      it->second(kv.second);
    }
  }

  template <typename T>
  T as(const YAML::Node& n, const std::string& what) const {
    if (!n.IsScalar()) fail(n, fmt::format("'{}' must be a scalar", what));
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      fail(n, fmt::format("bad value '{}' for '{}'", n.Scalar(), what));
    }
  }

  template <typename F>
  void list(const YAML::Node& n, const std::string& what, F each) const {
    if (n.IsScalar()) {
      each(n);
      return;
    }
    if (!n.IsSequence() || n.size() == 0) fail(n, fmt::format("'{}' must be a nonempty list", what));
    for (const auto& item : n) each(item);
  }

  template <typename F>
  auto wrap(const YAML::Node& n, F f) const {
    try {
      return f();
    } catch (const SweepFileError&) {
      throw;
    } catch (const std::exception& e) {
      fail(n, e.what());
    }
  }

  std::filesystem::path path(const YAML::Node& n, const std::string& what) const {
    std::filesystem::path p = as<std::string>(n, what);
    return p.is_relative() && !base_.empty() ? base_ / p : p;
  }

  SweepFile parse(const YAML::Node& root) const {
    SweepFile f;
    SweepSpec& s = f.spec;
    // Defaults for omitted sweep axes.
    s.kv = {{16, 16}, {8, 8}, {4, 4}, {2, 2}};
    s.granularities = {Granularity::kPerTokenGroup};
    s.groups = {32};
    s.smoothing = {false};
    s.chunks = {std::nullopt};
    s.weights = {WeightChoice::kW16};
    bool task_vocab_set = false;

    mapping(root, "sweep file", {
      {"model", [&](const YAML::Node& n) {
        mapping(n, "model", {
          {"kind", [&](const YAML::Node& v) {
            const auto k = as<std::string>(v, "model.kind");
            if (k == "induction") s.model.kind = ModelSource::Kind::kInduction;
            else if (k == "file") s.model.kind = ModelSource::Kind::kWeightFile;
            else fail(v, fmt::format("model.kind '{}' must be induction or file", k));
          }},
          {"vocab", [&](const YAML::Node& v) { s.model.vocab = as<std::size_t>(v, "model.vocab"); }},
          {"seed", [&](const YAML::Node& v) {
            s.model.induction.seed = as<std::uint64_t>(v, "model.seed");
          }},
          {"path", [&](const YAML::Node& v) { s.model.weight_file = path(v, "model.path"); }},
        });
      }},
      {"task", [&](const YAML::Node& n) {
        mapping(n, "task", {
          {"length", [&](const YAML::Node& v) { s.task.length = as<std::size_t>(v, "task.length"); }},
          {"vocab", [&](const YAML::Node& v) {
            s.task.vocab = as<std::size_t>(v, "task.vocab");
            task_vocab_set = true;
          }},
          {"seeds", [&](const YAML::Node& v) { s.task.seeds = as<std::size_t>(v, "task.seeds"); }},
          {"seed", [&](const YAML::Node& v) { s.task.base_seed = as<std::uint64_t>(v, "task.seed"); }},
        });
      }},
      {"sweep", [&](const YAML::Node& n) {
        mapping(n, "sweep", {
          {"kv", [&](const YAML::Node& v) {
            s.kv.clear();
            list(v, "sweep.kv", [&](const YAML::Node& x) {
              s.kv.push_back(wrap(x, [&] { return parse_kv_pair(as<std::string>(x, "sweep.kv")); }));
            });
          }},
          {"granularity", [&](const YAML::Node& v) {
            s.granularities.clear();
            list(v, "sweep.granularity", [&](const YAML::Node& x) {
              s.granularities.push_back(
                  wrap(x, [&] { return parse_granularity(as<std::string>(x, "sweep.granularity")); }));
            });
          }},
          {"group", [&](const YAML::Node& v) {
            s.groups.clear();
            list(v, "sweep.group", [&](const YAML::Node& x) {
              const auto g = as<std::size_t>(x, "sweep.group");
              if (g != 32 && g != 64 && g != 128) fail(x, fmt::format("group {} not in {{32, 64, 128}}", g));
              s.groups.push_back(g);
            });
          }},
          {"smoothing", [&](const YAML::Node& v) {
            s.smoothing.clear();
            list(v, "sweep.smoothing", [&](const YAML::Node& x) {
              s.smoothing.push_back(as<bool>(x, "sweep.smoothing"));
            });
          }},
          {"chunk", [&](const YAML::Node& v) {
            s.chunks.clear();
            list(v, "sweep.chunk", [&](const YAML::Node& x) {
              if (x.IsScalar() && x.Scalar() == "full") {
                s.chunks.push_back(std::nullopt);
              } else {
                const auto c = as<std::size_t>(x, "sweep.chunk");
                if (c == 0) fail(x, "chunk must be positive or 'full'");
                s.chunks.push_back(c);
              }
            });
          }},
          {"weights", [&](const YAML::Node& v) {
            s.weights.clear();
            list(v, "sweep.weights", [&](const YAML::Node& x) {
              s.weights.push_back(
                  wrap(x, [&] { return parse_weight_choice(as<std::string>(x, "sweep.weights")); }));
            });
          }},
        });
      }},
      {"memory", [&](const YAML::Node& n) {
        mapping(n, "memory", {
          {"context", [&](const YAML::Node& v) {
            s.memory.context = as<std::uint64_t>(v, "memory.context");
          }},
          {"arch", [&](const YAML::Node& v) { s.memory.arch_file = path(v, "memory.arch"); }},
          {"activation_bytes", [&](const YAML::Node& v) {
            s.memory.activation_bytes = as<double>(v, "memory.activation_bytes");
          }},
          {"count_group_overhead", [&](const YAML::Node& v) {
            s.memory.count_group_overhead = as<bool>(v, "memory.count_group_overhead");
          }},
        });
      }},
      {"calibration_seed", [&](const YAML::Node& v) {
        s.calibration_seed = as<std::uint64_t>(v, "calibration_seed");
      }},
      {"output", [&](const YAML::Node& n) {
        mapping(n, "output", {
          {"dir", [&](const YAML::Node& v) { f.out_dir = path(v, "output.dir"); }},
          {"svg", [&](const YAML::Node& v) { f.svg = path(v, "output.svg"); }},
        });
      }},
      {"jobs", [&](const YAML::Node& v) {
        const auto j = as<std::size_t>(v, "jobs");
        if (j == 0) fail(v, "jobs must be positive");
        f.jobs = j;
      }},
    });
    if (!task_vocab_set && s.model.kind == ModelSource::Kind::kInduction) {
      s.task.vocab = s.model.vocab;
    }
    if (s.model.kind == ModelSource::Kind::kWeightFile && s.model.weight_file.empty()) {
      fail(root, "model.kind 'file' needs model.path");
    }
    wrap(root, [&] { s.validate(); });
    return f;
  }

 private:
  std::string origin_;
  std::filesystem::path base_;
};

}  // namespace

SweepFile parse_sweep_file(const std::string& text, const std::string& origin,
                           const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw SweepFileError(
        fmt::format("{}:{}:{}: {}", origin, e.mark.line + 1, e.mark.column + 1, e.msg),
        e.mark.line + 1, e.mark.column + 1);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  return Parser(origin, base_dir).parse(root);
}

SweepFile load_sweep_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SweepFileError(fmt::format("cannot open sweep file '{}'", path.string()), 0, 0);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_sweep_file(ss.str(), path.string(), path.parent_path());
}

}  // namespace kvpareto
