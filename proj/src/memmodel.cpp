// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/memmodel.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

namespace kvpareto {

std::uint64_t ArchSpec::embedding_params() const {
  return static_cast<std::uint64_t>(vocab_size) * heads * head_dim *
         (tied_embeddings ? 1u : 2u);
}

void ArchSpec::validate() const {
  if (param_count == 0 || layers == 0 || heads == 0 || kv_heads == 0 || head_dim == 0 ||
      vocab_size == 0) {
    throw ArchError(fmt::format("arch '{}': all counts must be positive", name));
  }
  if (heads % kv_heads != 0) {
    throw ArchError(fmt::format("arch '{}': heads {} not a multiple of kv_heads {}", name,
                                heads, kv_heads));
  }
  if (embedding_params() > param_count) {
    throw ArchError(fmt::format("arch '{}': embeddings exceed param_count", name));
  }
}

namespace {

std::string where(const std::string& origin, const YAML::Mark& m) {
  return fmt::format("{}:{}:{}", origin, m.line + 1, m.column + 1);
}

template <typename T>
T scalar(const YAML::Node& n, const std::string& key, const std::string& origin) {
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ArchError(fmt::format("{}: bad value for '{}'", where(origin, n.Mark()), key));
  }
}

}  // namespace

ArchSpec parse_arch(const std::string& text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ArchError(fmt::format("{}: {}", where(origin, e.mark), e.msg));
  }
  if (!root.IsMap()) throw ArchError(fmt::format("{}: expected a mapping", origin));
  static const std::set<std::string> known{"name",     "param_count", "layers",
                                           "heads",    "kv_heads",    "head_dim",
                                           "vocab_size", "tied_embeddings", "source"};
  static const std::set<std::string> required{"name",     "param_count", "layers", "heads",
                                              "kv_heads", "head_dim",    "vocab_size"};
  ArchSpec a;
  std::set<std::string> seen;
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (!known.contains(key)) {
      throw ArchError(fmt::format("{}: unknown key '{}'", where(origin, kv.first.Mark()), key));
    }
    seen.insert(key);
    const YAML::Node& v = kv.second;
    if (key == "name") a.name = scalar<std::string>(v, key, origin);
    else if (key == "param_count") a.param_count = scalar<std::uint64_t>(v, key, origin);
    else if (key == "layers") a.layers = scalar<std::size_t>(v, key, origin);
    else if (key == "heads") a.heads = scalar<std::size_t>(v, key, origin);
    else if (key == "kv_heads") a.kv_heads = scalar<std::size_t>(v, key, origin);
    else if (key == "head_dim") a.head_dim = scalar<std::size_t>(v, key, origin);
    else if (key == "vocab_size") a.vocab_size = scalar<std::size_t>(v, key, origin);
    else if (key == "tied_embeddings") a.tied_embeddings = scalar<bool>(v, key, origin);
  }
  for (const auto& r : required) {
    if (!seen.contains(r)) throw ArchError(fmt::format("{}: missing key '{}'", origin, r));
  }
  a.validate();
  return a;
}

ArchSpec load_arch(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArchError(fmt::format("cannot open arch file '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_arch(ss.str(), path.string());
}

ArchSpec arch_from_model(const ModelConfig& cfg, const std::string& name) {
  const std::uint64_t h = cfg.hidden(), qd = cfg.heads * cfg.head_dim,
                      kvd = cfg.kv_heads * cfg.head_dim;
  std::uint64_t per_layer = h + h * qd + 2 * h * kvd + qd * h;
  if (cfg.ffn_dim > 0) per_layer += h + 2 * h * cfg.ffn_dim;
  ArchSpec a;
  a.name = name;
  a.param_count = 2 * cfg.vocab_size * h + cfg.max_positions * h + h + cfg.layers * per_layer;
  a.layers = cfg.layers;
  a.heads = cfg.heads;
  a.kv_heads = cfg.kv_heads;
  a.head_dim = cfg.head_dim;
  a.vocab_size = cfg.vocab_size;
  a.tied_embeddings = false;
  return a;
}

void MemQuery::validate() const {
  auto bits_ok = [](int b) { return b == 2 || b == 4 || b == 8 || b == 16; };
  if (!bits_ok(k_bits) || !bits_ok(v_bits)) {
    throw std::invalid_argument(fmt::format("kv bits k{} v{} not in {{2,4,8,16}}", k_bits, v_bits));
  }
  if (weight_bits < 1 || weight_bits > 16) {
    throw std::invalid_argument(fmt::format("weight bits {} out of range", weight_bits));
  }
  if (batch == 0) throw std::invalid_argument("batch must be positive");
  if (attention == AttentionKind::kSdpaChunked && (chunk == 0 || chunk > context)) {
    throw std::invalid_argument(
        fmt::format("chunk {} must be in [1, context {}]", chunk, context));
  }
  if (attention == AttentionKind::kFlash && (block_q == 0 || block_kv == 0)) {
    throw std::invalid_argument("flash block sizes must be positive");
  }
  if (count_group_overhead && (weight_group_size == 0 || kv_group_size == 0)) {
    throw std::invalid_argument("group sizes must be positive");
  }
}

double effective_bits(int bits, std::size_t group_size, bool count_group_overhead,
                      int scale_bits, int zero_bits) {
  if (bits >= 16 || !count_group_overhead) return bits;
  return bits + static_cast<double>(scale_bits + zero_bits) / static_cast<double>(group_size);
}

namespace {

// Tokens processed by one forward pass during prefill.
std::uint64_t pass_tokens(const MemQuery& q) {
  if (q.chunk > 0 && q.attention != AttentionKind::kSdpa) return std::min(q.chunk, q.context);
  return q.context;
}

}  // namespace

double model_bytes(const MemQuery& q, const ArchSpec& a) {
  const double emb = static_cast<double>(a.embedding_params());
  const double rest = static_cast<double>(a.param_count) - emb;
  const double wb = effective_bits(q.weight_bits, q.weight_group_size, q.count_group_overhead,
                                   q.scale_bits, q.zero_bits);
  return (rest * wb + emb * 16.0) / 8.0;
}

double kv_bytes(const MemQuery& q, const ArchSpec& a) {
  const double n = static_cast<double>(q.batch) * static_cast<double>(a.kv_heads) *
                   static_cast<double>(q.context) * static_cast<double>(a.head_dim) *
                   static_cast<double>(a.layers);
  double bits = 0.0;
  for (int b : {q.k_bits, q.v_bits}) {
    bits += n * b;
    if (b < 16 && q.count_group_overhead) {
      bits += n * (q.scale_bits + q.zero_bits) / static_cast<double>(q.kv_group_size);
    }
  }
  if (q.k_smoothing && q.k_bits < 16 && q.count_group_overhead && q.context > 0) {
    // One mean vector per head and layer for every sealed segment.
    const std::uint64_t c = pass_tokens(q);
    const double segments = static_cast<double>((q.context + c - 1) / c);
    bits += segments * static_cast<double>(q.batch * a.kv_heads * a.head_dim * a.layers) *
            q.mean_bits;
  }
  return bits / 8.0;
}

double mha_peak(const MemQuery& q, const ArchSpec& a) {
  const double s = q.activation_bytes * static_cast<double>(q.batch);
  const double m = static_cast<double>(q.context);
  switch (q.attention) {
    case AttentionKind::kSdpa:
      return static_cast<double>(a.heads) * m * m * s;
    case AttentionKind::kSdpaChunked:
      return static_cast<double>(a.heads) * static_cast<double>(q.chunk) * m * s;
    case AttentionKind::kFlash: {
      const double bq = static_cast<double>(q.block_q), bk = static_cast<double>(q.block_kv);
      return (bq * bq + 2.0 * bk * bk + q.flash_workspace) * s;
    }
  }
  return 0.0;
}

double lm_head_peak(const MemQuery& q, const ArchSpec& a) {
  return static_cast<double>(pass_tokens(q)) * static_cast<double>(a.vocab_size) *
         q.activation_bytes * static_cast<double>(q.batch);
}

MemoryProfile total_memory(const MemQuery& q, const ArchSpec& a) {
  q.validate();
  a.validate();
  MemoryProfile p;
  p.model_bytes = model_bytes(q, a);
  p.kv_bytes = kv_bytes(q, a);
  p.mha_peak_bytes = mha_peak(q, a);
  p.lm_head_peak_bytes = lm_head_peak(q, a);
  p.peak_activation_bytes = std::max(p.mha_peak_bytes, p.lm_head_peak_bytes);
  p.total_bytes = p.model_bytes + p.kv_bytes + p.peak_activation_bytes;
  return p;
}

double memory_reduction(const MemoryProfile& baseline, const MemoryProfile& optimized) {
  if (baseline.total_bytes <= 0.0) throw std::invalid_argument("baseline total must be positive");
  return 100.0 * (1.0 - optimized.total_bytes / baseline.total_bytes);
}

std::string MemoryProfile::breakdown() const {
  auto gb = [](double b) { return b / 1e9; };
  return fmt::format(
      "model {:.3f} GB + kv {:.3f} GB + peak activation {:.3f} GB "
      "(mha {:.3f}, lm_head {:.3f}) = {:.3f} GB",
      gb(model_bytes), gb(kv_bytes), gb(peak_activation_bytes), gb(mha_peak_bytes),
      gb(lm_head_peak_bytes), gb(total_bytes));
}

}  // namespace kvpareto
