// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0
//
// Analytic inference memory: model + KV cache + peak activation, where the
// peak is the larger of the attention score buffer and the lm_head logits.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "kvpareto/model.hpp"

namespace kvpareto {

struct ArchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ArchSpec {
  std::string name;
  std::uint64_t param_count = 0;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t kv_heads = 0;
  std::size_t head_dim = 0;
  std::size_t vocab_size = 0;
  // Input and output embeddings share one matrix. Embeddings stay at 16 bits
  // under weight quantization.
  bool tied_embeddings = false;

  std::uint64_t embedding_params() const;
  void validate() const;
};

// YAML mapping with exactly the ArchSpec fields (tied_embeddings and source
// optional). Unknown keys and bad values throw ArchError with line:column.
ArchSpec load_arch(const std::filesystem::path& path);
ArchSpec parse_arch(const std::string& yaml_text, const std::string& origin = "<string>");

// Toy-model stand-in: every tensor counted, untied.
ArchSpec arch_from_model(const ModelConfig& cfg, const std::string& name = "toy");

enum class AttentionKind { kSdpa, kSdpaChunked, kFlash };

struct MemQuery {
  std::uint64_t context = 0;  // M
  std::uint64_t batch = 1;    // B
  int weight_bits = 16;
  std::size_t weight_group_size = 128;
  int k_bits = 16;
  int v_bits = 16;
  std::size_t kv_group_size = 32;
  bool k_smoothing = false;
  double activation_bytes = 2.0;  // s_act
  AttentionKind attention = AttentionKind::kSdpa;
  // Prefill chunk. Required for kSdpaChunked; with kFlash it only limits
  // the lm_head term (chunked prefill on top of a fused kernel).
  std::uint64_t chunk = 0;
  std::uint64_t block_q = 128;   // b_q
  std::uint64_t block_kv = 128;  // b_kv
  double flash_workspace = 0.0;  // delta, elements
  bool count_group_overhead = false;
  int scale_bits = 16;
  int zero_bits = 16;
  int mean_bits = 16;

  void validate() const;
};

struct MemoryProfile {
  double model_bytes = 0;
  double kv_bytes = 0;
  double mha_peak_bytes = 0;
  double lm_head_peak_bytes = 0;
  double peak_activation_bytes = 0;
  double total_bytes = 0;

  std::string breakdown() const;  // human-readable, GB with 1e9 bytes
};

// Bits per stored element including optional (scale, zero) overhead.
double effective_bits(int bits, std::size_t group_size, bool count_group_overhead,
                      int scale_bits = 16, int zero_bits = 16);

double model_bytes(const MemQuery& q, const ArchSpec& a);
double kv_bytes(const MemQuery& q, const ArchSpec& a);
double mha_peak(const MemQuery& q, const ArchSpec& a);
double lm_head_peak(const MemQuery& q, const ArchSpec& a);
MemoryProfile total_memory(const MemQuery& q, const ArchSpec& a);
double memory_reduction(const MemoryProfile& baseline, const MemoryProfile& optimized);

}  // namespace kvpareto
