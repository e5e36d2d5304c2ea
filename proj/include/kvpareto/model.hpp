// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvpareto/kvcache.hpp"
#include "kvpareto/tensor.hpp"

namespace kvpareto {

// Decoder-only transformer shape. hidden == heads * head_dim; ffn_dim == 0
// builds an attention-only model.
struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t kv_heads = 4;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 0;
  std::size_t vocab_size = 64;
  std::size_t max_positions = 512;

  std::size_t hidden() const { return heads * head_dim; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Linear layers use y = x * W with W stored [in x out].
struct LayerWeights {
  Tensor attn_norm;  // [hidden]
  Tensor q;          // [hidden x heads*head_dim]
  Tensor k;          // [hidden x kv_heads*head_dim]
  Tensor v;          // [hidden x kv_heads*head_dim]
  Tensor o;          // [heads*head_dim x hidden]
  Tensor ffn_norm;   // [hidden], empty when ffn_dim == 0
  Tensor up;         // [hidden x ffn_dim]
  Tensor down;       // [ffn_dim x hidden]
};

struct Weights {
  ModelConfig config;
  Tensor embed;       // [vocab x hidden]
  Tensor pos;         // [max_positions x hidden], additive
  Tensor final_norm;  // [hidden]
  Tensor lm_head;     // [hidden x vocab]
  std::vector<LayerWeights> layers;

  // Throws DimensionError naming the first inconsistent tensor.
  void validate() const;
};

enum class WeightMode { kFullPrecision, kQuantized4 };

struct RunConfig {
  std::optional<std::size_t> chunk_size;  // nullopt: single-pass prefill
  KVCacheConfig kv_cache;
  WeightMode weight_mode = WeightMode::kFullPrecision;
};

// Build an empty cache sized for the model.
KVCacheConfig cache_config_for(const ModelConfig& model, const QuantSpec& k_spec,
                               const QuantSpec& v_spec);

enum class LogitsMode { kLastPosition, kAllPositions };

// Called with the rows fed into each linear layer: "attn.in" (shared by q, k,
// v), "attn.o", "ffn.up", "ffn.down".
using LinearInputObserver =
    std::function<void(std::size_t layer, std::string_view name, const Tensor& input)>;

// Prefill over `tokens`, ceil(M / c) chunks at a time. Each chunk appends its
// K/V to the cache and then attends over the dequantized cache so far with a
// causal offset. Returns [M x vocab] for kAllPositions, [1 x vocab] otherwise.
Tensor forward_prefill(const Weights& w, const RunConfig& run,
                       std::span<const int> tokens, KVCache& cache,
                       LogitsMode mode = LogitsMode::kLastPosition,
                       const LinearInputObserver* observe = nullptr);

// One autoregressive step at position cache.token_count(). Returns [1 x vocab].
Tensor decode_step(const Weights& w, const RunConfig& run, int token, KVCache& cache);

int argmax(std::span<const float> row);

// Greedy continuation: prefill the prompt, then decode `steps` tokens.
std::vector<int> greedy_generate(const Weights& w, const RunConfig& run,
                                 std::span<const int> prompt, std::size_t steps);

// Seeded random weights with ~1/sqrt(fan_in) scaling.
Weights random_weights(const ModelConfig& cfg, std::uint64_t seed);

// Knobs for the hand-built induction transformer.
struct InductionTemplate {
  std::size_t heads = 4;
  std::size_t kv_heads = 2;
  std::size_t head_dim = 64;
  std::size_t max_positions = 640;
  std::size_t pos_frequencies = 24;  // sinusoid pairs in the positional table
  float attention_margin = 25.0f;    // minimum logit gap for the target key
  float key_outlier = 4.0f;          // magnitude of constant outlier key channels
  std::size_t key_outlier_channels = 4;
  float output_scale = 10.0f;
  std::uint64_t seed = 0;            // rotations of the head spaces
};

// Two-layer attention-only transformer implementing an induction circuit.
// Layer 0 holds a previous-token head (positional code matching); layer 1
// matches the current token against the previous-token channel and copies
// the successor. For a token with exactly one earlier occurrence, the argmax
// of the next-token logits is the token that followed that occurrence.
//
// Head spaces are randomly rotated so that K and V vectors are dense, and a
// constant outlier is added to a few key channels. Both leave exact-arithmetic
// attention unchanged.
Weights build_induction_model(std::size_t vocab, const InductionTemplate& tmpl = {});

// Gap between the matched positional score and the best competitor over
// all offsets in [1, max_positions] for the frequencies the builder picks.
double positional_gap(const InductionTemplate& tmpl);

}  // namespace kvpareto
