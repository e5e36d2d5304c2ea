// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "kvpareto/quant.hpp"
#include "kvpareto/tensor.hpp"

namespace kvpareto {

// K and V may differ in bits (e.g. k8v2) but share granularity, group size.
struct KVCacheConfig {
  QuantSpec k_spec = QuantSpec::pass_through();
  QuantSpec v_spec = QuantSpec::pass_through();
  std::size_t layers = 1;
  std::size_t heads_kv = 1;
  std::size_t head_dim = 1;

  void validate() const;
};

// How stored bytes are charged. Element payloads always use their logical
// bit width; group parameters and smoothing means are metadata charged only
// when count_group_overhead is set. Pass-through and residual tokens are
// charged at full_precision_bits.
struct StorageAccounting {
  bool count_group_overhead = false;
  int scale_bits = 16;
  int zero_bits = 16;
  int mean_bits = 16;
  int full_precision_bits = 16;
};

// Append-only per-layer KV store. Each append quantizes K and V into a sealed
// segment that never changes afterwards. Under per-sequence grouping the
// trailing tokens that do not fill a whole group wait in a full-precision
// residual tail and are sealed once enough tokens arrive.
//
// Single writer; move between threads between calls only.
class KVCache {
 public:
  explicit KVCache(KVCacheConfig config);

  const KVCacheConfig& config() const { return config_; }

  // k_chunk, v_chunk: [heads_kv x t x head_dim].
  void append(std::size_t layer, const Tensor& k_chunk, const Tensor& v_chunk);

  // Dequantized sealed segments in append order, then residual tokens
  // verbatim: two [heads_kv x N x head_dim] tensors.
  std::pair<Tensor, Tensor> read(std::size_t layer) const;

  // Tokens stored in layer 0 (identical across layers once every layer has
  // seen the same appends).
  std::size_t token_count() const { return token_count(0); }
  std::size_t token_count(std::size_t layer) const;
  std::size_t segment_count(std::size_t layer) const;
  std::size_t residual_tokens(std::size_t layer) const;
  bool empty() const;

  std::uint64_t stored_bits(const StorageAccounting& acct = {}) const;
  double stored_bytes(const StorageAccounting& acct = {}) const {
    return static_cast<double>(stored_bits(acct)) / 8.0;
  }

 private:
  struct Segment {
    QuantizedBlock k;
    QuantizedBlock v;
    std::size_t begin = 0;
    std::size_t tokens = 0;
    // Dequantized once at seal time; segments are immutable.
    Tensor k_deq;
    Tensor v_deq;
  };
  struct Layer {
    std::vector<Segment> segments;
    std::size_t sealed_tokens = 0;
    Tensor residual_k;  // [heads_kv x r x head_dim], r < group_size
    Tensor residual_v;
  };

  void seal(Layer& layer, const Tensor& k, const Tensor& v);
  Layer& layer_at(std::size_t layer);
  const Layer& layer_at(std::size_t layer) const;

  KVCacheConfig config_;
  std::vector<Layer> layers_;
};

}  // namespace kvpareto
