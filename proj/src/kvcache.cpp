// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/kvcache.hpp"

#include <fmt/format.h>

namespace kvpareto {

namespace {

bool uses_residual(const KVCacheConfig& c) {
  auto per_seq = [](const QuantSpec& s) {
    return !s.is_pass_through() && s.granularity == Granularity::kPerSequenceGroup;
  };
  return per_seq(c.k_spec) || per_seq(c.v_spec);
}

std::size_t seal_group(const KVCacheConfig& c) {
  return c.k_spec.is_pass_through() ? c.v_spec.group_size : c.k_spec.group_size;
}

std::uint64_t block_bits(const QuantizedBlock& b, const StorageAccounting& acct) {
  const std::uint64_t n = b.element_count();
  if (b.spec.is_pass_through()) return n * acct.full_precision_bits;
  std::uint64_t bits = n * static_cast<std::uint64_t>(b.spec.bits);
  if (acct.count_group_overhead) {
    bits += b.group_count() * static_cast<std::uint64_t>(acct.scale_bits + acct.zero_bits);
    if (b.means) bits += b.means->size() * static_cast<std::uint64_t>(acct.mean_bits);
  }
  return bits;
}

}  // namespace

void KVCacheConfig::validate() const {
  k_spec.validate();
  v_spec.validate();
  if (layers == 0 || heads_kv == 0 || head_dim == 0) {
    throw DimensionError("KV cache dimensions must be positive");
  }
  if (!k_spec.is_pass_through() && !v_spec.is_pass_through() &&
      (k_spec.granularity != v_spec.granularity ||
       k_spec.group_size != v_spec.group_size)) {
    throw LayoutError("K and V specs must share granularity and group size");
  }
  for (const QuantSpec* s : {&k_spec, &v_spec}) {
    if (!s->is_pass_through() && s->granularity == Granularity::kPerTokenGroup &&
        head_dim % s->group_size != 0) {
      throw LayoutError(fmt::format("head_dim {} not divisible by group size {}",
                                    head_dim, s->group_size));
    }
  }
}

KVCache::KVCache(KVCacheConfig config) : config_(std::move(config)) {
  config_.validate();
  layers_.resize(config_.layers);
  for (auto& l : layers_) {
    l.residual_k = Tensor({config_.heads_kv, 0, config_.head_dim});
    l.residual_v = Tensor({config_.heads_kv, 0, config_.head_dim});
  }
}

KVCache::Layer& KVCache::layer_at(std::size_t layer) {
  if (layer >= layers_.size()) {
    throw std::out_of_range(fmt::format("layer {} out of range ({} layers)", layer,
                                        layers_.size()));
  }
  return layers_[layer];
}

const KVCache::Layer& KVCache::layer_at(std::size_t layer) const {
  return const_cast<KVCache*>(this)->layer_at(layer);
}

void KVCache::seal(Layer& layer, const Tensor& k, const Tensor& v) {
  Segment seg;
  seg.k = quantize(k, config_.k_spec);
  seg.v = quantize(v, config_.v_spec);
  seg.begin = layer.sealed_tokens;
  seg.tokens = k.dim(1);
  seg.k_deq = dequantize(seg.k);
  seg.v_deq = dequantize(seg.v);
  layer.sealed_tokens += seg.tokens;
  layer.segments.push_back(std::move(seg));
}

void KVCache::append(std::size_t layer_index, const Tensor& k_chunk,
                     const Tensor& v_chunk) {
  Layer& layer = layer_at(layer_index);
  auto check = [&](const Tensor& t, const char* what) {
    if (t.rank() != 3 || t.dim(0) != config_.heads_kv || t.dim(2) != config_.head_dim) {
      throw DimensionError(fmt::format("{} chunk {} does not match [{} x t x {}]", what,
                                       shape_str(t.shape()), config_.heads_kv,
                                       config_.head_dim));
    }
  };
  check(k_chunk, "K");
  check(v_chunk, "V");
  if (k_chunk.dim(1) != v_chunk.dim(1)) {
    throw DimensionError("K and V chunks differ in token count");
  }
  if (k_chunk.dim(1) == 0) return;

  if (!uses_residual(config_)) {
    seal(layer, k_chunk, v_chunk);
    return;
  }

  const Tensor parts_k[] = {layer.residual_k, k_chunk};
  const Tensor parts_v[] = {layer.residual_v, v_chunk};
  Tensor all_k = concat_axis1(parts_k);
  Tensor all_v = concat_axis1(parts_v);
  const std::size_t g = seal_group(config_);
  const std::size_t n = all_k.dim(1);
  const std::size_t sealable = n - n % g;
  if (sealable > 0) {
    seal(layer, slice_axis1(all_k, 0, sealable), slice_axis1(all_v, 0, sealable));
  }
  layer.residual_k = slice_axis1(all_k, sealable, n);
  layer.residual_v = slice_axis1(all_v, sealable, n);
}

std::pair<Tensor, Tensor> KVCache::read(std::size_t layer_index) const {
  const Layer& layer = layer_at(layer_index);
  std::vector<Tensor> ks, vs;
  ks.reserve(layer.segments.size() + 1);
  vs.reserve(layer.segments.size() + 1);
  for (const auto& s : layer.segments) {
    ks.push_back(s.k_deq);
    vs.push_back(s.v_deq);
  }
  ks.push_back(layer.residual_k);
  vs.push_back(layer.residual_v);
  return {concat_axis1(ks), concat_axis1(vs)};
}

std::size_t KVCache::token_count(std::size_t layer) const {
  const Layer& l = layer_at(layer);
  return l.sealed_tokens + l.residual_k.dim(1);
}

std::size_t KVCache::segment_count(std::size_t layer) const {
  return layer_at(layer).segments.size();
}

std::size_t KVCache::residual_tokens(std::size_t layer) const {
  return layer_at(layer).residual_k.dim(1);
}

bool KVCache::empty() const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (token_count(i) != 0) return false;
  }
  return true;
}

std::uint64_t KVCache::stored_bits(const StorageAccounting& acct) const {
  std::uint64_t bits = 0;
  for (const auto& layer : layers_) {
    for (const auto& s : layer.segments) {
      bits += block_bits(s.k, acct) + block_bits(s.v, acct);
    }
    bits += (layer.residual_k.size() + layer.residual_v.size()) *
            static_cast<std::uint64_t>(acct.full_precision_bits);
  }
  return bits;
}

}  // namespace kvpareto
