// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kvpareto/tensor.hpp"

namespace kvpareto {

struct LayoutError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Partition sharing one (scale, zero point) pair.
//   kPerTokenGroup:    contiguous groups of group_size along the last axis.
//   kPerSequenceGroup: per head, group_size consecutive tokens x all dims of a
//                      [heads x tokens x dim] tensor; a trailing partial group
//                      gets its own parameters.
//   kPerTensor:        one pair for the whole tensor.
enum class Granularity { kPerTokenGroup, kPerSequenceGroup, kPerTensor };

std::string_view granularity_name(Granularity g);        // "per-token", ...
std::string_view granularity_short_name(Granularity g);  // "pt", "ps", "pten"
Granularity parse_granularity(std::string_view name);

// Signed asymmetric round-to-nearest (half to even) recipe. bits == 16 is
// the pass-through spec: values are stored verbatim.
struct QuantSpec {
  int bits = 8;
  Granularity granularity = Granularity::kPerTokenGroup;
  std::size_t group_size = 32;
  bool smoothing = false;

  static constexpr int kPassThroughBits = 16;
  static QuantSpec pass_through() {
    return {kPassThroughBits, Granularity::kPerTensor, 0, false};
  }
  bool is_pass_through() const { return bits == kPassThroughBits; }
  int q_min() const { return -(1 << (bits - 1)); }
  int q_max() const { return (1 << (bits - 1)) - 1; }

  // Throws LayoutError for unsupported bit widths or group sizes.
  void validate() const;
  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

struct QuantParams {
  float scale = 1.0f;
  int zero_point = 0;
  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

// Scale and zero point for one group.
//
// The range is widened to include zero, a degenerate range is widened by
// 1e-8, and the scale is rounded down to 16 significant bits. The last step
// makes (code - zero) * scale exact in float, so quantizing an already
// dequantized group reproduces the same scale, zero point and codes bit for
// bit.
QuantParams compute_qparams(std::span<const float> values, int bits);

// Contiguous [begin, begin + length) ranges of the flattened tensor, one per
// group, in storage order.
struct GroupRange {
  std::size_t begin = 0;
  std::size_t length = 0;
};
std::vector<GroupRange> group_layout(const Shape& shape, const QuantSpec& spec);

struct QuantizedBlock {
  Shape logical_shape;
  QuantSpec spec;
  std::vector<std::int8_t> codes;   // one per element, unpacked
  std::vector<QuantParams> params;  // one per group, storage order
  std::optional<Tensor> means;      // [heads x 1 x dim] when smoothing was applied
  std::vector<float> raw;           // pass-through payload

  std::size_t element_count() const { return numel(logical_shape); }
  std::size_t group_count() const { return params.size(); }
};

QuantizedBlock quantize(const Tensor& t, const QuantSpec& spec);
Tensor dequantize(const QuantizedBlock& block);
Tensor qdq(const Tensor& t, const QuantSpec& spec);

// Mean-centres K over the sequence axis: K~[b,i,d] = K[b,i,d] - mean_j K[b,j,d].
// Returns the centred tensor and the [B x 1 x D] means that were subtracted.
std::pair<Tensor, Tensor> smooth_k(const Tensor& k);

// Optional dense storage: codes offset by -q_min and packed little-endian,
// 8 / bits codes per byte.
std::vector<std::uint8_t> pack_codes(std::span<const std::int8_t> codes, int bits);
std::vector<std::int8_t> unpack_codes(std::span<const std::uint8_t> packed,
                                      int bits, std::size_t count);

}  // namespace kvpareto
