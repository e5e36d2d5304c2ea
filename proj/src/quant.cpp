// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include <fmt/format.h>

namespace kvpareto {

std::string_view granularity_name(Granularity g) {
  switch (g) {
    case Granularity::kPerTokenGroup: return "per-token";
    case Granularity::kPerSequenceGroup: return "per-seq";
    case Granularity::kPerTensor: return "per-tensor";
  }
  return "?";
}

std::string_view granularity_short_name(Granularity g) {
  switch (g) {
    case Granularity::kPerTokenGroup: return "pt";
    case Granularity::kPerSequenceGroup: return "ps";
    case Granularity::kPerTensor: return "pten";
  }
  return "?";
}

Granularity parse_granularity(std::string_view name) {
  for (auto g : {Granularity::kPerTokenGroup, Granularity::kPerSequenceGroup,
                 Granularity::kPerTensor}) {
    if (name == granularity_name(g) || name == granularity_short_name(g)) return g;
  }
  throw LayoutError(fmt::format("unknown granularity '{}'", name));
}

void QuantSpec::validate() const {
  if (bits != 2 && bits != 4 && bits != 8 && bits != kPassThroughBits) {
    throw LayoutError(fmt::format("unsupported bit width {}", bits));
  }
  if (!is_pass_through() && granularity != Granularity::kPerTensor &&
      group_size == 0) {
    throw LayoutError("group_size must be positive");
  }
}

namespace {

// Largest float <= s carrying at most 16 significant bits.
float trim_scale(double s) {
  float f = static_cast<float>(s);
  if (static_cast<double>(f) > s) f = std::nextafter(f, 0.0f);
  auto bits = std::bit_cast<std::uint32_t>(f);
  bits &= ~std::uint32_t{0xFF};
  return std::bit_cast<float>(bits);
}

int round_half_even(double x) { return static_cast<int>(std::nearbyint(x)); }

void check_finite(std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericDomainError("quantization input is not finite");
  }
}

}  // namespace

QuantParams compute_qparams(std::span<const float> values, int bits) {
  if (values.empty()) throw NumericDomainError("compute_qparams: empty group");
  check_finite(values);
  const int qmin = -(1 << (bits - 1));
  const int qmax = (1 << (bits - 1)) - 1;
  auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  double lo = std::min(static_cast<double>(*lo_it), 0.0);
  double hi = std::max(static_cast<double>(*hi_it), 0.0);
  if (hi == lo) hi = lo + 1e-8;
  const float scale = trim_scale((hi - lo) / (qmax - qmin));
  const int zero = std::clamp(round_half_even(qmin - lo / scale), qmin, qmax);
  return {scale, zero};
}

std::vector<GroupRange> group_layout(const Shape& shape, const QuantSpec& spec) {
  spec.validate();
  const std::size_t n = numel(shape);
  std::vector<GroupRange> groups;
  if (n == 0) return groups;
  switch (spec.granularity) {
    case Granularity::kPerTensor:
      groups.push_back({0, n});
      break;
    case Granularity::kPerTokenGroup: {
      const std::size_t last = shape.empty() ? 1 : shape.back();
      if (last % spec.group_size != 0) {
        throw LayoutError(fmt::format(
            "per-token groups of {} do not divide head_dim {} of {}",
            spec.group_size, last, shape_str(shape)));
      }
      groups.reserve(n / spec.group_size);
      for (std::size_t b = 0; b < n; b += spec.group_size) {
        groups.push_back({b, spec.group_size});
      }
      break;
    }
    case Granularity::kPerSequenceGroup: {
      if (shape.size() != 3) {
        throw LayoutError(fmt::format(
            "per-sequence groups need a [heads x tokens x dim] tensor, got {}",
            shape_str(shape)));
      }
      const std::size_t heads = shape[0], tokens = shape[1], dim = shape[2];
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < tokens; t += spec.group_size) {
          const std::size_t len = std::min(spec.group_size, tokens - t);
          groups.push_back({(h * tokens + t) * dim, len * dim});
        }
      }
      break;
    }
  }
  return groups;
}

std::pair<Tensor, Tensor> smooth_k(const Tensor& k) {
  if (k.rank() != 3 || k.dim(1) == 0) {
    throw DimensionError(fmt::format("smooth_k expects [B x L x D] with L >= 1, got {}",
                                     shape_str(k.shape())));
  }
  const std::size_t b = k.dim(0), len = k.dim(1), d = k.dim(2);
  Tensor means({b, 1, d});
  Tensor centred = k;
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t di = 0; di < d; ++di) {
      double sum = 0.0;
      for (std::size_t i = 0; i < len; ++i) sum += k.at(bi, i, di);
      const float mean = static_cast<float>(sum / static_cast<double>(len));
      means.at(bi, 0, di) = mean;
      for (std::size_t i = 0; i < len; ++i) centred.at(bi, i, di) -= mean;
    }
  }
  return {std::move(centred), std::move(means)};
}

QuantizedBlock quantize(const Tensor& t, const QuantSpec& spec) {
  spec.validate();
  QuantizedBlock block;
  block.logical_shape = t.shape();
  block.spec = spec;
  if (spec.is_pass_through()) {
    block.raw = t.storage();
    return block;
  }
  check_finite(t.data());

  const Tensor* source = &t;
  Tensor centred;
  if (spec.smoothing) {
    auto [c, m] = smooth_k(t);
    centred = std::move(c);
    block.means = std::move(m);
    source = &centred;
  }

  const auto groups = group_layout(t.shape(), spec);
  const int qmin = spec.q_min(), qmax = spec.q_max();
  block.codes.resize(t.size());
  block.params.reserve(groups.size());
  const auto values = source->data();
  for (const auto& g : groups) {
    const auto slice = values.subspan(g.begin, g.length);
    const QuantParams p = compute_qparams(slice, spec.bits);
    block.params.push_back(p);
    for (std::size_t i = 0; i < g.length; ++i) {
      const int q = round_half_even(static_cast<double>(slice[i]) / p.scale) + p.zero_point;
      block.codes[g.begin + i] = static_cast<std::int8_t>(std::clamp(q, qmin, qmax));
    }
  }
  return block;
}

Tensor dequantize(const QuantizedBlock& block) {
  if (block.spec.is_pass_through()) return Tensor(block.logical_shape, block.raw);
  Tensor out(block.logical_shape);
  const auto groups = group_layout(block.logical_shape, block.spec);
  auto values = out.data();
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const QuantParams p = block.params[gi];
    for (std::size_t i = g.begin; i < g.begin + g.length; ++i) {
      values[i] = static_cast<float>(block.codes[i] - p.zero_point) * p.scale;
    }
  }
  if (block.means) {
    const Tensor& m = *block.means;
    const std::size_t b = out.dim(0), len = out.dim(1), d = out.dim(2);
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t di = 0; di < d; ++di) out.at(bi, i, di) += m.at(bi, 0, di);
      }
    }
  }
  return out;
}

Tensor qdq(const Tensor& t, const QuantSpec& spec) { return dequantize(quantize(t, spec)); }

std::vector<std::uint8_t> pack_codes(std::span<const std::int8_t> codes, int bits) {
  if (bits != 2 && bits != 4 && bits != 8) {
    throw LayoutError(fmt::format("cannot pack {}-bit codes", bits));
  }
  const int per_byte = 8 / bits;
  const int qmin = -(1 << (bits - 1));
  const unsigned mask = (1u << bits) - 1u;
  std::vector<std::uint8_t> out((codes.size() + per_byte - 1) / per_byte, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const unsigned u = static_cast<unsigned>(codes[i] - qmin) & mask;
    out[i / per_byte] |= static_cast<std::uint8_t>(u << ((i % per_byte) * bits));
  }
  return out;
}

std::vector<std::int8_t> unpack_codes(std::span<const std::uint8_t> packed,
                                      int bits, std::size_t count) {
  if (bits != 2 && bits != 4 && bits != 8) {
    throw LayoutError(fmt::format("cannot unpack {}-bit codes", bits));
  }
  const std::size_t per_byte = static_cast<std::size_t>(8 / bits);
  if (packed.size() * per_byte < count) {
    throw LayoutError("packed buffer too short");
  }
  const int qmin = -(1 << (bits - 1));
  const unsigned mask = (1u << bits) - 1u;
  std::vector<std::int8_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned u = (packed[i / per_byte] >> ((i % per_byte) * bits)) & mask;
    out[i] = static_cast<std::int8_t>(static_cast<int>(u) + qmin);
  }
  return out;
}

}  // namespace kvpareto
