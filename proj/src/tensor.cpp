// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace kvpareto {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, "x"));
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw DimensionError(fmt::format("shape {} needs {} values, got {}",
                                     shape_str(shape_), numel(shape_),
                                     data_.size()));
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<float> data)
    : Tensor(std::move(shape), std::vector<float>(data)) {}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](float x) { return std::isfinite(x); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError(fmt::format("matmul: cannot multiply {} by {}",
                                     shape_str(a.shape()), shape_str(b.shape())));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.data().data();
  // i-k-j order: each out(i, j) accumulates over k strictly in increasing
  // order, which keeps results independent of m and of the other rows.
  for (std::size_t i = 0; i < m; ++i) {
    float* orow = po + i * n;
    const float* arow = pa + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      const float* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

void softmax_inplace(std::span<float> row) {
  if (row.empty()) return;
  float mx = row[0];
  for (float x : row) mx = std::max(mx, x);
  float sum = 0.0f;
  for (float& x : row) {
    x = std::exp(x - mx);
    sum += x;
  }
  const float inv = 1.0f / sum;
  for (float& x : row) x *= inv;
}

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("softmax_rows expects a 2-D tensor");
  Tensor out = x;
  const std::size_t n = x.dim(1);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    softmax_inplace(out.data().subspan(i * n, n));
  }
  return out;
}

Tensor sdpa(const Tensor& q, const Tensor& k, const Tensor& v,
            const AttentionMask& mask) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw DimensionError("sdpa expects 3-D [heads x tokens x dim] tensors");
  }
  const std::size_t h = q.dim(0), m = q.dim(1), d = q.dim(2);
  const std::size_t hkv = k.dim(0), n = k.dim(1);
  if (hkv == 0 || h % hkv != 0 || v.dim(0) != hkv) {
    throw DimensionError(fmt::format("sdpa: head mismatch q {} k {} v {}",
                                     shape_str(q.shape()), shape_str(k.shape()),
                                     shape_str(v.shape())));
  }
  if (k.dim(2) != d || v.dim(2) != d || v.dim(1) != n) {
    throw DimensionError(fmt::format("sdpa: head-dim mismatch q {} k {} v {}",
                                     shape_str(q.shape()), shape_str(k.shape()),
                                     shape_str(v.shape())));
  }
  const std::size_t group = h / hkv;
  const std::size_t offset = mask.effective_offset();
  const float scale = 1.0f / std::sqrt(static_cast<float>(d));
  constexpr float kMasked = std::numeric_limits<float>::lowest();

  Tensor out({h, m, d});
  std::vector<float> logits(n);
  for (std::size_t head = 0; head < h; ++head) {
    const std::size_t kvh = head / group;
    const float* kbase = k.data().data() + kvh * n * d;
    const float* vbase = v.data().data() + kvh * n * d;
    for (std::size_t i = 0; i < m; ++i) {
      const float* qrow = q.data().data() + (head * m + i) * d;
      const std::size_t visible = std::min(n, offset + i + 1);
      for (std::size_t j = 0; j < visible; ++j) {
        const float* krow = kbase + j * d;
        float dot = 0.0f;
        for (std::size_t c = 0; c < d; ++c) dot += qrow[c] * krow[c];
        logits[j] = dot * scale;
      }
      std::fill(logits.begin() + visible, logits.end(), kMasked);
      // Masked entries exp to exactly 0, so normalizing the visible prefix
      // gives the same bits as a softmax over the whole row.
      softmax_inplace(std::span<float>(logits).first(visible));
      float* orow = out.data().data() + (head * m + i) * d;
      for (std::size_t j = 0; j < visible; ++j) {
        const float w = logits[j];
        const float* vrow = vbase + j * d;
        for (std::size_t c = 0; c < d; ++c) orow[c] += w * vrow[c];
      }
    }
  }
  return out;
}

Tensor concat_axis1(std::span<const Tensor> parts) {
  if (parts.empty()) return Tensor();
  const std::size_t h = parts[0].dim(0), d = parts[0].dim(2);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.dim(0) != h || p.dim(2) != d) {
      throw DimensionError(fmt::format("concat_axis1: {} incompatible with [{}x?x{}]",
                                       shape_str(p.shape()), h, d));
    }
    total += p.dim(1);
  }
  Tensor out({h, total, d});
  for (std::size_t head = 0; head < h; ++head) {
    float* dst = out.data().data() + head * total * d;
    for (const auto& p : parts) {
      const std::size_t t = p.dim(1);
      const float* src = p.data().data() + head * t * d;
      std::copy(src, src + t * d, dst);
      dst += t * d;
    }
  }
  return out;
}

Tensor slice_axis1(const Tensor& t, std::size_t begin, std::size_t end) {
  if (t.rank() != 3 || begin > end || end > t.dim(1)) {
    throw DimensionError(fmt::format("slice_axis1: [{}, {}) out of {}", begin,
                                     end, shape_str(t.shape())));
  }
  const std::size_t h = t.dim(0), n = t.dim(1), d = t.dim(2), len = end - begin;
  Tensor out({h, len, d});
  for (std::size_t head = 0; head < h; ++head) {
    const float* src = t.data().data() + (head * n + begin) * d;
    std::copy(src, src + len * d, out.data().data() + head * len * d);
  }
  return out;
}

}  // namespace kvpareto
