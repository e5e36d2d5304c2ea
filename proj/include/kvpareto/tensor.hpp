// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvpareto {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericDomainError : std::domain_error {
  using std::domain_error::domain_error;
};

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 tensor. Always contiguous, no strides.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);
  Tensor(Shape shape, std::initializer_list<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // 2-D and 3-D element access, row-major.
  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Causal attention mask. Query row i (within the current block) sits at
// absolute position offset + i and may see keys j <= offset + i.
struct AttentionMask {
  enum class Kind { kCausal, kCausalWithOffset };
  Kind kind = Kind::kCausal;
  std::size_t offset = 0;

  static AttentionMask causal() { return {Kind::kCausal, 0}; }
  static AttentionMask causal_with_offset(std::size_t offset) {
    return {Kind::kCausalWithOffset, offset};
  }
  std::size_t effective_offset() const {
    return kind == Kind::kCausal ? 0 : offset;
  }
};

// [m x k] * [k x n]. Summation runs left to right over k for every output.
Tensor matmul(const Tensor& a, const Tensor& b);

// Numerically stable row softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);
void softmax_inplace(std::span<float> row);

// Scaled dot-product attention.
//   q: [h x m x d], k/v: [h_kv x n x d] with h % h_kv == 0 (query head i
//   reads kv head i / (h / h_kv)). Masked logits are set to the lowest finite
//   float before the softmax.
Tensor sdpa(const Tensor& q, const Tensor& k, const Tensor& v,
            const AttentionMask& mask);

// Concatenate 3-D tensors along axis 1 (e.g. [h x t_i x d] -> [h x sum t_i x d]).
Tensor concat_axis1(std::span<const Tensor> parts);

// Slice rows [begin, end) of axis 1 of a 3-D tensor.
Tensor slice_axis1(const Tensor& t, std::size_t begin, std::size_t end);

}  // namespace kvpareto
