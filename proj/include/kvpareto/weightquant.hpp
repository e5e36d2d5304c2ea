// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0
//
// 4-bit weight-only quantization of the linear layers (w4a16). Codes are
// unsigned [0, 2^bits - 1] with an asymmetric zero point, one (scale, zero)
// pair per group of group_size consecutive input channels of one output
// column. The activation-aware variant searches per-input-channel scales
// s_c = mean|x_c|^alpha over a grid of alpha, folds them into the weights
// before rounding and folds them back out afterwards.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kvpareto/model.hpp"
#include "kvpareto/quant.hpp"

namespace kvpareto {

enum class WeightScaling { kNone, kActivationAware };

std::vector<double> default_alpha_grid();  // 0, 0.125, ..., 1

struct WeightQuantSpec {
  int bits = 4;
  std::size_t group_size = 128;
  WeightScaling scaling = WeightScaling::kNone;
  std::vector<double> alpha_grid = default_alpha_grid();

  int code_max() const { return (1 << bits) - 1; }
  void validate() const;
};

// Unsigned view of the quant module's signed parameters. Codes are shifted by
// 2^(bits-1); dequantized values are unchanged.
struct UnsignedParams {
  float scale = 1.0f;
  int zero_point = 0;  // in [0, 2^bits - 1]
};
UnsignedParams to_unsigned(const QuantParams& p, int bits);

// Per-layer-input activation rows, keyed "layers.<i>.attn.in" etc.
struct CalibrationSet {
  std::map<std::string, Tensor> inputs;  // [rows x in]

  bool empty() const { return inputs.empty(); }
  const Tensor& at(const std::string& key) const;
};

struct CalibrationOptions {
  std::size_t prompts = 32;
  std::size_t length = 256;  // clipped to max_positions
  std::uint64_t seed = 0;
  std::size_t max_rows = 1024;  // kept per input, evenly strided
};

// Full-precision forward passes over seeded uniform-random prompts.
CalibrationSet collect_calibration(const Weights& w, const CalibrationOptions& opt = {});

// Weight matrix [in x out] -> same shape.
using MatrixQdq = std::function<Tensor(const Tensor&)>;

// Groupwise RTN along the input dimension. A trailing partial group behaves
// as if zero-padded to group_size; `padded_rows` reports the padding.
Tensor qdq_matrix(const Tensor& w, int bits, std::size_t group_size,
                  std::size_t* padded_rows = nullptr);

// diag(s)^-1 * Q(diag(s) * W) for W [in x out] and one scale per input row.
Tensor apply_scaled_qdq(const Tensor& w, std::span<const float> scales,
                        const MatrixQdq& q);

// max(mean |x_c|, 1e-4)^alpha, normalised to geometric mean 1.
std::vector<float> activation_scales(const Tensor& x, double alpha);

struct ScaleSearchResult {
  double alpha = 0.0;
  std::vector<float> scales;
  double mse = 0.0;
  std::vector<double> mse_by_alpha;  // same order as the grid
};

// Picks the alpha minimising mean((X W - X W_hat)^2); ties go to the smaller
// alpha. Throws std::invalid_argument on empty calibration rows or grid.
ScaleSearchResult search_scales(const Tensor& w, const Tensor& x,
                                std::span<const double> grid, const MatrixQdq& q);
ScaleSearchResult search_scales(const Tensor& w, const Tensor& x,
                                const WeightQuantSpec& spec);

struct WeightQuantReport {
  std::map<std::string, double> alpha;              // per matrix name
  std::map<std::string, std::size_t> padded_rows;   // per matrix name, when nonzero
};

// Canonical names of the matrices quantize_weights touches.
std::vector<std::string> linear_matrix_names(const ModelConfig& cfg);
// Key of the calibration input that feeds a matrix.
std::string calibration_key(const std::string& matrix_name);

// Replaces q, k, v, o, up, down by their quantize-dequantize image.
// Embeddings, positions, norms and lm_head stay in full precision.
// Activation-aware scaling needs a nonempty calibration set.
Weights quantize_weights(const Weights& w, const WeightQuantSpec& spec,
                         const CalibrationSet* calib = nullptr,
                         WeightQuantReport* report = nullptr);

// Storage of the quantized model: linear matrices at `bits` (plus scale and
// zero per group when asked) and everything else at 16 bits.
double quantized_model_bytes(const Weights& w, const WeightQuantSpec& spec,
                             bool count_group_overhead = false);

}  // namespace kvpareto
