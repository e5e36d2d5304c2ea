// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0
//
// Weight container:
//   u64 little-endian header length N
//   N bytes of JSON: { "<name>": {"dtype": "f32"|"f16", "shape": [...],
//                                 "offset": <payload byte offset>,
//                                 "length": <byte length>}, ...,
//                      "__metadata__": {model config as strings} }
//   raw little-endian payload
//
// Canonical names: embed, pos, lm_head, norm.final, layers.<i>.attn.{q,k,v,o},
// layers.<i>.norm.{attn,ffn}, layers.<i>.ffn.{up,down}.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "kvpareto/model.hpp"

namespace kvpareto {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DType { kF32, kF16 };

std::uint16_t float_to_half(float f);  // round to nearest even
float half_to_float(std::uint16_t h);  // exact

// Flat name -> tensor view of a model.
std::map<std::string, Tensor> named_tensors(const Weights& w);

void save_weights(const std::filesystem::path& path, const Weights& w,
                  DType dtype = DType::kF32);

// Loads the tensors and binds them to `cfg`. Missing or unexpected names,
// shape mismatches, and unsupported dtypes throw FormatError with the
// offending names.
Weights load_weights(const std::filesystem::path& path, const ModelConfig& cfg);

// Reads the config stored in the header metadata, then loads.
Weights load_model(const std::filesystem::path& path);

}  // namespace kvpareto
