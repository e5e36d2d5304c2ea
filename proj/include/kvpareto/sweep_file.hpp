// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0
//
// YAML sweep description. Every section is optional; defaults come from
// SweepSpec. Example:
//
//   model: {kind: induction, vocab: 48, seed: 0}   # or {kind: file, path: m.kvw}
//   task: {length: 512, vocab: 48, seeds: 8, seed: 0}
//   sweep:
//     kv: [16/16, 8/8, 4/4, 2/2]
//     granularity: [per-token, per-seq]
//     group: [32, 64]
//     smoothing: [off, on]
//     chunk: [full, 128]
//     weights: [w16, w4, w4awq]
//   memory: {context: 10240, arch: arch.yaml, activation_bytes: 2,
//            count_group_overhead: false}
//   calibration_seed: 0
//   output: {dir: out, svg: frontier.svg}
//   jobs: 1

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "kvpareto/pareto.hpp"

namespace kvpareto {

struct SweepFileError : std::runtime_error {
  SweepFileError(const std::string& msg, int line, int column);
  int line = 0;    // 1-based, 0 when unknown
  int column = 0;
};

struct SweepFile {
  SweepSpec spec;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::filesystem::path> svg;
  std::optional<std::size_t> jobs;
};

// Relative paths inside the document resolve against `base_dir`.
SweepFile parse_sweep_file(const std::string& text, const std::string& origin = "<string>",
                           const std::filesystem::path& base_dir = {});
SweepFile load_sweep_file(const std::filesystem::path& path);

}  // namespace kvpareto
