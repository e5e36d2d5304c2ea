// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/weightquant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <fmt/format.h>

#include "kvpareto/rng.hpp"

namespace kvpareto {

std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 8; ++i) g.push_back(i * 0.125);
  return g;
}

void WeightQuantSpec::validate() const {
  if (bits < 2 || bits > 8) throw LayoutError(fmt::format("weight bits {} not in [2, 8]", bits));
  if (group_size == 0) throw LayoutError("weight group_size must be positive");
  if (scaling == WeightScaling::kActivationAware && alpha_grid.empty()) {
    throw std::invalid_argument("alpha grid is empty");
  }
}

UnsignedParams to_unsigned(const QuantParams& p, int bits) {
  return {p.scale, p.zero_point + (1 << (bits - 1))};
}

const Tensor& CalibrationSet::at(const std::string& key) const {
  auto it = inputs.find(key);
  if (it == inputs.end() || it->second.dim(0) == 0) {
    throw std::invalid_argument(fmt::format("no calibration activations for '{}'", key));
  }
  return it->second;
}

namespace {

Tensor strided_rows(const std::vector<float>& rows, std::size_t cols, std::size_t max_rows) {
  const std::size_t n = cols ? rows.size() / cols : 0;
  const std::size_t keep = std::min(n, max_rows);
  Tensor out({keep, cols});
  for (std::size_t r = 0; r < keep; ++r) {
    const std::size_t src = r * n / keep;
    std::copy_n(rows.begin() + static_cast<std::ptrdiff_t>(src * cols), cols,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return out;
}

}  // namespace

CalibrationSet collect_calibration(const Weights& w, const CalibrationOptions& opt) {
  const auto& cfg = w.config;
  const std::size_t len = std::min(opt.length, cfg.max_positions);
  std::map<std::string, std::vector<float>> rows;
  std::map<std::string, std::size_t> cols;
  LinearInputObserver obs = [&](std::size_t layer, std::string_view name, const Tensor& in) {
    const std::string key = fmt::format("layers.{}.{}", layer, name);
    auto& buf = rows[key];
    buf.insert(buf.end(), in.data().begin(), in.data().end());
    cols[key] = in.dim(1);
  };
  Rng rng(opt.seed);
  RunConfig run;
  run.kv_cache = cache_config_for(cfg, QuantSpec::pass_through(), QuantSpec::pass_through());
  for (std::size_t p = 0; p < opt.prompts; ++p) {
    std::vector<int> toks(len);
    for (auto& t : toks) t = static_cast<int>(rng.uniform_index(cfg.vocab_size));
    KVCache cache(run.kv_cache);
    forward_prefill(w, run, toks, cache, LogitsMode::kLastPosition, &obs);
  }
  CalibrationSet set;
  for (auto& [key, buf] : rows) {
    set.inputs.emplace(key, strided_rows(buf, cols[key], opt.max_rows));
  }
  return set;
}

Tensor qdq_matrix(const Tensor& w, int bits, std::size_t group_size, std::size_t* padded_rows) {
  if (w.rank() != 2) throw DimensionError("qdq_matrix expects a 2-D weight");
  if (group_size == 0) throw LayoutError("weight group_size must be positive");
  const std::size_t in = w.dim(0), out = w.dim(1);
  if (padded_rows) *padded_rows = (group_size - in % group_size) % group_size;
  const int qmin = -(1 << (bits - 1)), qmax = (1 << (bits - 1)) - 1;
  Tensor res({in, out});
  std::vector<float> buf;
  for (std::size_t j = 0; j < out; ++j) {
    for (std::size_t g = 0; g < in; g += group_size) {
      const std::size_t len = std::min(group_size, in - g);
      buf.resize(len);
      for (std::size_t i = 0; i < len; ++i) buf[i] = w.at(g + i, j);
      // Zero padding would not move the range, which already includes zero.
      const QuantParams p = compute_qparams(buf, bits);
      for (std::size_t i = 0; i < len; ++i) {
        const int q = std::clamp(
            static_cast<int>(std::nearbyint(static_cast<double>(buf[i]) / p.scale)) +
                p.zero_point,
            qmin, qmax);
        res.at(g + i, j) = static_cast<float>(q - p.zero_point) * p.scale;
      }
    }
  }
  return res;
}

Tensor apply_scaled_qdq(const Tensor& w, std::span<const float> scales, const MatrixQdq& q) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  if (scales.size() != in) {
    throw DimensionError(fmt::format("{} scales for {} input channels", scales.size(), in));
  }
  Tensor scaled = w;
  for (std::size_t i = 0; i < in; ++i) {
    for (std::size_t j = 0; j < out; ++j) scaled.at(i, j) *= scales[i];
  }
  Tensor r = q(scaled);
  for (std::size_t i = 0; i < in; ++i) {
    for (std::size_t j = 0; j < out; ++j) r.at(i, j) /= scales[i];
  }
  return r;
}

std::vector<float> activation_scales(const Tensor& x, double alpha) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> s(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) s[c] += std::fabs(x.at(r, c));
  }
  double log_sum = 0.0;
  for (auto& v : s) {
    v = std::pow(std::max(v / static_cast<double>(std::max<std::size_t>(n, 1)), 1e-4), alpha);
    log_sum += std::log(v);
  }
  const double gm = std::exp(log_sum / static_cast<double>(d));
  std::vector<float> out(d);
  for (std::size_t c = 0; c < d; ++c) out[c] = static_cast<float>(s[c] / gm);
  return out;
}

namespace {

double output_mse(const Tensor& x, const Tensor& w, const Tensor& w_hat) {
  const Tensor y = matmul(x, w);
  const Tensor y_hat = matmul(x, w_hat);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = static_cast<double>(y[i]) - y_hat[i];
    acc += d * d;
  }
  return acc / static_cast<double>(y.size());
}

}  // namespace

ScaleSearchResult search_scales(const Tensor& w, const Tensor& x,
                                std::span<const double> grid, const MatrixQdq& q) {
  if (x.rank() != 2 || x.dim(0) == 0) {
    throw std::invalid_argument("search_scales: empty calibration set");
  }
  if (grid.empty()) throw std::invalid_argument("search_scales: empty alpha grid");
  if (x.dim(1) != w.dim(0)) {
    throw DimensionError(fmt::format("calibration width {} vs weight rows {}", x.dim(1),
                                     w.dim(0)));
  }
  std::vector<std::size_t> order(grid.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return grid[a] < grid[b]; });

  ScaleSearchResult best;
  best.mse_by_alpha.assign(grid.size(), 0.0);
  bool have = false;
  for (std::size_t idx : order) {
    auto s = activation_scales(x, grid[idx]);
    const double mse = output_mse(x, w, apply_scaled_qdq(w, s, q));
    best.mse_by_alpha[idx] = mse;
    if (!have || mse < best.mse) {
      have = true;
      best.alpha = grid[idx];
      best.mse = mse;
      best.scales = std::move(s);
    }
  }
  return best;
}

ScaleSearchResult search_scales(const Tensor& w, const Tensor& x, const WeightQuantSpec& spec) {
  spec.validate();
  return search_scales(w, x, spec.alpha_grid, [&](const Tensor& m) {
    return qdq_matrix(m, spec.bits, spec.group_size);
  });
}

std::vector<std::string> linear_matrix_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    for (const char* m : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      names.push_back(fmt::format("layers.{}.{}", i, m));
    }
    if (cfg.ffn_dim > 0) {
      names.push_back(fmt::format("layers.{}.ffn.up", i));
      names.push_back(fmt::format("layers.{}.ffn.down", i));
    }
  }
  return names;
}

std::string calibration_key(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = name.substr(dot + 1);
  const std::string prefix = name.substr(0, dot);  // layers.<i>.attn / layers.<i>.ffn
  if (leaf == "q" || leaf == "k" || leaf == "v") return prefix + ".in";
  return name;
}

namespace {

template <typename W>
auto matrix_ref(W& w, const std::string& name) -> decltype(&w.layers[0].q) {
  std::size_t layer = 0;
  char kind[16] = {};
  if (std::sscanf(name.c_str(), "layers.%zu.%15s", &layer, kind) != 2 ||
      layer >= w.layers.size()) {
    throw std::invalid_argument(fmt::format("unknown matrix '{}'", name));
  }
  auto& l = w.layers[layer];
  const std::string k = kind;
  if (k == "attn.q") return &l.q;
  if (k == "attn.k") return &l.k;
  if (k == "attn.v") return &l.v;
  if (k == "attn.o") return &l.o;
  if (k == "ffn.up") return &l.up;
  if (k == "ffn.down") return &l.down;
  throw std::invalid_argument(fmt::format("unknown matrix '{}'", name));
}

}  // namespace

Weights quantize_weights(const Weights& w, const WeightQuantSpec& spec,
                         const CalibrationSet* calib, WeightQuantReport* report) {
  spec.validate();
  w.validate();
  const bool aware = spec.scaling == WeightScaling::kActivationAware;
  if (aware && (!calib || calib->empty())) {
    throw std::invalid_argument("activation-aware scaling needs calibration data");
  }
  MatrixQdq q = [&](const Tensor& m) { return qdq_matrix(m, spec.bits, spec.group_size); };
  Weights out = w;
  for (const auto& name : linear_matrix_names(w.config)) {
    Tensor* m = matrix_ref(out, name);
    std::size_t pad = 0;
    qdq_matrix(Tensor({m->dim(0), 0}), spec.bits, spec.group_size, &pad);
    if (report && pad) report->padded_rows[name] = pad;
    if (aware) {
      const auto r = search_scales(*m, calib->at(calibration_key(name)), spec.alpha_grid, q);
      *m = apply_scaled_qdq(*m, r.scales, q);
      if (report) report->alpha[name] = r.alpha;
    } else {
      *m = q(*m);
      if (report) report->alpha[name] = 0.0;
    }
  }
  return out;
}

double quantized_model_bytes(const Weights& w, const WeightQuantSpec& spec,
                             bool count_group_overhead) {
  double bits = 0.0;
  std::size_t linear = 0;
  for (const auto& name : linear_matrix_names(w.config)) {
    const Tensor* m = matrix_ref(w, name);
    linear += m->size();
    bits += static_cast<double>(m->size()) * spec.bits;
    if (count_group_overhead) {
      const std::size_t groups = (m->dim(0) + spec.group_size - 1) / spec.group_size;
      bits += static_cast<double>(groups * m->dim(1)) * 32.0;
    }
  }
  std::size_t total = 0;
  total += w.embed.size() + w.pos.size() + w.final_norm.size() + w.lm_head.size();
  for (const auto& l : w.layers) {
    total += l.attn_norm.size() + l.q.size() + l.k.size() + l.v.size() + l.o.size() +
             l.ffn_norm.size() + l.up.size() + l.down.size();
  }
  bits += static_cast<double>(total - linear) * 16.0;
  return bits / 8.0;
}

}  // namespace kvpareto
