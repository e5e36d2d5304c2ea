// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "kvpareto/rng.hpp"

namespace kvpareto {

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || kv_heads == 0 || head_dim == 0 ||
      vocab_size == 0 || max_positions == 0) {
    throw DimensionError("model dimensions must be positive");
  }
  if (heads % kv_heads != 0) {
    throw DimensionError(fmt::format("heads {} not divisible by kv_heads {}", heads, kv_heads));
  }
}

namespace {

void expect_shape(const Tensor& t, const Shape& shape, const std::string& name) {
  if (t.shape() != shape) {
    throw DimensionError(fmt::format("tensor '{}' has shape {}, expected {}", name,
                                     shape_str(t.shape()), shape_str(shape)));
  }
}

}  // namespace

void Weights::validate() const {
  config.validate();
  const std::size_t h = config.hidden();
  const std::size_t qd = config.heads * config.head_dim;
  const std::size_t kvd = config.kv_heads * config.head_dim;
  expect_shape(embed, {config.vocab_size, h}, "embed");
  expect_shape(pos, {config.max_positions, h}, "pos");
  expect_shape(final_norm, {h}, "norm.final");
  expect_shape(lm_head, {h, config.vocab_size}, "lm_head");
  if (layers.size() != config.layers) {
    throw DimensionError(fmt::format("{} layers present, config has {}", layers.size(),
                                     config.layers));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = fmt::format("layers.{}.", i);
    expect_shape(l.attn_norm, {h}, p + "norm.attn");
    expect_shape(l.q, {h, qd}, p + "attn.q");
    expect_shape(l.k, {h, kvd}, p + "attn.k");
    expect_shape(l.v, {h, kvd}, p + "attn.v");
    expect_shape(l.o, {qd, h}, p + "attn.o");
    if (config.ffn_dim > 0) {
      expect_shape(l.ffn_norm, {h}, p + "norm.ffn");
      expect_shape(l.up, {h, config.ffn_dim}, p + "ffn.up");
      expect_shape(l.down, {config.ffn_dim, h}, p + "ffn.down");
    }
  }
}

KVCacheConfig cache_config_for(const ModelConfig& model, const QuantSpec& k_spec,
                               const QuantSpec& v_spec) {
  return {k_spec, v_spec, model.layers, model.kv_heads, model.head_dim};
}

namespace {

constexpr float kNormEps = 1e-6f;

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  const std::size_t m = x.dim(0), h = x.dim(1);
  Tensor out({m, h});
  for (std::size_t i = 0; i < m; ++i) {
    float ss = 0.0f;
    for (std::size_t j = 0; j < h; ++j) ss += x.at(i, j) * x.at(i, j);
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(h) + kNormEps);
    for (std::size_t j = 0; j < h; ++j) out.at(i, j) = x.at(i, j) * inv * gain[j];
  }
  return out;
}

// [t x heads*d] -> [heads x t x d]
Tensor split_heads(const Tensor& x, std::size_t heads, std::size_t d) {
  const std::size_t t = x.dim(0);
  Tensor out({heads, t, d});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t hh = 0; hh < heads; ++hh) {
      for (std::size_t c = 0; c < d; ++c) out.at(hh, i, c) = x.at(i, hh * d + c);
    }
  }
  return out;
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t heads = x.dim(0), t = x.dim(1), d = x.dim(2);
  Tensor out({t, heads * d});
  for (std::size_t hh = 0; hh < heads; ++hh) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t c = 0; c < d; ++c) out.at(i, hh * d + c) = x.at(hh, i, c);
    }
  }
  return out;
}

void add_inplace(Tensor& x, const Tensor& y) {
  auto a = x.data();
  auto b = y.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

Tensor select_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.dim(1);
  std::vector<float> data(x.data().begin() + begin * n, x.data().begin() + end * n);
  return Tensor({end - begin, n}, std::move(data));
}

// Runs one block of tokens starting at absolute position `start` and returns
// the final hidden states (after the final norm) for every token.
Tensor run_block(const Weights& w, std::span<const int> tokens, std::size_t start,
                 KVCache& cache, const LinearInputObserver* observe = nullptr) {
  auto seen = [&](std::size_t li, std::string_view name, const Tensor& in) {
    if (observe && *observe) (*observe)(li, name, in);
  };
  const auto& cfg = w.config;
  const std::size_t t = tokens.size(), h = cfg.hidden();
  Tensor x({t, h});
  for (std::size_t i = 0; i < t; ++i) {
    const auto tok = static_cast<std::size_t>(tokens[i]);
    for (std::size_t j = 0; j < h; ++j) {
      x.at(i, j) = w.embed.at(tok, j) + w.pos.at(start + i, j);
    }
  }
  for (std::size_t li = 0; li < cfg.layers; ++li) {
    const auto& l = w.layers[li];
    const Tensor normed = rms_norm(x, l.attn_norm);
    seen(li, "attn.in", normed);
    const Tensor q = split_heads(matmul(normed, l.q), cfg.heads, cfg.head_dim);
    const Tensor k = split_heads(matmul(normed, l.k), cfg.kv_heads, cfg.head_dim);
    const Tensor v = split_heads(matmul(normed, l.v), cfg.kv_heads, cfg.head_dim);
    cache.append(li, k, v);
    const auto [k_all, v_all] = cache.read(li);
    const Tensor attn = sdpa(q, k_all, v_all, AttentionMask::causal_with_offset(start));
    const Tensor merged = merge_heads(attn);
    seen(li, "attn.o", merged);
    add_inplace(x, matmul(merged, l.o));
    if (cfg.ffn_dim > 0) {
      const Tensor fn = rms_norm(x, l.ffn_norm);
      seen(li, "ffn.up", fn);
      Tensor up = matmul(fn, l.up);
      for (auto& a : up.data()) {
        const float r = std::max(a, 0.0f);
        a = r * r;
      }
      seen(li, "ffn.down", up);
      add_inplace(x, matmul(up, l.down));
    }
  }
  return rms_norm(x, w.final_norm);
}

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens, std::size_t start) {
  for (int tok : tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size) {
      throw std::out_of_range(fmt::format("token id {} outside vocab of {}", tok,
                                          cfg.vocab_size));
    }
  }
  if (start + tokens.size() > cfg.max_positions) {
    throw std::out_of_range(fmt::format("{} positions exceed max_positions {}",
                                        start + tokens.size(), cfg.max_positions));
  }
}

}  // namespace

Tensor forward_prefill(const Weights& w, const RunConfig& run,
                       std::span<const int> tokens, KVCache& cache, LogitsMode mode,
                       const LinearInputObserver* observe) {
  if (!cache.empty()) throw std::logic_error("forward_prefill needs an empty cache");
  check_tokens(w.config, tokens, 0);
  if (run.chunk_size && *run.chunk_size == 0) {
    throw std::invalid_argument("chunk size must be at least 1");
  }
  const std::size_t m = tokens.size();
  if (m == 0) return Tensor({0, w.config.vocab_size});
  const std::size_t c = run.chunk_size ? *run.chunk_size : m;

  std::vector<Tensor> finals;
  Tensor last;
  for (std::size_t start = 0; start < m; start += c) {
    const std::size_t end = std::min(m, start + c);
    Tensor hidden =
        run_block(w, tokens.subspan(start, end - start), start, cache, observe);
    if (mode == LogitsMode::kAllPositions) {
      finals.push_back(matmul(hidden, w.lm_head));
    } else if (end == m) {
      last = select_rows(hidden, hidden.dim(0) - 1, hidden.dim(0));
    }
  }
  if (mode == LogitsMode::kLastPosition) return matmul(last, w.lm_head);

  Tensor out({m, w.config.vocab_size});
  auto dst = out.data().begin();
  for (const auto& f : finals) dst = std::copy(f.data().begin(), f.data().end(), dst);
  return out;
}

Tensor decode_step(const Weights& w, const RunConfig&, int token, KVCache& cache) {
  const std::size_t start = cache.token_count();
  const int toks[] = {token};
  check_tokens(w.config, toks, start);
  return matmul(run_block(w, toks, start, cache), w.lm_head);
}

int argmax(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::vector<int> greedy_generate(const Weights& w, const RunConfig& run,
                                 std::span<const int> prompt, std::size_t steps) {
  KVCache cache(run.kv_cache);
  std::vector<int> out;
  if (steps == 0) return out;
  Tensor logits = forward_prefill(w, run, prompt, cache);
  for (std::size_t s = 0; s < steps; ++s) {
    const int next = argmax(logits.data());
    out.push_back(next);
    if (s + 1 < steps) logits = decode_step(w, run, next, cache);
  }
  return out;
}

Weights random_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t h = cfg.hidden();
  const std::size_t qd = cfg.heads * cfg.head_dim;
  const std::size_t kvd = cfg.kv_heads * cfg.head_dim;
  auto lin = [&](std::size_t in, std::size_t out) {
    return random_normal({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  auto gain = [&]() {
    Tensor g({h});
    for (auto& x : g.data()) x = static_cast<float>(1.0 + 0.1 * rng.normal());
    return g;
  };
  Weights w;
  w.config = cfg;
  w.embed = random_normal({cfg.vocab_size, h}, rng, 1.0);
  w.pos = random_normal({cfg.max_positions, h}, rng, 0.5);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    LayerWeights l;
    l.attn_norm = gain();
    l.q = lin(h, qd);
    l.k = lin(h, kvd);
    l.v = lin(h, kvd);
    l.o = lin(qd, h);
    if (cfg.ffn_dim > 0) {
      l.ffn_norm = gain();
      l.up = lin(h, cfg.ffn_dim);
      l.down = lin(cfg.ffn_dim, h);
    }
    w.layers.push_back(std::move(l));
  }
  w.final_norm = gain();
  w.lm_head = lin(h, cfg.vocab_size);
  return w;
}

namespace {

struct Frequencies {
  std::vector<double> omega;
  double gap = 0.0;
};

double score_gap(std::span<const double> omega, std::size_t max_positions) {
  double best = -1e300;
  for (std::size_t delta = 1; delta <= max_positions; ++delta) {
    double s = 0.0;
    for (double w : omega) s += std::cos(w * static_cast<double>(delta));
    best = std::max(best, s);
  }
  return static_cast<double>(omega.size()) - best;
}

// Deterministic search for incommensurate frequencies whose cosine sums stay
// well below their peak for every non-zero offset in range.
Frequencies pick_frequencies(const InductionTemplate& tmpl) {
  Frequencies best;
  for (std::uint64_t candidate = 0; candidate < 16; ++candidate) {
    Rng rng(0x9E3779B97F4A7C15ULL ^ (tmpl.seed * 31 + candidate));
    std::vector<double> omega(tmpl.pos_frequencies);
    for (auto& w : omega) w = rng.uniform(0.3, std::numbers::pi);
    const double gap = score_gap(omega, tmpl.max_positions);
    if (gap > best.gap) best = {std::move(omega), gap};
  }
  if (best.gap <= 0.0) {
    throw std::runtime_error("no positional code separates all offsets");
  }
  return best;
}

// Random orthogonal d x d matrix (Gram-Schmidt on Gaussian columns).
Tensor random_orthogonal(std::size_t d, Rng& rng) {
  std::vector<std::vector<double>> cols(d, std::vector<double>(d));
  for (std::size_t c = 0; c < d; ++c) {
    for (auto& x : cols[c]) x = rng.normal();
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += cols[c][i] * cols[p][i];
      for (std::size_t i = 0; i < d; ++i) cols[c][i] -= dot * cols[p][i];
    }
    double norm = 0.0;
    for (double x : cols[c]) norm += x * x;
    norm = std::sqrt(norm);
    for (auto& x : cols[c]) x /= norm;
  }
  Tensor m({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < d; ++c) m.at(i, c) = static_cast<float>(cols[c][i]);
  }
  return m;
}

// Writes (local * rot) into columns [col0, col0 + d) of dst.
void place_rotated(Tensor& dst, std::size_t col0, const Tensor& local, const Tensor& rot) {
  const Tensor r = matmul(local, rot);
  for (std::size_t i = 0; i < r.dim(0); ++i) {
    for (std::size_t c = 0; c < r.dim(1); ++c) dst.at(i, col0 + c) = r.at(i, c);
  }
}

}  // namespace

double positional_gap(const InductionTemplate& tmpl) { return pick_frequencies(tmpl).gap; }

Weights build_induction_model(std::size_t vocab, const InductionTemplate& tmpl) {
  if (vocab < 4) throw std::invalid_argument("induction model needs vocab >= 4");
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = tmpl.heads;
  cfg.kv_heads = tmpl.kv_heads;
  cfg.head_dim = tmpl.head_dim;
  cfg.ffn_dim = 0;
  cfg.vocab_size = vocab;
  cfg.max_positions = tmpl.max_positions;
  cfg.validate();

  const std::size_t d = cfg.head_dim, hidden = cfg.hidden(), f = tmpl.pos_frequencies;
  // Residual stream layout.
  const std::size_t tok0 = 0, pos0 = vocab, const_dim = pos0 + 2 * f,
                    first_dim = const_dim + 1, prev0 = first_dim + 1,
                    out0 = prev0 + vocab, used = out0 + vocab;
  if (used > hidden) {
    throw DimensionError(fmt::format("induction stream needs {} dims, hidden is {}",
                                     used, hidden));
  }
  if (2 * f > d || vocab + 1 > d) {
    throw DimensionError(fmt::format("head_dim {} too small for vocab {} / {} frequencies",
                                     d, vocab, f));
  }
  if (tmpl.key_outlier_channels > d) throw DimensionError("too many outlier channels");

  const Frequencies freqs = pick_frequencies(tmpl);
  Rng rng(tmpl.seed * 7919 + 17);
  const double sqrt_d = std::sqrt(static_cast<double>(d));
  const double beta_prev = tmpl.attention_margin * sqrt_d / freqs.gap;
  const double beta_match = tmpl.attention_margin * sqrt_d;
  const double first_penalty = 2.0;

  Weights w;
  w.config = cfg;
  w.embed = Tensor({vocab, hidden});
  for (std::size_t t = 0; t < vocab; ++t) w.embed.at(t, tok0 + t) = 1.0f;
  w.pos = Tensor({cfg.max_positions, hidden});
  for (std::size_t p = 0; p < cfg.max_positions; ++p) {
    for (std::size_t i = 0; i < f; ++i) {
      w.pos.at(p, pos0 + 2 * i) = static_cast<float>(std::cos(freqs.omega[i] * p));
      w.pos.at(p, pos0 + 2 * i + 1) = static_cast<float>(std::sin(freqs.omega[i] * p));
    }
    w.pos.at(p, const_dim) = 1.0f;
  }
  w.pos.at(0, first_dim) = 1.0f;

  // Norm gains equal the typical RMS so normalized streams keep unit entries.
  auto flat_gain = [&](double active) {
    Tensor g({hidden});
    const float v = static_cast<float>(std::sqrt(active / static_cast<double>(hidden)));
    for (auto& x : g.data()) x = v;
    return g;
  };
  const std::size_t qd = cfg.heads * d, kvd = cfg.kv_heads * d;

  auto outlier_bias = [&]() {
    std::vector<float> b(d, 0.0f);
    for (std::size_t i = 0; i < tmpl.key_outlier_channels; ++i) {
      const std::size_t ch = rng.uniform_index(d);
      b[ch] = tmpl.key_outlier * (rng.uniform() < 0.5 ? -1.0f : 1.0f);
    }
    return b;
  };

  // Layer 0: previous-token head. The query carries the positional code of
  // t-1 (a fixed rotation of the code of t), the key the code of j.
  {
    LayerWeights l;
    l.attn_norm = flat_gain(static_cast<double>(f) + 2.0);
    l.q = Tensor({hidden, qd});
    l.k = Tensor({hidden, kvd});
    l.v = Tensor({hidden, kvd});
    l.o = Tensor({qd, hidden});
    Tensor q_local({hidden, d}), k_local({hidden, d}), v_local({hidden, d});
    for (std::size_t i = 0; i < f; ++i) {
      const double c = std::cos(freqs.omega[i]), s = std::sin(freqs.omega[i]);
      const std::size_t pc = pos0 + 2 * i, ps = pc + 1;
      // (cos w(t-1), sin w(t-1)) = (cos wt c + sin wt s, sin wt c - cos wt s)
      q_local.at(pc, 2 * i) = static_cast<float>(beta_prev * c);
      q_local.at(ps, 2 * i) = static_cast<float>(beta_prev * s);
      q_local.at(pc, 2 * i + 1) = static_cast<float>(-beta_prev * s);
      q_local.at(ps, 2 * i + 1) = static_cast<float>(beta_prev * c);
      k_local.at(pc, 2 * i) = 1.0f;
      k_local.at(ps, 2 * i + 1) = 1.0f;
    }
    for (std::size_t t = 0; t < vocab; ++t) v_local.at(tok0 + t, t) = 1.0f;
    const Tensor r_qk = random_orthogonal(d, rng);
    const Tensor r_v = random_orthogonal(d, rng);
    place_rotated(l.q, 0, q_local, r_qk);
    place_rotated(l.k, 0, k_local, r_qk);
    place_rotated(l.v, 0, v_local, r_v);
    const auto bias = outlier_bias();
    for (std::size_t c = 0; c < d; ++c) l.k.at(const_dim, c) += bias[c];
    // o = r_v^T * (local -> PREV)
    Tensor back({d, hidden});
    for (std::size_t t = 0; t < vocab; ++t) back.at(t, prev0 + t) = 1.0f;
    Tensor r_v_t({d, d});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) r_v_t.at(i, j) = r_v.at(j, i);
    const Tensor o_block = matmul(r_v_t, back);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < hidden; ++j) l.o.at(i, j) = o_block.at(i, j);
    w.layers.push_back(std::move(l));
  }

  // Layer 1: induction head. Query = current token, key = previous-token
  // channel; position 0 is pushed down through the FIRST flag.
  {
    LayerWeights l;
    l.attn_norm = flat_gain(static_cast<double>(f) + 3.0);
    l.q = Tensor({hidden, qd});
    l.k = Tensor({hidden, kvd});
    l.v = Tensor({hidden, kvd});
    l.o = Tensor({qd, hidden});
    Tensor q_local({hidden, d}), k_local({hidden, d}), v_local({hidden, d});
    for (std::size_t t = 0; t < vocab; ++t) {
      q_local.at(tok0 + t, t) = static_cast<float>(beta_match);
      k_local.at(prev0 + t, t) = 1.0f;
      v_local.at(tok0 + t, t) = 1.0f;
    }
    q_local.at(const_dim, vocab) = static_cast<float>(beta_match);
    k_local.at(first_dim, vocab) = static_cast<float>(-first_penalty);
    const Tensor r_qk = random_orthogonal(d, rng);
    const Tensor r_v = random_orthogonal(d, rng);
    place_rotated(l.q, 0, q_local, r_qk);
    place_rotated(l.k, 0, k_local, r_qk);
    place_rotated(l.v, 0, v_local, r_v);
    const auto bias = outlier_bias();
    for (std::size_t c = 0; c < d; ++c) l.k.at(const_dim, c) += bias[c];
    Tensor back({d, hidden});
    for (std::size_t t = 0; t < vocab; ++t) back.at(t, out0 + t) = 1.0f;
    Tensor r_v_t({d, d});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) r_v_t.at(i, j) = r_v.at(j, i);
    const Tensor o_block = matmul(r_v_t, back);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < hidden; ++j) l.o.at(i, j) = o_block.at(i, j);
    w.layers.push_back(std::move(l));
  }

  w.final_norm = flat_gain(static_cast<double>(f) + 4.0);
  w.lm_head = Tensor({hidden, vocab});
  for (std::size_t t = 0; t < vocab; ++t) {
    w.lm_head.at(out0 + t, t) = tmpl.output_scale;
  }
  w.validate();
  return w;
}

}  // namespace kvpareto
