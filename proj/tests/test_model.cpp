// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <vector>

#include "kvpareto/evaltasks.hpp"
#include "kvpareto/model.hpp"
#include "kvpareto/rng.hpp"

using namespace kvpareto;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 2;
  c.heads = 4;
  c.kv_heads = 2;
  c.head_dim = 16;
  c.ffn_dim = 96;
  c.vocab_size = 64;
  c.max_positions = 1200;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.uniform_index(vocab));
  return t;
}

RunConfig pass_through_run(const ModelConfig& cfg, std::optional<std::size_t> chunk) {
  RunConfig r;
  r.chunk_size = chunk;
  r.kv_cache = cache_config_for(cfg, QuantSpec::pass_through(), QuantSpec::pass_through());
  return r;
}

Tensor prefill_all(const Weights& w, const RunConfig& run, const std::vector<int>& toks) {
  KVCache cache(run.kv_cache);
  return forward_prefill(w, run, toks, cache, LogitsMode::kAllPositions);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max<double>(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("one chunk covering the prompt equals single-pass prefill") {
  const Weights w = random_weights(small_config(), 0);
  const auto toks = random_tokens(200, 64, 1);
  const Tensor full = prefill_all(w, pass_through_run(w.config, std::nullopt), toks);
  CHECK(prefill_all(w, pass_through_run(w.config, 200), toks) == full);
  CHECK(prefill_all(w, pass_through_run(w.config, 4096), toks) == full);
  CHECK(full.shape() == Shape{200, 64});
  CHECK(full.all_finite());
}

TEST_CASE("chunked prefill matches full prefill") {
  const Weights w = random_weights(small_config(), 0);
  const auto toks = random_tokens(512, 64, 0);
  const Tensor full = prefill_all(w, pass_through_run(w.config, std::nullopt), toks);
  for (std::size_t c : {64u, 100u, 128u, 256u, 512u}) {
    CAPTURE(c);
    CHECK(max_abs_diff(prefill_all(w, pass_through_run(w.config, c), toks), full) <= 1e-4);
  }
}

TEST_CASE("last-position mode returns the final row") {
  const Weights w = random_weights(small_config(), 3);
  const auto toks = random_tokens(77, 64, 3);
  const RunConfig run = pass_through_run(w.config, 32);
  const Tensor all = prefill_all(w, run, toks);
  KVCache cache(run.kv_cache);
  const Tensor last = forward_prefill(w, run, toks, cache);
  REQUIRE(last.shape() == Shape{1, 64});
  for (std::size_t j = 0; j < 64; ++j) CHECK(last[j] == all.at(76, j));
  CHECK(cache.token_count() == 77);
}

TEST_CASE("logits ignore later tokens") {
  const Weights w = random_weights(small_config(), 4);
  auto toks = random_tokens(160, 64, 4);
  for (std::optional<std::size_t> c : {std::optional<std::size_t>{}, std::optional<std::size_t>{64}}) {
    const RunConfig run = pass_through_run(w.config, c);
    const Tensor base = prefill_all(w, run, toks);
    for (std::size_t t : {159u, 100u, 64u}) {
      auto changed = toks;
      for (std::size_t i = t; i < changed.size(); ++i) changed[i] = (changed[i] + 7) % 64;
      const Tensor other = prefill_all(w, run, changed);
      double m = 0;
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < 64; ++j)
          m = std::max<double>(m, std::abs(other.at(i, j) - base.at(i, j)));
      CHECK(m <= 1e-6);
    }
  }
}

TEST_CASE("decode steps reproduce prefill logits") {
  const Weights w = random_weights(small_config(), 5);
  const auto toks = random_tokens(96, 64, 5);
  const RunConfig run = pass_through_run(w.config, std::nullopt);
  KVCache pc(run.kv_cache);
  const Tensor ref = forward_prefill(w, run, toks, pc);

  KVCache dc(run.kv_cache);
  Tensor logits;
  for (int t : toks) logits = decode_step(w, run, t, dc);
  CHECK(dc.token_count() == 96);
  CHECK(max_abs_diff(logits, ref) <= 1e-4);
}

TEST_CASE("first decode step on an empty cache") {
  const Weights w = random_weights(small_config(), 6);
  const RunConfig run = pass_through_run(w.config, std::nullopt);
  KVCache cache(run.kv_cache);
  const Tensor a = decode_step(w, run, 17, cache);
  CHECK(cache.token_count() == 1);
  KVCache other(run.kv_cache);
  const int one[] = {17};
  CHECK(a == forward_prefill(w, run, one, other));
}

TEST_CASE("greedy decode after chunked prefill matches full prefill") {
  const Weights w = random_weights(small_config(), 7);
  const auto prompt = random_tokens(300, 64, 7);
  const auto ref = greedy_generate(w, pass_through_run(w.config, std::nullopt), prompt, 64);
  REQUIRE(ref.size() == 64);
  for (std::size_t c : {64u, 128u, 256u}) {
    CHECK(greedy_generate(w, pass_through_run(w.config, c), prompt, 64) == ref);
  }
}

TEST_CASE("grouped heads with one kv head per query head equal duplicated weights") {
  ModelConfig g = small_config();
  ModelConfig full = g;
  full.kv_heads = full.heads;
  const Weights wg = random_weights(g, 8);
  Weights wf = wg;
  wf.config = full;
  const std::size_t d = g.head_dim, hidden = g.hidden(), rep = g.heads / g.kv_heads;
  for (std::size_t l = 0; l < g.layers; ++l) {
    Tensor k({hidden, full.kv_heads * d}), v({hidden, full.kv_heads * d});
    for (std::size_t r = 0; r < hidden; ++r) {
      for (std::size_t h = 0; h < full.heads; ++h) {
        for (std::size_t x = 0; x < d; ++x) {
          k.at(r, h * d + x) = wg.layers[l].k.at(r, (h / rep) * d + x);
          v.at(r, h * d + x) = wg.layers[l].v.at(r, (h / rep) * d + x);
        }
      }
    }
    wf.layers[l].k = k;
    wf.layers[l].v = v;
  }
  wf.validate();
  const auto toks = random_tokens(90, 64, 8);
  CHECK(prefill_all(wg, pass_through_run(g, 32), toks) ==
        prefill_all(wf, pass_through_run(full, 32), toks));
}

TEST_CASE("prefill preconditions") {
  const Weights w = random_weights(small_config(), 9);
  const RunConfig run = pass_through_run(w.config, std::nullopt);
  KVCache cache(run.kv_cache);
  const std::vector<int> ok{1, 2, 3};
  forward_prefill(w, run, ok, cache);
  CHECK_THROWS_AS(forward_prefill(w, run, ok, cache), std::logic_error);
  KVCache fresh(run.kv_cache);
  const std::vector<int> bad{1, 64};
  CHECK_THROWS_AS(forward_prefill(w, run, bad, fresh), std::out_of_range);
  const std::vector<int> long_prompt(1201, 0);
  CHECK_THROWS_AS(forward_prefill(w, run, long_prompt, fresh), std::out_of_range);
  RunConfig zero = run;
  zero.chunk_size = 0;
  CHECK_THROWS_AS(forward_prefill(w, zero, ok, fresh), std::invalid_argument);
  ModelConfig odd = small_config();
  odd.kv_heads = 3;
  CHECK_THROWS_AS(odd.validate(), DimensionError);
}

TEST_CASE("decode stops at max_positions") {
  ModelConfig c = small_config();
  c.max_positions = 4;
  const Weights w = random_weights(c, 10);
  const RunConfig run = pass_through_run(c, std::nullopt);
  KVCache cache(run.kv_cache);
  for (int i = 0; i < 4; ++i) decode_step(w, run, i, cache);
  CHECK_THROWS_AS(decode_step(w, run, 0, cache), std::out_of_range);
}

TEST_CASE("induction model copies the successor on every vocab-4 prompt") {
  InductionTemplate t;
  t.heads = 2;
  t.kv_heads = 1;
  t.head_dim = 16;
  t.pos_frequencies = 6;
  t.max_positions = 8;
  const Weights w = build_induction_model(4, t);
  const RunConfig run = pass_through_run(w.config, std::nullopt);
  int checked = 0;
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      for (int c = 0; c < 4; ++c) {
        if (a == b || a == c) continue;
        const std::vector<int> prompt{a, b, c, a};
        KVCache cache(run.kv_cache);
        const Tensor logits = forward_prefill(w, run, prompt, cache);
        CAPTURE(a);
        CAPTURE(b);
        CAPTURE(c);
        CHECK(argmax(logits.data()) == b);
        ++checked;
      }
    }
  }
  CHECK(checked == 36);
}

TEST_CASE("induction model solves generated tasks at full precision") {
  const Weights w = build_induction_model(48);
  const RunConfig run = pass_through_run(w.config, std::nullopt);
  std::size_t hits = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const InductionTask task = generate_task(seed, 512, 48);
    KVCache cache(run.kv_cache);
    const Tensor logits = forward_prefill(w, run, task.tokens, cache, LogitsMode::kAllPositions);
    hits += count_exact_match(logits, task);
    total += task.queries.size();
  }
  CHECK(double(hits) / double(total) >= 0.99);
}

TEST_CASE("induction builder rejects impossible layouts") {
  CHECK_THROWS(build_induction_model(3));
  InductionTemplate t;
  t.heads = 1;
  t.kv_heads = 1;
  t.head_dim = 16;
  t.pos_frequencies = 6;
  CHECK_THROWS_AS(build_induction_model(48, t), DimensionError);
}
