// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "kvpareto/evaltasks.hpp"
#include "kvpareto/model.hpp"
#include "kvpareto/rng.hpp"

using namespace kvpareto;

namespace {

Tensor one_hot_logits(const InductionTask& task, bool correct) {
  Tensor t({task.length, task.vocab});
  for (const auto& q : task.queries) {
    const std::size_t tok = correct ? q.answer : (q.answer + 1) % task.vocab;
    t.at(q.position, tok) = 1.0f;
  }
  return t;
}

}  // namespace

TEST_CASE("task generation is deterministic") {
  CHECK(generate_task(5, 512, 48) == generate_task(5, 512, 48));
  CHECK_FALSE(generate_task(5, 512, 48) == generate_task(6, 512, 48));
}

TEST_CASE("every planted answer is found by scanning") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    for (std::size_t m : {16u, 100u, 512u, 1000u}) {
      const InductionTask t = generate_task(seed, m, 80);
      CHECK(t.queries.size() >= std::max<std::size_t>(1, m / 16));
      for (const auto& q : t.queries) {
        const int key = t.tokens[q.position];
        std::vector<std::size_t> earlier;
        for (std::size_t i = 0; i < q.position; ++i) {
          if (t.tokens[i] == key) earlier.push_back(i);
        }
        REQUIRE(earlier.size() == 1);
        CHECK(earlier[0] + 1 < q.position);
        CHECK(t.tokens[earlier[0] + 1] == q.answer);
      }
      CHECK(std::is_sorted(t.queries.begin(), t.queries.end(),
                           [](auto& a, auto& b) { return a.position < b.position; }));
    }
  }
}

TEST_CASE("smallest task has a query") {
  const InductionTask t = generate_task(0, 16, 8);
  CHECK(t.queries.size() >= 1);
  CHECK(t.tokens.size() == 16);
}

TEST_CASE("infeasible tasks are rejected") {
  CHECK_THROWS_AS(generate_task(0, 16, 7), TaskError);
  CHECK_THROWS_AS(generate_task(0, 15, 8), TaskError);
  CHECK_THROWS_AS(generate_task(0, 512, 20), TaskError);
}

TEST_CASE("queries cover every depth decile") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (std::size_t m : {160u, 333u, 512u, 2048u}) {
      const InductionTask t = generate_task(seed, m, m / 16 + 10);
      std::vector<int> deciles(10, 0);
      for (const auto& q : t.queries) ++deciles[q.position * 10 / m];
      for (int d : deciles) CHECK(d >= 1);
    }
  }
}

TEST_CASE("exact match scoring") {
  const InductionTask t = generate_task(1, 256, 32);
  CHECK(score_exact_match(one_hot_logits(t, true), t) == 1.0);
  CHECK(score_exact_match(one_hot_logits(t, false), t) == 0.0);
  std::vector<int> preds;
  for (const auto& q : t.queries) preds.push_back(q.answer);
  CHECK(score_exact_match(preds, t) == 1.0);
  preds[0] = (preds[0] + 1) % 32;
  CHECK(score_exact_match(preds, t) == doctest::Approx(1.0 - 1.0 / double(preds.size())));
  CHECK_THROWS_AS(score_exact_match(std::vector<int>{1}, t), DimensionError);
  CHECK_THROWS_AS(score_exact_match(Tensor({10, 32}), t), DimensionError);
}

TEST_CASE("scoring ignores query order") {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const InductionTask t = generate_task(rep, 320, 40);
    std::vector<int> preds;
    for (const auto& q : t.queries) {
      preds.push_back(rng.uniform_index(2) ? q.answer : int(rng.uniform_index(40)));
    }
    const double base = score_exact_match(preds, t);
    InductionTask shuffled = t;
    std::vector<std::size_t> perm(t.queries.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
    std::vector<int> p2;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      shuffled.queries[i] = t.queries[perm[i]];
      p2.push_back(preds[perm[i]]);
    }
    CHECK(score_exact_match(p2, shuffled) == base);
  }
}

TEST_CASE("fidelity of identical logits") {
  Rng rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor x = random_normal({7, 20}, rng, 3);
    const FidelityReport r = fidelity(x, x);
    CHECK(r.top1_agreement == 1.0);
    CHECK(r.rel_logit_err == 0.0);
    CHECK(r.cosine == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.rows == 7);
  }
  const FidelityReport z = fidelity(Tensor({2, 3}), Tensor({2, 3}));
  CHECK(z.cosine == 1.0);
  CHECK(z.rel_logit_err == 0.0);
}

TEST_CASE("tiny noise keeps agreement") {
  Rng rng(5);
  Tensor b({16, 48});
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t j = 0; j < 48; ++j) b.at(r, j) = float(rng.normal());
    b.at(r, r % 48) = 10.0f;
  }
  Tensor c = b;
  for (auto& x : c.data()) x += float(rng.uniform(-1e-6, 1e-6));
  const FidelityReport r = fidelity(b, c);
  CHECK(r.top1_agreement == 1.0);
  CHECK(r.rel_logit_err < 1e-5);
  CHECK(r.cosine > 0.999999);
  CHECK(r.cosine <= 1.0);
}

TEST_CASE("two-bit cache drifts further than eight-bit cache") {
  const Weights w = build_induction_model(32);
  double err2 = 0, err8 = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const InductionTask t = generate_task(seed, 256, 32);
    auto run_with = [&](const QuantSpec& s) {
      RunConfig run;
      run.kv_cache = cache_config_for(w.config, s, s);
      KVCache cache(run.kv_cache);
      return query_rows(forward_prefill(w, run, t.tokens, cache, LogitsMode::kAllPositions), t);
    };
    const Tensor base = run_with(QuantSpec::pass_through());
    err2 += fidelity(base, run_with({2, Granularity::kPerTokenGroup, 32, false})).rel_logit_err;
    err8 += fidelity(base, run_with({8, Granularity::kPerTokenGroup, 32, false})).rel_logit_err;
  }
  CHECK(err2 / 20 >= err8 / 20);
  CHECK(err8 / 20 < 0.05);
}

TEST_CASE("accumulated fidelity equals one-shot fidelity") {
  Rng rng(6);
  const Tensor a = random_normal({6, 9}, rng), b = random_normal({6, 9}, rng);
  FidelityAccumulator acc;
  acc.add(slice_axis1(a.reshaped({1, 6, 9}), 0, 2).reshaped({2, 9}),
          slice_axis1(b.reshaped({1, 6, 9}), 0, 2).reshaped({2, 9}));
  acc.add(slice_axis1(a.reshaped({1, 6, 9}), 2, 6).reshaped({4, 9}),
          slice_axis1(b.reshaped({1, 6, 9}), 2, 6).reshaped({4, 9}));
  const FidelityReport one = fidelity(a, b), two = acc.report();
  CHECK(two.rows == 6);
  CHECK(two.top1_agreement == one.top1_agreement);
  CHECK(two.rel_logit_err == doctest::Approx(one.rel_logit_err).epsilon(1e-12));
  CHECK(two.cosine >= -1.0);
  CHECK(two.cosine <= 1.0);
}

TEST_CASE("task dumps roundtrip") {
  const auto dir = std::filesystem::temp_directory_path() / "kvpareto_task_test";
  std::filesystem::create_directories(dir);
  const InductionTask t = generate_task(9, 200, 30);
  save_task(dir / "t.json", t);
  CHECK(load_task(dir / "t.json") == t);

  InductionTask bad = t;
  bad.queries[0].answer = (bad.queries[0].answer + 1) % 30;
  CHECK_THROWS_AS(bad.validate(), TaskError);
  save_task(dir / "bad.json", bad);
  CHECK_THROWS_AS(load_task(dir / "bad.json"), TaskError);
}
