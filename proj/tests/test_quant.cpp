// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "kvpareto/quant.hpp"
#include "kvpareto/rng.hpp"

using namespace kvpareto;

namespace {

QuantSpec spec_of(int bits, Granularity g, std::size_t group, bool smooth = false) {
  return {bits, g, group, smooth};
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST_CASE("qparams hand examples") {
  const float v[] = {0, 1, 2, 3};
  const QuantParams p = compute_qparams(v, 2);
  CHECK(p.scale == 1.0f);
  CHECK(p.zero_point == -2);

  const float zeros[] = {0, 0, 0};
  const QuantParams pz = compute_qparams(zeros, 8);
  CHECK(rel(pz.scale, 1e-8 / 255) < std::ldexp(1.0, -15));
  CHECK(pz.scale <= 1e-8 / 255);
  CHECK(pz.zero_point == -128);

  const float sym[] = {-1, 1};
  const QuantParams ps = compute_qparams(sym, 8);
  CHECK(rel(ps.scale, 2.0 / 255) < std::ldexp(1.0, -15));
  CHECK(ps.zero_point == 0);
}

TEST_CASE("qparams errors") {
  const float bad[] = {1.0f, std::numeric_limits<float>::quiet_NaN()};
  CHECK_THROWS_AS(compute_qparams(bad, 8), NumericDomainError);
  const float inf[] = {std::numeric_limits<float>::infinity()};
  CHECK_THROWS_AS(compute_qparams(inf, 4), NumericDomainError);
  CHECK_THROWS_AS(compute_qparams(std::span<const float>{}, 4), NumericDomainError);
}

TEST_CASE("grid-aligned int2 example") {
  const Tensor t({1, 1, 4}, {0, 1, 2, 3});
  const QuantizedBlock b = quantize(t, spec_of(2, Granularity::kPerTensor, 0));
  CHECK(b.codes == std::vector<std::int8_t>{-2, -1, 0, 1});
  CHECK(dequantize(b) == t);
  Tensor grid({1, 2, 256});
  for (std::size_t i = 0; i < 256; ++i) {
    grid[i] = float(i);
    grid[256 + i] = float(i) * 0.5f - 64.0f;
  }
  CHECK(qdq(grid, spec_of(8, Granularity::kPerTokenGroup, 256)) == grid);
}

TEST_CASE("zero tensor roundtrips exactly") {
  const Tensor z({2, 4, 32});
  for (int bits : {2, 4, 8}) {
    for (auto g : {Granularity::kPerTokenGroup, Granularity::kPerSequenceGroup,
                   Granularity::kPerTensor}) {
      CHECK(qdq(z, spec_of(bits, g, 32)) == z);
    }
  }
}

TEST_CASE("group counts per granularity") {
  Rng rng(1);
  const Tensor t = random_normal({2, 4, 64}, rng);
  CHECK(quantize(t, spec_of(8, Granularity::kPerTensor, 32)).group_count() == 1);
  CHECK(quantize(t, spec_of(8, Granularity::kPerTokenGroup, 32)).group_count() == 16);
  // 2 heads, 70 tokens, groups of 32 tokens: 3 per head, the last partial.
  const Tensor s = random_normal({2, 70, 8}, rng);
  const auto layout = group_layout(s.shape(), spec_of(4, Granularity::kPerSequenceGroup, 32));
  REQUIRE(layout.size() == 6);
  CHECK(layout[2].length == 6 * 8);
  CHECK(layout[3].begin == 70 * 8);
}

TEST_CASE("per-token groups must divide head_dim") {
  const Tensor t({1, 2, 48});
  CHECK_THROWS_AS(quantize(t, spec_of(4, Granularity::kPerTokenGroup, 32)), LayoutError);
  CHECK_THROWS_AS(quantize(t, spec_of(3, Granularity::kPerTensor, 0)), LayoutError);
}

TEST_CASE("roundtrip bound, idempotence, zero preservation, monotonicity") {
  Rng rng(2024);
  std::size_t groups_seen = 0;
  for (int bits : {2, 4, 8}) {
    for (auto g : {Granularity::kPerTokenGroup, Granularity::kPerSequenceGroup,
                   Granularity::kPerTensor}) {
      for (std::size_t gs : {32u, 64u, 128u}) {
        for (int rep = 0; rep < 6; ++rep) {
          const std::size_t heads = 1 + rng.uniform_index(2);
          const std::size_t tokens = 1 + rng.uniform_index(100);
          Tensor t = random_normal({heads, tokens, 128}, rng, rng.uniform(0.01, 20));
          // Plant exact zeros and an offset so ranges do not always straddle 0.
          const float shift = static_cast<float>(rng.uniform(-3, 3));
          for (std::size_t i = 0; i < t.size(); ++i) {
            if (i % 17 == 0) t[i] = 0.0f;
            else if (rep % 2) t[i] += shift;
          }
          const QuantSpec spec = spec_of(bits, g, gs);
          const QuantizedBlock b = quantize(t, spec);
          const Tensor back = dequantize(b);
          const auto layout = group_layout(t.shape(), spec);
          REQUIRE(layout.size() == b.params.size());
          groups_seen += layout.size();
          bool ok_range = true, ok_bound = true, ok_zero = true;
          for (std::size_t gi = 0; gi < layout.size(); ++gi) {
            const float s = b.params[gi].scale;
            CHECK(s > 0.0f);
            const auto& r = layout[gi];
            for (std::size_t i = r.begin; i < r.begin + r.length; ++i) {
              ok_range &= b.codes[i] >= spec.q_min() && b.codes[i] <= spec.q_max();
              ok_bound &= std::abs(t[i] - back[i]) <= s;
              if (t[i] == 0.0f) ok_zero &= back[i] == 0.0f;
            }
          }
          CHECK(ok_range);
          CHECK(ok_bound);
          CHECK(ok_zero);
          for (const auto& r : layout) {
            std::vector<std::size_t> idx(r.length);
            for (std::size_t i = 0; i < r.length; ++i) idx[i] = r.begin + i;
            std::sort(idx.begin(), idx.end(), [&](auto a, auto c) { return t[a] < t[c]; });
            bool monotone = true;
            for (std::size_t i = 1; i < idx.size(); ++i) {
              monotone &= b.codes[idx[i - 1]] <= b.codes[idx[i]];
            }
            CHECK(monotone);
          }
          const QuantizedBlock again = quantize(back, spec);
          CHECK(again.codes == b.codes);
          CHECK(dequantize(again) == back);
        }
      }
    }
  }
  CHECK(groups_seen > 1000);
}

TEST_CASE("int8 error on one N(0,1) group is within its scale") {
  Rng rng(0);
  for (int rep = 0; rep < 50; ++rep) {
    const Tensor t = random_normal({1, 1, 64}, rng);
    const QuantizedBlock b = quantize(t, spec_of(8, Granularity::kPerTokenGroup, 64));
    const Tensor back = dequantize(b);
    for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(t[i] - back[i]) <= b.params[0].scale);
  }
}

TEST_CASE("int2 mse is at least int8 mse") {
  Rng rng(77);
  for (int seed = 0; seed < 120; ++seed) {
    const Tensor t = random_normal({2, 16, 64}, rng);
    double e2 = 0, e8 = 0;
    const Tensor a = qdq(t, spec_of(2, Granularity::kPerTokenGroup, 32));
    const Tensor b = qdq(t, spec_of(8, Granularity::kPerTokenGroup, 32));
    for (std::size_t i = 0; i < t.size(); ++i) {
      e2 += (a[i] - t[i]) * (a[i] - t[i]);
      e8 += (b[i] - t[i]) * (b[i] - t[i]);
    }
    CHECK(e2 >= e8);
  }
}

TEST_CASE("per-token group equal to head_dim matches row-by-row quantization") {
  Rng rng(9);
  const Tensor t = random_normal({3, 7, 32}, rng, 2.5);
  const QuantizedBlock b = quantize(t, spec_of(4, Granularity::kPerTokenGroup, 32));
  for (std::size_t h = 0; h < 3; ++h) {
    for (std::size_t tok = 0; tok < 7; ++tok) {
      Tensor row({1, 1, 32});
      for (std::size_t x = 0; x < 32; ++x) row[x] = t.at(h, tok, x);
      const QuantizedBlock rb = quantize(row, spec_of(4, Granularity::kPerTensor, 0));
      for (std::size_t x = 0; x < 32; ++x) {
        CHECK(b.codes[(h * 7 + tok) * 32 + x] == rb.codes[x]);
      }
    }
  }
}

TEST_CASE("smooth_k examples") {
  const auto [kt, m] = smooth_k(Tensor({1, 2, 2}, {1, 3, 3, 5}));
  CHECK(m == Tensor({1, 1, 2}, {2, 4}));
  CHECK(kt == Tensor({1, 2, 2}, {-1, -1, 1, 1}));

  const Tensor zm({1, 2, 3}, {1, -2, 0.5f, -1, 2, -0.5f});
  const auto [zt, zmean] = smooth_k(zm);
  CHECK(zt == zm);
  for (float x : zmean.data()) CHECK(x == 0.0f);

  Tensor c({2, 5, 3});
  for (auto& x : c.data()) x = 1.75f;
  const auto [ct, cm] = smooth_k(c);
  for (float x : ct.data()) CHECK(x == 0.0f);
}

TEST_CASE("smoothed keys have zero column means") {
  Rng rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t len = 1 + rng.uniform_index(200);
    Tensor k = random_normal({2, len, 16}, rng, rng.uniform(0.1, 5));
    for (auto& x : k.data()) x += 3.0f;
    const auto [kt, m] = smooth_k(k);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t d = 0; d < 16; ++d) {
        double sum = 0;
        for (std::size_t i = 0; i < len; ++i) sum += kt.at(b, i, d);
        CHECK(std::abs(sum / double(len)) <= 1e-6);
      }
    }
  }
}

TEST_CASE("smoothing leaves attention unchanged without quantization") {
  Rng rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor q = random_normal({2, 9, 16}, rng);
    Tensor k = random_normal({2, 9, 16}, rng);
    for (auto& x : k.data()) x += 2.0f;
    const Tensor v = random_normal({2, 9, 16}, rng);
    const auto [kt, m] = smooth_k(k);
    const Tensor ref = sdpa(q, k, v, AttentionMask::causal());
    const Tensor no_mean = sdpa(q, kt, v, AttentionMask::causal());
    Tensor readded = kt;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t d = 0; d < 16; ++d) readded.at(b, i, d) += m.at(b, 0, d);
    const Tensor with_mean = sdpa(q, readded, v, AttentionMask::causal());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(no_mean[i] - ref[i]) <= 1e-5);
      CHECK(std::abs(with_mean[i] - ref[i]) <= 1e-5);
    }
  }
}

TEST_CASE("smoothing in quantize stores means and restores them") {
  Rng rng(10);
  Tensor k = random_normal({2, 8, 32}, rng);
  for (auto& x : k.data()) x += 5.0f;
  const QuantizedBlock b = quantize(k, spec_of(8, Granularity::kPerTokenGroup, 32, true));
  REQUIRE(b.means.has_value());
  CHECK(b.means->shape() == Shape{2, 1, 32});
  const Tensor back = dequantize(b);
  double err_sm = 0, err_plain = 0;
  const Tensor plain = qdq(k, spec_of(8, Granularity::kPerTokenGroup, 32));
  for (std::size_t i = 0; i < k.size(); ++i) {
    err_sm = std::max<double>(err_sm, std::abs(back[i] - k[i]));
    err_plain = std::max<double>(err_plain, std::abs(plain[i] - k[i]));
  }
  CHECK(err_sm < err_plain);
}

TEST_CASE("pass-through spec is the identity") {
  Rng rng(12);
  const Tensor t = random_normal({2, 5, 8}, rng, 100);
  CHECK(qdq(t, QuantSpec::pass_through()) == t);
  CHECK(quantize(t, QuantSpec::pass_through()).codes.empty());
}

TEST_CASE("pack and unpack roundtrip") {
  Rng rng(13);
  for (int bits : {2, 4, 8}) {
    const QuantSpec s = spec_of(bits, Granularity::kPerTensor, 0);
    for (std::size_t n : {1u, 3u, 7u, 64u, 129u}) {
      std::vector<std::int8_t> codes(n);
      for (auto& c : codes) {
        c = static_cast<std::int8_t>(s.q_min() + int(rng.uniform_index(1u << bits)));
      }
      const auto packed = pack_codes(codes, bits);
      CHECK(packed.size() == (n * bits + 7) / 8);
      CHECK(unpack_codes(packed, bits, n) == codes);
    }
  }
  CHECK_THROWS_AS(pack_codes(std::vector<std::int8_t>{0}, 3), LayoutError);
}

TEST_CASE("granularity names parse back") {
  for (auto g : {Granularity::kPerTokenGroup, Granularity::kPerSequenceGroup,
                 Granularity::kPerTensor}) {
    CHECK(parse_granularity(granularity_name(g)) == g);
    CHECK(parse_granularity(granularity_short_name(g)) == g);
  }
  CHECK_THROWS_AS(parse_granularity("per-channel"), LayoutError);
}
