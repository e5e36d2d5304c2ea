// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <string>

#include "kvpareto/memmodel.hpp"
#include "kvpareto/rng.hpp"

using namespace kvpareto;

namespace {

const std::string kDir = KVP_ARCH_DIR;

ArchSpec toy_arch() {
  ArchSpec a;
  a.name = "toy";
  a.param_count = 1000;
  a.layers = 3;
  a.heads = 4;
  a.kv_heads = 2;
  a.head_dim = 8;
  a.vocab_size = 10;
  return a;
}

struct PublishedRow {
  const char* file;
  double reduction;
  double baseline_gb;
};

const PublishedRow kRows[] = {
    {"qwen2.5-3b.yaml", 73, 11.49},  {"llama3.2-3b.yaml", 76, 14.10},
    {"qwen2.5-7b.yaml", 68, 24.90},  {"llama3.1-8b.yaml", 75, 26.91},
    {"mistral-7b-v0.3.yaml", 78, 24.34},
};

MemQuery bf16(std::uint64_t m) {
  MemQuery q;
  q.context = m;
  return q;
}

MemQuery w4_kv(std::uint64_t m, int k, int v, std::uint64_t chunk) {
  MemQuery q = bf16(m);
  q.weight_bits = 4;
  q.k_bits = k;
  q.v_bits = v;
  q.attention = AttentionKind::kSdpaChunked;
  q.chunk = chunk;
  return q;
}

}  // namespace

TEST_CASE("kv bytes hand examples") {
  ArchSpec a = toy_arch();
  MemQuery q = bf16(4);
  CHECK(kv_bytes(q, a) == 768.0);
  CHECK(kv_bytes(bf16(0), a) == 0.0);
  q.k_bits = 8;
  q.v_bits = 2;
  CHECK(kv_bytes(q, a) == 240.0);
  // Overhead: 32 bits per group of 32 elements on each quantized tensor.
  q.count_group_overhead = true;
  q.kv_group_size = 32;
  CHECK(kv_bytes(q, a) == 240.0 + 2 * 192 / 8.0);
}

TEST_CASE("attention peak hand examples") {
  ArchSpec a = toy_arch();
  a.heads = 16;
  MemQuery q = bf16(10000);
  CHECK(mha_peak(q, a) == 3.2e9);
  q.attention = AttentionKind::kSdpaChunked;
  q.chunk = 256;
  CHECK(mha_peak(q, a) == 16.0 * 256 * 10000 * 2);
  CHECK(mha_peak(q, a) == doctest::Approx(81.92e6));
  q.attention = AttentionKind::kFlash;
  q.chunk = 0;
  CHECK(mha_peak(q, a) == 98304.0);
  q.flash_workspace = 100;
  CHECK(mha_peak(q, a) == 98504.0);
}

TEST_CASE("lm_head peak") {
  ArchSpec a = toy_arch();
  a.vocab_size = 151936;
  CHECK(lm_head_peak(bf16(10000), a) == doctest::Approx(3.03872e9));
  CHECK(lm_head_peak(bf16(1), a) == 151936.0 * 2);
  a.vocab_size = 0;
  CHECK_THROWS_AS(total_memory(bf16(1), a), ArchError);
}

TEST_CASE("profile sums its parts") {
  const ArchSpec a = load_arch(kDir + "/qwen2.5-3b.yaml");
  for (const MemQuery& q : {bf16(10240), w4_kv(10240, 4, 4, 256), w4_kv(1000, 8, 2, 1000)}) {
    const MemoryProfile p = total_memory(q, a);
    CHECK(p.total_bytes == p.model_bytes + p.kv_bytes + p.peak_activation_bytes);
    CHECK(p.peak_activation_bytes == std::max(p.mha_peak_bytes, p.lm_head_peak_bytes));
    CHECK(p.breakdown().find("lm_head") != std::string::npos);
  }
}

TEST_CASE("reduction arithmetic") {
  MemoryProfile b, o;
  b.total_bytes = 400;
  o.total_bytes = 400;
  CHECK(memory_reduction(b, o) == 0.0);
  o.total_bytes = 100;
  CHECK(memory_reduction(b, o) == 75.0);
}

TEST_CASE("published memory table within tolerance") {
  for (const auto& row : kRows) {
    CAPTURE(row.file);
    const ArchSpec a = load_arch(kDir + "/" + row.file);
    const MemoryProfile base = total_memory(bf16(10240), a);
    const MemoryProfile opt = total_memory(w4_kv(10240, 4, 4, 256), a);
    const double red = memory_reduction(base, opt);
    CHECK(std::abs(red - row.reduction) <= 8.0);
    CHECK(red >= 60.0);
    CHECK(red <= 86.0);
    CHECK(std::abs(base.total_bytes / 1e9 - row.baseline_gb) <= 0.15 * row.baseline_gb);
  }
}

TEST_CASE("long context ordering") {
  const std::uint64_t m = 128 * 1024;
  for (const auto& row : kRows) {
    CAPTURE(row.file);
    const ArchSpec a = load_arch(kDir + "/" + row.file);
    const double w16 = total_memory(bf16(m), a).total_bytes;
    const double k8 = total_memory(w4_kv(m, 8, 8, 1024), a).total_bytes;
    const double k4 = total_memory(w4_kv(m, 4, 4, 1024), a).total_bytes;
    MemQuery flash = w4_kv(m, 4, 4, 1024);
    flash.attention = AttentionKind::kFlash;
    const double fl = total_memory(flash, a).total_bytes;
    CHECK(w16 > k8);
    CHECK(k8 > k4);
    CHECK(k4 > fl);
    MemQuery sdpa8 = w4_kv(m, 8, 8, 0);
    sdpa8.attention = AttentionKind::kSdpa;
    const double full = total_memory(sdpa8, a).total_bytes;
    CHECK((full - k8) / full >= 0.15);
  }
}

TEST_CASE("fewer bits or chunking always shrink the total") {
  Rng rng(0);
  const char* files[] = {"qwen2.5-3b.yaml", "llama3.1-8b.yaml", "mistral-7b-v0.3.yaml"};
  const int bits[] = {2, 4, 8, 16};
  for (int rep = 0; rep < 300; ++rep) {
    const ArchSpec a = load_arch(kDir + "/" + files[rng.uniform_index(3)]);
    MemQuery q = bf16(2 + rng.uniform_index(200000));
    q.weight_bits = bits[1 + rng.uniform_index(3)];
    q.k_bits = bits[1 + rng.uniform_index(3)];
    q.v_bits = bits[1 + rng.uniform_index(3)];
    q.count_group_overhead = rng.uniform_index(2) == 1;
    const double t = total_memory(q, a).total_bytes;
    MemQuery w = q, k = q, v = q;
    w.weight_bits = bits[rng.uniform_index(std::size_t(std::find(bits, bits + 4, q.weight_bits) - bits))];
    k.k_bits = bits[rng.uniform_index(std::size_t(std::find(bits, bits + 4, q.k_bits) - bits))];
    v.v_bits = bits[rng.uniform_index(std::size_t(std::find(bits, bits + 4, q.v_bits) - bits))];
    CHECK(total_memory(w, a).total_bytes < t);
    CHECK(total_memory(k, a).total_bytes < t);
    CHECK(total_memory(v, a).total_bytes < t);
    MemQuery pc = q;
    pc.attention = AttentionKind::kSdpaChunked;
    pc.chunk = 1 + rng.uniform_index(q.context - 1);
    CHECK(total_memory(pc, a).total_bytes < t);
    pc.chunk = q.context;
    CHECK(mha_peak(pc, a) == mha_peak(q, a));
    CHECK(total_memory(pc, a).total_bytes == t);
  }
}

TEST_CASE("overhead accounting") {
  CHECK(effective_bits(4, 128, false) == 4.0);
  CHECK(effective_bits(4, 128, true) == 4.25);
  CHECK(effective_bits(16, 128, true) == 16.0);
  const ArchSpec a = toy_arch();
  MemQuery q = w4_kv(64, 4, 4, 16);
  q.k_smoothing = true;
  const double plain = kv_bytes(q, a);
  q.count_group_overhead = true;
  q.kv_group_size = 32;
  // Group parameters on both tensors plus one 16-bit mean per head, dim,
  // layer and 16-token segment.
  const double n = 2.0 * 64 * 8 * 3;
  CHECK(kv_bytes(q, a) == plain + 2 * n * 32 / 32 / 8 + 4 * (2 * 8 * 3) * 2);
}

TEST_CASE("query validation") {
  const ArchSpec a = toy_arch();
  MemQuery q = bf16(100);
  q.k_bits = 3;
  CHECK_THROWS_AS(total_memory(q, a), std::invalid_argument);
  q = w4_kv(100, 4, 4, 0);
  CHECK_THROWS_AS(total_memory(q, a), std::invalid_argument);
  q.chunk = 101;
  CHECK_THROWS_AS(total_memory(q, a), std::invalid_argument);
  q = bf16(100);
  q.attention = AttentionKind::kFlash;
  q.block_q = 0;
  CHECK_THROWS_AS(total_memory(q, a), std::invalid_argument);
}

TEST_CASE("arch files parse and bad ones report their location") {
  for (const auto& row : kRows) CHECK_NOTHROW(load_arch(kDir + "/" + row.file));
  const std::string good =
      "name: t\nparam_count: 100\nlayers: 1\nheads: 2\nkv_heads: 1\nhead_dim: 4\nvocab_size: 5\n";
  const ArchSpec a = parse_arch(good);
  CHECK(a.heads == 2);
  CHECK_FALSE(a.tied_embeddings);
  try {
    parse_arch(good + "hiden: 3\n", "x.yaml");
    FAIL("expected ArchError");
  } catch (const ArchError& e) {
    CHECK(std::string(e.what()).find("x.yaml:8:1") != std::string::npos);
    CHECK(std::string(e.what()).find("hiden") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_arch("name: t\nlayers: 1\n"), ArchError);
  CHECK_THROWS_AS(parse_arch(good + "tied_embeddings: maybe\n"), ArchError);
  CHECK_THROWS_AS(parse_arch("name: t\nparam_count: 100\nlayers: 1\nheads: 3\nkv_heads: 2\n"
                             "head_dim: 4\nvocab_size: 5\n"),
                  ArchError);
  CHECK_THROWS_AS(parse_arch("[1, 2"), ArchError);
  CHECK_THROWS_AS(load_arch(kDir + "/missing.yaml"), ArchError);
}

TEST_CASE("toy arch counts every tensor") {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.kv_heads = 1;
  c.head_dim = 4;
  c.ffn_dim = 6;
  c.vocab_size = 10;
  c.max_positions = 12;
  const ArchSpec a = arch_from_model(c);
  const std::uint64_t h = 8;
  const std::uint64_t layer = h + h * 8 + 2 * h * 4 + 8 * h + h + 2 * h * 6;
  CHECK(a.param_count == 2 * 10 * h + 12 * h + h + 2 * layer);
  CHECK(a.embedding_params() == 2 * 10 * h);
}
