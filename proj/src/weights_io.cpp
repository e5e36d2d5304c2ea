// Copyright 2026 The KV Pareto Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "kvpareto/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

namespace kvpareto {

using nlohmann::json;

std::uint16_t float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t exp = (x >> 23) & 0xFFu;
  std::uint32_t mant = x & 0x7FFFFFu;
  if (exp == 0xFF) {  // inf / nan
    return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0u));
  }
  const int e = static_cast<int>(exp) - 127 + 15;
  if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7C00u);
  if (e <= 0) {
    if (e < -10) return static_cast<std::uint16_t>(sign);
    mant |= 0x800000u;
    const int shift = 14 - e;
    std::uint32_t half = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t mid = 1u << (shift - 1);
    if (rem > mid || (rem == mid && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
  }
  std::uint32_t half = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // may carry into exp
  return static_cast<std::uint16_t>(sign | half);
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mant & 0x3FFu) << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::map<std::string, Tensor> named_tensors(const Weights& w) {
  std::map<std::string, Tensor> out;
  out["embed"] = w.embed;
  out["pos"] = w.pos;
  out["lm_head"] = w.lm_head;
  out["norm.final"] = w.final_norm;
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& l = w.layers[i];
    const std::string p = fmt::format("layers.{}.", i);
    out[p + "norm.attn"] = l.attn_norm;
    out[p + "attn.q"] = l.q;
    out[p + "attn.k"] = l.k;
    out[p + "attn.v"] = l.v;
    out[p + "attn.o"] = l.o;
    if (w.config.ffn_dim > 0) {
      out[p + "norm.ffn"] = l.ffn_norm;
      out[p + "ffn.up"] = l.up;
      out[p + "ffn.down"] = l.down;
    }
  }
  return out;
}

namespace {

json config_metadata(const ModelConfig& c) {
  // String values, as in common tensor containers.
  return json{{"layers", std::to_string(c.layers)},
              {"heads", std::to_string(c.heads)},
              {"kv_heads", std::to_string(c.kv_heads)},
              {"head_dim", std::to_string(c.head_dim)},
              {"ffn_dim", std::to_string(c.ffn_dim)},
              {"vocab_size", std::to_string(c.vocab_size)},
              {"max_positions", std::to_string(c.max_positions)}};
}

struct Entry {
  DType dtype;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct Container {
  std::map<std::string, Entry> entries;
  json metadata;
  std::vector<char> payload;
};

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open weight file '{}'", path.string()));
  unsigned char len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  if (!in) throw FormatError(fmt::format("'{}': truncated header length", path.string()));
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];

  const auto file_size = std::filesystem::file_size(path);
  if (header_len > file_size - 8) {
    throw FormatError(fmt::format("'{}': header length {} exceeds file size {}",
                                  path.string(), header_len, file_size));
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  json j;
  try {
    j = json::parse(header);
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("'{}': malformed header: {}", path.string(), e.what()));
  }
  if (!j.is_object()) throw FormatError(fmt::format("'{}': header is not an object", path.string()));

  Container c;
  c.payload.resize(file_size - 8 - header_len);
  in.read(c.payload.data(), static_cast<std::streamsize>(c.payload.size()));
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "__metadata__") {
      c.metadata = it.value();
      continue;
    }
    const json& e = it.value();
    try {
      Entry entry;
      const auto dtype = e.at("dtype").get<std::string>();
      if (dtype == "f32") {
        entry.dtype = DType::kF32;
      } else if (dtype == "f16") {
        entry.dtype = DType::kF16;
      } else {
        throw FormatError(fmt::format("tensor '{}': unsupported dtype '{}' (f32 or f16)",
                                      it.key(), dtype));
      }
      entry.shape = e.at("shape").get<Shape>();
      entry.offset = e.at("offset").get<std::uint64_t>();
      entry.length = e.at("length").get<std::uint64_t>();
      const std::uint64_t elem = entry.dtype == DType::kF32 ? 4 : 2;
      if (entry.length != numel(entry.shape) * elem) {
        throw FormatError(fmt::format("tensor '{}': {} bytes do not match shape {}",
                                      it.key(), entry.length, shape_str(entry.shape)));
      }
      if (entry.offset + entry.length > c.payload.size()) {
        throw FormatError(fmt::format("tensor '{}': payload range out of bounds", it.key()));
      }
      c.entries.emplace(it.key(), std::move(entry));
    } catch (const json::exception& ex) {
      throw FormatError(fmt::format("tensor '{}': bad header entry: {}", it.key(), ex.what()));
    }
  }
  return c;
}

Tensor decode(const Container& c, const Entry& e) {
  const std::size_t n = numel(e.shape);
  std::vector<float> data(n);
  const auto* p = reinterpret_cast<const unsigned char*>(c.payload.data() + e.offset);
  for (std::size_t i = 0; i < n; ++i) {
    if (e.dtype == DType::kF32) {
      const std::uint32_t u = static_cast<std::uint32_t>(p[4 * i]) |
                              (static_cast<std::uint32_t>(p[4 * i + 1]) << 8) |
                              (static_cast<std::uint32_t>(p[4 * i + 2]) << 16) |
                              (static_cast<std::uint32_t>(p[4 * i + 3]) << 24);
      data[i] = std::bit_cast<float>(u);
    } else {
      const auto u = static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8));
      data[i] = half_to_float(u);
    }
  }
  return Tensor(e.shape, std::move(data));
}

}  // namespace

void save_weights(const std::filesystem::path& path, const Weights& w, DType dtype) {
  w.validate();
  const auto tensors = named_tensors(w);
  json header = json::object();
  std::vector<unsigned char> payload;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t offset = payload.size();
    for (float x : t.data()) {
      if (dtype == DType::kF32) {
        const auto u = std::bit_cast<std::uint32_t>(x);
        for (int b = 0; b < 4; ++b) payload.push_back(static_cast<unsigned char>(u >> (8 * b)));
      } else {
        const auto u = float_to_half(x);
        payload.push_back(static_cast<unsigned char>(u & 0xFF));
        payload.push_back(static_cast<unsigned char>(u >> 8));
      }
    }
    header[name] = {{"dtype", dtype == DType::kF32 ? "f32" : "f16"},
                    {"shape", t.shape()},
                    {"offset", offset},
                    {"length", payload.size() - offset}};
  }
  header["__metadata__"] = config_metadata(w.config);
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(fmt::format("cannot write '{}'", path.string()));
  const std::uint64_t n = text.size();
  for (int b = 0; b < 8; ++b) out.put(static_cast<char>((n >> (8 * b)) & 0xFF));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
}

Weights load_weights(const std::filesystem::path& path, const ModelConfig& cfg) {
  cfg.validate();
  const Container c = read_container(path);

  // Expected names and shapes come from an all-zero template of this config.
  Weights tmpl;
  tmpl.config = cfg;
  const std::size_t h = cfg.hidden(), qd = cfg.heads * cfg.head_dim,
                    kvd = cfg.kv_heads * cfg.head_dim;
  tmpl.embed = Tensor({cfg.vocab_size, h});
  tmpl.pos = Tensor({cfg.max_positions, h});
  tmpl.final_norm = Tensor({h});
  tmpl.lm_head = Tensor({h, cfg.vocab_size});
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    LayerWeights l;
    l.attn_norm = Tensor({h});
    l.q = Tensor({h, qd});
    l.k = Tensor({h, kvd});
    l.v = Tensor({h, kvd});
    l.o = Tensor({qd, h});
    if (cfg.ffn_dim > 0) {
      l.ffn_norm = Tensor({h});
      l.up = Tensor({h, cfg.ffn_dim});
      l.down = Tensor({cfg.ffn_dim, h});
    }
    tmpl.layers.push_back(std::move(l));
  }
  const auto expected = named_tensors(tmpl);

  std::vector<std::string> missing, extra;
  for (const auto& [name, t] : expected) {
    if (!c.entries.contains(name)) missing.push_back(name);
  }
  for (const auto& [name, e] : c.entries) {
    if (!expected.contains(name)) extra.push_back(name);
  }
  if (!missing.empty() || !extra.empty()) {
    throw FormatError(fmt::format("'{}': missing tensors [{}], unexpected tensors [{}]",
                                  path.string(), fmt::join(missing, ", "),
                                  fmt::join(extra, ", ")));
  }
  std::map<std::string, Tensor> loaded;
  for (const auto& [name, t] : expected) {
    const Entry& e = c.entries.at(name);
    if (e.shape != t.shape()) {
      throw FormatError(fmt::format("tensor '{}': expected shape {}, found {}", name,
                                    shape_str(t.shape()), shape_str(e.shape)));
    }
    loaded.emplace(name, decode(c, e));
  }

  Weights w;
  w.config = cfg;
  w.embed = loaded.at("embed");
  w.pos = loaded.at("pos");
  w.final_norm = loaded.at("norm.final");
  w.lm_head = loaded.at("lm_head");
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = fmt::format("layers.{}.", i);
    LayerWeights l;
    l.attn_norm = loaded.at(p + "norm.attn");
    l.q = loaded.at(p + "attn.q");
    l.k = loaded.at(p + "attn.k");
    l.v = loaded.at(p + "attn.v");
    l.o = loaded.at(p + "attn.o");
    if (cfg.ffn_dim > 0) {
      l.ffn_norm = loaded.at(p + "norm.ffn");
      l.up = loaded.at(p + "ffn.up");
      l.down = loaded.at(p + "ffn.down");
    }
    w.layers.push_back(std::move(l));
  }
  return w;
}

Weights load_model(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (!c.metadata.is_object()) {
    throw FormatError(fmt::format("'{}': no __metadata__ model config", path.string()));
  }
  auto field = [&](const char* key) -> std::size_t {
    try {
      return static_cast<std::size_t>(std::stoull(c.metadata.at(key).get<std::string>()));
    } catch (const std::exception&) {
      throw FormatError(fmt::format("'{}': metadata field '{}' missing or invalid",
                                    path.string(), key));
    }
  };
  ModelConfig cfg;
  cfg.layers = field("layers");
  cfg.heads = field("heads");
  cfg.kv_heads = field("kv_heads");
  cfg.head_dim = field("head_dim");
  cfg.ffn_dim = field("ffn_dim");
  cfg.vocab_size = field("vocab_size");
  cfg.max_positions = field("max_positions");
  return load_weights(path, cfg);
}

}  // namespace kvpareto
