// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "great/tensor.hpp"

namespace great {

/// Named-tensor container shared by checkpoints and datasets.
///
/// Layout: magic "GRT1", uint32 little-endian metadata length, JSON metadata,
/// then the tensors' float64 payloads (little-endian) back to back. The
/// metadata carries a "tensors" manifest of {name, shape, dtype, offset}, with
/// offsets in bytes from the start of the payload section.
inline constexpr std::array<char, 4> kContainerMagic{'G', 'R', 'T', '1'};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  nlohmann::json meta;  // caller metadata; "tensors" is reserved for the manifest
  std::vector<NamedTensor> tensors;

  const Tensor& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.tensor;
    throw ConfigError("container has no tensor named \"" + name + "\"");
  }
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

/// Appends one tensor's raw little-endian float64 payload.
inline void append_payload(std::string& out, const Tensor& t) {
  for (double v : t.data()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
}

inline std::string encode_container(const Container& c) {
  nlohmann::json meta = c.meta.is_null() ? nlohmann::json::object() : c.meta;
  nlohmann::json manifest = nlohmann::json::array();
  std::string payload;
  for (const auto& nt : c.tensors) {
    manifest.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"dtype", "f64"}, {"offset", payload.size()}});
    append_payload(payload, nt.tensor);
  }
  meta["tensors"] = std::move(manifest);
  const std::string header = meta.dump();
  std::string out(kContainerMagic.begin(), kContainerMagic.end());
  const auto len = static_cast<std::uint32_t>(header.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xffU));
  out += header;
  out += payload;
  return out;
}

inline Container decode_container(const std::string& bytes) {
  if (bytes.size() < 8 || !std::equal(kContainerMagic.begin(), kContainerMagic.end(), bytes.begin())) {
    throw ConfigError("not a GRT1 container (bad magic)");
  }
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(raw[4 + i]) << (8 * i);
  if (8 + static_cast<std::size_t>(len) > bytes.size()) throw ConfigError("container metadata truncated");

  Container c;
  try {
    c.meta = nlohmann::json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("container metadata is not valid JSON: ") + e.what());
  }
  const std::size_t payload_start = 8 + len;
  const std::size_t payload_size = bytes.size() - payload_start;
  for (const auto& entry : c.meta.at("tensors")) {
    if (entry.at("dtype") != "f64") throw ConfigError("unsupported dtype " + entry.at("dtype").dump());
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = numel(shape);
    if (offset % 8 != 0 || offset + 8 * n > payload_size) {
      throw ConfigError("tensor \"" + entry.at("name").get<std::string>() + "\" lies outside the payload");
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      data[i] = std::bit_cast<double>(detail::get_u64_le(raw + payload_start + offset + 8 * i));
    }
    c.tensors.push_back({entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data))});
  }
  c.meta.erase("tensors");
  return c;
}

inline void write_container(const std::string& path, const Container& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  const std::string bytes = encode_container(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing " + path);
}

inline Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

}  // namespace great
