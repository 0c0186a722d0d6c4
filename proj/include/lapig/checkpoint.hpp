#pragma once

// Binary checkpoint container.
//
// Layout: 8-byte magic "LAPIGCK\0", u32 format version, u64 header length,
// JSON header, then raw little-endian float32 tensor data in header order.
// The header carries the kind, the producing config, free-form metadata and
// a table of {name, shape, offset, count} entries.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "lapig/hashing.hpp"
#include "lapig/nn.hpp"
#include "lapig/tensor.hpp"

namespace lapig {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr char kMagic[8] = {'L', 'A', 'P', 'I', 'G', 'C', 'K', '\0'};

  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor<float>> tensors;

  template <class T>
  void add_parameters(const std::string& prefix, const ParameterSet<T>& ps) {
    for (const auto& [name, v] : ps.items()) tensors[prefix + name] = v.value().template cast<float>();
  }

  template <class T>
  void load_parameters(const std::string& prefix, ParameterSet<T>& ps) const {
    std::map<std::string, Tensor<T>> values;
    for (const auto& [name, v] : ps.items()) {
      auto it = tensors.find(prefix + name);
      if (it == tensors.end()) throw CheckpointError(kind + " checkpoint lacks parameter " + prefix + name);
      values.emplace(name, it->second.template cast<T>());
    }
    try {
      ps.load(values);
    } catch (const ShapeError& e) {
      throw CheckpointError(kind + " checkpoint does not match the model: " + e.what());
    }
  }

  std::string serialize() const {
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
      table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
      offset += t.size();
    }
    const std::string header = nlohmann::json{{"kind", kind}, {"config", config}, {"meta", meta}, {"tensors", table}}.dump();
    std::string out(kMagic, sizeof kMagic);
    append_le(out, kFormatVersion);
    append_le(out, static_cast<std::uint64_t>(header.size()));
    out += header;
    for (const auto& [_, t] : tensors)
      for (float v : t.values()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        append_le(out, bits);
      }
    return out;
  }

  static Checkpoint deserialize(const std::string& bytes, const std::string& what = "checkpoint") {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (bytes.size() - pos < n) throw CheckpointError(what + " is truncated");
    };
    need(sizeof kMagic);
    if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw CheckpointError(what + " is not a checkpoint file");
    pos += sizeof kMagic;
    need(4);
    const auto version = read_le<std::uint32_t>(bytes, pos);
    if (version != kFormatVersion)
      throw CheckpointError(what + " has format version " + std::to_string(version) + ", expected " + std::to_string(kFormatVersion));
    need(8);
    const auto header_len = read_le<std::uint64_t>(bytes, pos);
    need(header_len);
    Checkpoint ck;
    nlohmann::json h;
    try {
      h = nlohmann::json::parse(bytes.substr(pos, header_len));
      pos += header_len;
      ck.kind = h.at("kind");
      ck.config = h.at("config");
      ck.meta = h.at("meta");
      for (const auto& e : h.at("tensors")) {
        Tensor<float> t(e.at("shape").get<Shape>());
        if (t.size() != e.at("count").get<std::size_t>()) throw CheckpointError(what + ": tensor count disagrees with shape");
        const std::size_t start = pos + 4 * e.at("offset").get<std::size_t>();
        if (start > bytes.size() || bytes.size() - start < 4 * t.size()) throw CheckpointError(what + " is truncated");
        std::size_t p = start;
        for (auto& v : t.values()) {
          const auto bits = read_le<std::uint32_t>(bytes, p);
          std::memcpy(&v, &bits, sizeof v);
        }
        ck.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
      }
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(what + " has a malformed header: " + e.what());
    }
    return ck;
  }

  // Writes atomically and returns the SHA-256 of the file contents.
  std::string save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string bytes = serialize();
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
      std::ofstream f(tmp, std::ios::binary);
      if (!f) throw CheckpointError("cannot write " + tmp.string());
      f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw CheckpointError("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
    return sha256_hex(bytes);
  }

  static Checkpoint load(const std::filesystem::path& path, const std::string& expected_kind = {}) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Checkpoint ck = deserialize(bytes, path.string());
    if (!expected_kind.empty() && ck.kind != expected_kind)
      throw CheckpointError(path.string() + " holds a " + ck.kind + " checkpoint, expected " + expected_kind);
    return ck;
  }

 private:
  template <class U>
  static void append_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  template <class U>
  static U read_le(const std::string& in, std::size_t& pos) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += sizeof(U);
    return v;
  }
};

}  // namespace lapig
