#pragma once

#include <openssl/evp.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lapig {

inline std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr)) throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

inline std::string sha256_hex(std::string_view s) { return sha256_hex(s.data(), s.size()); }

inline std::string sha256_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}


// Seed for (master, stage, item): first 8 bytes of SHA-256 over the triple.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stage, std::uint64_t index = 0) {
  std::string key = std::to_string(master) + "/" + std::string(stage) + "/" + std::to_string(index);
  const std::string hex = sha256_hex(key);
  return std::stoull(hex.substr(0, 16), nullptr, 16);
}

}  // namespace lapig
