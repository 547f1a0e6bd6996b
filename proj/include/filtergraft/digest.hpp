#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "filtergraft/tensor.hpp"

namespace fg {

// Hex SHA-256 of raw bytes.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

// SHA-256 over the little-endian IEEE-754 bytes of the tensor values. Shape
// is not part of the digest.
std::string tensor_digest(const Tensor& t);

std::string file_sha256(const std::string& path);

// Incremental hashing for large inputs.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const std::uint8_t> bytes);
  void update(std::string_view text);
  std::string hex_final();

 private:
  void* ctx_;
};

}  // namespace fg
