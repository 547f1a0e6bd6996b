#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "filtergraft/tensor.hpp"

// Named-array archives in the NumPy .npz layout: a zip container of .npy
// members. Written uncompressed; reading also accepts deflated members and
// zip64 records, so files produced by numpy.savez(_compressed) load too.
namespace fg::archive {

struct NamedArray {
  std::string name;           // member name without the .npy suffix
  Shape shape;
  std::string dtype = "<f4";  // "<f4" or "|u1"
  std::vector<std::uint8_t> bytes;
};

NamedArray from_tensor(std::string name, const Tensor& t);
NamedArray from_text(std::string name, const std::string& text);
Tensor to_tensor(const NamedArray& a);
std::string to_text(const NamedArray& a);

std::vector<std::uint8_t> encode_npy(const NamedArray& a);
NamedArray decode_npy(std::string name, const std::vector<std::uint8_t>& bytes);

void write_npz(const std::filesystem::path& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_npz(const std::filesystem::path& path);

const NamedArray& find(const std::vector<NamedArray>& arrays, const std::string& name);

}  // namespace fg::archive
