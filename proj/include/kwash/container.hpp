#pragma once

// Binary tensor container shared by checkpoints, key statistics and deltas.
//
//   "KWCK" | u32 version | u64 header length | header JSON |
//   little-endian tensor data, row-major, in table order |
//   u32 CRC32 of every preceding byte
//
// The header holds {kind, meta, tensors: [{name, rows, cols, dtype, offset}]},
// with dtype "f32" or "f64" and offsets counted in bytes from the data start.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace kwash::container {

inline constexpr std::uint32_t kVersion = 1;

struct Tensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  bool f64 = false;  // float32 unless set
};

struct Contents {
  std::string kind;
  std::string meta_json;  // arbitrary JSON object text
  std::vector<Tensor> tensors;

  // Throws Format when no tensor has this name.
  const Tensor& tensor(const std::string& name) const;
};

std::string encode(const Contents& contents);
// Throws Format on a bad magic, version, header, size or checksum.
Contents decode(const std::string& bytes);

// Atomic write (temporary file + rename).
void write(const std::filesystem::path& file, const Contents& contents);
Contents read(const std::filesystem::path& file);

}  // namespace kwash::container
