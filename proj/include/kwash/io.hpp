#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kwash::io {

// Writes `bytes` to `<path>.tmp` and renames it over `path`, so readers never
// observe a partial file under the final name.
void write_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const unsigned char> bytes);
std::uint32_t crc32(std::string_view bytes);
std::string hex32(std::uint32_t v);

// CRC32 of a file's contents as eight hex digits.
std::string file_checksum(const std::filesystem::path& path);

}  // namespace kwash::io
