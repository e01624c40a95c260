#include "kwash/container.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>

#include "kwash/error.hpp"
#include "kwash/io.hpp"

namespace kwash::container {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'K', 'W', 'C', 'K'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

[[noreturn]] void bad(const std::string& what) {
  throw Error(ErrorKind::kFormat, "tensor container: " + what);
}

}  // namespace

const Tensor& Contents::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw Error(ErrorKind::kFormat, "tensor container has no tensor " + name);
}

std::string encode(const Contents& c) {
  json table = json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    if (t.data.size() != t.rows * t.cols) {
      throw Error(ErrorKind::kShapeMismatch, "tensor " + t.name + " has wrong element count");
    }
    table.push_back({{"name", t.name},
                     {"rows", t.rows},
                     {"cols", t.cols},
                     {"dtype", t.f64 ? "f64" : "f32"},
                     {"offset", offset}});
    offset += t.data.size() * (t.f64 ? 8 : 4);
  }
  json header{{"kind", c.kind},
              {"meta", c.meta_json.empty() ? json::object() : json::parse(c.meta_json)},
              {"tensors", table}};
  const std::string h = header.dump();

  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + offset + 4);
  for (const auto& t : c.tensors) {
    for (double x : t.data) {
      if (t.f64) {
        put_u64(out, std::bit_cast<std::uint64_t>(x));
      } else {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
      }
    }
  }
  put_u32(out, io::crc32(out));
  return out;
}

Contents decode(const std::string& in) {
  if (in.size() < 20 || std::memcmp(in.data(), kMagic, 4) != 0) bad("bad magic");
  const auto crc_pos = in.size() - 4;
  const auto stored = static_cast<std::uint32_t>(get_le(in, crc_pos, 4));
  if (io::crc32(std::string_view(in).substr(0, crc_pos)) != stored) bad("checksum mismatch");
  if (get_le(in, 4, 4) != kVersion) bad("unsupported version");
  const auto header_len = get_le(in, 8, 8);
  if (16 + header_len > crc_pos) bad("truncated header");
  Contents c;
  json header;
  try {
    header = json::parse(in.substr(16, header_len));
    c.kind = header.at("kind").get<std::string>();
    c.meta_json = header.at("meta").dump();
  } catch (const json::exception& e) {
    bad(std::string("header: ") + e.what());
  }
  const std::size_t data_start = 16 + header_len;
  const std::size_t n_bytes = crc_pos - data_start;
  try {
    for (const auto& entry : header.at("tensors")) {
      Tensor t;
      t.name = entry.at("name").get<std::string>();
      t.rows = entry.at("rows").get<std::size_t>();
      t.cols = entry.at("cols").get<std::size_t>();
      const auto dtype = entry.at("dtype").get<std::string>();
      if (dtype != "f32" && dtype != "f64") bad("unknown dtype " + dtype);
      t.f64 = dtype == "f64";
      const std::size_t width = t.f64 ? 8 : 4;
      const auto offset = entry.at("offset").get<std::size_t>();
      if (offset + t.rows * t.cols * width > n_bytes) bad("tensor " + t.name + " out of bounds");
      t.data.resize(t.rows * t.cols);
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        const std::size_t at = data_start + offset + width * i;
        const double v = t.f64 ? std::bit_cast<double>(get_le(in, at, 8))
                               : static_cast<double>(std::bit_cast<float>(
                                     static_cast<std::uint32_t>(get_le(in, at, 4))));
        if (!std::isfinite(v)) bad("non-finite value in " + t.name);
        t.data[i] = v;
      }
      c.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    bad(std::string("tensor table: ") + e.what());
  }
  return c;
}

void write(const std::filesystem::path& file, const Contents& contents) {
  io::write_atomic(file, encode(contents));
}

Contents read(const std::filesystem::path& file) { return decode(io::read_file(file)); }

}  // namespace kwash::container
