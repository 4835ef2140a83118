#pragma once

// Binary bundle of named arrays with a JSON descriptor. Layout:
//   8 bytes  magic "PROARDW\0"
//   u32      format version
//   u64      descriptor length, then the descriptor as compact JSON text
//   for every array listed in descriptor["arrays"]: its values as
//   little-endian IEEE-754 doubles, row-major
// Integers are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "proard/array.hpp"
#include "proard/error.hpp"

namespace proard::io {

using json = nlohmann::json;

inline constexpr char kMagic[8] = {'P', 'R', 'O', 'A', 'R', 'D', 'W', '\0'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct Bundle {
  json meta = json::object();
  std::vector<std::pair<std::string, Array>> arrays;

  const Array& at(const std::string& name) const {
    for (const auto& [n, a] : arrays)
      if (n == name) return a;
    fail(ErrorKind::Io, "bundle has no array '" + name + "'");
  }
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos) {
  require(pos + sizeof(T) <= in.size(), ErrorKind::Io, "truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace detail

inline std::string encode(const Bundle& b) {
  json desc = b.meta;
  desc["arrays"] = json::array();
  for (const auto& [name, a] : b.arrays) desc["arrays"].push_back({{"name", name}, {"shape", a.shape()}});
  const std::string text = desc.dump();
  std::string out(kMagic, kMagic + 8);
  detail::put_le<std::uint32_t>(out, kFormatVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, a] : b.arrays)
    for (double v : a.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Bundle decode(const std::string& in) {
  require(in.size() >= 8 && std::memcmp(in.data(), kMagic, 8) == 0, ErrorKind::Io,
          "not a checkpoint file (bad magic)");
  std::size_t pos = 8;
  const auto version = detail::get_le<std::uint32_t>(in, pos);
  require(version == kFormatVersion, ErrorKind::Io,
          "unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::get_le<std::uint64_t>(in, pos);
  require(pos + len <= in.size(), ErrorKind::Io, "truncated checkpoint descriptor");
  Bundle b;
  try {
    b.meta = json::parse(in.substr(pos, len));
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("corrupt checkpoint descriptor: ") + e.what());
  }
  pos += len;
  for (const json& entry : b.meta.at("arrays")) {
    Array a(entry.at("shape").get<Shape>());
    for (std::size_t i = 0; i < a.size(); ++i)
      a[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(in, pos));
    b.arrays.emplace_back(entry.at("name").get<std::string>(), std::move(a));
  }
  require(pos == in.size(), ErrorKind::Io, "trailing bytes after checkpoint payload");
  b.meta.erase("arrays");
  return b;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    require(!ec, ErrorKind::Io, "cannot write '" + path.string() + "': " + ec.message());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorKind::Io, "cannot write '" + path.string() + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), ErrorKind::Io, "write failed for '" + path.string() + "'");
}

inline void save(const std::filesystem::path& path, const Bundle& b) { write_file(path, encode(b)); }
inline Bundle load(const std::filesystem::path& path) { return decode(read_file(path)); }

}  // namespace proard::io
