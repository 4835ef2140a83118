#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "proard/error.hpp"

namespace proard::csv {

/// Shortest text that parses back to the same double.
inline std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  require(ec == std::errc{}, ErrorKind::Io, "number formatting failed");
  return std::string(buf, end);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc{} && end == s.data() + s.size(), ErrorKind::Io,
          "not a number: '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s) {
  long long v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc{} && end == s.data() + s.size(), ErrorKind::Io,
          "not an integer: '" + std::string(s) + "'");
  return v;
}

// Fields never contain commas or quotes; config strings use '.', ':', '-', '_'.
inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    fail(ErrorKind::Io, "missing column '" + std::string(name) + "'");
  }
};

inline void write(const std::filesystem::path& path, const Table& t) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    require(!ec, ErrorKind::Io, "cannot write " + path.string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& f) {
    for (std::size_t i = 0; i < f.size(); ++i) out << (i ? "," : "") << f[i];
    out << '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) {
    require(r.size() == t.header.size(), ErrorKind::Io, "row width differs from header");
    line(r);
  }
  out.flush();
  require(out.good(), ErrorKind::Io, "write failed for " + path.string());
}

inline Table read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  Table t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line);
    if (first) {
      t.header = std::move(fields);
      first = false;
    } else {
      require(fields.size() == t.header.size(), ErrorKind::Io,
              "ragged row in " + path.string());
      t.rows.push_back(std::move(fields));
    }
  }
  require(!first, ErrorKind::Io, "empty csv " + path.string());
  return t;
}

}  // namespace proard::csv
