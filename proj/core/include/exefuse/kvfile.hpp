#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "exefuse/kg.hpp"

namespace exefuse {

/// Flat `key=value` records, one per line. Order is preserved so manifests
/// serialize byte-identically for identical inputs.
using KvPairs = std::vector<std::pair<std::string, std::string>>;

inline std::string format_kv(const KvPairs& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

inline std::string_view trim_view(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

/// Accepts both `key=value` and `key = value`; blank lines and `#` comments
/// are skipped.
inline KvPairs parse_kv(std::string_view text, std::string_view origin = "<string>") {
  KvPairs out;
  std::size_t lineno = 0;
  while (!text.empty()) {
    std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++lineno;
    line = trim_view(line);
    if (line.empty() || line.front() == '#') continue;
    std::size_t eq = line.find('=');
    if (eq == std::string_view::npos)
      throw std::runtime_error(std::string(origin) + ":" + std::to_string(lineno) +
                               ": expected key=value");
    std::string key(trim_view(line.substr(0, eq)));
    if (key.empty())
      throw std::runtime_error(std::string(origin) + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::string(trim_view(line.substr(eq + 1))));
  }
  return out;
}

inline KvPairs load_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_kv(text, path.string());
}

inline void save_kv_file(const std::filesystem::path& path, const KvPairs& kv) {
  write_file_atomic(path, format_kv(kv));
}

inline std::optional<std::string> kv_get(const KvPairs& kv, std::string_view key) {
  for (const auto& [k, v] : kv)
    if (k == key) return v;
  return std::nullopt;
}

}  // namespace exefuse
