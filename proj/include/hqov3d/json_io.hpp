// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hqov3d/errors.hpp"

namespace hqov3d {

using json = nlohmann::json;

inline constexpr std::string_view kToolName = "hqov3d";
inline constexpr std::string_view kToolVersion = "0.1.0";

inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Provenance block embedded in every output file.
inline json make_header(const json& config, std::uint64_t seed) {
  return json{{"tool", kToolName},
              {"version", kToolVersion},
              {"config_hash", hex64(fnv1a64(config.dump()))},
              {"seed", seed}};
}

/// The header as a leading comment line for CSV outputs.
inline std::string header_comment(const json& header) {
  std::string line = "#";
  for (auto it = header.begin(); it != header.end(); ++it) {
    line += " " + it.key() + "=" + (it.value().is_string() ? it.value().get<std::string>() : it.value().dump());
  }
  return line + "\n";
}

namespace jsonio {

inline std::string join_path(std::string_view parent, std::string_view key) {
  if (parent.empty()) return std::string(key);
  return std::string(parent) + "." + std::string(key);
}

inline std::string index_path(std::string_view parent, std::size_t i) {
  return std::string(parent) + "[" + std::to_string(i) + "]";
}

inline const json& require(const json& j, std::string_view key, std::string_view path) {
  if (!j.is_object()) throw SchemaError("expected object at '" + std::string(path) + "'");
  auto it = j.find(std::string(key));
  if (it == j.end()) throw SchemaError("missing field '" + join_path(path, key) + "'");
  return *it;
}

inline double number(const json& j, std::string_view path) {
  if (!j.is_number()) throw SchemaError("field '" + std::string(path) + "' must be a number");
  return j.get<double>();
}

inline std::int64_t integer(const json& j, std::string_view path) {
  if (!j.is_number_integer()) throw SchemaError("field '" + std::string(path) + "' must be an integer");
  return j.get<std::int64_t>();
}

inline std::string string(const json& j, std::string_view path) {
  if (!j.is_string()) throw SchemaError("field '" + std::string(path) + "' must be a string");
  return j.get<std::string>();
}

inline bool boolean(const json& j, std::string_view path) {
  if (!j.is_boolean()) throw SchemaError("field '" + std::string(path) + "' must be a boolean");
  return j.get<bool>();
}

inline const json& array(const json& j, std::string_view path, std::size_t expected_size = 0) {
  if (!j.is_array()) throw SchemaError("field '" + std::string(path) + "' must be an array");
  if (expected_size != 0 && j.size() != expected_size) {
    throw SchemaError("field '" + std::string(path) + "' must have " + std::to_string(expected_size) +
                      " elements, got " + std::to_string(j.size()));
  }
  return j;
}

inline std::vector<double> numbers(const json& j, std::string_view path, std::size_t expected_size = 0) {
  const json& a = array(j, path, expected_size);
  std::vector<double> out;
  out.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(number(a[i], index_path(path, i)));
  return out;
}

inline void check_version(const json& doc, int supported, std::string_view what) {
  const auto v = integer(require(doc, "version", ""), "version");
  if (v != supported) {
    throw UnsupportedVersion("unsupported " + std::string(what) + " version " + std::to_string(v) +
                             " (expected " + std::to_string(supported) + ")");
  }
}

/// Rejects keys that are not in `allowed`, naming the full field path.
inline void reject_unknown(const json& j, std::initializer_list<std::string_view> allowed, std::string_view path) {
  if (!j.is_object()) throw ConfigError("expected object at '" + std::string(path) + "'");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (auto a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("unknown config key '" + join_path(path, it.key()) + "'");
  }
}

}  // namespace jsonio

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw SchemaError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) +
                      ": malformed JSON (" + e.what() + ")");
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void write_json_file(const std::filesystem::path& path, const json& doc) {
  write_text_file(path, doc.dump() + "\n");
}

}  // namespace hqov3d
