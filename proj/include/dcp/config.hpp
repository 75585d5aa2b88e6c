#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dcp/errors.hpp"

namespace dcp {

/// Plain-text key-value configuration: one `key = value` per line, `#` starts
/// a comment. Command-line overrides are applied with set(). Typed getters
/// record which keys were read so that typos can be rejected afterwards.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    KeyValueConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                          ": expected 'key = value'");
      cfg.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw ConfigError("config: empty key");
    values_[key] = value;
  }

  /// Parse a `key=value` override as passed on the command line.
  void set_from_override(const std::string& spec) {
    const std::size_t eq = spec.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + spec + "' is not of the form key=value");
    set(trim(spec.substr(0, eq)), trim(spec.substr(eq + 1)));
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    touched_.insert({key, true});
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    touched_.insert({key, true});
    if (it == values_.end()) return fallback;
    return parse_u64(key, it->second);
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    touched_.insert({key, true});
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': '" + it->second + "' is not a number");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    touched_.insert({key, true});
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
  }

  std::vector<std::uint64_t> get_u64_list(const std::string& key,
                                          std::vector<std::uint64_t> fallback) const {
    auto it = values_.find(key);
    touched_.insert({key, true});
    if (it == values_.end()) return fallback;
    std::vector<std::uint64_t> out;
    for (const std::string& piece : split_commas(it->second))
      out.push_back(parse_u64(key, piece));
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
  }

  std::vector<double> get_double_list(const std::string& key,
                                      std::vector<double> fallback) const {
    auto it = values_.find(key);
    touched_.insert({key, true});
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const std::string& piece : split_commas(it->second)) {
      try {
        out.push_back(std::stod(piece));
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + piece + "' is not a number");
      }
    }
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
  }

  /// Reject keys that no getter ever consumed (typo protection).
  void ensure_all_consumed() const {
    for (const auto& [key, value] : values_) {
      if (!touched_.count(key))
        throw ConfigError("unknown config key '" + key + "'");
    }
  }

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }

  static std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string piece;
    while (std::getline(ss, piece, ',')) {
      piece = trim(piece);
      if (!piece.empty()) out.push_back(piece);
    }
    return out;
  }

  static std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(value, &pos);
      if (pos != value.size() || v < 0) throw std::invalid_argument("bad");
      return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': '" + value +
                        "' is not a non-negative integer");
    }
  }

  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> touched_;
};

}  // namespace dcp
