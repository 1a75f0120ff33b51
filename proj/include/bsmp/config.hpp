#pragma once

#include "bsmp/core.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace bsmp {

/// Malformed or inconsistent configuration.
class ConfigError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// Flat `key = value` text with `#` comments. Every getter records the value
/// it resolved (default included), so a run can report its full config.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& source = "config") {
    KeyValueConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto text = trim(line);
      if (text.empty()) continue;
      const auto eq = text.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected `key = value`");
      const auto key = trim(text.substr(0, eq));
      const auto value = trim(text.substr(eq + 1));
      if (key.empty() || value.empty())
        throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key or value");
      if (cfg.values_.count(key) != 0)
        throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key `" + key + "`");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    return parse(in, path);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    const auto it = values_.find(key);
    const std::string v = it == values_.end() ? fallback : it->second;
    record(key, v);
    return v;
  }

  double get_double(const std::string& key, double fallback) {
    const auto it = values_.find(key);
    const double v = it == values_.end() ? fallback : to_double(key, it->second);
    record(key, format_double(v));
    return v;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) {
    const auto it = values_.find(key);
    std::uint64_t v = fallback;
    if (it != values_.end()) {
      const auto& s = it->second;
      const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ConfigError("`" + key + "` must be a non-negative integer, got `" + s + "`");
    }
    record(key, std::to_string(v));
    return v;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) {
    return static_cast<std::size_t>(get_u64(key, fallback));
  }

  bool get_bool(const std::string& key, bool fallback) {
    const auto it = values_.find(key);
    bool v = fallback;
    if (it != values_.end()) {
      if (it->second == "true" || it->second == "1") v = true;
      else if (it->second == "false" || it->second == "0") v = false;
      else throw ConfigError("`" + key + "` must be true or false");
    }
    record(key, v ? "true" : "false");
    return v;
  }

  /// Comma-separated reals.
  std::vector<double> get_list(const std::string& key, const std::vector<double>& fallback) {
    const auto it = values_.find(key);
    std::vector<double> v = fallback;
    if (it != values_.end()) {
      v.clear();
      std::stringstream ss(it->second);
      std::string item;
      while (std::getline(ss, item, ',')) v.push_back(to_double(key, trim(item)));
      if (v.empty()) throw ConfigError("`" + key + "` must list at least one number");
    }
    std::string joined;
    for (std::size_t i = 0; i < v.size(); ++i) joined += (i ? "," : "") + format_double(v[i]);
    record(key, joined);
    return v;
  }

  /// Marks a key as consumed without recording it in the resolved config.
  void consume(const std::string& key) { used_.insert(key); }

  /// Throws if a key was given but never read.
  void reject_unknown() const {
    for (const auto& [k, v] : values_)
      if (used_.count(k) == 0) throw ConfigError("unknown config key `" + k + "`");
  }

  const std::map<std::string, std::string>& resolved() const { return resolved_; }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  static double to_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v))
      throw ConfigError("`" + key + "` must be a finite number, got `" + s + "`");
    return v;
  }

  void record(const std::string& key, const std::string& value) {
    used_.insert(key);
    resolved_[key] = value;
  }

  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> resolved_;
  std::set<std::string> used_;
};

}  // namespace bsmp
