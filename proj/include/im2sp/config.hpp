#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "error.hpp"

namespace im2sp {

/// Flat key=value settings. '#' starts a comment line; surrounding
/// whitespace is trimmed. Later assignments win.
class kv_config {
public:
  kv_config() = default;

  static kv_config parse(std::string_view text) {
    kv_config cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#')
        continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos || eq == 0)
        throw format_error("config line " + std::to_string(lineno) + ": expected key=value");
      cfg.values_[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return cfg;
  }

  static kv_config load(const std::string &path) {
    std::ifstream in(path);
    if (!in)
      throw format_error("cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  std::string to_string() const {
    std::string out;
    for (const auto &[k, v] : values_)
      out += k + "=" + v + "\n";
    return out;
  }

  bool has(const std::string &key) const { return values_.count(key) != 0; }
  void set(const std::string &key, std::string value) { values_[key] = std::move(value); }
  template <class T> void set(const std::string &key, T value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    values_[key] = os.str();
  }

  std::string get(const std::string &key, const std::string &fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::uint64_t get_uint(const std::string &key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end())
      return fallback;
    try {
      std::size_t used = 0;
      if (!it->second.empty() && it->second[0] == '-')
        throw std::invalid_argument("negative");
      const auto v = std::stoull(it->second, &used);
      if (used != it->second.size())
        throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception &) {
      throw format_error("config: " + key + " is not an unsigned integer: \"" + it->second + "\"");
    }
  }

  double get_double(const std::string &key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end())
      return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size())
        throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception &) {
      throw format_error("config: " + key + " is not a number: \"" + it->second + "\"");
    }
  }

  const std::map<std::string, std::string> &values() const { return values_; }

  /// Copies every entry of other over this one.
  void merge(const kv_config &other) {
    for (const auto &[k, v] : other.values_)
      values_[k] = v;
  }

private:
  static std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
      return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

} // namespace im2sp
