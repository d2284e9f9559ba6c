#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "sgg/common.hpp"

namespace sgg {

// Flat key-value config with [section] headers and '#' comments. Keys are
// flattened to "section.key". Values keep their raw text; typed accessors
// parse on demand and name the key in every error.
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse_text(const std::string& text, const std::string& origin = "<text>") {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        require<ParseError>(line.back() == ']', origin, ":", lineno,
                            ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      require<ParseError>(eq != std::string::npos, origin, ":", lineno,
                          ": expected 'key = value'");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      require<ParseError>(!key.empty(), origin, ":", lineno, ": empty key");
      cfg.values_[section.empty() ? key : section + "." + key] = value;
    }
    return cfg;
  }

  static KvConfig load(const std::string& path) {
    std::ifstream in(path);
    require<IoError>(bool(in), "cannot open config '", path, "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require_string(const std::string& key) const {
    auto it = values_.find(key);
    require<ValidationError>(it != values_.end(), "config key '", key, "' is missing");
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_double(key, it->second);
  }

  long long get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_int(key, it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ValidationError(cat("config key '", key, "': '", v, "' is not a boolean"));
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }
  static double parse_double(const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      const double d = std::stod(v, &pos);
      require<ValidationError>(pos == v.size(), "trailing characters");
      return d;
    } catch (const std::exception&) {
      throw ValidationError(cat("config key '", key, "': '", v, "' is not a number"));
    }
  }
  static long long parse_int(const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      const long long d = std::stoll(v, &pos);
      require<ValidationError>(pos == v.size(), "trailing characters");
      return d;
    } catch (const std::exception&) {
      throw ValidationError(cat("config key '", key, "': '", v, "' is not an integer"));
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace sgg
