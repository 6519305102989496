#pragma once

// Key-value text configuration.
//
// One `key = value` pair per line. Blank lines and lines starting with '#'
// are ignored; trailing '#' comments are stripped. Keys are case-sensitive.
// A key may appear once.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace crowdplan {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class KvConfig {
 public:
  static KvConfig parse(std::istream& in, const std::string& source = "<config>") {
    KvConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = strip(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key = strip(t.substr(0, eq));
      const std::string value = strip(t.substr(eq + 1));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
      if (!cfg.values_.emplace(key, value).second) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      }
    }
    return cfg;
  }

  static KvConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    return parse(in, path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::optional<std::string> get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    used_[key] = true;
    return it->second;
  }

  template <class T>
  void read(const std::string& key, T& out) const {
    const auto v = get(key);
    if (!v) return;
    out = convert<T>(key, *v);
  }

  template <class T>
  void read_list(const std::string& key, std::vector<T>& out) const {
    const auto v = get(key);
    if (!v) return;
    out.clear();
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = strip(item);
      if (!item.empty()) out.push_back(convert<T>(key, item));
    }
  }

  /// Keys present in the file that no reader asked for.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
      if (!used_.count(k)) out.push_back(k);
    }
    return out;
  }

  /// Throws on keys nobody consumed; catches typos in experiment files.
  void reject_unknown() const {
    const auto unused = unused_keys();
    if (unused.empty()) return;
    std::string msg = "unknown config key(s):";
    for (const auto& k : unused) msg += " " + k;
    throw ConfigError(msg);
  }

  static std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  template <class T>
  static T convert(const std::string& key, const std::string& v) {
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        return v;
      } else if constexpr (std::is_same_v<T, bool>) {
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw std::invalid_argument(v);
      } else if constexpr (std::is_floating_point_v<T>) {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<T>(d);
      } else if constexpr (std::is_signed_v<T>) {
        std::size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<T>(i);
      } else {
        std::size_t pos = 0;
        if (!v.empty() && v.front() == '-') throw std::invalid_argument(v);
        const unsigned long long i = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<T>(i);
      }
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
    }
  }

  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> used_;
};

}  // namespace crowdplan
