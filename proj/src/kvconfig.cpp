#include "kinmap/kvconfig.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>

namespace kinmap {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

Settings parse_settings(std::istream& is) {
  Settings out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return out;
}

Settings read_settings_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_settings(in);
}

void write_settings(std::ostream& os, const Settings& s) {
  for (const auto& [k, v] : s) os << k << " = " << v << '\n';
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double get_double(const Settings& s, const std::string& key, double fallback) {
  const auto it = s.find(key);
  if (it == s.end()) return fallback;
  double v = 0.0;
  const auto& str = it->second;
  const auto res = std::from_chars(str.data(), str.data() + str.size(), v);
  if (res.ec != std::errc() || res.ptr != str.data() + str.size()) {
    throw ConfigError("config key '" + key + "': not a number: '" + str + "'");
  }
  return v;
}

long long get_int(const Settings& s, const std::string& key, long long fallback) {
  const auto it = s.find(key);
  if (it == s.end()) return fallback;
  long long v = 0;
  const auto& str = it->second;
  const auto res = std::from_chars(str.data(), str.data() + str.size(), v);
  if (res.ec != std::errc() || res.ptr != str.data() + str.size()) {
    throw ConfigError("config key '" + key + "': not an integer: '" + str + "'");
  }
  return v;
}

std::uint64_t get_u64(const Settings& s, const std::string& key, std::uint64_t fallback) {
  const auto it = s.find(key);
  if (it == s.end()) return fallback;
  std::uint64_t v = 0;
  const auto& str = it->second;
  const auto res = std::from_chars(str.data(), str.data() + str.size(), v);
  if (res.ec != std::errc() || res.ptr != str.data() + str.size()) {
    throw ConfigError("config key '" + key + "': not an unsigned integer: '" + str + "'");
  }
  return v;
}

bool get_bool(const Settings& s, const std::string& key, bool fallback) {
  const auto it = s.find(key);
  if (it == s.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + it->second + "'");
}

std::string get_string(const Settings& s, const std::string& key, const std::string& fallback) {
  const auto it = s.find(key);
  return it == s.end() ? fallback : it->second;
}

}  // namespace kinmap
