// Flat "section.key = value" text configuration.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kinmap {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Settings = std::map<std::string, std::string>;

/// Lines are "key = value"; '#' starts a comment; blank lines are ignored.
Settings parse_settings(std::istream& is);
Settings read_settings_file(const std::string& path);
void write_settings(std::ostream& os, const Settings& s);

/// Shortest decimal text that parses back to exactly the same double.
std::string format_double(double v);

double get_double(const Settings& s, const std::string& key, double fallback);
long long get_int(const Settings& s, const std::string& key, long long fallback);
std::uint64_t get_u64(const Settings& s, const std::string& key, std::uint64_t fallback);
bool get_bool(const Settings& s, const std::string& key, bool fallback);
std::string get_string(const Settings& s, const std::string& key, const std::string& fallback);

}  // namespace kinmap
