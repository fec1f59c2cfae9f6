#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

namespace nvnmr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A parsed value. Numbers carry their unit suffix already folded into SI.
struct ConfigValue {
  using Array = std::vector<ConfigValue>;
  std::variant<double, std::string, bool, Array> data;
  int line = 0;
  std::string text;  // source text, for messages

  bool is_number() const { return std::holds_alternative<double>(data); }
  bool is_string() const { return std::holds_alternative<std::string>(data); }
  bool is_bool() const { return std::holds_alternative<bool>(data); }
  bool is_array() const { return std::holds_alternative<Array>(data); }
};

class ConfigTable {
 public:
  std::string name;  // "" for the root table
  std::string source;
  int line = 0;
  std::map<std::string, ConfigValue> values;

  bool has(const std::string& key) const { return values.count(key) > 0; }
  const ConfigValue& at(const std::string& key) const;

  double number(const std::string& key) const;
  double number(const std::string& key, double fallback) const;
  int integer(const std::string& key) const;
  int integer(const std::string& key, int fallback) const;
  std::string string(const std::string& key) const;
  std::string string(const std::string& key, const std::string& fallback) const;
  bool boolean(const std::string& key, bool fallback) const;
  /// Scalar or array of numbers, as a list.
  std::vector<double> numbers(const std::string& key) const;
  std::vector<double> numbers(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<std::string> strings(const std::string& key) const;
  std::vector<std::string> strings(const std::string& key, const std::vector<std::string>& fallback) const;

  /// Rejects keys outside `allowed`, naming the line of the first offender.
  void check_keys(const std::set<std::string>& allowed) const;

  /// "file:line: " prefix for messages about `key` (or the table header).
  std::string where(const std::string& key = "") const;
};

/// TOML-style configuration: [section] tables, [[array]] tables, key = value
/// with numbers (optional unit suffix), quoted strings, true/false, inf and
/// [a, b, ...] arrays. Comments start with #.
class Config {
 public:
  std::string source = "<config>";
  std::filesystem::path base_dir;  // relative paths in the file resolve here
  ConfigTable root;
  std::map<std::string, ConfigTable> tables;
  std::map<std::string, std::vector<ConfigTable>> arrays;

  bool has_table(const std::string& name) const { return tables.count(name) > 0; }
  /// Empty table named `name` when absent.
  const ConfigTable& table(const std::string& name) const;
  const std::vector<ConfigTable>& array(const std::string& name) const;

  /// Rejects sections and array tables outside the given sets.
  void check_sections(const std::set<std::string>& tables_allowed,
                      const std::set<std::string>& arrays_allowed) const;

  /// Applies "section.key=value" (value in config syntax) on top of the file.
  void set(const std::string& assignment);

  std::filesystem::path resolve(const std::string& path) const;

  /// Every value in SI, for archiving next to the results.
  nlohmann::json to_json() const;
};

Config parse_config(const std::string& text, const std::string& source = "<config>");
Config load_config(const std::filesystem::path& path);

/// Parses one value (number with unit, string, bool, array). Exposed for tests.
ConfigValue parse_config_value(const std::string& text, const std::string& source = "<value>", int line = 0);

}  // namespace nvnmr
