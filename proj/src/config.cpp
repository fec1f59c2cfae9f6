#include "nvnmr/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace nvnmr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(const std::string& source, int line, const std::string& msg) {
  throw ConfigError(source + ":" + std::to_string(line) + ": " + msg);
}

const std::map<std::string, double>& unit_table() {
  static const std::map<std::string, double> units = {
      {"m", 1.0},       {"mm", 1e-3},     {"um", 1e-6},      {"µm", 1e-6},   {"nm", 1e-9},
      {"s", 1.0},       {"ms", 1e-3},     {"us", 1e-6},      {"µs", 1e-6},   {"ns", 1e-9},
      {"T", 1.0},       {"mT", 1e-3},     {"uT", 1e-6},      {"µT", 1e-6},   {"G", 1e-4},
      {"Hz", 1.0},      {"kHz", 1e3},     {"MHz", 1e6},      {"GHz", 1e9},
      {"/nm3", 1e27},   {"/m3", 1.0},     {"Hz/T", 1.0},     {"kHz/T", 1e3}, {"MHz/T", 1e6},
      {"kHz/mT", 1e6},  {"px", 1.0},
  };
  return units;
}

// Splits on top-level commas, respecting quotes and nested brackets.
std::vector<std::string> split_items(const std::string& body, const std::string& source, int line) {
  std::vector<std::string> items;
  std::string cur;
  int depth = 0;
  bool quoted = false;
  for (char c : body) {
    if (c == '"') quoted = !quoted;
    if (!quoted) {
      if (c == '[') ++depth;
      if (c == ']') --depth;
      if (c == ',' && depth == 0) {
        items.push_back(trim(cur));
        cur.clear();
        continue;
      }
    }
    cur.push_back(c);
  }
  if (quoted) fail(source, line, "unterminated string");
  if (depth != 0) fail(source, line, "unbalanced brackets");
  const std::string last = trim(cur);
  if (!last.empty()) items.push_back(last);
  else if (!items.empty()) fail(source, line, "empty array element");
  for (const auto& it : items) {
    if (it.empty()) fail(source, line, "empty array element");
  }
  return items;
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  }
  return true;
}

nlohmann::json value_json(const ConfigValue& v) {
  if (const auto* d = std::get_if<double>(&v.data)) {
    return std::isfinite(*d) ? nlohmann::json(*d) : nlohmann::json(*d > 0 ? "inf" : "-inf");
  }
  if (const auto* s = std::get_if<std::string>(&v.data)) return *s;
  if (const auto* b = std::get_if<bool>(&v.data)) return *b;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : std::get<ConfigValue::Array>(v.data)) arr.push_back(value_json(e));
  return arr;
}

nlohmann::json table_json(const ConfigTable& t) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : t.values) j[k] = value_json(v);
  return j;
}

}  // namespace

ConfigValue parse_config_value(const std::string& raw, const std::string& source, int line) {
  const std::string text = trim(raw);
  ConfigValue v;
  v.line = line;
  v.text = text;
  if (text.empty()) fail(source, line, "missing value");
  if (text.front() == '"') {
    if (text.size() < 2 || text.back() != '"') fail(source, line, "unterminated string " + text);
    const std::string body = text.substr(1, text.size() - 2);
    if (body.find('"') != std::string::npos) fail(source, line, "unexpected quote in " + text);
    v.data = body;
    return v;
  }
  if (text.front() == '[') {
    if (text.back() != ']') fail(source, line, "array must close on the same line: " + text);
    ConfigValue::Array arr;
    for (const auto& item : split_items(text.substr(1, text.size() - 2), source, line)) {
      arr.push_back(parse_config_value(item, source, line));
    }
    v.data = std::move(arr);
    return v;
  }
  if (text == "true" || text == "false") {
    v.data = (text == "true");
    return v;
  }
  double number = 0.0;
  std::string rest;
  if (text == "inf" || text == "+inf") {
    number = INFINITY;
  } else if (text == "-inf") {
    number = -INFINITY;
  } else {
    const char* b = text.data();
    const char* e = b + text.size();
    if (*b == '+') ++b;
    const auto [ptr, ec] = std::from_chars(b, e, number);
    if (ec != std::errc() || ptr == b) fail(source, line, "cannot parse value '" + text + "'");
    rest = trim(std::string(ptr, e));
    if (!std::isfinite(number)) fail(source, line, "use 'inf' for infinite values: '" + text + "'");
  }
  if (!rest.empty()) {
    const auto& units = unit_table();
    const auto it = units.find(rest);
    if (it == units.end()) fail(source, line, "unknown unit '" + rest + "' in '" + text + "'");
    number *= it->second;
  }
  v.data = number;
  return v;
}

const ConfigValue& ConfigTable::at(const std::string& key) const {
  const auto it = values.find(key);
  if (it == values.end()) {
    throw ConfigError(where() + "missing required key '" + key + "'" +
                      (name.empty() ? "" : " in [" + name + "]"));
  }
  return it->second;
}

std::string ConfigTable::where(const std::string& key) const {
  const auto it = values.find(key);
  const int l = it != values.end() ? it->second.line : line;
  if (it != values.end() && l == 0) return "--set " + name + "." + key + ": ";
  return source + ":" + std::to_string(l) + ": ";
}

double ConfigTable::number(const std::string& key) const {
  const auto& v = at(key);
  if (!v.is_number()) throw ConfigError(where(key) + "'" + key + "' must be a number, got " + v.text);
  return std::get<double>(v.data);
}

double ConfigTable::number(const std::string& key, double fallback) const {
  return has(key) ? number(key) : fallback;
}

int ConfigTable::integer(const std::string& key) const {
  const double d = number(key);
  if (!(std::floor(d) == d) || std::abs(d) > 1e9) {
    throw ConfigError(where(key) + "'" + key + "' must be an integer, got " + at(key).text);
  }
  return static_cast<int>(d);
}

int ConfigTable::integer(const std::string& key, int fallback) const {
  return has(key) ? integer(key) : fallback;
}

std::string ConfigTable::string(const std::string& key) const {
  const auto& v = at(key);
  if (!v.is_string()) throw ConfigError(where(key) + "'" + key + "' must be a quoted string, got " + v.text);
  return std::get<std::string>(v.data);
}

std::string ConfigTable::string(const std::string& key, const std::string& fallback) const {
  return has(key) ? string(key) : fallback;
}

bool ConfigTable::boolean(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const auto& v = at(key);
  if (!v.is_bool()) throw ConfigError(where(key) + "'" + key + "' must be true or false, got " + v.text);
  return std::get<bool>(v.data);
}

std::vector<double> ConfigTable::numbers(const std::string& key) const {
  const auto& v = at(key);
  if (v.is_number()) return {std::get<double>(v.data)};
  if (!v.is_array()) throw ConfigError(where(key) + "'" + key + "' must be a number or array, got " + v.text);
  std::vector<double> out;
  for (const auto& e : std::get<ConfigValue::Array>(v.data)) {
    if (!e.is_number()) throw ConfigError(where(key) + "'" + key + "' must hold numbers, got " + e.text);
    out.push_back(std::get<double>(e.data));
  }
  return out;
}

std::vector<double> ConfigTable::numbers(const std::string& key, const std::vector<double>& fallback) const {
  return has(key) ? numbers(key) : fallback;
}

std::vector<std::string> ConfigTable::strings(const std::string& key) const {
  const auto& v = at(key);
  if (v.is_string()) return {std::get<std::string>(v.data)};
  if (!v.is_array()) throw ConfigError(where(key) + "'" + key + "' must be a string or array, got " + v.text);
  std::vector<std::string> out;
  for (const auto& e : std::get<ConfigValue::Array>(v.data)) {
    if (!e.is_string()) throw ConfigError(where(key) + "'" + key + "' must hold strings, got " + e.text);
    out.push_back(std::get<std::string>(e.data));
  }
  return out;
}

std::vector<std::string> ConfigTable::strings(const std::string& key,
                                              const std::vector<std::string>& fallback) const {
  return has(key) ? strings(key) : fallback;
}

void ConfigTable::check_keys(const std::set<std::string>& allowed) const {
  for (const auto& [k, v] : values) {
    if (!allowed.count(k)) {
      throw ConfigError(where(k) + "unknown key '" + k + "'" +
                        (name.empty() ? "" : " in [" + name + "]"));
    }
  }
}

const ConfigTable& Config::table(const std::string& name) const {
  static const ConfigTable empty;
  const auto it = tables.find(name);
  return it == tables.end() ? empty : it->second;
}

const std::vector<ConfigTable>& Config::array(const std::string& name) const {
  static const std::vector<ConfigTable> empty;
  const auto it = arrays.find(name);
  return it == arrays.end() ? empty : it->second;
}

void Config::check_sections(const std::set<std::string>& tables_allowed,
                            const std::set<std::string>& arrays_allowed) const {
  for (const auto& [name, t] : tables) {
    if (!tables_allowed.count(name)) {
      throw ConfigError(source + ":" + std::to_string(t.line) + ": unknown section [" + name + "]");
    }
  }
  for (const auto& [name, list] : arrays) {
    if (!arrays_allowed.count(name)) {
      throw ConfigError(source + ":" + std::to_string(list.front().line) + ": unknown array table [[" + name + "]]");
    }
  }
}

void Config::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "': expected section.key=value");
  const std::string path = trim(assignment.substr(0, eq));
  ConfigValue value = parse_config_value(assignment.substr(eq + 1), "override '" + assignment + "'", 0);
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (const auto& p : parts) {
    if (!valid_key(p)) throw ConfigError("override '" + assignment + "': bad key path");
  }
  ConfigTable* target = nullptr;
  if (parts.size() == 1) {
    target = &root;
  } else if (parts.size() == 2) {
    auto& t = tables[parts[0]];
    if (t.name.empty()) {
      t.name = parts[0];
      t.source = source;
    }
    target = &t;
  } else if (parts.size() == 3) {
    auto it = arrays.find(parts[0]);
    std::size_t idx = 0;
    try {
      idx = std::stoul(parts[1]);
    } catch (const std::exception&) {
      throw ConfigError("override '" + assignment + "': array index must be a number");
    }
    if (it == arrays.end() || idx >= it->second.size()) {
      throw ConfigError("override '" + assignment + "': no [[" + parts[0] + "]] entry " + parts[1]);
    }
    target = &it->second[idx];
  } else {
    throw ConfigError("override '" + assignment + "': bad key path");
  }
  target->values[parts.back()] = std::move(value);
}

std::filesystem::path Config::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

nlohmann::json Config::to_json() const {
  nlohmann::json j = table_json(root);
  for (const auto& [name, t] : tables) j[name] = table_json(t);
  for (const auto& [name, list] : arrays) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : list) arr.push_back(table_json(t));
    j[name] = arr;
  }
  return j;
}

Config parse_config(const std::string& text, const std::string& source) {
  Config cfg;
  cfg.source = source;
  cfg.root.source = source;
  cfg.root.line = 1;
  ConfigTable* current = &cfg.root;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.rfind("[[", 0) == 0) {
      if (line.size() < 4 || line.substr(line.size() - 2) != "]]") fail(source, line_no, "malformed array table header");
      const std::string name = trim(line.substr(2, line.size() - 4));
      if (!valid_key(name)) fail(source, line_no, "bad array table name '" + name + "'");
      if (cfg.tables.count(name)) fail(source, line_no, "'" + name + "' is already a plain section");
      auto& list = cfg.arrays[name];
      list.emplace_back();
      list.back().name = name;
      list.back().source = source;
      list.back().line = line_no;
      current = &list.back();
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') fail(source, line_no, "malformed section header");
      const std::string name = trim(line.substr(1, line.size() - 2));
      if (!valid_key(name)) fail(source, line_no, "bad section name '" + name + "'");
      if (cfg.tables.count(name)) fail(source, line_no, "duplicate section [" + name + "]");
      if (cfg.arrays.count(name)) fail(source, line_no, "'" + name + "' is already an array table");
      auto& t = cfg.tables[name];
      t.name = name;
      t.source = source;
      t.line = line_no;
      current = &t;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(source, line_no, "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!valid_key(key)) fail(source, line_no, "bad key '" + key + "'");
    if (current->values.count(key)) fail(source, line_no, "duplicate key '" + key + "'");
    current->values[key] = parse_config_value(line.substr(eq + 1), source, line_no);
  }
  return cfg;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Config cfg = parse_config(ss.str(), path.string());
  cfg.base_dir = path.parent_path();
  return cfg;
}

}  // namespace nvnmr
