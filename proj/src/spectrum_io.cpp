#include "nvnmr/spectrum_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace nvnmr {

using nlohmann::json;

namespace {

// Infinite bounds and times are stored as null.
json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double number_or_inf(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return kInfinity;
  return j.at(key).get<double>();
}

double parse_double(const std::string& text, const std::filesystem::path& path, int line) {
  double value = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
  while (end > begin && (end[-1] == ' ' || end[-1] == '\t' || end[-1] == '\r')) --end;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw IoError(path.string() + ":" + std::to_string(line) + ": cannot parse number '" + text + "'");
  }
  return value;
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

json to_json(const NuclearSpecies& s) {
  return {{"name", s.name},
          {"gamma_n_rad_per_s_t", s.gamma_n},
          {"t2_star_s", finite_or_null(s.t2_star)},
          {"rho_per_m3", s.rho}};
}

json to_json(const SampleLayer& layer) {
  return {{"species", to_json(layer.species)},
          {"z1_m", layer.z1},
          {"z2_m", finite_or_null(layer.z2)}};
}

json to_json(const SampleStack& stack) {
  json layers = json::array();
  for (const auto& layer : stack.layers) layers.push_back(to_json(layer));
  return layers;
}

json to_json(const SensorConfig& sensor) {
  return {{"d_nv_m", sensor.d_nv}, {"b0_t", sensor.b0}};
}

NuclearSpecies species_from_json(const json& j) {
  NuclearSpecies s;
  s.name = j.at("name").get<std::string>();
  s.gamma_n = j.at("gamma_n_rad_per_s_t").get<double>();
  s.t2_star = number_or_inf(j, "t2_star_s");
  s.rho = j.at("rho_per_m3").get<double>();
  return s;
}

SampleLayer layer_from_json(const json& j) {
  return {species_from_json(j.at("species")), j.at("z1_m").get<double>(), number_or_inf(j, "z2_m")};
}

SampleStack stack_from_json(const json& j) {
  SampleStack stack;
  for (const auto& layer : j) stack.layers.push_back(layer_from_json(layer));
  return stack;
}

SensorConfig sensor_from_json(const json& j) {
  return {j.at("d_nv_m").get<double>(), j.at("b0_t").get<double>()};
}

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  p.replace_extension(".json");
  return p;
}

std::filesystem::path write_spectrum(const Spectrum& spectrum, const std::filesystem::path& csv_path) {
  spectrum.validate();
  {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw IoError("cannot write " + csv_path.string());
    out << "nu_hz,contrast\n";
    for (std::size_t i = 0; i < spectrum.size(); ++i) {
      out << format_double(spectrum.nu_hz[i]) << ',' << format_double(spectrum.contrast[i]) << '\n';
    }
  }
  const json meta = {{"format", "nvnmr-spectrum/1"},
                     {"columns", {"nu_hz", "contrast"}},
                     {"sensor", to_json(spectrum.sensor)},
                     {"sequence", {{"family", "XY8"}, {"k", spectrum.k}, {"tau_rule", "tau = 1/(2 nu)"}}},
                     {"stack", to_json(spectrum.stack)}};
  const auto meta_path = sidecar_path(csv_path);
  std::ofstream out(meta_path, std::ios::binary);
  if (!out) throw IoError("cannot write " + meta_path.string());
  out << meta.dump(2) << '\n';
  return meta_path;
}

Spectrum read_spectrum(const std::filesystem::path& csv_path, bool require_sidecar) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw IoError("cannot open spectrum file " + csv_path.string());
  Spectrum spectrum;
  std::string line;
  int line_no = 0;
  if (!std::getline(in, line)) throw IoError(csv_path.string() + ": empty file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "nu_hz,contrast") {
    throw IoError(csv_path.string() + ":1: expected header 'nu_hz,contrast'");
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw IoError(csv_path.string() + ":" + std::to_string(line_no) + ": expected two columns");
    }
    spectrum.nu_hz.push_back(parse_double(line.substr(0, comma), csv_path, line_no));
    spectrum.contrast.push_back(parse_double(line.substr(comma + 1), csv_path, line_no));
  }

  const auto meta_path = sidecar_path(csv_path);
  if (std::filesystem::exists(meta_path)) {
    std::ifstream meta_in(meta_path, std::ios::binary);
    json meta;
    try {
      meta = json::parse(meta_in);
      spectrum.sensor = sensor_from_json(meta.at("sensor"));
      spectrum.k = meta.at("sequence").at("k").get<int>();
      if (meta.contains("stack")) spectrum.stack = stack_from_json(meta.at("stack"));
    } catch (const json::exception& e) {
      throw IoError(meta_path.string() + ": malformed metadata: " + e.what());
    }
  } else if (require_sidecar) {
    throw IoError("missing metadata sidecar " + meta_path.string());
  }
  try {
    spectrum.validate();
  } catch (const ModelError& e) {
    throw IoError(csv_path.string() + ": " + e.what());
  }
  return spectrum;
}

}  // namespace nvnmr
