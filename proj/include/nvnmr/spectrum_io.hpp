#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "nvnmr/lineshape.hpp"

namespace nvnmr {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const NuclearSpecies& species);
nlohmann::json to_json(const SampleLayer& layer);
nlohmann::json to_json(const SampleStack& stack);
nlohmann::json to_json(const SensorConfig& sensor);
NuclearSpecies species_from_json(const nlohmann::json& j);
SampleLayer layer_from_json(const nlohmann::json& j);
SampleStack stack_from_json(const nlohmann::json& j);
SensorConfig sensor_from_json(const nlohmann::json& j);

/// Shortest text that parses back to the same double.
std::string format_double(double value);

/// Writes `<path>` as CSV (nu_hz,contrast) and `<path>` with a .json
/// extension as the metadata sidecar. Returns the sidecar path.
std::filesystem::path write_spectrum(const Spectrum& spectrum, const std::filesystem::path& csv_path);

/// Reads a CSV written by write_spectrum plus its sidecar. A missing sidecar
/// is an error unless `require_sidecar` is false, in which case k = 1 and the
/// sensor is left at its defaults.
Spectrum read_spectrum(const std::filesystem::path& csv_path, bool require_sidecar = true);

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path);

}  // namespace nvnmr
