#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace nvnmr {

/// Raised when a domain value violates its invariants.
class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Physical constants in SI units. Defaults are CODATA 2018; gamma_e is the
/// NV electron value 2π × 28.0 GHz/T.
struct PhysicalConstants {
  double mu0 = 1.25663706212e-6;     // T·m/A
  double hbar = 1.054571817e-34;     // J·s
  double gamma_e = kTwoPi * 28.0e9;  // rad·s⁻¹·T⁻¹

  void validate() const;
};

const PhysicalConstants& default_constants();

/// A spin-1/2 nuclear species. gamma_n is signed; t2_star may be infinite,
/// which selects the delta spectral density.
struct NuclearSpecies {
  std::string name;
  double gamma_n = 0.0;       // rad·s⁻¹·T⁻¹
  double t2_star = kInfinity; // s
  double rho = 0.0;           // spins·m⁻³

  void validate() const;
};

namespace species {
// Reference gyromagnetic ratios γ/2π (Hz/T).
inline constexpr double kProtonGammaHz = 42.577478518e6;
inline constexpr double kFluorineGammaHz = 40.078e6;
inline constexpr double kPhosphorusGammaHz = 17.235e6;

NuclearSpecies proton(double rho = 0.0, double t2_star = kInfinity);
NuclearSpecies fluorine(double rho = 0.0, double t2_star = kInfinity);
NuclearSpecies phosphorus(double rho = 0.0, double t2_star = kInfinity);

/// Looks up "1H", "19F" or "31P" (also "H", "F", "P"); throws ModelError otherwise.
NuclearSpecies by_name(const std::string& name, double rho = 0.0, double t2_star = kInfinity);
}  // namespace species

/// Slab of one species between heights z1 and z2 above the diamond surface.
/// z2 may be +infinity (semi-infinite). z1 == z2 is an empty layer.
struct SampleLayer {
  NuclearSpecies species;
  double z1 = 0.0;
  double z2 = kInfinity;

  void validate() const;
  bool empty() const { return z1 == z2 || species.rho == 0.0; }
};

struct SampleStack {
  std::vector<SampleLayer> layers;

  /// Checks each layer and that layers of the same species do not overlap.
  void validate() const;
};

struct SensorConfig {
  double d_nv = 10e-9;  // m below the surface
  double b0 = 0.0;      // T along the NV axis

  void validate() const;
};

/// Angular Larmor frequency |γₙ|·B₀ (rad/s).
double larmor_frequency(const NuclearSpecies& species, double b0);

// Unit helpers for the file/CLI boundary.
namespace units {
inline constexpr double nm = 1e-9;
inline constexpr double us = 1e-6;
inline constexpr double mT = 1e-3;
inline constexpr double kHz = 1e3;
inline constexpr double MHz = 1e6;
inline constexpr double per_nm3 = 1e27;
}  // namespace units

}  // namespace nvnmr
