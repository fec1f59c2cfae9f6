#include "nvnmr/spin_model.hpp"

#include <algorithm>

namespace nvnmr {

void PhysicalConstants::validate() const {
  if (!(mu0 > 0.0) || !(hbar > 0.0) || !(gamma_e > 0.0)) {
    throw ModelError("physical constants must be strictly positive");
  }
  const double ratio = gamma_e / (kTwoPi * 28.0e9);
  if (std::abs(ratio - 1.0) > 0.01) {
    throw ModelError("gamma_e/2pi must lie within 1% of 28 GHz/T");
  }
}

const PhysicalConstants& default_constants() {
  static const PhysicalConstants constants{};
  return constants;
}

void NuclearSpecies::validate() const {
  if (!(rho >= 0.0) || !std::isfinite(rho)) {
    throw ModelError("species '" + name + "': density must be finite and >= 0");
  }
  if (!(t2_star > 0.0)) {
    throw ModelError("species '" + name + "': t2_star must be > 0");
  }
  if (gamma_n == 0.0 || !std::isfinite(gamma_n)) {
    throw ModelError("species '" + name + "': gamma_n must be finite and nonzero");
  }
}

namespace species {

NuclearSpecies proton(double rho, double t2_star) {
  return {"1H", kTwoPi * kProtonGammaHz, t2_star, rho};
}

NuclearSpecies fluorine(double rho, double t2_star) {
  return {"19F", kTwoPi * kFluorineGammaHz, t2_star, rho};
}

NuclearSpecies phosphorus(double rho, double t2_star) {
  return {"31P", kTwoPi * kPhosphorusGammaHz, t2_star, rho};
}

NuclearSpecies by_name(const std::string& name, double rho, double t2_star) {
  if (name == "1H" || name == "H") return proton(rho, t2_star);
  if (name == "19F" || name == "F") return fluorine(rho, t2_star);
  if (name == "31P" || name == "P") return phosphorus(rho, t2_star);
  throw ModelError("unknown nuclear species '" + name + "' (expected 1H, 19F or 31P)");
}

}  // namespace species

void SampleLayer::validate() const {
  species.validate();
  if (!(z1 >= 0.0) || !std::isfinite(z1)) {
    throw ModelError("layer '" + species.name + "': z1 must be finite and >= 0");
  }
  if (!(z2 >= z1)) {
    throw ModelError("layer '" + species.name + "': z2 must not be below z1");
  }
}

void SampleStack::validate() const {
  for (const auto& layer : layers) layer.validate();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (std::size_t j = i + 1; j < layers.size(); ++j) {
      const auto& a = layers[i];
      const auto& b = layers[j];
      if (a.species.name != b.species.name || a.empty() || b.empty()) continue;
      if (std::max(a.z1, b.z1) < std::min(a.z2, b.z2)) {
        throw ModelError("layers of species '" + a.species.name + "' overlap in z");
      }
    }
  }
}

void SensorConfig::validate() const {
  if (!(d_nv > 0.0) || !std::isfinite(d_nv)) throw ModelError("sensor depth d_nv must be > 0");
  if (!(b0 >= 0.0) || !std::isfinite(b0)) throw ModelError("static field b0 must be >= 0");
}

double larmor_frequency(const NuclearSpecies& species, double b0) {
  if (!(b0 >= 0.0)) throw ModelError("larmor_frequency: b0 must be >= 0");
  return std::abs(species.gamma_n) * b0;
}

}  // namespace nvnmr
