#pragma once

#include <span>
#include <string>
#include <vector>

#include "nvnmr/sequence.hpp"
#include "nvnmr/spin_model.hpp"

namespace nvnmr {

enum class SpectralDensityKind { lorentzian, delta };

struct SpectralDensityModel {
  SpectralDensityKind kind = SpectralDensityKind::delta;
  double t2_star = kInfinity;

  static SpectralDensityModel lorentzian(double t2_star);
  static SpectralDensityModel delta();
  void validate() const;
};

/// Lorentzian for finite T₂*, delta for T₂* = ∞.
SpectralDensityModel spectral_model_for(const NuclearSpecies& species);

/// Contrast versus probe frequency for one XY8-k repetition count. τ at each
/// point is always 1/(2ν), so a spectrum round-trips through text exactly.
struct Spectrum {
  std::vector<double> nu_hz;
  std::vector<double> contrast;
  int k = 1;
  SensorConfig sensor;
  SampleStack stack;  // descriptive metadata; may be empty for measured data

  std::size_t size() const { return nu_hz.size(); }
  PulseSequence sequence_at(std::size_t i) const { return {k, 0.5 / nu_hz[i]}; }
  void validate() const;
};

/// τ values giving ν evenly spaced over [nu_min, nu_max] (Hz), fixed k.
std::vector<PulseSequence> frequency_sweep(int k, double nu_min, double nu_max, std::size_t n);

/// 1/(d+z₁)³ − 1/(d+z₂)³ in m⁻³.
double depth_factor(const SampleLayer& layer, const SensorConfig& sensor);

/// ρ·(5π/48)·(μ₀ħγₙ/4π)²·depth factor, the Lorentzian-free part of the
/// field spectral density (T²).
double field_variance_weight(const SampleLayer& layer, const SensorConfig& sensor,
                             const PhysicalConstants& c = default_constants());

/// ⟨|B_z|²⟩(Ω) in T²·s. For the delta model this is 0 away from ω_L and +∞ at
/// ω_L; the integrated weight is π·field_variance_weight.
double layer_field_variance(const SampleLayer& layer, const SensorConfig& sensor, double omega,
                            const SpectralDensityModel& model,
                            const PhysicalConstants& c = default_constants());

/// Lorentzian ⊛ sinc² filter overlap I(ω) for finite T₂* (s²).
double closed_form_I(double omega, double omega_larmor, double t2_star, int n_pulses);

/// Delta-limit of closed_form_I: (Nτ)² sinc²((Nτ/2)(ω_L − ω)), τ = π/ω.
double delta_I(double omega, double omega_larmor, int n_pulses);

/// Decoherence exponent χ of one layer for the probe ω = π/τ.
double chi(const SampleLayer& layer, const SensorConfig& sensor, const PulseSequence& seq,
           const PhysicalConstants& c = default_constants());
double chi(const SampleLayer& layer, const SensorConfig& sensor, const PulseSequence& seq,
           const SpectralDensityModel& model, const PhysicalConstants& c = default_constants());

/// ρ(5/48π)(μ₀γₙγₑħ/4π)²·depth factor, so that χ = chi_prefactor · I.
double chi_prefactor(const SampleLayer& layer, const SensorConfig& sensor,
                     const PhysicalConstants& c = default_constants());

/// exp(−Σ χ) at ν = 1/(2τ) for every sweep entry, sorted by frequency.
Spectrum contrast_spectrum(const SampleStack& stack, const SensorConfig& sensor,
                           std::span<const PulseSequence> sweep,
                           const PhysicalConstants& c = default_constants());

/// Model contrast on an existing spectrum's frequency grid.
std::vector<double> model_contrast(const SampleStack& stack, const SensorConfig& sensor, int k,
                                   std::span<const double> nu_hz,
                                   const PhysicalConstants& c = default_constants());

/// Statistical polarization: N unpolarized spins carry the net moment of √N.
double equivalent_polarized_spins(double n_unpolarized);

struct DetectionVolume {
  double spin_count = 0.0;
  double radius = 0.0;           // m, around the surface point above the NV
  double fraction_reached = 0.0;
  bool capped = false;           // target not reached within the search cap
};

/// Grows a ball centred on the surface point above the NV until it holds
/// `signal_fraction` of the layer's field variance. The search is capped at
/// 10⁴·(d + z₁); when the target is not reached by then (fraction → 1 for a
/// semi-infinite layer) the cap radius is returned with `capped` set.
DetectionVolume detection_volume_spins(const SampleLayer& layer, const SensorConfig& sensor,
                                       double signal_fraction);

/// Angular part of the dipolar variance kernel, averaged over azimuth, for an
/// NV axis tilted by `nv_axis_tilt()` from the surface normal. `cos_theta` is
/// the polar angle of the NV→spin vector measured from the normal.
double azimuthal_dipolar_kernel(double cos_theta);

/// arccos(1/√3): a ⟨111⟩ NV axis in a (100)-cut diamond.
double nv_axis_tilt();

}  // namespace nvnmr
