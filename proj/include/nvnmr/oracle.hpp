#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvnmr/lineshape.hpp"

namespace nvnmr::oracle {

/// Raised when an adaptive integral misses its tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QuadratureResult {
  double value = 0.0;
  double error_estimate = 0.0;
  std::size_t segments = 0;
};

/// ∫ L(Ω)·|g(Ω)|² dΩ over the real line, with L the unit-height-scaled
/// Lorentzian (1/T₂*)/((Ω−ω_L)² + T₂*⁻²) and |g|² the primary-resonance
/// filter for N pulses probed at ω = π/τ. Adaptive Gauss–Kronrod on every
/// filter lobe out to a wide window, plus a lobe-averaged analytic tail.
QuadratureResult lorentzian_filter_overlap(double omega, double omega_larmor, double t2_star,
                                           int n_pulses, double rel_tol = 1e-6);

/// I(ω) from the frequency-domain integral: (π/4)·lorentzian_filter_overlap.
double quadrature_I(double omega, double omega_larmor, double t2_star, int n_pulses,
                    double rel_tol = 1e-6);

/// Same integral on a fixed composite-Simpson grid: `points_per_width`
/// samples per min(lobe, Lorentzian width), window of `half_width_lobes`
/// filter lobes around both features, plus the analytic tail.
double simpson_I(double omega, double omega_larmor, double t2_star, int n_pulses,
                 int points_per_width = 16, int half_width_lobes = 400);

/// Time-domain form 2∫₀^{Nτ}(Nτ − t)e^{−t/T₂*}cos((ω_L−ω)t)dt.
double time_domain_I(double omega, double omega_larmor, double t2_star, int n_pulses);

/// (γₑ²/4π)∫⟨|B_z(Ω)|²⟩|g(Ω)|²dΩ built from the field spectral density and
/// filter directly. Delta model uses the sifting property.
double numerical_chi(const SampleLayer& layer, const SensorConfig& sensor, const PulseSequence& seq,
                     const PhysicalConstants& c = default_constants(), double rel_tol = 1e-6);

// ---------------------------------------------------------------------------
// Monte Carlo spin bath

struct BathSpin {
  std::array<double, 3> position{};  // m, NV at the origin, z normal to surface
  double phase = 0.0;                // initial transverse phase, rad
  double amplitude = 0.0;            // B along the NV axis at unit cos(), T
  double frequency_offset = 0.0;     // rad/s from ω_L (Lorentzian draw)
};

struct BathRealization {
  std::vector<BathSpin> spins;
  std::uint64_t seed = 0;
};

struct MonteCarloOptions {
  std::size_t n_spins = 4000;
  std::size_t n_realizations = 10000;
  std::uint64_t seed = 1;
  double truncation = 10.0;  // cylinder radius and height in units of d + z₁
  unsigned threads = 0;      // 0 = hardware concurrency
};

struct MonteCarloResult {
  double mean_contrast = 1.0;
  double standard_error = 0.0;
  double phase_variance = 0.0;       // ⟨φ²⟩
  double field_variance = 0.0;       // ⟨B_∥²⟩ at t = 0, T²
  double prefactor = 0.0;            // 2⟨B_∥²⟩ / (ρ(μ₀ħγₙ/4π)²·depth factor)
  double enclosed_fraction = 1.0;    // analytic variance share inside the cylinder
  std::uint64_t seed = 0;
  std::size_t n_spins = 0;
  std::size_t n_realizations = 0;
  std::string rng;
};

inline constexpr const char* kRngName = "mt19937_64, per-realization seed splitmix64(seed + index)";

/// Share of the layer's field variance inside the truncation cylinder.
double truncation_enclosed_fraction(const SampleLayer& layer, const SensorConfig& sensor,
                                    double truncation);

/// Draws one bath: positions importance-sampled from the 1/r⁶ radial law
/// inside the truncation cylinder, each carrying the amplitude that keeps the
/// ensemble field variance unbiased.
BathRealization sample_bath(const SampleLayer& layer, const SensorConfig& sensor,
                            std::size_t n_spins, std::uint64_t seed, std::uint64_t index,
                            double truncation = 10.0,
                            const PhysicalConstants& c = default_constants());

/// Simulates NV phase accumulation φ = γₑ∫g(t)B_∥(t)dt under the XY8-k sign
/// function for independent baths and returns ⟨cos φ⟩ with its standard
/// error. Output depends only on the inputs and seed, not the thread count.
MonteCarloResult mc_contrast(const SampleLayer& layer, const SensorConfig& sensor,
                             const PulseSequence& seq, const MonteCarloOptions& options = {},
                             const PhysicalConstants& c = default_constants());

}  // namespace nvnmr::oracle
