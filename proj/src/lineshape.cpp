#include "nvnmr/lineshape.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <numeric>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>

namespace nvnmr {

namespace {

constexpr double kPi = std::numbers::pi;

// e^{−x} − 1 + x without cancellation for small x.
double exp_excess(double x) {
  if (std::abs(x) < 0.05) {
    double term = x * x / 2.0;
    double sum = term;
    for (int n = 3; n < 14; ++n) {
      term *= -x / n;
      sum += term;
    }
    return sum;
  }
  return std::expm1(-x) + x;
}

std::complex<double> exp_excess(std::complex<double> z) {
  if (std::abs(z) < 0.5) {
    std::complex<double> term = z * z / 2.0;
    std::complex<double> sum = term;
    for (int n = 3; n < 24; ++n) {
      term *= -z / static_cast<double>(n);
      sum += term;
    }
    return sum;
  }
  return std::exp(-z) - 1.0 + z;
}

// Coefficients of the azimuth-averaged kernel p₀ + p₁c² + p₂c⁴ (c = cos θ),
// the φ-average of cos²β·sin²β with β the angle to the tilted NV axis.
struct KernelPoly {
  double p0, p1, p2;
};

KernelPoly kernel_poly() {
  const double a = nv_axis_tilt();
  const double s2 = std::sin(a) * std::sin(a);
  const double c2 = std::cos(a) * std::cos(a);
  return {s2 / 2.0 - 3.0 / 8.0 * s2 * s2,
          (c2 - s2 / 2.0) + 3.0 / 4.0 * s2 * s2 - 3.0 * s2 * c2,
          -3.0 / 8.0 * s2 * s2 + 3.0 * s2 * c2 - c2 * c2};
}

}  // namespace

SpectralDensityModel SpectralDensityModel::lorentzian(double t2_star) {
  SpectralDensityModel m{SpectralDensityKind::lorentzian, t2_star};
  m.validate();
  return m;
}

SpectralDensityModel SpectralDensityModel::delta() { return {SpectralDensityKind::delta, kInfinity}; }

void SpectralDensityModel::validate() const {
  if (kind == SpectralDensityKind::lorentzian && !(t2_star > 0.0 && std::isfinite(t2_star))) {
    throw ModelError("lorentzian spectral density requires a finite t2_star > 0");
  }
}

SpectralDensityModel spectral_model_for(const NuclearSpecies& species) {
  if (std::isfinite(species.t2_star)) return SpectralDensityModel::lorentzian(species.t2_star);
  return SpectralDensityModel::delta();
}

void Spectrum::validate() const {
  if (nu_hz.size() != contrast.size()) throw ModelError("spectrum: column length mismatch");
  if (nu_hz.empty()) throw ModelError("spectrum: no points");
  if (k < 1) throw ModelError("spectrum: k must be >= 1");
  for (std::size_t i = 0; i < nu_hz.size(); ++i) {
    if (!(nu_hz[i] > 0.0) || !std::isfinite(nu_hz[i])) {
      throw ModelError("spectrum: frequencies must be finite and > 0");
    }
    if (i > 0 && !(nu_hz[i] > nu_hz[i - 1])) {
      throw ModelError("spectrum: frequencies must be strictly increasing");
    }
    if (!std::isfinite(contrast[i])) throw ModelError("spectrum: non-finite contrast");
  }
}

std::vector<PulseSequence> frequency_sweep(int k, double nu_min, double nu_max, std::size_t n) {
  if (n < 2 || !(nu_max > nu_min) || !(nu_min > 0.0)) {
    throw ModelError("frequency_sweep: need n >= 2 and 0 < nu_min < nu_max");
  }
  std::vector<PulseSequence> sweep;
  sweep.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double nu = nu_min + (nu_max - nu_min) * static_cast<double>(i) / static_cast<double>(n - 1);
    sweep.push_back({k, 0.5 / nu});
  }
  return sweep;
}

double depth_factor(const SampleLayer& layer, const SensorConfig& sensor) {
  layer.validate();
  sensor.validate();
  if (layer.z1 == layer.z2) return 0.0;
  const double lo = sensor.d_nv + layer.z1;
  const double hi = sensor.d_nv + layer.z2;
  return 1.0 / (lo * lo * lo) - 1.0 / (hi * hi * hi);
}

double field_variance_weight(const SampleLayer& layer, const SensorConfig& sensor,
                             const PhysicalConstants& c) {
  const double coupling = c.mu0 * c.hbar * layer.species.gamma_n / (4.0 * kPi);
  return layer.species.rho * (5.0 * kPi / 48.0) * coupling * coupling * depth_factor(layer, sensor);
}

double layer_field_variance(const SampleLayer& layer, const SensorConfig& sensor, double omega,
                            const SpectralDensityModel& model, const PhysicalConstants& c) {
  model.validate();
  const double weight = field_variance_weight(layer, sensor, c);
  if (weight == 0.0) return 0.0;
  const double omega_l = larmor_frequency(layer.species, sensor.b0);
  if (model.kind == SpectralDensityKind::delta) return omega == omega_l ? kInfinity : 0.0;
  const double rate = 1.0 / model.t2_star;
  const double detuning = omega - omega_l;
  return weight * rate / (detuning * detuning + rate * rate);
}

double closed_form_I(double omega, double omega_larmor, double t2_star, int n_pulses) {
  if (!(t2_star > 0.0) || !std::isfinite(t2_star)) {
    throw ModelError("closed_form_I: t2_star must be finite and > 0");
  }
  if (!(omega > 0.0)) throw ModelError("closed_form_I: omega must be > 0");
  const double t2 = t2_star;
  const double x = n_pulses * kPi / (omega * t2);
  const double u = t2 * (omega_larmor - omega);
  if (std::abs(u) < 1e-4) return 2.0 * t2 * t2 * exp_excess(x);
  // The braces of the closed form equal Re[(1+iu)²(e^{−z} − 1 + z)], z = x(1 − iu).
  const std::complex<double> one_iu{1.0, u};
  const std::complex<double> z{x, -x * u};
  const double braces = std::real(one_iu * one_iu * exp_excess(z));
  const double denom = 1.0 + u * u;
  return 2.0 * t2 * t2 / (denom * denom) * braces;
}

double delta_I(double omega, double omega_larmor, int n_pulses) {
  if (!(omega > 0.0)) throw ModelError("delta_I: omega must be > 0");
  const double total = n_pulses * kPi / omega;
  const double s = sinc(0.5 * total * (omega_larmor - omega));
  return total * total * s * s;
}

double chi_prefactor(const SampleLayer& layer, const SensorConfig& sensor,
                     const PhysicalConstants& c) {
  const double coupling = c.mu0 * layer.species.gamma_n * c.gamma_e * c.hbar / (4.0 * kPi);
  return layer.species.rho * (5.0 / (48.0 * kPi)) * coupling * coupling *
         depth_factor(layer, sensor);
}

double chi(const SampleLayer& layer, const SensorConfig& sensor, const PulseSequence& seq,
           const PhysicalConstants& c) {
  return chi(layer, sensor, seq, spectral_model_for(layer.species), c);
}

double chi(const SampleLayer& layer, const SensorConfig& sensor, const PulseSequence& seq,
           const SpectralDensityModel& model, const PhysicalConstants& c) {
  seq.validate();
  const double prefactor = chi_prefactor(layer, sensor, c);
  if (prefactor == 0.0) return 0.0;
  const double omega = seq.probe_omega();
  const double omega_l = larmor_frequency(layer.species, sensor.b0);
  const double overlap = model.kind == SpectralDensityKind::delta
                             ? delta_I(omega, omega_l, seq.n_pulses())
                             : closed_form_I(omega, omega_l, model.t2_star, seq.n_pulses());
  return prefactor * overlap;
}

std::vector<double> model_contrast(const SampleStack& stack, const SensorConfig& sensor, int k,
                                   std::span<const double> nu_hz, const PhysicalConstants& c) {
  stack.validate();
  sensor.validate();
  std::vector<double> exponent(nu_hz.size(), 0.0);
  for (const auto& layer : stack.layers) {
    if (layer.empty()) continue;
    const double prefactor = chi_prefactor(layer, sensor, c);
    if (prefactor == 0.0) continue;
    const auto model = spectral_model_for(layer.species);
    const double omega_l = larmor_frequency(layer.species, sensor.b0);
    const int n = 8 * k;
    for (std::size_t i = 0; i < nu_hz.size(); ++i) {
      const double omega = kPi / (0.5 / nu_hz[i]);
      exponent[i] += prefactor * (model.kind == SpectralDensityKind::delta
                                      ? delta_I(omega, omega_l, n)
                                      : closed_form_I(omega, omega_l, model.t2_star, n));
    }
  }
  std::vector<double> contrast(nu_hz.size());
  std::transform(exponent.begin(), exponent.end(), contrast.begin(),
                 [](double x) { return std::exp(-x); });
  return contrast;
}

Spectrum contrast_spectrum(const SampleStack& stack, const SensorConfig& sensor,
                           std::span<const PulseSequence> sweep, const PhysicalConstants& c) {
  if (sweep.empty()) throw ModelError("contrast_spectrum: empty sweep");
  const int k = sweep.front().k;
  std::vector<double> nu;
  nu.reserve(sweep.size());
  for (const auto& seq : sweep) {
    seq.validate();
    if (seq.k != k) throw ModelError("contrast_spectrum: all sweep points must share k");
    nu.push_back(filter_center_frequency(seq));
  }
  std::sort(nu.begin(), nu.end());
  if (std::adjacent_find(nu.begin(), nu.end()) != nu.end()) {
    throw ModelError("contrast_spectrum: duplicate sweep frequencies");
  }
  Spectrum spectrum;
  spectrum.k = k;
  spectrum.sensor = sensor;
  spectrum.stack = stack;
  spectrum.contrast = model_contrast(stack, sensor, k, nu, c);
  spectrum.nu_hz = std::move(nu);
  return spectrum;
}

double equivalent_polarized_spins(double n_unpolarized) {
  if (!(n_unpolarized >= 0.0)) throw ModelError("equivalent_polarized_spins: n must be >= 0");
  return std::sqrt(n_unpolarized);
}

double nv_axis_tilt() { return std::acos(1.0 / std::sqrt(3.0)); }

double azimuthal_dipolar_kernel(double cos_theta) {
  static const KernelPoly p = kernel_poly();
  const double c2 = cos_theta * cos_theta;
  return p.p0 + p.p1 * c2 + p.p2 * c2 * c2;
}

DetectionVolume detection_volume_spins(const SampleLayer& layer, const SensorConfig& sensor,
                                       double signal_fraction) {
  if (!(signal_fraction > 0.0 && signal_fraction < 1.0)) {
    throw ModelError("detection_volume_spins: fraction must lie in (0, 1)");
  }
  const double total_depth = depth_factor(layer, sensor);
  if (layer.empty() || total_depth == 0.0) {
    throw ModelError("detection_volume_spins: fraction unreachable for an empty layer");
  }
  const KernelPoly p = kernel_poly();
  const double d = sensor.d_nv;
  // Variance over the whole layer, in units where the radial kernel is 1/r⁶.
  const double total = 2.0 * kPi * (p.p0 / 4.0 + p.p1 / 6.0 + p.p2 / 8.0) * total_depth / 3.0;

  // Fraction of variance inside a ball of radius R centred at the surface point.
  auto enclosed = [&](double radius) {
    const double top = std::min(layer.z2, radius);
    if (!(top > layer.z1)) return 0.0;
    auto slice = [&](double u) {
      const double z = d + u;
      const double r_max = std::sqrt(radius * radius - u * u + z * z);
      auto g = [&](double r) {
        const double r2 = r * r;
        const double r4 = r2 * r2;
        return p.p0 / (4.0 * r4) + p.p1 * z * z / (6.0 * r4 * r2) +
               p.p2 * z * z * z * z / (8.0 * r4 * r4);
      };
      return 2.0 * kPi * (g(z) - g(r_max));
    };
    using boost::math::quadrature::gauss_kronrod;
    // Split at a few multiples of d; the slice integrand falls off as (d+u)⁻⁴.
    double sum = 0.0;
    double a = layer.z1;
    for (double edge : {d, 4.0 * d, 16.0 * d, 64.0 * d, kInfinity}) {
      const double b = std::min(top, layer.z1 + edge);
      if (b > a) {
        sum += gauss_kronrod<double, 31>::integrate(slice, a, b, 12, 1e-12);
        a = b;
      }
    }
    return sum / total;
  };

  auto count_within = [&](double radius) {
    const double top = std::min(layer.z2, radius);
    if (!(top > layer.z1)) return 0.0;
    auto prim = [&](double u) { return radius * radius * u - u * u * u / 3.0; };
    return layer.species.rho * kPi * (prim(top) - prim(layer.z1));
  };

  const double cap = 1e4 * (d + layer.z1);
  DetectionVolume out;
  const double at_cap = enclosed(cap);
  if (at_cap < signal_fraction) {
    out.radius = cap;
    out.fraction_reached = at_cap;
    out.spin_count = count_within(cap);
    out.capped = true;
    return out;
  }
  auto objective = [&](double log_r) { return enclosed(std::exp(log_r)) - signal_fraction; };
  double lo = std::log(layer.z1 + 1e-3 * d);
  while (objective(lo) > 0.0) lo = std::log(layer.z1 + (std::exp(lo) - layer.z1) * 1e-3);
  std::uintmax_t max_iter = 200;
  const auto [a, b] = boost::math::tools::toms748_solve(
      objective, lo, std::log(cap), boost::math::tools::eps_tolerance<double>(40), max_iter);
  out.radius = std::exp(0.5 * (a + b));
  out.fraction_reached = enclosed(out.radius);
  out.spin_count = count_within(out.radius);
  return out;
}

}  // namespace nvnmr
