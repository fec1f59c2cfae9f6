#include "nvnmr/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "nvnmr/parallel.hpp"
#include "nvnmr/rng.hpp"

namespace nvnmr::oracle {

namespace {

constexpr double kPi = std::numbers::pi;
using boost::math::quadrature::gauss_kronrod;
using boost::math::quadrature::gauss;

struct OverlapSetup {
  double total;   // Nτ
  double lobe;    // 2π/(Nτ), spacing of filter zeros in Ω
  double rate;    // 1/T₂*
  double offset;  // ω_L − ω

  double lorentz(double v) const {
    const double dv = v - offset;
    return rate / (dv * dv + rate * rate);
  }
  double integrand(double v) const {
    const double s = sinc(0.5 * total * v);
    return lorentz(v) * 4.0 / (kPi * kPi) * total * total * s * s;
  }
  // Beyond |v| > V the filter lobes average sin² to ½: integrand → (8/π²)L/v².
  // Substituting v = V/w maps each tail onto w ∈ (0, 1].
  double tail(double window) const {
    auto f = [&](double w) {
      if (w <= 0.0) return 0.0;
      const double v = window / w;
      return lorentz(v) + lorentz(-v);
    };
    return 8.0 / (kPi * kPi * window) * gauss_kronrod<double, 31>::integrate(f, 0.0, 1.0, 15, 1e-12);
  }
};

OverlapSetup make_setup(double omega, double omega_larmor, double t2_star, int n_pulses) {
  if (!(omega > 0.0)) throw ModelError("oracle: omega must be > 0");
  if (!(t2_star > 0.0) || !std::isfinite(t2_star)) {
    throw ModelError("oracle: Lorentzian overlap needs a finite t2_star > 0");
  }
  if (n_pulses < 1) throw ModelError("oracle: n_pulses must be >= 1");
  const double total = n_pulses * kPi / omega;
  return {total, kTwoPi / total, 1.0 / t2_star, omega_larmor - omega};
}

// Cylinder above the NV holding the sampled bath.
struct BathGeometry {
  double h1, h2, top, radius;
  std::array<double, 3> axis;  // NV axis
  std::array<double, 3> e1, e2;  // transverse basis

  BathGeometry(const SampleLayer& layer, const SensorConfig& sensor, double truncation) {
    if (!(truncation > 0.0)) throw ModelError("monte carlo: truncation must be > 0");
    h1 = sensor.d_nv + layer.z1;
    h2 = sensor.d_nv + layer.z2;
    top = h1 * (1.0 + truncation);
    radius = h1 * truncation;
    const double a = nv_axis_tilt();
    axis = {std::sin(a), 0.0, std::cos(a)};
    e1 = {std::cos(a), 0.0, -std::sin(a)};
    e2 = {0.0, 1.0, 0.0};
  }

  // Radial limit along a direction with cos θ = c from the normal.
  double far_limit(double c) const {
    const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
    double r = std::min(h2, top) / c;
    if (s > 0.0) r = std::min(r, radius / s);
    return r;
  }
};

}  // namespace

QuadratureResult lorentzian_filter_overlap(double omega, double omega_larmor, double t2_star,
                                           int n_pulses, double rel_tol) {
  const OverlapSetup p = make_setup(omega, omega_larmor, t2_star, n_pulses);
  const double reach = std::abs(p.offset) + 1000.0 * std::max(p.rate, p.lobe);
  const auto lobes = static_cast<long>(std::ceil(std::max(2000.0 * p.lobe, reach) / p.lobe));
  const double window = lobes * p.lobe;

  std::vector<double> edges;
  edges.reserve(2 * lobes + 32);
  for (long m = -lobes; m <= lobes; ++m) edges.push_back(m * p.lobe);
  for (double f : {0.0, 0.25, 1.0, 4.0, 16.0, 64.0, 256.0}) {
    for (double sgn : {-1.0, 1.0}) {
      const double v = p.offset + sgn * f * p.rate;
      if (std::abs(v) < window) edges.push_back(v);
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end(),
                          [&](double a, double b) { return b - a < 1e-12 * p.lobe; }),
              edges.end());

  QuadratureResult result;
  auto f = [&](double v) { return p.integrand(v); };
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    double err = 0.0;
    result.value += gauss_kronrod<double, 31>::integrate(f, edges[i], edges[i + 1], 15, 1e-11, &err);
    result.error_estimate += err;
    ++result.segments;
  }
  const double tail = p.tail(window);
  result.value += tail;
  result.error_estimate += std::abs(tail) * p.lobe / window;
  if (!(result.error_estimate <= rel_tol * std::abs(result.value))) {
    throw ConvergenceError("lorentzian_filter_overlap: estimated error " +
                           std::to_string(result.error_estimate / std::abs(result.value)) +
                           " exceeds tolerance");
  }
  return result;
}

double quadrature_I(double omega, double omega_larmor, double t2_star, int n_pulses, double rel_tol) {
  return 0.25 * kPi * lorentzian_filter_overlap(omega, omega_larmor, t2_star, n_pulses, rel_tol).value;
}

double simpson_I(double omega, double omega_larmor, double t2_star, int n_pulses,
                 int points_per_width, int half_width_lobes) {
  const OverlapSetup p = make_setup(omega, omega_larmor, t2_star, n_pulses);
  const double window = half_width_lobes * p.lobe + std::abs(p.offset);
  const double h_target = std::min(p.lobe, p.rate) / points_per_width;
  auto n = static_cast<std::size_t>(std::ceil(2.0 * window / h_target));
  if (n % 2 == 1) ++n;
  if (n > 200'000'000) throw ModelError("simpson_I: grid too fine for the requested window");
  const double h = 2.0 * window / static_cast<double>(n);
  double sum = p.integrand(-window) + p.integrand(window);
  for (std::size_t i = 1; i < n; ++i) {
    sum += (i % 2 == 1 ? 4.0 : 2.0) * p.integrand(-window + h * static_cast<double>(i));
  }
  return 0.25 * kPi * (sum * h / 3.0 + p.tail(window));
}

double time_domain_I(double omega, double omega_larmor, double t2_star, int n_pulses) {
  const OverlapSetup p = make_setup(omega, omega_larmor, t2_star, n_pulses);
  const double detuning = p.offset;
  auto f = [&](double t) {
    return 2.0 * (p.total - t) * std::exp(-t * p.rate) * std::cos(detuning * t);
  };
  // e^{-45} is below double resolution relative to the integral
  const double span = p.rate > 0.0 ? std::min(p.total, 45.0 / p.rate) : p.total;
  // at most half a period and two e-foldings per panel
  const double per_unit = std::max(std::abs(detuning) / kPi, 0.5 * p.rate);
  const auto panels = static_cast<long>(std::max(1.0, std::ceil(per_unit * span)));
  const double width = span / static_cast<double>(panels);
  double sum = 0.0;
  for (long i = 0; i < panels; ++i) {
    sum += gauss<double, 30>::integrate(f, i * width, (i + 1) * width);
  }
  return sum;
}

double numerical_chi(const SampleLayer& layer, const SensorConfig& sensor, const PulseSequence& seq,
                     const PhysicalConstants& c, double rel_tol) {
  seq.validate();
  const double weight = field_variance_weight(layer, sensor, c);
  if (weight == 0.0) return 0.0;
  const double omega_l = larmor_frequency(layer.species, sensor.b0);
  const auto model = spectral_model_for(layer.species);
  double integral;
  if (model.kind == SpectralDensityKind::delta) {
    // ∫ πδ(Ω − ω_L)|g(Ω)|² dΩ
    integral = kPi * filter_function(omega_l, seq);
  } else {
    integral = lorentzian_filter_overlap(seq.probe_omega(), omega_l, model.t2_star, seq.n_pulses(),
                                         rel_tol)
                   .value;
  }
  return c.gamma_e * c.gamma_e / (4.0 * kPi) * weight * integral;
}

double truncation_enclosed_fraction(const SampleLayer& layer, const SensorConfig& sensor,
                                    double truncation) {
  layer.validate();
  sensor.validate();
  if (layer.empty()) return 1.0;
  const BathGeometry g(layer, sensor, truncation);
  // Radial integral of r⁻⁴ along direction c is (r_a⁻³ − r_b⁻³)/3, r_a = h₁/c.
  auto radial = [&](double c, double far) {
    const double near = g.h1 / c;
    if (!(far > near)) return 0.0;
    return 1.0 / (near * near * near) - 1.0 / (far * far * far);
  };
  auto inside = [&](double c) {
    return c <= 0.0 ? 0.0 : azimuthal_dipolar_kernel(c) * radial(c, g.far_limit(c));
  };
  auto full = [&](double c) {
    return c <= 0.0 ? 0.0 : azimuthal_dipolar_kernel(c) * radial(c, g.h2 / c);
  };
  const double kink = std::min(g.h2, g.top) / std::hypot(std::min(g.h2, g.top), g.radius);
  double enclosed = 0.0;
  double total = 0.0;
  for (auto [a, b] : {std::pair{0.0, kink}, std::pair{kink, 1.0}}) {
    enclosed += gauss_kronrod<double, 61>::integrate(inside, a, b, 15, 1e-12);
    total += gauss_kronrod<double, 61>::integrate(full, a, b, 15, 1e-12);
  }
  return enclosed / total;
}

namespace {

// Fills `spins` for one realization. Shared by sample_bath and the MC loop.
void draw_bath(const SampleLayer& layer, const BathGeometry& g, double coupling, std::size_t n_spins,
               std::uint64_t stream_seed, std::vector<BathSpin>& spins) {
  std::mt19937_64 eng(stream_seed);
  spins.resize(n_spins);
  const double rho = layer.species.rho;
  const bool lorentzian = std::isfinite(layer.species.t2_star);
  const double rate = lorentzian ? 1.0 / layer.species.t2_star : 0.0;
  // Classical transverse amplitude with ⟨I_x²⟩ = ¼ for spin ½.
  const double transverse = std::sqrt(0.5);
  for (auto& spin : spins) {
    const double c = 1.0 - uniform01(eng);  // cos θ ∈ (0, 1], uniform on the hemisphere
    const double phi = kTwoPi * uniform01(eng);
    const double u_r = uniform01(eng);
    const double psi = kTwoPi * uniform01(eng);
    const double u_f = uniform01(eng);

    const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
    const std::array<double, 3> dir{s * std::cos(phi), s * std::sin(phi), c};
    const double near = g.h1 / c;
    const double far = g.far_limit(c);
    spin.phase = psi;
    spin.frequency_offset = lorentzian ? rate * std::tan(kPi * (u_f - 0.5)) : 0.0;
    if (!(far > near) || rho == 0.0) {
      spin.amplitude = 0.0;
      spin.position = {dir[0] * near, dir[1] * near, dir[2] * near};
      continue;
    }
    const double inv_near3 = 1.0 / (near * near * near);
    const double inv_far3 = 1.0 / (far * far * far);
    const double inv_r3 = inv_near3 - u_r * (inv_near3 - inv_far3);
    const double r = std::cbrt(1.0 / inv_r3);
    spin.position = {dir[0] * r, dir[1] * r, dir[2] * r};

    // Importance density of this position per unit volume.
    const double pdf = (1.0 / kTwoPi) * 3.0 * inv_r3 / r / (inv_near3 - inv_far3) / (r * r);
    const double cos_beta = dir[0] * g.axis[0] + dir[1] * g.axis[1] + dir[2] * g.axis[2];
    const std::array<double, 3> perp{dir[0] - cos_beta * g.axis[0], dir[1] - cos_beta * g.axis[1],
                                     dir[2] - cos_beta * g.axis[2]};
    // Secular coupling: B_∥ = (μ₀ħγₙ/4π)·3(n̂·r̂)(I⊥·r̂)/r³.
    const double p1 = perp[0] * g.e1[0] + perp[1] * g.e1[1] + perp[2] * g.e1[2];
    const double p2 = perp[0] * g.e2[0] + perp[1] * g.e2[1] + perp[2] * g.e2[2];
    const double sin_beta = std::hypot(p1, p2);
    spin.amplitude = coupling * transverse * 3.0 * cos_beta * sin_beta * inv_r3 *
                     std::sqrt(rho / (static_cast<double>(n_spins) * pdf));
    // I⊥·r̂ = A sin β cos(ψ(t) − φ_r); fold −φ_r into the phase.
    spin.phase = psi - std::atan2(p2, p1);
    if (spin.phase < 0.0) spin.phase += kTwoPi;
    if (spin.phase >= kTwoPi) spin.phase -= kTwoPi;
  }
}

}  // namespace

BathRealization sample_bath(const SampleLayer& layer, const SensorConfig& sensor, std::size_t n_spins,
                            std::uint64_t seed, std::uint64_t index, double truncation,
                            const PhysicalConstants& c) {
  layer.validate();
  sensor.validate();
  const BathGeometry g(layer, sensor, truncation);
  const double coupling = c.mu0 * c.hbar * layer.species.gamma_n / (4.0 * kPi);
  BathRealization out;
  out.seed = splitmix64(seed + index);
  draw_bath(layer, g, coupling, n_spins, out.seed, out.spins);
  return out;
}

MonteCarloResult mc_contrast(const SampleLayer& layer, const SensorConfig& sensor,
                             const PulseSequence& seq, const MonteCarloOptions& options,
                             const PhysicalConstants& c) {
  layer.validate();
  sensor.validate();
  seq.validate();
  if (options.n_realizations < 100) throw ModelError("mc_contrast: need at least 100 realizations");
  if (options.n_spins < 1) throw ModelError("mc_contrast: need at least one spin");

  MonteCarloResult result;
  result.seed = options.seed;
  result.n_spins = options.n_spins;
  result.n_realizations = options.n_realizations;
  result.rng = kRngName;
  if (layer.empty()) return result;

  result.enclosed_fraction = truncation_enclosed_fraction(layer, sensor, options.truncation);
  if (result.enclosed_fraction < 0.99) {
    throw ModelError("mc_contrast: truncation cylinder encloses only " +
                     std::to_string(100.0 * result.enclosed_fraction) + "% of the field variance");
  }

  const BathGeometry g(layer, sensor, options.truncation);
  const double coupling = c.mu0 * c.hbar * layer.species.gamma_n / (4.0 * kPi);
  const double omega_l = larmor_frequency(layer.species, sensor.b0);
  const bool lorentzian = std::isfinite(layer.species.t2_star);
  const std::complex<double> on_line = filter_transform(omega_l, seq);

  struct Sample {
    double cos_phi, phi_sq, field_sq;
  };
  std::vector<Sample> samples(options.n_realizations);
  parallel_for(options.n_realizations, options.threads, [&](std::size_t index) {
    thread_local std::vector<BathSpin> spins;
    draw_bath(layer, g, coupling, options.n_spins, splitmix64(options.seed + index), spins);
    double phi = 0.0;
    double field_sq = 0.0;
    for (const auto& spin : spins) {
      if (spin.amplitude == 0.0) continue;
      // ∫ g(t)cos(ω t + ψ) dt = Re[e^{iψ} ∫ g(t)e^{iωt} dt]
      const std::complex<double> response =
          lorentzian ? filter_transform(omega_l + spin.frequency_offset, seq) : on_line;
      phi += spin.amplitude * std::real(std::polar(1.0, spin.phase) * response);
      field_sq += 0.5 * spin.amplitude * spin.amplitude;
    }
    phi *= c.gamma_e;
    samples[index] = {std::cos(phi), phi * phi, field_sq};
  });

  double sum = 0.0, sum_sq = 0.0, phi_sq = 0.0, field = 0.0;
  for (const auto& s : samples) {
    sum += s.cos_phi;
    sum_sq += s.cos_phi * s.cos_phi;
    phi_sq += s.phi_sq;
    field += s.field_sq;
  }
  const auto n = static_cast<double>(samples.size());
  result.mean_contrast = sum / n;
  const double var = std::max(0.0, (sum_sq - sum * sum / n) / (n - 1.0));
  result.standard_error = std::sqrt(var / n);
  result.phase_variance = phi_sq / n;
  result.field_variance = field / n;
  const double depth = depth_factor(layer, sensor);
  result.prefactor = 2.0 * result.field_variance / (layer.species.rho * coupling * coupling * depth);
  return result;
}

}  // namespace nvnmr::oracle
