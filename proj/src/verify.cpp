#include "nvnmr/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "nvnmr/oracle.hpp"

namespace nvnmr {

namespace {

constexpr double kPi = std::numbers::pi;

VerifyCheck check(std::string name, double achieved, double tolerance, std::string detail) {
  return {std::move(name), achieved, tolerance, achieved <= tolerance, std::move(detail)};
}

// (ω − ω_L)T₂* on [−20, 20] and x = Nτ/T₂* on [0.01, 20], log spaced.
template <class F>
double grid_max_error(int n_detuning, int n_x, F&& relative_error) {
  const double t2 = 20e-6;
  const int n_pulses = 32;
  double worst = 0.0;
  for (int i = 0; i < n_detuning; ++i) {
    const double det = -20.0 + 40.0 * i / (n_detuning - 1);
    for (int j = 0; j < n_x; ++j) {
      const double x = 0.01 * std::pow(2000.0, static_cast<double>(j) / (n_x - 1));
      const double omega = kPi * n_pulses / (x * t2);
      worst = std::max(worst, relative_error(omega, omega - det / t2, t2, n_pulses));
    }
  }
  return worst;
}

}  // namespace

bool VerifyReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

nlohmann::json VerifyReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : checks) {
    arr.push_back({{"name", c.name},
                   {"achieved", c.achieved},
                   {"tolerance", c.tolerance},
                   {"passed", c.passed},
                   {"detail", c.detail}});
  }
  return {{"checks", arr}, {"passed", passed()}};
}

VerifyReport run_verification(const VerifyOptions& o) {
  VerifyReport report;

  report.checks.push_back(check(
      "closed_form_vs_quadrature",
      grid_max_error(21, 21,
                     [](double w, double wl, double t2, int n) {
                       const double a = closed_form_I(w, wl, t2, n);
                       return std::abs(a - oracle::quadrature_I(w, wl, t2, n, 1e-8)) / a;
                     }),
      1e-4, "max relative error over 441 grid points"));

  report.checks.push_back(check(
      "closed_form_vs_simpson",
      grid_max_error(5, 5,
                     [](double w, double wl, double t2, int n) {
                       const double a = closed_form_I(w, wl, t2, n);
                       return std::abs(a - oracle::simpson_I(w, wl, t2, n)) / a;
                     }),
      1e-6, "fixed-grid Simpson, 25 grid points"));

  report.checks.push_back(check(
      "closed_form_vs_time_domain",
      grid_max_error(21, 21,
                     [](double w, double wl, double t2, int n) {
                       const double a = closed_form_I(w, wl, t2, n);
                       return std::abs(a - oracle::time_domain_I(w, wl, t2, n)) / a;
                     }),
      1e-8, "time-domain representation, 441 grid points"));

  {
    double worst = 0.0;
    for (int k : {1, 2, 5, 10, 20}) {
      const PulseSequence seq{k, 0.5e-6};
      worst = std::max(worst, std::abs(filter_bandwidth(seq) * k * seq.tau / 0.111 - 1.0));
    }
    report.checks.push_back(check("filter_bandwidth_0.111_over_k_tau", worst, 0.01, "k in {1, 2, 5, 10, 20}"));
  }

  {
    double worst = 0.0;
    const PulseSequence seq{4, 0.6e-6};
    const auto schedule = xy8_schedule(seq);
    for (int i = 0; i <= 40; ++i) {
      const double w = seq.probe_omega() * (0.5 + 0.05 * i);
      const double a = exact_filter_function(w, schedule);
      const double b = std::norm(filter_transform(w, seq));
      worst = std::max(worst, std::abs(a - b) / std::max(a, 1e-3 * seq.duration() * seq.duration()));
    }
    report.checks.push_back(check("filter_transform_vs_segment_sum", worst, 1e-9, "41 frequencies, 0.5-2.5 pi/tau"));
  }

  const SensorConfig sensor{8e-9, 0.02};
  const double omega_h = larmor_frequency(species::proton(), sensor.b0);
  const PulseSequence on_res{4, kPi / omega_h};
  {
    const std::vector<SampleLayer> layers = {
        {species::proton(60 * units::per_nm3, 32e-6), 0.0, kInfinity},
        {species::proton(60 * units::per_nm3), 0.0, kInfinity},
        {species::fluorine(40 * units::per_nm3, 50e-6), 1e-9, 5e-9},
    };
    double worst = 0.0;
    for (const auto& layer : layers) {
      for (double detune : {0.97, 1.0, 1.02}) {
        const PulseSequence seq{4, on_res.tau / detune};
        const double a = o.corrupt_prefactor * chi(layer, sensor, seq);
        const double b = oracle::numerical_chi(layer, sensor, seq);
        worst = std::max(worst, std::abs(a - b) / b);
      }
    }
    report.checks.push_back(check("chi_vs_numerical_chi", worst, 1e-4, "Lorentzian, delta and finite layers"));
  }

  report.checks.push_back(check("statistical_polarization_20000",
                                std::abs(equivalent_polarized_spins(20000.0) - 141.0), 1.0,
                                "sqrt(20000) vs 141 +- 1"));

  if (o.include_mc) {
    const SampleLayer layer{species::proton(60 * units::per_nm3, 32e-6), 0.0, kInfinity};
    oracle::MonteCarloOptions mc;
    mc.n_realizations = o.mc_realizations;
    mc.n_spins = o.mc_spins;
    mc.seed = o.seed;
    mc.threads = o.threads;
    const auto r = oracle::mc_contrast(layer, sensor, on_res, mc);
    const double expected = std::exp(-o.corrupt_prefactor * chi(layer, sensor, on_res));
    std::ostringstream d;
    d << "1H, d = 8 nm, 20 mT, k = 4, T2* = 32 us: MC " << r.mean_contrast << " +- " << r.standard_error
      << " vs exp(-chi) " << expected << "; " << mc.n_realizations << " realizations, seed " << mc.seed;
    report.checks.push_back(
        check("mc_contrast_on_resonance", std::abs(r.mean_contrast - expected) / r.standard_error, 3.0, d.str()));
    const double analytic = o.corrupt_prefactor * 5.0 * kPi / 48.0;
    report.checks.push_back(check("mc_angular_prefactor", std::abs(r.prefactor / analytic - 1.0), 0.05,
                                  "MC prefactor vs 5 pi/48"));
  }
  return report;
}

}  // namespace nvnmr
