#include <doctest.h>

#include <cmath>
#include <numbers>

#include "nvnmr/oracle.hpp"

using namespace nvnmr;
using std::numbers::pi;

namespace {

const SensorConfig kSensor{8e-9, 0.02};

SampleLayer oil(double rho_per_nm3, double t2 = 32e-6) {
  return {species::proton(rho_per_nm3 * units::per_nm3, t2), 0.0, kInfinity};
}

PulseSequence on_resonance(int k) { return {k, pi / larmor_frequency(species::proton(), kSensor.b0)}; }

oracle::MonteCarloOptions small(std::size_t realizations, std::size_t spins, unsigned threads = 1) {
  oracle::MonteCarloOptions o;
  o.n_realizations = realizations;
  o.n_spins = spins;
  o.threads = threads;
  o.seed = 11;
  return o;
}

}  // namespace

TEST_CASE("quadrature routes agree") {
  const double t2 = 20e-6;
  for (double det : {-20.0, -3.0, 0.0, 0.7, 12.0}) {
    for (double x : {0.01, 0.3, 2.0, 20.0}) {
      const int n = 32;
      const double w = pi * n / (x * t2);
      const double wl = w - det / t2;
      const double a = closed_form_I(w, wl, t2, n);
      CHECK(oracle::quadrature_I(w, wl, t2, n, 1e-8) == doctest::Approx(a).epsilon(1e-6));
      CHECK(oracle::time_domain_I(w, wl, t2, n) == doctest::Approx(a).epsilon(1e-9));
      if (x > 0.1) CHECK(oracle::simpson_I(w, wl, t2, n) == doctest::Approx(a).epsilon(1e-6));
    }
  }
}

TEST_CASE("overlap error estimate") {
  const auto r = oracle::lorentzian_filter_overlap(1e7, 1e7 + 1e4, 1e-5, 40, 1e-8);
  CHECK(r.error_estimate <= 1e-8 * r.value);
  CHECK(r.segments > 100);
  CHECK_THROWS_AS(oracle::quadrature_I(1e7, 1e7, kInfinity, 40), ModelError);
}

TEST_CASE("numerical chi") {
  CHECK(oracle::numerical_chi(oil(0.0), kSensor, on_resonance(4)) == 0.0);
  const SampleLayer delta = oil(60, kInfinity);
  const auto seq = on_resonance(4);
  const double expected = default_constants().gamma_e * default_constants().gamma_e / (4 * pi) *
                          field_variance_weight(delta, kSensor) * pi *
                          filter_function(larmor_frequency(delta.species, kSensor.b0), seq);
  CHECK(oracle::numerical_chi(delta, kSensor, seq) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("truncation cylinder") {
  CHECK(oracle::truncation_enclosed_fraction(oil(60), kSensor, 10.0) > 0.99);
  CHECK(oracle::truncation_enclosed_fraction(oil(60), kSensor, 10.0) < 1.0);
  CHECK(oracle::truncation_enclosed_fraction(oil(60), kSensor, 3.0) <
        oracle::truncation_enclosed_fraction(oil(60), kSensor, 10.0));
  const SampleLayer thin{species::proton(6e28), 0.0, 1e-9};
  CHECK(oracle::truncation_enclosed_fraction(thin, kSensor, 10.0) > 0.99);
}

TEST_CASE("bath samples lie inside the layer") {
  const SampleLayer slab{species::fluorine(4e28, 50e-6), 1e-9, 6e-9};
  const auto bath = oracle::sample_bath(slab, kSensor, 3000, 5, 0);
  REQUIRE(bath.spins.size() == 3000);
  for (const auto& s : bath.spins) {
    const double z = s.position[2] - kSensor.d_nv;
    CHECK(z >= 1e-9 * (1 - 1e-12));
    CHECK(z <= 6e-9 * (1 + 1e-12));
    CHECK(s.phase >= 0.0);
    CHECK(s.phase < 2 * pi);
  }
  const auto again = oracle::sample_bath(slab, kSensor, 3000, 5, 0);
  CHECK(again.spins[17].position == bath.spins[17].position);
  CHECK(oracle::sample_bath(slab, kSensor, 3000, 5, 1).spins[17].position != bath.spins[17].position);
}

TEST_CASE("monte carlo determinism across thread counts") {
  const auto a = oracle::mc_contrast(oil(60), kSensor, on_resonance(4), small(300, 500, 1));
  const auto b = oracle::mc_contrast(oil(60), kSensor, on_resonance(4), small(300, 500, 3));
  CHECK(a.mean_contrast == b.mean_contrast);
  CHECK(a.standard_error == b.standard_error);
  CHECK(a.phase_variance == b.phase_variance);
  CHECK(a.rng == std::string(oracle::kRngName));
}

TEST_CASE("monte carlo empty bath") {
  const auto r = oracle::mc_contrast(oil(0.0), kSensor, on_resonance(4), small(200, 100));
  CHECK(r.mean_contrast == doctest::Approx(1.0));
  CHECK(r.standard_error >= 0.0);
  CHECK(std::abs(r.mean_contrast - 1.0) <= 3 * r.standard_error + 1e-15);
}

TEST_CASE("monte carlo phase variance is linear in density") {
  const auto seq = on_resonance(4);
  const auto lo = oracle::mc_contrast(oil(6), kSensor, seq, small(400, 1000, 0));
  const auto hi = oracle::mc_contrast(oil(60), kSensor, seq, small(400, 1000, 0));
  CHECK((hi.phase_variance / 60) / (lo.phase_variance / 6) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("monte carlo phase is gaussian") {
  // χ ≤ 0.5
  const auto seq = on_resonance(2);
  const SampleLayer layer = oil(20);
  REQUIRE(chi(layer, kSensor, seq) <= 0.5);
  const auto r = oracle::mc_contrast(layer, kSensor, seq, small(4000, 2000, 0));
  CHECK(std::abs(r.mean_contrast - std::exp(-0.5 * r.phase_variance)) <= 3 * r.standard_error);
}

TEST_CASE("monte carlo matches the lineshape on resonance") {
  const auto seq = on_resonance(4);
  const auto r = oracle::mc_contrast(oil(60), kSensor, seq, small(3000, 2000, 0));
  CHECK(std::abs(r.mean_contrast - std::exp(-chi(oil(60), kSensor, seq))) <= 3 * r.standard_error);
  CHECK(r.prefactor / (5 * pi / 48) == doctest::Approx(1.0).epsilon(0.05));
  CHECK(r.enclosed_fraction > 0.99);
}

TEST_CASE("monte carlo far off resonance") {
  // Detuned by 5 filter bandwidths, χ ≪ 1. Compared against the exact
  // sign-function filter, which is what the simulation applies.
  const PulseSequence on = on_resonance(4);
  const double band = filter_bandwidth(on);
  const double nu = filter_center_frequency(on) + 5 * band;
  const PulseSequence seq{4, 0.5 / nu};
  const SampleLayer layer = oil(60, kInfinity);
  const double w_l = larmor_frequency(layer.species, kSensor.b0);
  const auto c = default_constants();
  const double chi_exact = c.gamma_e * c.gamma_e / (4 * pi) * field_variance_weight(layer, kSensor) * pi *
                           exact_filter_function(w_l, xy8_schedule(seq));
  REQUIRE(chi_exact < 0.05);
  const auto r = oracle::mc_contrast(layer, kSensor, seq, small(3000, 2000, 0));
  CHECK(std::abs(r.mean_contrast - (1 - chi_exact)) <= 3 * r.standard_error + 0.5 * chi_exact * chi_exact);
}

TEST_CASE("monte carlo preconditions") {
  CHECK_THROWS(oracle::mc_contrast(oil(60), kSensor, on_resonance(4), small(10, 100)));
  auto o = small(200, 100);
  o.truncation = 1.0;
  CHECK_THROWS(oracle::mc_contrast(oil(60), kSensor, on_resonance(4), o));
}
