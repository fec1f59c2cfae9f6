#include <doctest.h>

#include <cmath>
#include <numbers>

#include "nvnmr/sequence.hpp"
#include "nvnmr/spin_model.hpp"

using namespace nvnmr;
using std::numbers::pi;

TEST_CASE("xy8 schedule timing") {
  const auto s = xy8_schedule({1, 1e-6});
  REQUIRE(s.pi_pulse_times.size() == 8);
  for (int m = 0; m < 8; ++m) CHECK(s.pi_pulse_times[m] == doctest::Approx((m + 0.5) * 1e-6));
  CHECK(s.duration == doctest::Approx(8e-6));

  const auto s10 = xy8_schedule({10, 0.5e-6});
  CHECK(s10.pi_pulse_times.size() == 80);
  CHECK(s10.duration == doctest::Approx(40e-6));
  for (std::size_t i = 1; i < s10.pi_pulse_times.size(); ++i) {
    CHECK(s10.pi_pulse_times[i] - s10.pi_pulse_times[i - 1] == doctest::Approx(0.5e-6));
  }
}

TEST_CASE("sign function integrates to zero") {
  for (int k : {1, 3, 10}) {
    const PulseSequence seq{k, 0.7e-6};
    const auto s = xy8_schedule(seq);
    double integral = 0.0;
    double prev = 0.0;
    int sign = 1;
    for (double t : s.pi_pulse_times) {
      integral += sign * (t - prev);
      prev = t;
      sign = -sign;
    }
    integral += sign * (s.duration - prev);
    CHECK(std::abs(integral) < 1e-18);
    CHECK(s.sign_at(0.1 * seq.tau) == 1);
    CHECK(s.sign_at(seq.tau) == -1);
    CHECK(s.sign_at(-1.0) == 0);
  }
}

TEST_CASE("sequence validation") {
  CHECK_THROWS_AS((PulseSequence{0, 1e-6}.validate()), ModelError);
  CHECK_THROWS_AS((PulseSequence{1, 0.0}.validate()), ModelError);
  CHECK(PulseSequence{3, 1e-6}.n_pulses() == 24);
}

TEST_CASE("center frequency") {
  CHECK(filter_center_frequency({1, 0.5e-6}) == doctest::Approx(1e6));
  // τ matched to ¹H at 20 mT
  const double tau = 0.5 / 851549.57036;
  CHECK(tau == doctest::Approx(0.587e-6).epsilon(1e-3));
  CHECK(filter_center_frequency({4, tau}) == doctest::Approx(851549.57036));
  CHECK(filter_center_frequency({4, 2 * tau}) == doctest::Approx(0.5 * filter_center_frequency({4, tau})));
}

TEST_CASE("primary resonance filter") {
  const PulseSequence seq{2, 1e-6};
  const double t = seq.duration();
  CHECK(filter_function(seq.probe_omega(), seq) == doctest::Approx(4 / (pi * pi) * t * t).epsilon(1e-14));
  // sinc² at 10 kHz offset, 30-digit evaluation
  CHECK(filter_function(pi / 1e-6 + 2 * pi * 1e4, seq) == doctest::Approx(9.53038777169114894e-11).epsilon(1e-12));

  for (double off : {0.1, 0.37, 1.3, 5.0}) {
    const double w0 = seq.probe_omega();
    const double d = off * 2 * pi / t;
    CHECK(filter_function(w0 + d, seq) == doctest::Approx(filter_function(w0 - d, seq)).epsilon(1e-12));
    CHECK(filter_function(w0 + d, seq) >= 0.0);
  }
}

TEST_CASE("filter bandwidth") {
  for (int k : {1, 2, 5, 10, 20}) {
    const PulseSequence seq{k, 0.6e-6};
    CHECK(filter_bandwidth(seq) * k * seq.tau == doctest::Approx(0.111).epsilon(0.01));
    CHECK(filter_bandwidth({2 * k, seq.tau}) / filter_bandwidth(seq) == doctest::Approx(0.5).epsilon(0.01));
    // half power at the reported FWHM
    const double w = seq.probe_omega() + pi * filter_bandwidth(seq);
    CHECK(filter_function(w, seq) / filter_function(seq.probe_omega(), seq) == doctest::Approx(0.5).epsilon(1e-6));
  }
}

TEST_CASE("exact filter function") {
  const PulseSequence seq{4, 1e-6};
  const auto s = xy8_schedule(seq);
  const double t = seq.duration();
  // segment-by-segment Fourier integral in 30-digit arithmetic
  CHECK(exact_filter_function(seq.probe_omega(), s) == doctest::Approx(4.15011568199015512e-10).epsilon(1e-10));
  CHECK(exact_filter_function(seq.probe_omega(), s) / (4 / (pi * pi) * t * t) == doctest::Approx(1.0).epsilon(0.02));
  CHECK(exact_filter_function(1e-3, s) < 1e-12 * t * t);
  CHECK(exact_filter_function(0.0, s) < 1e-30);

  const double third = exact_filter_function(3 * seq.probe_omega(), s);
  CHECK(third / exact_filter_function(seq.probe_omega(), s) == doctest::Approx(1.0 / 9).epsilon(1e-6));
  // local maximum at the third harmonic
  const double dw = 0.2 * 2 * pi / t;
  CHECK(third > exact_filter_function(3 * seq.probe_omega() + dw, s));
  CHECK(third > exact_filter_function(3 * seq.probe_omega() - dw, s));
}

TEST_CASE("exact and primary filters agree near resonance") {
  for (int k : {2, 4, 10}) {
    const PulseSequence seq{k, 0.8e-6};
    const auto s = xy8_schedule(seq);
    const double band = 2 * pi * filter_bandwidth(seq);
    for (int i = -10; i <= 10; ++i) {
      const double w = seq.probe_omega() + band * i / 10.0;
      CHECK(exact_filter_function(w, s) == doctest::Approx(filter_function(w, seq)).epsilon(0.05));
    }
  }
}

TEST_CASE("filter transform matches segment sum") {
  const PulseSequence seq{3, 0.9e-6};
  const auto s = xy8_schedule(seq);
  for (int i = 1; i <= 60; ++i) {
    const double w = seq.probe_omega() * 0.07 * i;
    const double a = std::norm(filter_transform(w, seq));
    const double b = exact_filter_function(w, s);
    CHECK(a == doctest::Approx(b).epsilon(1e-9).scale(1e-6 * seq.duration() * seq.duration()));
  }
}
