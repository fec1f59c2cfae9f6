#include "nvnmr/sequence.hpp"

#include <cmath>
#include <numbers>

#include "nvnmr/spin_model.hpp"

namespace nvnmr {

namespace {

// sinc²(x) = 1/2
constexpr double kSincSqHalfPower = 1.3915573782515103;

}  // namespace

double sinc(double x) {
  if (std::abs(x) < 1e-4) {
    const double x2 = x * x;
    return 1.0 - x2 / 6.0 + x2 * x2 / 120.0;
  }
  return std::sin(x) / x;
}

double PulseSequence::probe_omega() const { return std::numbers::pi / tau; }

void PulseSequence::validate() const {
  if (k < 1) throw ModelError("pulse sequence: k must be >= 1");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ModelError("pulse sequence: tau must be > 0");
}

int PulseSchedule::sign_at(double t) const {
  if (t < 0.0 || t > duration) return 0;
  int flips = 0;
  for (double p : pi_pulse_times) {
    if (p <= t) ++flips;
  }
  return flips % 2 == 0 ? 1 : -1;
}

PulseSchedule xy8_schedule(const PulseSequence& seq) {
  seq.validate();
  PulseSchedule schedule;
  const int n = seq.n_pulses();
  schedule.pi_pulse_times.reserve(n);
  for (int m = 1; m <= n; ++m) {
    schedule.pi_pulse_times.push_back((m - 0.5) * seq.tau);
  }
  schedule.duration = n * seq.tau;
  return schedule;
}

double filter_center_frequency(const PulseSequence& seq) {
  seq.validate();
  return 1.0 / (2.0 * seq.tau);
}

double filter_function(double omega, const PulseSequence& seq) {
  const double total = seq.duration();
  const double s = sinc(0.5 * total * (omega - seq.probe_omega()));
  return 4.0 / (std::numbers::pi * std::numbers::pi) * total * total * s * s;
}

double filter_bandwidth(const PulseSequence& seq) {
  seq.validate();
  // Half-power points at (Nτ/2)·ΔΩ = ±x½, so FWHM_Ω = 4x½/(Nτ).
  return 4.0 * kSincSqHalfPower / seq.duration() / kTwoPi;
}

double exact_filter_function(double omega, const PulseSchedule& schedule) {
  // Segment boundaries 0, t₁, …, t_N, T with alternating sign.
  std::complex<double> sum{0.0, 0.0};
  double start = 0.0;
  double sign = 1.0;
  auto add_segment = [&](double a, double b) {
    if (omega == 0.0) {
      sum += sign * (b - a);
      return;
    }
    // ∫ₐᵇ e^{−iΩt} dt = (e^{−iΩa} − e^{−iΩb}) / (iΩ)
    const std::complex<double> ea = std::polar(1.0, -omega * a);
    const std::complex<double> eb = std::polar(1.0, -omega * b);
    sum += sign * (ea - eb) / std::complex<double>(0.0, omega);
  };
  for (double p : schedule.pi_pulse_times) {
    add_segment(start, p);
    start = p;
    sign = -sign;
  }
  add_segment(start, schedule.duration);
  return std::norm(sum);
}

std::complex<double> filter_transform(double omega, const PulseSequence& seq) {
  const int n = seq.n_pulses();
  const double tau = seq.tau;
  if (std::abs(omega) * tau < 1e-3) {
    // Small-Ω cancellation: integrate the segments directly.
    std::complex<double> sum{0.0, 0.0};
    double start = 0.0;
    double sign = 1.0;
    for (int m = 1; m <= n + 1; ++m) {
      const double end = m <= n ? (m - 0.5) * tau : n * tau;
      if (omega == 0.0) {
        sum += sign * (end - start);
      } else {
        sum += sign * (std::polar(1.0, omega * end) - std::polar(1.0, omega * start)) /
               std::complex<double>(0.0, omega);
      }
      start = end;
      sign = -sign;
    }
    return sum;
  }
  // Σ_{m=1..N} (−1)^{m−1} e^{iΩ(m−½)τ} = e^{iΩτ/2} Σ_j e^{iθj}, θ = Ωτ + π,
  // with θ reduced to [−π, π]; the reduction leaves the sum unchanged for even N.
  const double theta = std::remainder(omega * tau + std::numbers::pi, kTwoPi);
  double dirichlet;
  if (std::abs(theta) < 1e-7) {
    dirichlet = n * (1.0 - (static_cast<double>(n) * n - 1.0) * theta * theta / 24.0);
  } else {
    dirichlet = std::sin(0.5 * n * theta) / std::sin(0.5 * theta);
  }
  const std::complex<double> pulse_sum =
      std::polar(1.0, 0.5 * omega * tau + 0.5 * (n - 1) * theta) * dirichlet;
  const std::complex<double> edges = std::polar(1.0, omega * n * tau) - 1.0;
  return (edges + 2.0 * pulse_sum) / std::complex<double>(0.0, omega);
}

}  // namespace nvnmr
