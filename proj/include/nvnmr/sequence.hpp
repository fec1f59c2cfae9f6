#pragma once

#include <complex>
#include <vector>

namespace nvnmr {

/// XY8-k timing: 8k instantaneous π pulses separated by tau.
struct PulseSequence {
  int k = 1;
  double tau = 1e-6;  // s

  int n_pulses() const { return 8 * k; }
  double duration() const { return n_pulses() * tau; }
  /// Probe angular frequency π/τ.
  double probe_omega() const;
  void validate() const;
};

/// Pulse m (1-based) sits at (m − ½)τ; the sign function g(t) starts at +1
/// and flips at every pulse.
struct PulseSchedule {
  std::vector<double> pi_pulse_times;
  double duration = 0.0;

  /// g(t) on [0, duration]; 0 outside.
  int sign_at(double t) const;
};

PulseSchedule xy8_schedule(const PulseSequence& seq);

/// Center of the pass band, 1/(2τ) in Hz.
double filter_center_frequency(const PulseSequence& seq);

/// Primary-resonance filter (4/π²)(Nτ)² sinc²((Nτ/2)(Ω − π/τ)), in s².
double filter_function(double omega, const PulseSequence& seq);

/// FWHM of filter_function expressed in ordinary frequency (Hz), from the
/// sinc² half-power point. Close to 0.111/(kτ).
double filter_bandwidth(const PulseSequence& seq);

/// |∫ g(t) e^{−iΩt} dt|² summed segment by segment over the schedule.
double exact_filter_function(double omega, const PulseSchedule& schedule);

/// ∫₀^{Nτ} g(t) e^{+iΩt} dt for an XY8-k schedule, via the geometric pulse
/// sum (O(1) in N). Agrees with the segment sum to rounding.
std::complex<double> filter_transform(double omega, const PulseSequence& seq);

double sinc(double x);

}  // namespace nvnmr
