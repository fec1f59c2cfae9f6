#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "nvnmr/lineshape.hpp"

namespace nvnmr {

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Bounded Levenberg–Marquardt on a generic residual vector

struct LeastSquaresOptions {
  int max_iterations = 200;
  double ftol = 1e-12;       // relative RSS decrease
  double xtol = 1e-10;       // relative step in scaled coordinates
  double gtol = 1e-12;       // projected gradient, scaled
  double diff_step = 1e-6;   // relative central-difference step
  double initial_lambda = 1e-3;
};

struct LeastSquaresProblem {
  std::function<void(const Eigen::VectorXd& params, Eigen::VectorXd& residuals)> residuals;
  std::size_t n_residuals = 0;
  Eigen::VectorXd initial, lower, upper;
  Eigen::VectorXd scale;  // optional; defaults to max(|initial|, span·1e-3)
};

struct LeastSquaresResult {
  Eigen::VectorXd params;
  Eigen::VectorXd residuals;
  Eigen::MatrixXd jacobian;  // at params, physical units
  double rss = 0.0;
  bool converged = false;
  int iterations = 0;
  int evaluations = 0;
  std::vector<double> rss_trace;  // accepted iterations, starts with the initial RSS
  std::vector<bool> at_bound;
  std::string message;
};

LeastSquaresResult least_squares(const LeastSquaresProblem& problem,
                                 const LeastSquaresOptions& options = {});

/// (JᵀJ)⁻¹·RSS/(m − p), pseudo-inverted when singular.
Eigen::MatrixXd scaled_covariance(const Eigen::MatrixXd& jacobian, double rss);

// ---------------------------------------------------------------------------
// Spectrum fits

/// What a free parameter writes into the model. `index` is the spectrum for
/// depth/field and the layer for everything else. A free Larmor frequency is
/// carried as γ/2π (Hz/T) so that ω_L = γB₀ follows each spectrum's field.
enum class FitTarget { depth, field, density, lower_bound, upper_bound, t2_star, gyromagnetic };

struct Binding {
  FitTarget target = FitTarget::depth;
  std::size_t index = 0;
};

struct FitParameter {
  std::string name;
  double initial = kUnset;  // kUnset: seeded from the data
  double lower = kUnset;    // kUnset: target default
  double upper = kUnset;
  std::vector<Binding> bindings;
};

struct FitProblem {
  std::vector<Spectrum> spectra;  // each carries its own sensor and k
  SampleStack stack;              // model template shared by all spectra
  std::vector<FitParameter> parameters;
  LeastSquaresOptions options;
  bool require_convergence = true;  // false: return unconverged results instead of throwing

  void validate() const;
};

struct ParameterEstimate {
  std::string name;
  double value = 0.0;
  double uncertainty = kUnset;  // 1σ, NaN unless converged
  double initial = 0.0;
  double lower = 0.0, upper = 0.0;
  bool at_bound = false;
};

struct FitResult {
  std::vector<ParameterEstimate> estimates;
  double rss = 0.0;
  double reduced_chi2 = 0.0;
  Eigen::MatrixXd covariance;
  bool converged = false;
  int iterations = 0;
  std::size_t n_points = 0;
  std::vector<double> rss_trace;
  std::string message;
  SampleStack stack;                  // template with fitted values applied
  std::vector<SensorConfig> sensors;  // per spectrum, fitted values applied

  const ParameterEstimate& at(const std::string& name) const;
  double value(const std::string& name) const { return at(name).value; }
};

/// Applies parameter values to copies of the template and sensors.
void apply_parameters(const std::vector<FitParameter>& parameters, const std::vector<double>& values,
                      SampleStack& stack, std::vector<SensorConfig>& sensors);

/// Fills unset initial values and bounds (d = 10 nm, ω_L from the deepest
/// minimum of the smoothed spectrum, T₂* from the inverse dip width).
std::vector<FitParameter> seeded_parameters(const FitProblem& problem);

FitResult fit_spectrum(const FitProblem& problem);

nlohmann::json to_json(const FitResult& result);

// ---------------------------------------------------------------------------
// Pre-processing

struct FrequencyWindow {
  double lo_hz = 0.0;
  double hi_hz = 0.0;
  bool contains(double nu) const { return nu >= lo_hz && nu <= hi_hz; }
};

/// Off-window baseline C ≈ a + b·ν, chosen so that contrast/(a + bν) has an
/// exact least-squares line of 1 through the off-window points.
struct BaselineLine {
  double intercept = 1.0;
  double slope = 0.0;  // per Hz
  std::size_t n_used = 0;
  double rms = 0.0;    // off-window RMS of the corrected contrast about 1
  double operator()(double nu) const { return intercept + slope * nu; }
};

BaselineLine fit_baseline(const Spectrum& spectrum, const std::vector<FrequencyWindow>& windows);
Spectrum baseline_correct(const Spectrum& spectrum, const std::vector<FrequencyWindow>& windows);

/// ±half_width_bandwidths filter bandwidths around each species' Larmor
/// frequency at the spectrum's field.
std::vector<FrequencyWindow> resonance_windows(const Spectrum& spectrum,
                                               const std::vector<NuclearSpecies>& species,
                                               double half_width_bandwidths = 3.0);

/// Filter bandwidth (Hz) of the spectrum's sequence at frequency nu.
double bandwidth_at(const Spectrum& spectrum, double nu_hz);

/// Centered moving average over one filter bandwidth (or `width_hz` if set).
Spectrum smooth_spectrum(const Spectrum& spectrum, double width_hz = kUnset);

/// Frequency of the deepest local minimum of the smoothed spectrum.
double deepest_minimum(const Spectrum& spectrum);

/// Full width at half depth (Hz) of the smoothed dip around nu_hz.
double dip_width(const Spectrum& spectrum, double nu_hz);

// ---------------------------------------------------------------------------
// Workflows

struct DepthCalibrationOptions {
  double initial_depth = kUnset;   // kUnset: 10 nm refined by a coarse scan
  double initial_t2_star = kUnset;  // kUnset: inverse dip width
  LeastSquaresOptions options;
};

/// Semi-infinite layer of `species` (ρ as given) with free depth and T₂*.
FitResult calibrate_depth(const Spectrum& spectrum, const NuclearSpecies& species,
                          const DepthCalibrationOptions& options = {});

struct ThicknessOptions {
  double proton_density = 60.0 * units::per_nm3;
  double fluorine_density = 40.0 * units::per_nm3;
  double initial_thickness = 1e-9;
  std::vector<double> initial_depths;  // per spectrum; empty → 10 nm
  std::vector<bool> free_depths;       // per spectrum; empty → all free
  double max_thickness = 50e-9;
  LeastSquaresOptions options;
};

/// ¹H in [0, t] under ¹⁹F in [t, ∞), delta spectral model, t shared and one
/// depth per spectrum ("t", "d0", "d1", ...).
FitResult fit_layer_thickness(const std::vector<Spectrum>& spectra, const ThicknessOptions& options = {});

struct ModelSelectionOptions {
  double rejection_ratio = 4.0;
  ThicknessOptions layered;
  double initial_proton_density = 30.0 * units::per_nm3;
};

struct ModelSelectionReport {
  FitResult layered;
  FitResult isotropic;
  std::vector<double> per_sensor_ratios;  // ρ_H/ρ_F with the ratio free per sensor
  double rss_ratio = 0.0;                 // isotropic / layered
  double ratio_spread = 0.0;              // max/min of per_sensor_ratios
  bool isotropic_rejected = false;
  bool layered_rejected = false;
  std::string preferred;
};

/// Layered (above) versus a semi-infinite isotropic mixture with a shared
/// ¹H:¹⁹F ratio. Requires at least two spectra.
ModelSelectionReport model_selection_layered_vs_isotropic(const std::vector<Spectrum>& spectra,
                                                          const ModelSelectionOptions& options = {});

nlohmann::json to_json(const ModelSelectionReport& report);

struct Resonance {
  double b0 = 0.0;     // T
  double nu0_hz = 0.0;
};

struct GyromagneticFit {
  double gamma_hz_per_t = 0.0;  // γ/2π
  double uncertainty = 0.0;
  double rss = 0.0;
  std::size_t n_points = 0;
  double reference_hz_per_t = kUnset;
  double relative_deviation = kUnset;  // (fit − reference)/reference
};

/// Line through the origin ν₀ = (γ/2π)·B₀.
GyromagneticFit fit_gyromagnetic(const std::vector<Resonance>& resonances,
                                 double reference_hz_per_t = kUnset);

/// Dip centre near nu_guess_hz from a single-layer fit with free Larmor
/// frequency, density and T₂*, over ±half_window_hz (default five filter
/// bandwidths).
double locate_resonance(const Spectrum& spectrum, const NuclearSpecies& species, double nu_guess_hz,
                        double half_window_hz = 0.0);

struct T2StarBoundOptions {
  double window_bandwidths = 5.0;   // fit window around ν_L in filter bandwidths
  double width_tolerance = 0.02;    // linewidth excess treated as unresolved
  double saturation_margin = 0.25;  // width/filter width above this → saturated
  double monotonic_tolerance = 0.05;
};

struct T2StarBound {
  std::string species;
  double bound_s = 0.0;
  bool saturated = false;
  std::vector<int> k;
  std::vector<double> linewidth_hz;  // fitted −ln C FWHM per spectrum
  std::vector<double> filter_width_hz;
};

/// FWHM (Hz) of χ(ν) ∝ closed_form_I for XY8-k around a line at nu_l_hz.
/// `rate` = 1/T₂*; 0 gives the delta-model width.
double chi_linewidth(int k, double nu_l_hz, double rate);

/// Linewidth vs k for each species; the bound is the T₂* whose model width
/// at the largest k exceeds the fitted width by `width_tolerance`.
std::vector<T2StarBound> t2star_lower_bound(const std::vector<Spectrum>& spectra,
                                            const std::vector<NuclearSpecies>& species,
                                            const T2StarBoundOptions& options = {});

}  // namespace nvnmr
