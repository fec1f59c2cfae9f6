#include "nvnmr/fitting.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <boost/math/tools/minima.hpp>
#include <boost/math/tools/roots.hpp>

#include "nvnmr/spectrum_io.hpp"

namespace nvnmr {

namespace {

constexpr double kPi = std::numbers::pi;

bool finite(const Eigen::VectorXd& v) { return v.allFinite(); }

}  // namespace

// ---------------------------------------------------------------------------
// Levenberg–Marquardt

LeastSquaresResult least_squares(const LeastSquaresProblem& problem, const LeastSquaresOptions& opt) {
  const Eigen::Index n = problem.initial.size();
  const auto m = static_cast<Eigen::Index>(problem.n_residuals);
  if (n < 1) throw FitError("least_squares: no free parameters");
  if (m < n) throw FitError("least_squares: fewer residuals than parameters");
  if (problem.lower.size() != n || problem.upper.size() != n) {
    throw FitError("least_squares: bounds do not match the parameter count");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(problem.lower[i] <= problem.upper[i])) throw FitError("least_squares: bounds not ordered");
    if (!(problem.initial[i] >= problem.lower[i] && problem.initial[i] <= problem.upper[i])) {
      throw FitError("least_squares: initial value outside bounds");
    }
  }

  Eigen::VectorXd scale(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = problem.scale.size() == n ? problem.scale[i] : 0.0;
    if (!(s > 0.0)) {
      s = std::abs(problem.initial[i]);
      const double span = problem.upper[i] - problem.lower[i];
      if (std::isfinite(span)) s = std::max(s, 1e-3 * span);
      if (!(s > 0.0)) s = 1.0;
    }
    scale[i] = s;
  }
  const Eigen::VectorXd lo = problem.lower.cwiseQuotient(scale);
  const Eigen::VectorXd hi = problem.upper.cwiseQuotient(scale);

  LeastSquaresResult out;
  auto evaluate = [&](const Eigen::VectorXd& y, Eigen::VectorXd& r) {
    r.resize(m);
    problem.residuals(y.cwiseProduct(scale), r);
    ++out.evaluations;
    return finite(r) ? r.squaredNorm() : std::numeric_limits<double>::infinity();
  };
  auto jacobian = [&](const Eigen::VectorXd& y, const Eigen::VectorXd& r0, Eigen::MatrixXd& J) {
    J.resize(m, n);
    Eigen::VectorXd yp = y, rp(m), rm(m);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double h = opt.diff_step * std::max(std::abs(y[i]), 1.0);
      if (y[i] + h <= hi[i] && y[i] - h >= lo[i]) {
        yp[i] = y[i] + h;
        evaluate(yp, rp);
        yp[i] = y[i] - h;
        evaluate(yp, rm);
        J.col(i) = (rp - rm) / (2.0 * h);
      } else if (y[i] + h <= hi[i]) {
        yp[i] = y[i] + h;
        evaluate(yp, rp);
        J.col(i) = (rp - r0) / h;
      } else {
        yp[i] = y[i] - h;
        evaluate(yp, rm);
        J.col(i) = (r0 - rm) / h;
      }
      yp[i] = y[i];
    }
  };

  Eigen::VectorXd y = problem.initial.cwiseQuotient(scale);
  Eigen::VectorXd r;
  double rss = evaluate(y, r);
  if (!std::isfinite(rss)) throw FitError("least_squares: model not finite at the initial point");
  out.rss_trace.push_back(rss);

  double lambda = opt.initial_lambda;
  Eigen::MatrixXd J;
  Eigen::VectorXd r_new;
  bool done = false;
  const double rss_floor = 1e-28 * static_cast<double>(m);

  for (out.iterations = 0; out.iterations < opt.max_iterations && !done; ++out.iterations) {
    if (rss <= rss_floor) {
      out.converged = true;
      out.message = "residual at rounding level";
      break;
    }
    jacobian(y, r, J);
    const Eigen::VectorXd g = J.transpose() * r;
    const Eigen::MatrixXd A = J.transpose() * J;

    std::vector<Eigen::Index> free_idx;
    double cosine = 0.0;
    const double rnorm = std::sqrt(rss);
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool pinned = (y[i] <= lo[i] && g[i] > 0.0) || (y[i] >= hi[i] && g[i] < 0.0);
      if (pinned) continue;
      free_idx.push_back(i);
      const double cn = J.col(i).norm();
      if (cn > 0.0) cosine = std::max(cosine, std::abs(g[i]) / (cn * rnorm));
    }
    if (free_idx.empty() || cosine <= opt.gtol) {
      out.converged = true;
      out.message = "gradient vanishes";
      break;
    }
    const auto nf = static_cast<Eigen::Index>(free_idx.size());
    Eigen::MatrixXd Af(nf, nf);
    Eigen::VectorXd gf(nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
      gf[a] = g[free_idx[a]];
      for (Eigen::Index b = 0; b < nf; ++b) Af(a, b) = A(free_idx[a], free_idx[b]);
    }
    const double max_diag = Af.diagonal().maxCoeff();

    for (;;) {
      Eigen::MatrixXd M = Af;
      for (Eigen::Index a = 0; a < nf; ++a) {
        M(a, a) += lambda * std::max(Af(a, a), 1e-12 * max_diag);
      }
      const Eigen::VectorXd step = M.ldlt().solve(-gf);
      Eigen::VectorXd y_new = y;
      for (Eigen::Index a = 0; a < nf; ++a) {
        const Eigen::Index i = free_idx[a];
        y_new[i] = std::clamp(y[i] + step[a], lo[i], hi[i]);
      }
      const Eigen::VectorXd dy = y_new - y;
      const double rss_new = evaluate(y_new, r_new);
      if (rss_new < rss) {
        const Eigen::VectorXd Jdy = J * dy;
        const double predicted = -(2.0 * g.dot(dy) + Jdy.squaredNorm());
        const double actual = rss - rss_new;
        const bool small_step = dy.norm() <= opt.xtol * (y.norm() + opt.xtol);
        y = y_new;
        r = r_new;
        rss = rss_new;
        out.rss_trace.push_back(rss);
        lambda = std::max(lambda / 3.0, 1e-15);
        if ((actual <= opt.ftol * (rss + actual) && predicted <= opt.ftol * (rss + actual)) || small_step) {
          out.converged = true;
          out.message = small_step ? "step below xtol" : "relative reduction below ftol";
          done = true;
        }
        break;
      }
      lambda *= 4.0;
      if (lambda > 1e20) {
        // No descent left along any damped step: either at the numerical
        // minimum or stuck on a degenerate model.
        Eigen::VectorXd gn = Af.completeOrthogonalDecomposition().solve(-gf);
        Eigen::VectorXd full = Eigen::VectorXd::Zero(n);
        for (Eigen::Index a = 0; a < nf; ++a) full[free_idx[a]] = gn[a];
        const double predicted = -(2.0 * g.dot(full) + (J * full).squaredNorm());
        out.converged = predicted <= 1e-8 * rss;
        out.message = out.converged ? "no further reduction at rounding level"
                                    : "damping exhausted without convergence";
        done = true;
        break;
      }
    }
  }
  if (!out.converged && out.message.empty()) out.message = "maximum iterations reached";

  out.params = y.cwiseProduct(scale);
  out.residuals = r;
  out.rss = rss;
  jacobian(y, r, J);
  out.jacobian = J;
  for (Eigen::Index i = 0; i < n; ++i) out.jacobian.col(i) /= scale[i];
  out.at_bound.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double tol = 1e-9 * std::max(1.0, std::abs(y[i]));
    out.at_bound[i] = (y[i] - lo[i] <= tol) || (hi[i] - y[i] <= tol);
  }
  return out;
}

Eigen::MatrixXd scaled_covariance(const Eigen::MatrixXd& jacobian, double rss) {
  const auto m = jacobian.rows();
  const auto p = jacobian.cols();
  if (m <= p) {
    return Eigen::MatrixXd::Constant(p, p, std::numeric_limits<double>::quiet_NaN());
  }
  // Column scaling keeps the normal matrix well conditioned.
  Eigen::VectorXd s = jacobian.colwise().norm().transpose();
  for (Eigen::Index i = 0; i < p; ++i) {
    if (!(s[i] > 0.0)) s[i] = 1.0;
  }
  const Eigen::MatrixXd Js = jacobian * s.cwiseInverse().asDiagonal();
  const Eigen::MatrixXd inv =
      (Js.transpose() * Js).completeOrthogonalDecomposition().pseudoInverse();
  const Eigen::MatrixXd cov = s.cwiseInverse().asDiagonal() * inv * s.cwiseInverse().asDiagonal();
  return cov * (rss / static_cast<double>(m - p));
}

// ---------------------------------------------------------------------------
// Spectrum fits

namespace {

const char* target_name(FitTarget t) {
  switch (t) {
    case FitTarget::depth: return "depth";
    case FitTarget::field: return "field";
    case FitTarget::density: return "density";
    case FitTarget::lower_bound: return "lower_bound";
    case FitTarget::upper_bound: return "upper_bound";
    case FitTarget::t2_star: return "t2_star";
    case FitTarget::gyromagnetic: return "gyromagnetic";
  }
  return "?";
}

std::pair<double, double> default_bounds(FitTarget t, double initial) {
  switch (t) {
    case FitTarget::depth: return {0.2e-9, 1e-6};
    case FitTarget::field: return {1e-6, 20.0};
    case FitTarget::density: return {0.0, 1000.0 * units::per_nm3};
    case FitTarget::lower_bound:
    case FitTarget::upper_bound: return {0.0, 10e-6};
    case FitTarget::t2_star: return {10e-9, 1.0};
    case FitTarget::gyromagnetic: {
      const double a = std::abs(initial);
      return {0.5 * a, 1.5 * a};
    }
  }
  return {-kInfinity, kInfinity};
}

std::vector<SensorConfig> sensors_of(const std::vector<Spectrum>& spectra) {
  std::vector<SensorConfig> out;
  out.reserve(spectra.size());
  for (const auto& s : spectra) out.push_back(s.sensor);
  return out;
}

double larmor_hz(const NuclearSpecies& species, double b0) {
  return larmor_frequency(species, b0) / kTwoPi;
}

Spectrum window_of(const Spectrum& spectrum, double lo, double hi) {
  Spectrum out = spectrum;
  out.nu_hz.clear();
  out.contrast.clear();
  for (std::size_t i = 0; i < spectrum.size(); ++i) {
    if (spectrum.nu_hz[i] >= lo && spectrum.nu_hz[i] <= hi) {
      out.nu_hz.push_back(spectrum.nu_hz[i]);
      out.contrast.push_back(spectrum.contrast[i]);
    }
  }
  return out;
}

}  // namespace

void FitProblem::validate() const {
  if (spectra.empty()) throw FitError("fit: no spectra");
  if (parameters.empty()) throw FitError("fit: at least one free parameter is required");
  std::size_t points = 0;
  for (const auto& s : spectra) {
    s.validate();
    points += s.size();
  }
  stack.validate();
  if (points <= parameters.size()) {
    throw FitError("fit: " + std::to_string(points) + " data points for " +
                   std::to_string(parameters.size()) + " free parameters");
  }
  for (const auto& p : parameters) {
    if (p.bindings.empty()) throw FitError("fit: parameter '" + p.name + "' is not bound to the model");
    for (const auto& b : p.bindings) {
      const bool per_spectrum = b.target == FitTarget::depth || b.target == FitTarget::field;
      const std::size_t limit = per_spectrum ? spectra.size() : stack.layers.size();
      if (b.index >= limit) {
        throw FitError("fit: parameter '" + p.name + "' binds " + target_name(b.target) +
                       " of index " + std::to_string(b.index) + " which does not exist");
      }
    }
    if (!std::isnan(p.lower) && !std::isnan(p.upper) &&
        !(std::isfinite(p.lower) && std::isfinite(p.upper) && p.lower < p.upper)) {
      throw FitError("fit: bounds of '" + p.name + "' must be finite and ordered");
    }
  }
}

const ParameterEstimate& FitResult::at(const std::string& name) const {
  for (const auto& e : estimates) {
    if (e.name == name) return e;
  }
  throw FitError("fit result has no parameter '" + name + "'");
}

void apply_parameters(const std::vector<FitParameter>& parameters, const std::vector<double>& values,
                      SampleStack& stack, std::vector<SensorConfig>& sensors) {
  for (std::size_t i = 0; i < parameters.size(); ++i) {
    const double v = values[i];
    for (const auto& b : parameters[i].bindings) {
      switch (b.target) {
        case FitTarget::depth: sensors.at(b.index).d_nv = v; break;
        case FitTarget::field: sensors.at(b.index).b0 = v; break;
        case FitTarget::density: stack.layers.at(b.index).species.rho = v; break;
        case FitTarget::lower_bound: stack.layers.at(b.index).z1 = v; break;
        case FitTarget::upper_bound: stack.layers.at(b.index).z2 = v; break;
        case FitTarget::t2_star: stack.layers.at(b.index).species.t2_star = v; break;
        case FitTarget::gyromagnetic: {
          auto& g = stack.layers.at(b.index).species.gamma_n;
          g = std::copysign(kTwoPi * v, g);
          break;
        }
      }
    }
  }
}

std::vector<FitParameter> seeded_parameters(const FitProblem& problem) {
  std::vector<FitParameter> params = problem.parameters;
  const Spectrum& first = problem.spectra.front();
  for (auto& p : params) {
    const Binding& b = p.bindings.front();
    const bool seeded = std::isnan(p.initial);
    if (seeded) {
      switch (b.target) {
        case FitTarget::depth: p.initial = 10e-9; break;
        case FitTarget::gyromagnetic: {
          if (!(first.sensor.b0 > 0.0)) throw FitError("fit: cannot seed '" + p.name + "' without B0");
          p.initial = deepest_minimum(first) / first.sensor.b0;
          break;
        }
        case FitTarget::t2_star: {
          const auto& species = problem.stack.layers.at(b.index).species;
          double nu = larmor_hz(species, first.sensor.b0);
          if (!(nu > first.nu_hz.front() && nu < first.nu_hz.back())) nu = deepest_minimum(first);
          p.initial = 1.0 / (kPi * dip_width(first, nu));
          break;
        }
        default:
          throw FitError("fit: parameter '" + p.name + "' (" + target_name(b.target) +
                         ") needs an initial value");
      }
    }
    const auto [dlo, dhi] = default_bounds(b.target, p.initial);
    if (std::isnan(p.lower)) p.lower = dlo;
    if (std::isnan(p.upper)) p.upper = dhi;
    if (!(std::isfinite(p.lower) && std::isfinite(p.upper) && p.lower < p.upper)) {
      throw FitError("fit: bounds of '" + p.name + "' must be finite and ordered");
    }
    if (seeded) {
      p.initial = std::clamp(p.initial, p.lower, p.upper);
    } else if (!(p.initial >= p.lower && p.initial <= p.upper)) {
      throw FitError("fit: initial value of '" + p.name + "' lies outside its bounds");
    }
  }
  return params;
}

FitResult fit_spectrum(const FitProblem& problem) {
  problem.validate();
  const std::vector<FitParameter> params = seeded_parameters(problem);
  const std::size_t np = params.size();

  std::size_t m = 0;
  for (const auto& s : problem.spectra) m += s.size();

  LeastSquaresProblem lsq;
  lsq.n_residuals = m;
  lsq.initial.resize(static_cast<Eigen::Index>(np));
  lsq.lower.resizeLike(lsq.initial);
  lsq.upper.resizeLike(lsq.initial);
  for (std::size_t i = 0; i < np; ++i) {
    lsq.initial[static_cast<Eigen::Index>(i)] = params[i].initial;
    lsq.lower[static_cast<Eigen::Index>(i)] = params[i].lower;
    lsq.upper[static_cast<Eigen::Index>(i)] = params[i].upper;
  }
  const std::vector<SensorConfig> base_sensors = sensors_of(problem.spectra);
  lsq.residuals = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r) {
    SampleStack stack = problem.stack;
    std::vector<SensorConfig> sensors = base_sensors;
    apply_parameters(params, std::vector<double>(x.data(), x.data() + x.size()), stack, sensors);
    std::size_t offset = 0;
    try {
      for (std::size_t s = 0; s < problem.spectra.size(); ++s) {
        const auto& spec = problem.spectra[s];
        const auto model = model_contrast(stack, sensors[s], spec.k, spec.nu_hz);
        for (std::size_t i = 0; i < spec.size(); ++i) {
          r[static_cast<Eigen::Index>(offset + i)] = model[i] - spec.contrast[i];
        }
        offset += spec.size();
      }
    } catch (const ModelError&) {
      r.setConstant(std::numeric_limits<double>::quiet_NaN());
    }
  };

  // A seeded depth starts at 10 nm; a coarse log scan first keeps LM from
  // stepping into the saturated region where the dip bottoms out at zero.
  for (std::size_t i = 0; i < np; ++i) {
    if (!std::isnan(problem.parameters[i].initial) || params[i].bindings.front().target != FitTarget::depth) {
      continue;
    }
    const auto ii = static_cast<Eigen::Index>(i);
    Eigen::VectorXd x = lsq.initial, r(static_cast<Eigen::Index>(m));
    double best = kInfinity;
    for (int j = 0; j <= 32; ++j) {
      const double d = 0.5e-9 * std::pow(200.0, j / 32.0);
      if (d < lsq.lower[ii] || d > lsq.upper[ii]) continue;
      x[ii] = d;
      lsq.residuals(x, r);
      const double rss = r.allFinite() ? r.squaredNorm() : kInfinity;
      if (rss < best) {
        best = rss;
        lsq.initial[ii] = d;
      }
    }
  }

  const LeastSquaresResult ls = least_squares(lsq, problem.options);

  FitResult result;
  result.rss = ls.rss;
  result.n_points = m;
  result.converged = ls.converged;
  result.iterations = ls.iterations;
  result.rss_trace = ls.rss_trace;
  result.message = ls.message;
  result.reduced_chi2 = ls.rss / static_cast<double>(m - np);
  result.covariance = scaled_covariance(ls.jacobian, ls.rss);
  result.stack = problem.stack;
  result.sensors = base_sensors;
  std::vector<double> values(ls.params.data(), ls.params.data() + ls.params.size());
  apply_parameters(params, values, result.stack, result.sensors);
  for (std::size_t i = 0; i < np; ++i) {
    ParameterEstimate e;
    e.name = params[i].name;
    e.value = values[i];
    e.initial = params[i].initial;
    e.lower = params[i].lower;
    e.upper = params[i].upper;
    e.at_bound = ls.at_bound[i];
    const auto ii = static_cast<Eigen::Index>(i);
    if (ls.converged) e.uncertainty = std::sqrt(std::max(0.0, result.covariance(ii, ii)));
    result.estimates.push_back(e);
  }
  if (!ls.converged) {
    result.covariance.setConstant(std::numeric_limits<double>::quiet_NaN());
    if (problem.require_convergence) {
      std::ostringstream msg;
      msg << "fit did not converge after " << ls.iterations << " iterations (" << ls.message
          << "); rss = " << ls.rss << "; parameters:";
      for (const auto& e : result.estimates) msg << ' ' << e.name << '=' << e.value;
      throw FitError(msg.str());
    }
  }
  return result;
}

nlohmann::json to_json(const FitResult& result) {
  using nlohmann::json;
  json params = json::array();
  for (const auto& e : result.estimates) {
    params.push_back({{"name", e.name},
                      {"value", e.value},
                      {"uncertainty", std::isfinite(e.uncertainty) ? json(e.uncertainty) : json(nullptr)},
                      {"initial", e.initial},
                      {"lower", e.lower},
                      {"upper", e.upper},
                      {"at_bound", e.at_bound}});
  }
  json cov = json::array();
  for (Eigen::Index i = 0; i < result.covariance.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < result.covariance.cols(); ++j) {
      const double v = result.covariance(i, j);
      row.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    }
    cov.push_back(row);
  }
  json sensors = json::array();
  for (const auto& s : result.sensors) sensors.push_back(to_json(s));
  return {{"parameters", params},
          {"rss", result.rss},
          {"reduced_chi2", result.reduced_chi2},
          {"covariance", cov},
          {"converged", result.converged},
          {"iterations", result.iterations},
          {"n_points", result.n_points},
          {"rss_trace", result.rss_trace},
          {"message", result.message},
          {"uncertainty_convention", "1 sigma from (J^T J)^-1 scaled by RSS/(m - p)"},
          {"model", {{"stack", to_json(result.stack)}, {"sensors", sensors}}}};
}

// ---------------------------------------------------------------------------
// Pre-processing

BaselineLine fit_baseline(const Spectrum& spectrum, const std::vector<FrequencyWindow>& windows) {
  std::vector<double> nu, c;
  for (std::size_t i = 0; i < spectrum.size(); ++i) {
    const double v = spectrum.nu_hz[i];
    if (std::none_of(windows.begin(), windows.end(), [&](const auto& w) { return w.contains(v); })) {
      nu.push_back(v);
      c.push_back(spectrum.contrast[i]);
    }
  }
  if (nu.size() < 4) {
    throw FitError("baseline_correct: " + std::to_string(nu.size()) +
                   " points outside the resonance windows, need at least 4");
  }
  const auto n = nu.size();
  const double lo = *std::min_element(nu.begin(), nu.end());
  const double hi = *std::max_element(nu.begin(), nu.end());
  const double center = 0.5 * (lo + hi);
  const double span = hi > lo ? 0.5 * (hi - lo) : 1.0;
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) u[i] = (nu[i] - center) / span;

  // Ordinary least squares to start.
  Eigen::Matrix2d A = Eigen::Matrix2d::Zero();
  Eigen::Vector2d rhs = Eigen::Vector2d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    A(0, 0) += 1.0;
    A(0, 1) += u[i];
    A(1, 1) += u[i] * u[i];
    rhs[0] += c[i];
    rhs[1] += c[i] * u[i];
  }
  A(1, 0) = A(0, 1);
  Eigen::Vector2d ab = A.completeOrthogonalDecomposition().solve(rhs);

  // Newton on Σ(c/L − 1)·[1, u] = 0.
  for (int iter = 0; iter < 100; ++iter) {
    Eigen::Vector2d F = Eigen::Vector2d::Zero();
    Eigen::Matrix2d J = Eigen::Matrix2d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const double L = ab[0] + ab[1] * u[i];
      if (!(L > 0.0)) throw FitError("baseline_correct: fitted baseline is not positive");
      const double q = c[i] / L;
      F[0] += q - 1.0;
      F[1] += (q - 1.0) * u[i];
      const double d = q / L;
      J(0, 0) -= d;
      J(0, 1) -= d * u[i];
      J(1, 1) -= d * u[i] * u[i];
    }
    J(1, 0) = J(0, 1);
    const Eigen::Vector2d step = J.completeOrthogonalDecomposition().solve(-F);
    ab += step;
    if (step.cwiseAbs().maxCoeff() <= 1e-16 * (std::abs(ab[0]) + std::abs(ab[1]))) break;
  }

  BaselineLine line;
  line.slope = ab[1] / span;
  line.intercept = ab[0] - ab[1] * center / span;
  line.n_used = n;
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = c[i] / line(nu[i]) - 1.0;
    ss += q * q;
  }
  line.rms = std::sqrt(ss / static_cast<double>(n));
  return line;
}

Spectrum baseline_correct(const Spectrum& spectrum, const std::vector<FrequencyWindow>& windows) {
  const BaselineLine line = fit_baseline(spectrum, windows);
  Spectrum out = spectrum;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double L = line(out.nu_hz[i]);
    if (!(L > 0.0)) throw FitError("baseline_correct: fitted baseline is not positive");
    out.contrast[i] /= L;
  }
  return out;
}

double bandwidth_at(const Spectrum& spectrum, double nu_hz) {
  return filter_bandwidth(PulseSequence{spectrum.k, 0.5 / nu_hz});
}

std::vector<FrequencyWindow> resonance_windows(const Spectrum& spectrum,
                                               const std::vector<NuclearSpecies>& species,
                                               double half_width_bandwidths) {
  std::vector<FrequencyWindow> out;
  for (const auto& s : species) {
    const double nu = larmor_hz(s, spectrum.sensor.b0);
    if (!(nu > 0.0)) continue;
    const double w = half_width_bandwidths * bandwidth_at(spectrum, nu);
    out.push_back({nu - w, nu + w});
  }
  return out;
}

Spectrum smooth_spectrum(const Spectrum& spectrum, double width_hz) {
  Spectrum out = spectrum;
  const std::size_t n = spectrum.size();
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + spectrum.contrast[i];
  const auto& nu = spectrum.nu_hz;
  for (std::size_t i = 0; i < n; ++i) {
    const double half = 0.5 * (std::isnan(width_hz) ? bandwidth_at(spectrum, nu[i]) : width_hz);
    const auto lo = static_cast<std::size_t>(std::lower_bound(nu.begin(), nu.end(), nu[i] - half) - nu.begin());
    const auto hi = static_cast<std::size_t>(std::upper_bound(nu.begin(), nu.end(), nu[i] + half) - nu.begin());
    out.contrast[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
  }
  return out;
}

double deepest_minimum(const Spectrum& spectrum) {
  if (spectrum.size() == 0) throw FitError("deepest_minimum: empty spectrum");
  const Spectrum s = smooth_spectrum(spectrum);
  const auto it = std::min_element(s.contrast.begin(), s.contrast.end());
  return s.nu_hz[static_cast<std::size_t>(it - s.contrast.begin())];
}

double dip_width(const Spectrum& spectrum, double nu_hz) {
  const Spectrum s = smooth_spectrum(spectrum);
  const std::size_t n = s.size();
  if (n < 3) throw FitError("dip_width: too few points");
  // Locate the bottom of the dip nearest nu_hz by walking downhill.
  std::size_t i = static_cast<std::size_t>(
      std::lower_bound(s.nu_hz.begin(), s.nu_hz.end(), nu_hz) - s.nu_hz.begin());
  i = std::min(i, n - 1);
  while (i > 0 && s.contrast[i - 1] < s.contrast[i]) --i;
  while (i + 1 < n && s.contrast[i + 1] < s.contrast[i]) ++i;
  const double bottom = s.contrast[i];
  const double half = 0.5 * (1.0 + bottom);
  auto crossing = [&](int dir) -> double {
    std::size_t j = i;
    while (true) {
      const std::size_t next = dir < 0 ? j - 1 : j + 1;
      if ((dir < 0 && j == 0) || (dir > 0 && j + 1 == n)) return kUnset;
      if (s.contrast[next] >= half) {
        const double t = (half - s.contrast[j]) / (s.contrast[next] - s.contrast[j]);
        return s.nu_hz[j] + t * (s.nu_hz[next] - s.nu_hz[j]);
      }
      j = next;
    }
  };
  const double left = crossing(-1);
  const double right = crossing(+1);
  const double center = s.nu_hz[i];
  if (std::isnan(left) && std::isnan(right)) return s.nu_hz.back() - s.nu_hz.front();
  if (std::isnan(left)) return 2.0 * (right - center);
  if (std::isnan(right)) return 2.0 * (center - left);
  return right - left;
}

// ---------------------------------------------------------------------------
// Workflows

FitResult calibrate_depth(const Spectrum& spectrum, const NuclearSpecies& species,
                          const DepthCalibrationOptions& options) {
  FitProblem problem;
  problem.spectra = {spectrum};
  NuclearSpecies s = species;
  if (!std::isfinite(s.t2_star)) s.t2_star = 1e-3;  // placeholder, overwritten by the fit
  problem.stack.layers = {SampleLayer{s, 0.0, kInfinity}};
  problem.parameters = {
      {"d", options.initial_depth, kUnset, kUnset, {{FitTarget::depth, 0}}},
      {"t2_star", options.initial_t2_star, kUnset, kUnset, {{FitTarget::t2_star, 0}}},
  };
  problem.options = options.options;
  return fit_spectrum(problem);
}

namespace {

FitProblem thickness_problem(const std::vector<Spectrum>& spectra, const ThicknessOptions& options) {
  if (spectra.empty()) throw FitError("fit_layer_thickness: no spectra");
  FitProblem problem;
  problem.spectra = spectra;
  const double t0 = options.initial_thickness;
  problem.stack.layers = {SampleLayer{species::proton(options.proton_density), 0.0, t0},
                          SampleLayer{species::fluorine(options.fluorine_density), t0, kInfinity}};
  problem.parameters.push_back({"t", t0, 0.0, options.max_thickness,
                                {{FitTarget::upper_bound, 0}, {FitTarget::lower_bound, 1}}});
  for (std::size_t i = 0; i < spectra.size(); ++i) {
    const bool free = options.free_depths.empty() || options.free_depths.at(i);
    const double d0 = options.initial_depths.empty() ? (free ? 10e-9 : spectra[i].sensor.d_nv)
                                                     : options.initial_depths.at(i);
    if (free) {
      problem.parameters.push_back({"d" + std::to_string(i), d0, kUnset, kUnset, {{FitTarget::depth, i}}});
    } else {
      problem.spectra[i].sensor.d_nv = d0;
    }
  }
  problem.options = options.options;
  return problem;
}

}  // namespace

FitResult fit_layer_thickness(const std::vector<Spectrum>& spectra, const ThicknessOptions& options) {
  return fit_spectrum(thickness_problem(spectra, options));
}

ModelSelectionReport model_selection_layered_vs_isotropic(const std::vector<Spectrum>& spectra,
                                                          const ModelSelectionOptions& options) {
  if (spectra.size() < 2) throw FitError("model selection needs at least two sensors");
  ModelSelectionReport report;

  FitProblem layered = thickness_problem(spectra, options.layered);
  layered.require_convergence = false;
  report.layered = fit_spectrum(layered);

  auto isotropic_problem = [&](const std::vector<Spectrum>& subset, std::size_t first_index) {
    FitProblem p;
    p.spectra = subset;
    p.stack.layers = {
        SampleLayer{species::proton(options.initial_proton_density), 0.0, kInfinity},
        SampleLayer{species::fluorine(options.layered.fluorine_density), 0.0, kInfinity}};
    p.parameters.push_back({"rho_h", options.initial_proton_density, kUnset, kUnset,
                            {{FitTarget::density, 0}}});
    for (std::size_t i = 0; i < subset.size(); ++i) {
      const std::size_t global = first_index + i;
      const double d0 = options.layered.initial_depths.empty() ? 10e-9
                                                              : options.layered.initial_depths.at(global);
      p.parameters.push_back({"d" + std::to_string(global), d0, kUnset, kUnset, {{FitTarget::depth, i}}});
    }
    p.options = options.layered.options;
    p.require_convergence = false;
    return p;
  };
  report.isotropic = fit_spectrum(isotropic_problem(spectra, 0));
  for (std::size_t i = 0; i < spectra.size(); ++i) {
    const FitResult single = fit_spectrum(isotropic_problem({spectra[i]}, i));
    report.per_sensor_ratios.push_back(single.value("rho_h") / options.layered.fluorine_density);
  }
  const auto [mn, mx] = std::minmax_element(report.per_sensor_ratios.begin(), report.per_sensor_ratios.end());
  report.ratio_spread = *mn > 0.0 ? *mx / *mn : kInfinity;

  const double lr = report.layered.rss;
  const double ir = report.isotropic.rss;
  report.rss_ratio = lr > 0.0 ? ir / lr : kInfinity;
  report.isotropic_rejected = ir >= options.rejection_ratio * lr;
  report.layered_rejected = lr >= options.rejection_ratio * ir;
  report.preferred = lr <= ir ? "layered" : "isotropic";
  return report;
}

nlohmann::json to_json(const ModelSelectionReport& report) {
  return {{"layered", to_json(report.layered)},
          {"isotropic", to_json(report.isotropic)},
          {"per_sensor_ratio_h_to_f", report.per_sensor_ratios},
          {"ratio_spread", report.ratio_spread},
          {"rss_ratio_isotropic_to_layered", report.rss_ratio},
          {"isotropic_rejected", report.isotropic_rejected},
          {"layered_rejected", report.layered_rejected},
          {"preferred", report.preferred}};
}

GyromagneticFit fit_gyromagnetic(const std::vector<Resonance>& resonances, double reference) {
  if (resonances.size() < 2) throw FitError("fit_gyromagnetic: need at least two field points");
  double sbb = 0.0, sbn = 0.0;
  for (const auto& r : resonances) {
    if (!std::isfinite(r.b0) || !std::isfinite(r.nu0_hz)) throw FitError("fit_gyromagnetic: non-finite point");
    sbb += r.b0 * r.b0;
    sbn += r.b0 * r.nu0_hz;
  }
  const bool distinct = std::any_of(resonances.begin(), resonances.end(),
                                    [&](const Resonance& r) { return r.b0 != resonances.front().b0; });
  if (!distinct || !(sbb > 0.0)) {
    throw FitError("fit_gyromagnetic: degenerate design, all field values are equal");
  }
  GyromagneticFit fit;
  fit.n_points = resonances.size();
  fit.gamma_hz_per_t = sbn / sbb;
  for (const auto& r : resonances) {
    const double e = r.nu0_hz - fit.gamma_hz_per_t * r.b0;
    fit.rss += e * e;
  }
  fit.uncertainty = std::sqrt(fit.rss / static_cast<double>(fit.n_points - 1) / sbb);
  fit.reference_hz_per_t = reference;
  if (!std::isnan(reference)) fit.relative_deviation = (fit.gamma_hz_per_t - reference) / reference;
  return fit;
}

double locate_resonance(const Spectrum& spectrum, const NuclearSpecies& species, double nu_guess_hz,
                        double half_window_hz) {
  if (!(spectrum.sensor.b0 > 0.0)) throw FitError("locate_resonance: spectrum has no B0");
  const double bw = bandwidth_at(spectrum, nu_guess_hz);
  const double half = half_window_hz > 0.0 ? half_window_hz : 5.0 * bw;
  FitProblem problem;
  problem.spectra = {window_of(spectrum, nu_guess_hz - half, nu_guess_hz + half)};
  NuclearSpecies s = species;
  if (!(s.rho > 0.0)) s.rho = 50.0 * units::per_nm3;
  const double t2_seed = std::isfinite(s.t2_star) ? s.t2_star : kUnset;
  if (!std::isfinite(s.t2_star)) s.t2_star = 1e-4;
  problem.stack.layers = {SampleLayer{s, 0.0, kInfinity}};
  const double b0 = spectrum.sensor.b0;
  problem.parameters.push_back({"gamma", nu_guess_hz / b0, (nu_guess_hz - 2.0 * bw) / b0,
                                (nu_guess_hz + 2.0 * bw) / b0, {{FitTarget::gyromagnetic, 0}}});
  problem.parameters.push_back({"rho", s.rho, 0.0, 1000.0 * units::per_nm3, {{FitTarget::density, 0}}});
  problem.parameters.push_back({"t2_star", t2_seed, kUnset, kUnset, {{FitTarget::t2_star, 0}}});
  const FitResult r = fit_spectrum(problem);
  return r.value("gamma") * b0;
}

namespace {

double chi_shape(int k, double nu, double nu_l, double rate) {
  const int n = 8 * k;
  const double omega = kTwoPi * nu;
  const double omega_l = kTwoPi * nu_l;
  return rate > 0.0 ? closed_form_I(omega, omega_l, 1.0 / rate, n) : delta_I(omega, omega_l, n);
}

}  // namespace

double chi_linewidth(int k, double nu_l_hz, double rate) {
  const double bw = filter_bandwidth(PulseSequence{k, 0.5 / nu_l_hz});
  const double reach = bw + rate / kPi;
  auto neg = [&](double nu) { return -chi_shape(k, nu, nu_l_hz, rate); };
  const auto peak = boost::math::tools::brent_find_minima(neg, nu_l_hz - 0.5 * reach, nu_l_hz + 0.5 * reach, 52);
  const double nu_peak = peak.first;
  const double half = -0.5 * peak.second;
  auto excess = [&](double nu) { return chi_shape(k, nu, nu_l_hz, rate) - half; };
  auto side = [&](double dir) {
    double step = 0.25 * reach;
    double inner = nu_peak;
    double outer = nu_peak + dir * step;
    while (excess(outer) > 0.0) {
      inner = outer;
      step *= 2.0;
      outer = nu_peak + dir * step;
      if (outer <= 0.0) throw FitError("chi_linewidth: line too broad for its centre frequency");
    }
    std::uintmax_t iters = 200;
    const auto [a, b] = boost::math::tools::toms748_solve(
        excess, std::min(inner, outer), std::max(inner, outer),
        boost::math::tools::eps_tolerance<double>(50), iters);
    return 0.5 * (a + b);
  };
  return side(+1.0) - side(-1.0);
}

std::vector<T2StarBound> t2star_lower_bound(const std::vector<Spectrum>& spectra,
                                            const std::vector<NuclearSpecies>& species,
                                            const T2StarBoundOptions& options) {
  if (spectra.size() < 2) throw FitError("t2star_lower_bound: need spectra at two or more k");
  {
    std::vector<int> ks;
    for (const auto& s : spectra) ks.push_back(s.k);
    std::sort(ks.begin(), ks.end());
    if (ks.front() == ks.back()) throw FitError("t2star_lower_bound: all spectra share one k");
  }
  std::vector<std::size_t> order(spectra.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return spectra[a].k < spectra[b].k; });

  std::vector<T2StarBound> out;
  for (const auto& sp : species) {
    T2StarBound bound;
    bound.species = sp.name;
    double nu_fit_kmax = 0.0;
    for (const std::size_t idx : order) {
      const Spectrum& spec = spectra[idx];
      const double nu_l = larmor_hz(sp, spec.sensor.b0);
      const double bw = bandwidth_at(spec, nu_l);
      double lo = nu_l - options.window_bandwidths * bw;
      double hi = nu_l + options.window_bandwidths * bw;
      for (const auto& other : species) {
        const double nu_o = larmor_hz(other, spec.sensor.b0);
        if (nu_o == nu_l) continue;
        if (nu_o < nu_l) lo = std::max(lo, 0.5 * (nu_o + nu_l));
        else hi = std::min(hi, 0.5 * (nu_o + nu_l));
      }
      const Spectrum win = window_of(spec, lo, hi);
      std::vector<double> nu, y;
      for (std::size_t i = 0; i < win.size(); ++i) {
        if (win.contrast[i] > 0.0) {
          nu.push_back(win.nu_hz[i]);
          y.push_back(-std::log(win.contrast[i]));
        }
      }
      if (nu.size() < 5) throw FitError("t2star_lower_bound: too few points around " + sp.name);

      const double peak = *std::max_element(y.begin(), y.end());
      const double excess_width = std::max(dip_width(win, nu_l) - bw, 0.2 * bw);
      const double norm = delta_I(kTwoPi * nu_l, kTwoPi * nu_l, 8 * spec.k);
      LeastSquaresProblem lsq;
      lsq.n_residuals = nu.size();
      lsq.initial = Eigen::Vector3d(std::max(peak, 1e-12), nu_l, kPi * excess_width);
      lsq.lower = Eigen::Vector3d(0.0, nu_l - bw, 0.0);
      lsq.upper = Eigen::Vector3d(std::max(10.0 * peak, 1.0), nu_l + bw, 1e3 * kPi * bw);
      lsq.scale = Eigen::Vector3d(std::max(peak, 1e-12), bw, kPi * bw);
      lsq.residuals = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
        for (std::size_t i = 0; i < nu.size(); ++i) {
          r[static_cast<Eigen::Index>(i)] = p[0] * chi_shape(spec.k, nu[i], p[1], p[2]) / norm - y[i];
        }
      };
      const LeastSquaresResult fit = least_squares(lsq);
      if (!fit.converged) {
        throw FitError("t2star_lower_bound: linewidth fit for " + sp.name + " at k = " +
                       std::to_string(spec.k) + " did not converge (" + fit.message + ")");
      }
      bound.k.push_back(spec.k);
      bound.linewidth_hz.push_back(chi_linewidth(spec.k, fit.params[1], fit.params[2]));
      bound.filter_width_hz.push_back(chi_linewidth(spec.k, fit.params[1], 0.0));
      nu_fit_kmax = fit.params[1];
    }
    for (std::size_t i = 1; i < bound.linewidth_hz.size(); ++i) {
      if (bound.k[i] > bound.k[i - 1] &&
          bound.linewidth_hz[i] > bound.linewidth_hz[i - 1] * (1.0 + options.monotonic_tolerance)) {
        throw FitError("t2star_lower_bound: " + sp.name + " linewidth grows from k = " +
                       std::to_string(bound.k[i - 1]) + " to k = " + std::to_string(bound.k[i]));
      }
    }
    const int kmax = bound.k.back();
    const double width = bound.linewidth_hz.back();
    const double filter = bound.filter_width_hz.back();
    bound.saturated = width > (1.0 + options.saturation_margin) * filter;
    const double target = width * (1.0 + options.width_tolerance);
    auto f = [&](double log_rate) { return chi_linewidth(kmax, nu_fit_kmax, std::exp(log_rate)) - target; };
    double hi_r = std::log(kPi * std::max(target, filter));
    while (f(hi_r) < 0.0) hi_r += 1.0;
    double lo_r = hi_r - 1.0;
    while (f(lo_r) > 0.0) {
      lo_r -= 1.0;
      if (lo_r < std::log(1e-12 * kPi * filter)) break;
    }
    double rate;
    if (f(lo_r) > 0.0) {
      rate = std::exp(lo_r);
    } else {
      std::uintmax_t iters = 200;
      const auto [a, b] = boost::math::tools::toms748_solve(f, lo_r, hi_r, boost::math::tools::eps_tolerance<double>(40), iters);
      rate = std::exp(0.5 * (a + b));
    }
    bound.bound_s = 1.0 / rate;
    out.push_back(bound);
  }
  return out;
}

}  // namespace nvnmr
