#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nvnmr/fitting.hpp"

using namespace nvnmr;

namespace {

constexpr double kNm = 1e-9;
constexpr double kRhoH = 60 * units::per_nm3;

Spectrum oil_spectrum(double d, double t2 = 20e-6, int k = 10, double b0 = 0.02) {
  const SampleStack stack{{{species::proton(kRhoH, t2), 0.0, kInfinity}}};
  return contrast_spectrum(stack, {d, b0}, frequency_sweep(k, 780e3, 920e3, 141));
}

Spectrum layered_spectrum(double t, double d, double rho_f = 40 * units::per_nm3) {
  const SampleStack stack{{{species::proton(kRhoH), 0.0, t}, {species::fluorine(rho_f), t, kInfinity}}};
  return contrast_spectrum(stack, {d, 0.02}, frequency_sweep(10, 740e3, 920e3, 181));
}

Spectrum mixture_spectrum(double d, double rho_h, double rho_f) {
  const SampleStack stack{{{species::proton(rho_h), 0.0, kInfinity}, {species::fluorine(rho_f), 0.0, kInfinity}}};
  return contrast_spectrum(stack, {d, 0.02}, frequency_sweep(10, 740e3, 920e3, 181));
}

Spectrum with_noise(Spectrum s, double sigma, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& c : s.contrast) c += n(eng);
  return s;
}

FitProblem oil_problem(const Spectrum& s, double d0, double t20) {
  FitProblem p;
  p.spectra = {s};
  p.stack = {{{species::proton(kRhoH, 1e-5), 0.0, kInfinity}}};
  p.parameters = {{"d", d0, kUnset, kUnset, {{FitTarget::depth, 0}}},
                  {"t2_star", t20, kUnset, kUnset, {{FitTarget::t2_star, 0}}}};
  return p;
}

double dip(const Spectrum& s, double nu) {
  std::size_t best = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (std::abs(s.nu_hz[i] - nu) < std::abs(s.nu_hz[best] - nu)) best = i;
  }
  return 1.0 - s.contrast[best];
}

}  // namespace

TEST_CASE("least squares on a bounded exponential") {
  std::vector<double> t(40), y(40);
  for (int i = 0; i < 40; ++i) {
    t[i] = 0.1 * i;
    y[i] = 2.5 * std::exp(-1.3 * t[i]) + 0.2;
  }
  LeastSquaresProblem p;
  p.n_residuals = 40;
  p.residuals = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r) {
    for (int i = 0; i < 40; ++i) r[i] = x[0] * std::exp(-x[1] * t[i]) + x[2] - y[i];
  };
  p.initial = Eigen::Vector3d(1.0, 0.5, 0.0);
  p.lower = Eigen::Vector3d(0.0, 0.0, -1.0);
  p.upper = Eigen::Vector3d(10.0, 10.0, 1.0);
  const auto r = least_squares(p);
  CHECK(r.converged);
  CHECK(r.params[0] == doctest::Approx(2.5).epsilon(1e-6));
  CHECK(r.params[1] == doctest::Approx(1.3).epsilon(1e-6));
  CHECK(r.params[2] == doctest::Approx(0.2).epsilon(1e-6));
  for (std::size_t i = 1; i < r.rss_trace.size(); ++i) CHECK(r.rss_trace[i] <= r.rss_trace[i - 1]);

  p.upper[1] = 1.0;
  const auto bounded = least_squares(p);
  CHECK(bounded.params[1] == doctest::Approx(1.0));
  CHECK(bounded.at_bound[1]);
  CHECK(bounded.params[1] <= 1.0);
}

TEST_CASE("covariance of a straight line") {
  // Textbook OLS: Var(slope) = s²/Σ(x − x̄)²
  const int m = 12;
  Eigen::MatrixXd j(m, 2);
  Eigen::VectorXd r(m);
  double sxx = 0.0, mean = 5.5;
  for (int i = 0; i < m; ++i) {
    j(i, 0) = 1.0;
    j(i, 1) = i;
    r[i] = (i % 3 == 0 ? 0.3 : -0.15);
    sxx += (i - mean) * (i - mean);
  }
  const double rss = r.squaredNorm();
  const auto cov = scaled_covariance(j, rss);
  const double s2 = rss / (m - 2);
  CHECK(cov(1, 1) == doctest::Approx(s2 / sxx).epsilon(1e-10));
  CHECK(cov(0, 0) == doctest::Approx(s2 * (1.0 / m + mean * mean / sxx)).epsilon(1e-10));
}

TEST_CASE("baseline correction") {
  const Spectrum clean = oil_spectrum(8 * kNm);
  const auto windows = resonance_windows(clean, {species::proton()}, 3.0);
  REQUIRE(windows.size() == 1);

  SUBCASE("flat spectrum") {
    Spectrum flat = clean;
    std::fill(flat.contrast.begin(), flat.contrast.end(), 0.7);
    const auto line = fit_baseline(flat, {});
    CHECK(line.slope == doctest::Approx(0.0).scale(1e-12));
    CHECK(line.intercept == doctest::Approx(0.7));
    const auto c = baseline_correct(flat, {});
    for (double v : c.contrast) CHECK(v == doctest::Approx(1.0));
  }
  SUBCASE("ramp is removed") {
    // sweep wide enough that the off-window points sit on the baseline
    const SampleStack stack{{{species::proton(kRhoH), 0.0, kInfinity}}};
    const Spectrum wide = contrast_spectrum(stack, {15 * kNm, 0.02}, frequency_sweep(10, 500e3, 1200e3, 701));
    Spectrum ramped = wide;
    const double nu_max = wide.nu_hz.back();
    for (std::size_t i = 0; i < ramped.size(); ++i) ramped.contrast[i] *= 1 - 0.3 * ramped.nu_hz[i] / nu_max;
    const auto c = baseline_correct(ramped, resonance_windows(wide, {species::proton()}, 5.0));
    double ss = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) ss += std::pow(c.contrast[i] - wide.contrast[i], 2);
    CHECK(std::sqrt(ss / c.size()) < 1e-3);
  }
  SUBCASE("idempotent") {
    Spectrum ramped = with_noise(clean, 0.01, 3);
    for (std::size_t i = 0; i < ramped.size(); ++i) ramped.contrast[i] *= 0.8 + 1e-7 * ramped.nu_hz[i];
    const auto once = baseline_correct(ramped, windows);
    const auto twice = baseline_correct(once, windows);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(twice.contrast[i] == doctest::Approx(once.contrast[i]).epsilon(1e-12));
  }
  SUBCASE("everything windowed") {
    CHECK_THROWS_AS(baseline_correct(clean, {{0.0, 1e9}}), FitError);
  }
}

TEST_CASE("seeding helpers") {
  const Spectrum s = oil_spectrum(8 * kNm, 50e-6);
  CHECK(deepest_minimum(s) == doctest::Approx(851549.57).epsilon(2e-3));
  CHECK(dip_width(s, deepest_minimum(s)) > 0.0);
  const auto sm = smooth_spectrum(s);
  CHECK(sm.size() == s.size());
  CHECK(*std::min_element(sm.contrast.begin(), sm.contrast.end()) >= *std::min_element(s.contrast.begin(), s.contrast.end()));
  CHECK(bandwidth_at(s, 850e3) == doctest::Approx(0.111 * 2 * 850e3 / 10).epsilon(0.01));
}

TEST_CASE("fit round trip from perturbed starts") {
  const Spectrum s = oil_spectrum(8 * kNm, 20e-6);
  const auto r = fit_spectrum(oil_problem(s, 9.6 * kNm, 16e-6));
  CHECK(r.converged);
  CHECK(r.value("d") == doctest::Approx(8 * kNm).epsilon(0.01));
  CHECK(r.value("t2_star") == doctest::Approx(20e-6).epsilon(0.01));
  for (std::size_t i = 1; i < r.rss_trace.size(); ++i) CHECK(r.rss_trace[i] <= r.rss_trace[i - 1]);

  std::mt19937_64 eng(42);
  std::uniform_real_distribution<double> u(0.8, 1.2);
  int ok_oil = 0, ok_layer = 0;
  const std::vector<Spectrum> pair = {layered_spectrum(0.8 * kNm, 5 * kNm), layered_spectrum(0.8 * kNm, 10 * kNm)};
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = fit_spectrum(oil_problem(s, 8 * kNm * u(eng), 20e-6 * u(eng)));
    ok_oil += std::abs(a.value("d") / (8 * kNm) - 1) < 0.01 && std::abs(a.value("t2_star") / 20e-6 - 1) < 0.01;
    ThicknessOptions o;
    o.initial_thickness = 0.8 * kNm * u(eng);
    o.initial_depths = {5 * kNm * u(eng), 10 * kNm * u(eng)};
    const auto b = fit_layer_thickness(pair, o);
    ok_layer += std::abs(b.value("t") / (0.8 * kNm) - 1) < 0.01 && std::abs(b.value("d0") / (5 * kNm) - 1) < 0.01 &&
                std::abs(b.value("d1") / (10 * kNm) - 1) < 0.01;
  }
  CHECK(ok_oil >= 48);
  CHECK(ok_layer >= 48);
}

TEST_CASE("fit preconditions") {
  FitProblem p = oil_problem(oil_spectrum(8 * kNm), 8 * kNm, 2e-5);
  p.parameters.clear();
  CHECK_THROWS_AS(fit_spectrum(p), FitError);
  FitProblem q = oil_problem(oil_spectrum(8 * kNm), 8 * kNm, 2e-5);
  q.parameters[0].lower = 20 * kNm;
  q.parameters[0].upper = 10 * kNm;
  CHECK_THROWS_AS(fit_spectrum(q), FitError);
  FitProblem few = oil_problem(oil_spectrum(8 * kNm), 8 * kNm, 2e-5);
  few.spectra[0].nu_hz.resize(2);
  few.spectra[0].contrast.resize(2);
  CHECK_THROWS_AS(fit_spectrum(few), FitError);
}

TEST_CASE("noise coverage of the depth uncertainty") {
  const Spectrum clean = oil_spectrum(8 * kNm, 20e-6);
  int covered = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = fit_spectrum(oil_problem(with_noise(clean, 0.005, 1000 + seed), 9 * kNm, 18e-6));
    covered += std::abs(r.value("d") - 8 * kNm) <= 3 * r.at("d").uncertainty;
  }
  CHECK(covered >= 95);
}

TEST_CASE("uncertainty shrinks with averaging") {
  const Spectrum clean = oil_spectrum(8 * kNm, 20e-6);
  double single = 0.0, averaged = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    single += fit_spectrum(oil_problem(with_noise(clean, 0.01, 10 * seed), 8 * kNm, 2e-5)).at("d").uncertainty;
    Spectrum mean = clean;
    std::fill(mean.contrast.begin(), mean.contrast.end(), 0.0);
    for (int j = 0; j < 4; ++j) {
      const Spectrum n = with_noise(clean, 0.01, 10 * seed + 1 + j);
      for (std::size_t i = 0; i < n.size(); ++i) mean.contrast[i] += 0.25 * n.contrast[i];
    }
    averaged += fit_spectrum(oil_problem(mean, 8 * kNm, 2e-5)).at("d").uncertainty;
  }
  CHECK(single / averaged == doctest::Approx(2.0).epsilon(0.2));
}

TEST_CASE("depth calibration") {
  const Spectrum s = oil_spectrum(8 * kNm, 20e-6);
  const auto r = calibrate_depth(s, species::proton(kRhoH));
  CHECK(r.value("d") == doctest::Approx(8 * kNm).epsilon(0.05));
  double prev = 0.0;
  for (double d : {20.0, 15.0, 10.0, 8.0, 5.0, 3.0}) {
    const double depth = dip(oil_spectrum(d * kNm, 20e-6), 851549.57);
    CHECK(depth > prev);
    prev = depth;
  }
}

TEST_CASE("layer thickness") {
  const std::vector<Spectrum> pair = {layered_spectrum(0.8 * kNm, 5 * kNm), layered_spectrum(0.8 * kNm, 10 * kNm)};
  const auto r = fit_layer_thickness(pair);
  CHECK(r.value("t") == doctest::Approx(0.8 * kNm).epsilon(0.125));

  const std::vector<Spectrum> bare = {layered_spectrum(0.0, 5 * kNm), layered_spectrum(0.0, 10 * kNm)};
  const SampleStack fluorine_only{{{species::fluorine(40 * units::per_nm3), 0.0, kInfinity}}};
  CHECK(bare[0].contrast == contrast_spectrum(fluorine_only, {5 * kNm, 0.02}, frequency_sweep(10, 740e3, 920e3, 181)).contrast);
  const auto z = fit_layer_thickness(bare);
  CHECK(z.value("t") < 0.05 * kNm);
}

TEST_CASE("dip ratio discriminates the models") {
  auto ratio = [](const Spectrum& s) { return dip(s, 851549.57) / dip(s, 801560.0); };
  const double l5 = ratio(layered_spectrum(0.8 * kNm, 5 * kNm));
  const double l10 = ratio(layered_spectrum(0.8 * kNm, 10 * kNm));
  CHECK(std::abs(l5 / l10 - 1) > 0.2);
  // small densities keep the dips in the linear regime
  const double m5 = ratio(mixture_spectrum(5 * kNm, 1e26, 1e26));
  const double m10 = ratio(mixture_spectrum(10 * kNm, 1e26, 1e26));
  CHECK(m5 / m10 == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("model selection") {
  SUBCASE("layered data") {
    const auto r = model_selection_layered_vs_isotropic(
        {layered_spectrum(0.8 * kNm, 5 * kNm), layered_spectrum(0.8 * kNm, 10 * kNm)});
    CHECK(r.isotropic_rejected);
    CHECK(!r.layered_rejected);
    CHECK(r.preferred == "layered");
    CHECK(r.rss_ratio >= 4.0);
    CHECK(r.per_sensor_ratios.size() == 2);
  }
  SUBCASE("isotropic data") {
    const double rh = 30 * units::per_nm3, rf = 20 * units::per_nm3;
    const auto r = model_selection_layered_vs_isotropic({mixture_spectrum(5 * kNm, rh, rf), mixture_spectrum(10 * kNm, rh, rf)});
    CHECK(!r.isotropic_rejected);
    CHECK(r.preferred == "isotropic");
    CHECK(r.ratio_spread == doctest::Approx(1.0).epsilon(0.01));
  }
  SUBCASE("single sensor") {
    CHECK_THROWS_AS(model_selection_layered_vs_isotropic({layered_spectrum(0.8 * kNm, 5 * kNm)}), FitError);
  }
}

TEST_CASE("gyromagnetic ratio") {
  const double g = species::kProtonGammaHz;
  const auto exact = fit_gyromagnetic({{0.017, g * 0.017}, {0.02, g * 0.02}, {0.023, g * 0.023}}, g);
  CHECK(exact.gamma_hz_per_t == doctest::Approx(g).epsilon(1e-14));
  CHECK(std::abs(exact.relative_deviation) < 1e-14);
  const double p = species::kPhosphorusGammaHz;
  const auto biased = fit_gyromagnetic({{0.05, 1.04 * p * 0.05}, {0.06, 1.04 * p * 0.06}, {0.07, 1.04 * p * 0.07}}, p);
  CHECK(biased.relative_deviation == doctest::Approx(0.04).epsilon(1e-12));
  CHECK_THROWS_AS(fit_gyromagnetic({{0.02, g * 0.02}, {0.02, g * 0.02}}), FitError);
  CHECK_THROWS_AS(fit_gyromagnetic({{0.02, g * 0.02}}), FitError);
}

TEST_CASE("resonance location") {
  const SampleStack stack{{{species::fluorine(40 * units::per_nm3, 60e-6), 0.0, kInfinity}}};
  const auto s = contrast_spectrum(stack, {8 * kNm, 0.02}, frequency_sweep(10, 760e3, 840e3, 161));
  CHECK(locate_resonance(s, species::fluorine(), 795e3) == doctest::Approx(801560.0).epsilon(1e-6));
}

TEST_CASE("T2* lower bound") {
  auto sweep = [](double t2, int k) {
    const SampleStack stack{{{species::fluorine(40 * units::per_nm3, t2), 0.0, kInfinity}}};
    return contrast_spectrum(stack, {8 * kNm, 0.02}, frequency_sweep(k, 700e3, 900e3, 801));
  };
  SUBCASE("long T2*") {
    const auto b = t2star_lower_bound({sweep(100e-6, 2), sweep(100e-6, 5), sweep(100e-6, 10)}, {species::fluorine()});
    REQUIRE(b.size() == 1);
    CHECK(b[0].bound_s >= 30e-6);
    CHECK(b[0].bound_s <= 100e-6);
    CHECK(!b[0].saturated);
  }
  SUBCASE("short T2*") {
    const auto b = t2star_lower_bound({sweep(5e-6, 2), sweep(5e-6, 5), sweep(5e-6, 10)}, {species::fluorine()});
    CHECK(b[0].saturated);
    CHECK(b[0].bound_s == doctest::Approx(5e-6).epsilon(0.1));
    CHECK(b[0].linewidth_hz.back() == doctest::Approx(1 / (M_PI * 5e-6)).epsilon(0.15));
  }
  SUBCASE("one k") {
    CHECK_THROWS_AS(t2star_lower_bound({sweep(5e-6, 5), sweep(5e-6, 5)}, {species::fluorine()}), FitError);
  }
}
