#include "nvnmr/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "nvnmr/fitting.hpp"
#include "nvnmr/imaging.hpp"
#include "nvnmr/rng.hpp"
#include "nvnmr/spectrum_io.hpp"
#include "nvnmr/verify.hpp"

namespace nvnmr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

// Thrown for bad input so that `run` can map it to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

NuclearSpecies species_from_table(const ConfigTable& t) {
  try {
    NuclearSpecies s = species::by_name(t.string("species"), t.number("rho", 0.0), t.number("t2_star", kInfinity));
    if (t.has("gamma")) s.gamma_n = std::copysign(kTwoPi * t.number("gamma"), s.gamma_n);
    s.validate();
    return s;
  } catch (const ModelError& e) {
    throw ConfigError(t.where("species") + e.what());
  }
}

SampleStack stack_from_config(const Config& cfg) {
  SampleStack stack;
  for (const auto& t : cfg.array("layer")) {
    t.check_keys({"species", "rho", "z1", "z2", "t2_star", "gamma"});
    SampleLayer layer{species_from_table(t), t.number("z1", 0.0), t.number("z2", kInfinity)};
    try {
      layer.validate();
    } catch (const ModelError& e) {
      throw ConfigError(t.where() + e.what());
    }
    stack.layers.push_back(layer);
  }
  try {
    stack.validate();
  } catch (const ModelError& e) {
    throw ConfigError(cfg.source + ": " + e.what());
  }
  return stack;
}

std::uint64_t seed_of(const RunOptions& o, const ConfigTable& t) {
  if (o.seed) return *o.seed;
  return static_cast<std::uint64_t>(t.integer("seed", 1));
}

std::string mt_label(double b0) { return format_double(b0 * 1e3) + "mT"; }

NuclearSpecies named_species(const std::string& name, const ConfigTable& t, const std::string& key) {
  try {
    return species::by_name(name);
  } catch (const ModelError& e) {
    throw ConfigError(t.where(key) + e.what());
  }
}

std::vector<FitParameter> parameters_from_config(const Config& cfg) {
  static const std::map<std::string, FitTarget> targets = {
      {"depth", FitTarget::depth},         {"field", FitTarget::field},
      {"density", FitTarget::density},     {"z1", FitTarget::lower_bound},
      {"z2", FitTarget::upper_bound},      {"t2_star", FitTarget::t2_star},
      {"gyromagnetic", FitTarget::gyromagnetic}};
  std::vector<FitParameter> params;
  for (const auto& t : cfg.array("parameter")) {
    t.check_keys({"name", "bind", "initial", "lower", "upper"});
    FitParameter p;
    p.name = t.string("name");
    p.initial = t.number("initial", kUnset);
    p.lower = t.number("lower", kUnset);
    p.upper = t.number("upper", kUnset);
    for (const auto& b : t.strings("bind")) {
      const auto colon = b.find(':');
      const auto it = targets.find(b.substr(0, colon));
      if (colon == std::string::npos || it == targets.end()) {
        throw ConfigError(t.where("bind") + "binding '" + b +
                          "' must be target:index with target one of depth, field, density, z1, z2, "
                          "t2_star, gyromagnetic");
      }
      try {
        p.bindings.push_back({it->second, std::stoul(b.substr(colon + 1))});
      } catch (const std::logic_error&) {
        throw ConfigError(t.where("bind") + "bad index in binding '" + b + "'");
      }
    }
    params.push_back(p);
  }
  return params;
}

}  // namespace

fs::path Outputs::add(const fs::path& relative) {
  files.push_back(relative);
  return root / relative;
}

void Outputs::add_absolute(const fs::path& absolute) { files.push_back(fs::relative(absolute, root)); }

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot hash " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(const Config& cfg, const RunOptions& o, Outputs& outputs, std::ostream& log) {
  cfg.check_sections({"sensor", "sequence", "noise"}, {"layer"});
  cfg.root.check_keys({});
  const auto& sensor_t = cfg.table("sensor");
  sensor_t.check_keys({"depth", "b0"});
  const auto& seq_t = cfg.table("sequence");
  seq_t.check_keys({"k", "nu_min", "nu_max", "points"});
  const auto& noise_t = cfg.table("noise");
  noise_t.check_keys({"sigma", "seed"});

  const double depth = sensor_t.number("depth");
  const std::vector<double> fields = sensor_t.numbers("b0");
  std::vector<int> ks;
  for (double k : seq_t.numbers("k", {10.0})) {
    if (!(k >= 1.0 && std::floor(k) == k)) throw ConfigError(seq_t.where("k") + "k must be a positive integer");
    ks.push_back(static_cast<int>(k));
  }
  const double nu_min = seq_t.number("nu_min");
  const double nu_max = seq_t.number("nu_max");
  const int points = seq_t.integer("points", 201);
  if (points < 2) throw ConfigError(seq_t.where("points") + "points must be >= 2");
  if (!(nu_min > 0.0 && nu_max > nu_min)) throw ConfigError(seq_t.where("nu_max") + "need 0 < nu_min < nu_max");
  const double sigma = noise_t.number("sigma", 0.0);
  if (!(sigma >= 0.0)) throw ConfigError(noise_t.where("sigma") + "sigma must be >= 0");
  const std::uint64_t seed = seed_of(o, noise_t);
  const SampleStack stack = stack_from_config(cfg);
  for (double b0 : fields) {
    try {
      SensorConfig{depth, b0}.validate();
    } catch (const ModelError& e) {
      throw ConfigError(sensor_t.where("b0") + e.what());
    }
  }

  json summary = json::array();
  std::uint64_t index = 0;
  for (double b0 : fields) {
    for (int k : ks) {
      const SensorConfig sensor{depth, b0};
      const auto sweep = frequency_sweep(k, nu_min, nu_max, static_cast<std::size_t>(points));
      Spectrum s = contrast_spectrum(stack, sensor, sweep);
      if (sigma > 0.0) {
        std::mt19937_64 eng(splitmix64(seed + index));
        std::normal_distribution<double> normal(0.0, sigma);
        for (auto& c : s.contrast) c += normal(eng);
      }
      const std::string name = "spectra/spectrum_b0-" + mt_label(b0) + "_k" + std::to_string(k) + ".csv";
      const fs::path csv = outputs.add(name);
      fs::create_directories(csv.parent_path());
      outputs.add_absolute(write_spectrum(s, csv));
      json larmor = json::object();
      for (const auto& l : stack.layers) larmor[l.species.name] = larmor_frequency(l.species, b0) / kTwoPi;
      const auto it = std::min_element(s.contrast.begin(), s.contrast.end());
      summary.push_back({{"file", name},
                         {"b0_t", b0},
                         {"k", k},
                         {"larmor_hz", larmor},
                         {"min_contrast", *it},
                         {"nu_at_min_hz", s.nu_hz[static_cast<std::size_t>(it - s.contrast.begin())]}});
      log << "wrote " << name << " (B0 = " << mt_label(b0) << ", k = " << k << ", min contrast "
          << *it << ")\n";
      ++index;
    }
  }
  write_json(outputs.add("simulate.json"),
             {{"spectra", summary}, {"noise", {{"sigma", sigma}, {"seed", seed}}}});
  return 0;
}

// ---------------------------------------------------------------------------
// fit

namespace {

std::vector<Spectrum> load_inputs(const Config& cfg, const ConfigTable& fit_t, std::vector<std::string>& names) {
  names = fit_t.strings("inputs");
  if (names.empty()) throw ConfigError(fit_t.where("inputs") + "no input spectra");
  std::vector<Spectrum> spectra;
  for (const auto& n : names) {
    const fs::path p = cfg.resolve(n);
    if (!fs::exists(p)) throw InputError(fit_t.where("inputs") + "missing input file " + p.string());
    try {
      spectra.push_back(read_spectrum(p));
    } catch (const IoError& e) {
      throw InputError(e.what());
    }
  }
  return spectra;
}

LeastSquaresOptions lsq_options(const ConfigTable& fit_t) {
  LeastSquaresOptions opt;
  opt.max_iterations = fit_t.integer("max_iterations", opt.max_iterations);
  return opt;
}

}  // namespace

int cmd_fit(const Config& cfg, const RunOptions&, Outputs& outputs, std::ostream& log) {
  cfg.check_sections({"fit", "calibrate", "thickness", "model_selection", "gyromagnetic", "t2star"},
                     {"layer", "parameter"});
  cfg.root.check_keys({});
  const auto& fit_t = cfg.table("fit");
  fit_t.check_keys({"workflow", "inputs", "baseline", "baseline_species", "window_bandwidths",
                    "max_iterations", "resonances"});
  const std::string workflow = fit_t.string("workflow");
  static const std::set<std::string> workflows = {"generic", "calibrate-depth", "thickness",
                                                  "model-selection", "gyromagnetic", "t2star-bound"};
  if (!workflows.count(workflow)) {
    throw ConfigError(fit_t.where("workflow") + "unknown workflow '" + workflow +
                      "' (generic, calibrate-depth, thickness, model-selection, gyromagnetic, t2star-bound)");
  }
  const LeastSquaresOptions lsq = lsq_options(fit_t);

  std::vector<std::string> names;
  std::vector<Spectrum> spectra;
  if (!(workflow == "gyromagnetic" && fit_t.has("resonances"))) spectra = load_inputs(cfg, fit_t, names);

  if (fit_t.boolean("baseline", false)) {
    std::vector<NuclearSpecies> sp;
    for (const auto& n : fit_t.strings("baseline_species", {"1H", "19F"})) {
      sp.push_back(named_species(n, fit_t, "baseline_species"));
    }
    const double half = fit_t.number("window_bandwidths", 3.0);
    for (auto& s : spectra) s = baseline_correct(s, resonance_windows(s, sp, half));
  }

  json report = {{"workflow", workflow}, {"inputs", names}};
  int rc = 0;
  try {
    if (workflow == "calibrate-depth") {
      const auto& t = cfg.table("calibrate");
      t.check_keys({"species", "rho", "initial_depth", "initial_t2_star"});
      NuclearSpecies sp = named_species(t.string("species", "1H"), t, "species");
      sp.rho = t.number("rho", 60.0 * units::per_nm3);
      DepthCalibrationOptions opt;
      opt.initial_depth = t.number("initial_depth", kUnset);
      opt.initial_t2_star = t.number("initial_t2_star", kUnset);
      opt.options = lsq;
      json results = json::array();
      for (std::size_t i = 0; i < spectra.size(); ++i) {
        const FitResult r = calibrate_depth(spectra[i], sp, opt);
        log << names[i] << ": d = " << r.value("d") * 1e9 << " +- " << r.at("d").uncertainty * 1e9
            << " nm, T2* = " << r.value("t2_star") * 1e6 << " us\n";
        results.push_back({{"input", names[i]},
                           {"depth_m", r.value("d")},
                           {"depth_sigma_m", finite_or_null(r.at("d").uncertainty)},
                           {"t2_star_s", r.value("t2_star")},
                           {"fit", to_json(r)}});
      }
      report["results"] = results;
    } else if (workflow == "thickness" || workflow == "model-selection") {
      const auto& t = cfg.table("thickness");
      t.check_keys({"rho_h", "rho_f", "initial_thickness", "max_thickness", "initial_depths", "free_depth"});
      ThicknessOptions opt;
      opt.proton_density = t.number("rho_h", opt.proton_density);
      opt.fluorine_density = t.number("rho_f", opt.fluorine_density);
      opt.initial_thickness = t.number("initial_thickness", opt.initial_thickness);
      opt.max_thickness = t.number("max_thickness", opt.max_thickness);
      opt.initial_depths = t.numbers("initial_depths", {});
      if (!opt.initial_depths.empty() && opt.initial_depths.size() != spectra.size()) {
        throw ConfigError(t.where("initial_depths") + "need one initial depth per input");
      }
      if (!t.boolean("free_depth", true)) opt.free_depths.assign(spectra.size(), false);
      opt.options = lsq;
      if (workflow == "thickness") {
        const FitResult r = fit_layer_thickness(spectra, opt);
        log << "t = " << r.value("t") * 1e9 << " +- " << r.at("t").uncertainty * 1e9 << " nm\n";
        report["thickness_m"] = r.value("t");
        report["thickness_sigma_m"] = finite_or_null(r.at("t").uncertainty);
        report["fit"] = to_json(r);
      } else {
        const auto& m = cfg.table("model_selection");
        m.check_keys({"rejection_ratio"});
        ModelSelectionOptions ms;
        ms.layered = opt;
        ms.rejection_ratio = m.number("rejection_ratio", ms.rejection_ratio);
        const auto r = model_selection_layered_vs_isotropic(spectra, ms);
        log << "layered rss " << r.layered.rss << ", isotropic rss " << r.isotropic.rss << ", preferred "
            << r.preferred << (r.isotropic_rejected ? ", isotropic rejected" : "") << '\n';
        report["model_selection"] = to_json(r);
      }
    } else if (workflow == "gyromagnetic") {
      const auto& t = cfg.table("gyromagnetic");
      t.check_keys({"species", "reference"});
      const NuclearSpecies sp = named_species(t.string("species"), t, "species");
      const double reference = t.number("reference", std::abs(sp.gamma_n) / kTwoPi);
      std::vector<Resonance> points;
      if (fit_t.has("resonances")) {
        const fs::path p = cfg.resolve(fit_t.string("resonances"));
        std::ifstream in(p);
        if (!in) throw InputError(fit_t.where("resonances") + "missing input file " + p.string());
        std::string line;
        int n = 0;
        while (std::getline(in, line)) {
          ++n;
          if (n == 1 || line.empty()) continue;
          std::istringstream ls(line);
          Resonance r;
          char comma = 0;
          if (!(ls >> r.b0 >> comma >> r.nu0_hz) || comma != ',') {
            throw InputError(p.string() + ":" + std::to_string(n) + ": expected b0_t,nu0_hz");
          }
          points.push_back(r);
        }
      } else {
        for (const auto& s : spectra) {
          // Deepest point within ±10% of the reference line and nearer to it than to
          // any other built-in species, then a local fit.
          const double guess = reference * s.sensor.b0;
          std::vector<double> others;
          for (const char* name : {"1H", "19F", "31P"}) {
            const double g = std::abs(species::by_name(name).gamma_n) / (2.0 * std::numbers::pi);
            if (std::abs(g / reference - 1.0) > 1e-3) others.push_back(g * s.sensor.b0);
          }
          Spectrum near = s;
          near.nu_hz.clear();
          near.contrast.clear();
          for (std::size_t i = 0; i < s.size(); ++i) {
            const double dist = std::abs(s.nu_hz[i] - guess);
            const bool nearer_other =
                std::any_of(others.begin(), others.end(), [&](double f) { return std::abs(s.nu_hz[i] - f) < dist; });
            if (dist <= 0.1 * guess && !nearer_other) {
              near.nu_hz.push_back(s.nu_hz[i]);
              near.contrast.push_back(s.contrast[i]);
            }
          }
          if (near.size() < 5) throw InputError("no data within 10% of the expected " + sp.name + " line");
          const double seed_nu = deepest_minimum(near);
          double half = 5.0 * filter_bandwidth(PulseSequence{s.k, 0.5 / seed_nu});
          for (double f : others) half = std::min(half, 0.5 * std::abs(f - seed_nu));
          points.push_back({s.sensor.b0, locate_resonance(s, sp, seed_nu, half)});
        }
      }
      const GyromagneticFit g = fit_gyromagnetic(points, reference);
      log << sp.name << ": gamma/2pi = " << g.gamma_hz_per_t / 1e6 << " +- " << g.uncertainty / 1e6
          << " MHz/T, " << std::showpos << g.relative_deviation * 100 << std::noshowpos << "% vs reference\n";
      json pts = json::array();
      for (const auto& p : points) pts.push_back({{"b0_t", p.b0}, {"nu0_hz", p.nu0_hz}});
      report["species"] = sp.name;
      report["resonances"] = pts;
      report["gamma_hz_per_t"] = g.gamma_hz_per_t;
      report["uncertainty_hz_per_t"] = g.uncertainty;
      report["reference_hz_per_t"] = g.reference_hz_per_t;
      report["relative_deviation"] = g.relative_deviation;
    } else if (workflow == "t2star-bound") {
      const auto& t = cfg.table("t2star");
      t.check_keys({"species", "width_tolerance", "saturation_margin", "window_bandwidths"});
      std::vector<NuclearSpecies> sp;
      for (const auto& n : t.strings("species")) sp.push_back(named_species(n, t, "species"));
      T2StarBoundOptions opt;
      opt.width_tolerance = t.number("width_tolerance", opt.width_tolerance);
      opt.saturation_margin = t.number("saturation_margin", opt.saturation_margin);
      opt.window_bandwidths = t.number("window_bandwidths", opt.window_bandwidths);
      json arr = json::array();
      for (const auto& b : t2star_lower_bound(spectra, sp, opt)) {
        log << b.species << ": T2* >= " << b.bound_s * 1e6 << " us" << (b.saturated ? " (saturated)" : "") << '\n';
        arr.push_back({{"species", b.species},
                       {"t2_star_lower_bound_s", b.bound_s},
                       {"saturated", b.saturated},
                       {"k", b.k},
                       {"linewidth_hz", b.linewidth_hz},
                       {"filter_width_hz", b.filter_width_hz}});
      }
      report["bounds"] = arr;
    } else {
      FitProblem p;
      p.spectra = spectra;
      p.stack = stack_from_config(cfg);
      p.parameters = parameters_from_config(cfg);
      p.options = lsq;
      const FitResult r = fit_spectrum(p);
      for (const auto& e : r.estimates) log << e.name << " = " << e.value << " +- " << e.uncertainty << '\n';
      report["fit"] = to_json(r);
    }
  } catch (const FitError& e) {
    report["error"] = e.what();
    log << "fit failed: " << e.what() << '\n';
    rc = 1;
  }
  write_json(outputs.add("fit_report.json"), report);
  return rc;
}

// ---------------------------------------------------------------------------
// image

int cmd_image(const Config& cfg, const RunOptions& o, Outputs& outputs, std::ostream& log) {
  cfg.check_sections({"image", "scene"}, {"layer", "parameter"});
  cfg.root.check_keys({});
  const auto& t = cfg.table("image");
  t.check_keys({"frames", "synthesize", "bin", "blur_width", "blur_fwhm", "detection_sigma", "min_dip",
                "png_vmax", "png_scale", "template", "baseline", "window_bandwidths", "max_iterations"});
  const auto& sc = cfg.table("scene");
  sc.check_keys({"width", "height", "mask_fraction", "mask_offset", "proton_thickness", "proton_density",
                 "fluorine_thickness", "fluorine_density", "depth", "b0", "k", "nu_min", "nu_max", "points",
                 "noise", "counts", "visibility", "seed"});

  const double blur = t.number("blur_width", 3.0);
  if (!(blur > 0.0)) throw ConfigError(t.where("blur_width") + "blur_width must be > 0");
  const int bin = t.integer("bin", 1);
  if (bin < 1) throw ConfigError(t.where("bin") + "bin must be >= 1");
  const bool synthesize = t.boolean("synthesize", false);
  if (!synthesize && !t.has("frames")) throw ConfigError(t.where() + "[image] needs frames = \"dir\" or synthesize = true");

  CornerMaskOptions geo;
  geo.width = static_cast<std::size_t>(sc.integer("width", static_cast<int>(geo.width)));
  geo.height = static_cast<std::size_t>(sc.integer("height", static_cast<int>(geo.height)));
  geo.mask_fraction = sc.number("mask_fraction", geo.mask_fraction);
  geo.mask_offset = sc.number("mask_offset", geo.mask_offset);
  geo.proton_thickness = sc.number("proton_thickness", geo.proton_thickness);
  geo.proton_density = sc.number("proton_density", geo.proton_density);
  geo.fluorine_thickness = sc.number("fluorine_thickness", geo.fluorine_thickness);
  geo.fluorine_density = sc.number("fluorine_density", geo.fluorine_density);
  geo.depth = sc.number("depth", geo.depth);
  geo.b0 = sc.number("b0", geo.b0);
  geo.k = sc.integer("k", geo.k);
  geo.nu_min = sc.number("nu_min", geo.nu_min);
  geo.nu_max = sc.number("nu_max", geo.nu_max);
  geo.n_points = static_cast<std::size_t>(sc.integer("points", static_cast<int>(geo.n_points)));
  NoiseModel noise;
  const std::string kind = sc.string("noise", "poisson");
  if (kind == "poisson") noise.kind = NoiseKind::poisson;
  else if (kind == "gaussian") noise.kind = NoiseKind::gaussian;
  else if (kind == "none") noise.kind = NoiseKind::none;
  else throw ConfigError(sc.where("noise") + "noise must be \"poisson\", \"gaussian\" or \"none\"");
  noise.counts = sc.number("counts", noise.counts);
  noise.visibility = sc.number("visibility", noise.visibility);
  noise.seed = seed_of(o, sc);

  const std::string tmpl = t.string("template", "corner-mask");
  FitProblem model;
  if (tmpl == "corner-mask") {
    model = corner_mask_template(geo);
  } else if (tmpl == "custom") {
    model.stack = stack_from_config(cfg);
    model.parameters = parameters_from_config(cfg);
  } else {
    throw ConfigError(t.where("template") + "template must be \"corner-mask\" or \"custom\"");
  }
  model.options.max_iterations = t.integer("max_iterations", model.options.max_iterations);

  Scene scene;
  FrameStack frames;
  fs::path frames_dir;
  if (synthesize) {
    scene = corner_mask_scene(geo);
    frames = synthesize_scene(scene, noise, o.threads.value_or(0));
    frames_dir = outputs.root / "frames";
    for (const auto& p : write_frame_stack(frames, frames_dir)) outputs.add_absolute(p);
    log << "synthesized " << geo.width << "x" << geo.height << " corner-mask scene, " << scene.nu_hz.size()
        << " delays\n";
  } else {
    frames_dir = cfg.resolve(t.string("frames"));
    if (!fs::exists(frames_dir)) throw InputError(t.where("frames") + "missing frame directory " + frames_dir.string());
  }
  try {
    frames = read_frame_stack(frames_dir);
  } catch (const ImagingError& e) {
    throw InputError(e.what());
  }

  const SpectrumGrid grid = pixel_spectra(frames, static_cast<std::size_t>(bin));
  MapOptions mo;
  mo.threads = o.threads.value_or(0);
  mo.baseline = t.boolean("baseline", true);
  mo.window_bandwidths = t.number("window_bandwidths", mo.window_bandwidths);
  mo.detection_sigma = t.number("detection_sigma", mo.detection_sigma);
  mo.min_dip = t.number("min_dip", mo.min_dip);
  const PixelMap map = fit_map(grid, model, mo);
  BlurOptions bo;
  bo.width_is_fwhm = t.boolean("blur_fwhm", true);
  const PixelMap blurred = gaussian_blur(map, blur, bo);

  const json meta = {{"blur_width_pixels", blur},
                     {"blur_width_is_fwhm", bo.width_is_fwhm},
                     {"bin", bin},
                     {"detection_sigma", mo.detection_sigma},
                     {"min_dip", mo.min_dip}};
  for (const auto& p : write_pixel_map(map, outputs.root / "maps" / "raw", meta)) outputs.add_absolute(p);
  for (const auto& p : write_pixel_map(blurred, outputs.root / "maps" / "blurred", meta)) outputs.add_absolute(p);
  const double vmax = t.number("png_vmax", 0.5);
  const int scale = t.integer("png_scale", 4);
  for (const auto& [name, values] : blurred.layers) {
    if (name.rfind("dip_", 0) != 0) continue;
    const fs::path png = outputs.add(name + ".png");
    write_heatmap_png(values, blurred.width, blurred.height, vmax, png, scale);
  }

  json report = {{"width", map.width},
                 {"height", map.height},
                 {"valid_pixels", map.valid_count()},
                 {"masked_pixels", map.width * map.height - map.valid_count()},
                 {"png_color_scale", {{"0", "red (no dip)"}, {"vmax/2", "white"}, {"vmax", "blue (deep dip)"},
                                      {"vmax_value", vmax}, {"invalid", "grey"}}}};
  json detected = json::object();
  for (const auto& [name, values] : map.layers) {
    if (name.rfind("detected_", 0) != 0) continue;
    detected[name] = std::count(values.begin(), values.end(), 1.0);
  }
  report["detected_pixels"] = detected;
  if (synthesize && map.layers.count("detected_rho_f") && bin == 1) {
    const auto& det = map.layer("detected_rho_f");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < det.size(); ++i) correct += (det[i] == 1.0) == (scene.region[i] == 0);
    report["fluorine_classification_accuracy"] = static_cast<double>(correct) / static_cast<double>(det.size());
  }
  log << "fitted " << map.valid_count() << "/" << map.width * map.height << " pixels\n";
  write_json(outputs.add("image.json"), report);
  return 0;
}

// ---------------------------------------------------------------------------
// verify

int cmd_verify(const Config& cfg, const RunOptions& o, Outputs& outputs, std::ostream& log) {
  cfg.check_sections({"verify"}, {});
  cfg.root.check_keys({});
  const auto& t = cfg.table("verify");
  t.check_keys({"mc_realizations", "mc_spins", "include_mc", "corrupt_prefactor", "seed"});
  VerifyOptions vo;
  vo.mc_realizations = static_cast<std::size_t>(t.integer("mc_realizations", static_cast<int>(vo.mc_realizations)));
  vo.mc_spins = static_cast<std::size_t>(t.integer("mc_spins", static_cast<int>(vo.mc_spins)));
  vo.include_mc = t.boolean("include_mc", true);
  vo.corrupt_prefactor = t.number("corrupt_prefactor", 1.0);
  vo.seed = seed_of(o, t);
  vo.threads = o.threads.value_or(0);
  const VerifyReport r = run_verification(vo);
  for (const auto& c : r.checks) {
    log << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.achieved << " (tolerance " << c.tolerance << ")\n";
  }
  write_json(outputs.add("verify.json"), r.to_json());
  return r.passed() ? 0 : 1;
}

// ---------------------------------------------------------------------------

int run(const std::string& command, const Config& config, const RunOptions& options, std::ostream& log,
        std::ostream& err) {
  const auto started = std::chrono::system_clock::now();
  fs::create_directories(options.out);
  Outputs outputs{options.out, {}};
  std::ostringstream captured;
  struct Tee : std::streambuf {
    std::streambuf* a;
    std::streambuf* b;
    Tee(std::streambuf* x, std::streambuf* y) : a(x), b(y) {}
    int overflow(int c) override {
      if (c == EOF) return !EOF;
      a->sputc(static_cast<char>(c));
      b->sputc(static_cast<char>(c));
      return c;
    }
  } tee(log.rdbuf(), captured.rdbuf());
  std::ostream out(&tee);

  int rc = 0;
  try {
    if (command == "simulate") rc = cmd_simulate(config, options, outputs, out);
    else if (command == "fit") rc = cmd_fit(config, options, outputs, out);
    else if (command == "image") rc = cmd_image(config, options, outputs, out);
    else if (command == "verify") rc = cmd_verify(config, options, outputs, out);
    else throw InputError("unknown command '" + command + "'");
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    captured << "error: " << e.what() << '\n';
    rc = 2;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    captured << "error: " << e.what() << '\n';
    rc = 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    captured << "error: " << e.what() << '\n';
    rc = 1;
  }

  json resolved = {{"command", command}, {"config", config.to_json()}};
  if (options.seed) resolved["seed"] = *options.seed;
  write_json(outputs.add("resolved_config.json"), resolved);

  std::vector<fs::path> files = outputs.files;
  std::sort(files.begin(), files.end());
  files.erase(std::unique(files.begin(), files.end()), files.end());
  json listing = json::array();
  for (const auto& f : files) {
    const fs::path full = options.out / f;
    if (!fs::exists(full)) continue;
    listing.push_back({{"path", f.generic_string()}, {"sha256", sha256_file(full)}, {"bytes", fs::file_size(full)}});
  }
  write_json(options.out / "manifest.json", {{"command", command}, {"exit_code", rc}, {"files", listing}});

  const auto t = std::chrono::system_clock::to_time_t(started);
  std::ofstream runlog(options.out / "run.log", std::ios::binary);
  runlog << "started " << std::put_time(std::gmtime(&t), "%Y-%m-%dT%H:%M:%SZ") << '\n'
         << "command " << command << '\n'
         << "threads " << (options.threads ? std::to_string(*options.threads) : "auto") << '\n'
         << captured.str() << "exit " << rc << '\n';
  return rc;
}

int main(int argc, char** argv) {
  CLI::App app{"nvnmr: NV-diamond nanoscale NMR spectroscopy and imaging"};
  app.require_subcommand(1);
  std::string config_path;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string out = "out";
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "Run configuration file");
  auto* seed_opt = app.add_option("--seed", seed, "RNG seed (overrides the file)");
  auto* threads_opt = app.add_option("--threads", threads, "Worker threads (default: all cores)");
  app.add_option("--out", out, "Output directory")->capture_default_str();
  app.add_option("--set", sets, "Override a config value: section.key=value");
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"simulate", "Forward-model contrast spectra"},
           {"fit", "Fit spectra (calibrate-depth, thickness, model-selection, gyromagnetic, t2star-bound, generic)"},
           {"image", "Wide-field imaging pipeline"},
           {"verify", "Cross-check the lineshape against the quadrature and Monte Carlo oracles"}}) {
    app.add_subcommand(name, help)->fallthrough();
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  Config cfg;
  try {
    if (!config_path.empty()) {
      cfg = load_config(config_path);
    } else if (command != "verify") {
      std::cerr << "error: --config is required for " << command << '\n';
      return 2;
    }
    for (const auto& s : sets) cfg.set(s);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  RunOptions options;
  options.out = out;
  if (*seed_opt) options.seed = seed;
  if (*threads_opt) {
    if (threads == 0) {
      std::cerr << "error: --threads must be >= 1\n";
      return 2;
    }
    options.threads = threads;
  }
  return run(command, cfg, options, std::cout, std::cerr);
}

}  // namespace nvnmr::cli
