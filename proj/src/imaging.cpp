#include "nvnmr/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <png.h>

#include "nvnmr/parallel.hpp"
#include "nvnmr/rng.hpp"
#include "nvnmr/spectrum_io.hpp"

namespace nvnmr {

namespace fs = std::filesystem;
using nlohmann::json;

void FrameStack::validate() const {
  if (width == 0 || height == 0) throw ImagingError("frame stack: empty image dimensions");
  if (delays.empty()) throw ImagingError("frame stack: no delays");
  if (f1.size() != delays.size() || f2.size() != delays.size()) {
    throw ImagingError("frame stack: both phase channels are needed at every delay");
  }
  if (k < 1) throw ImagingError("frame stack: k must be >= 1");
  if (!(pixel_pitch > 0.0)) throw ImagingError("frame stack: pixel pitch must be > 0");
  std::set<double> seen;
  for (std::size_t d = 0; d < delays.size(); ++d) {
    if (!(delays[d] > 0.0) || !std::isfinite(delays[d])) throw ImagingError("frame stack: delays must be > 0");
    if (!seen.insert(delays[d]).second) throw ImagingError("frame stack: duplicate delay");
    for (const auto* ch : {&f1[d], &f2[d]}) {
      if (ch->size() != n_pixels()) {
        throw ImagingError("frame stack: frame " + std::to_string(d) + " has the wrong pixel count");
      }
      for (double c : *ch) {
        if (!(c >= 0.0) || !std::isfinite(c)) {
          throw ImagingError("frame stack: negative or non-finite counts at delay " + std::to_string(d));
        }
      }
    }
  }
  sensor.validate();
}

double contrast_from_counts(double f1, double f2) {
  const double total = f1 + f2;
  if (!(total > 0.0)) throw ImagingError("contrast_from_counts: zero total counts");
  return (f2 - f1) / total;
}

SpectrumGrid pixel_spectra(const FrameStack& stack, std::size_t bin) {
  stack.validate();
  if (bin < 1) throw ImagingError("pixel_spectra: bin must be >= 1");
  SpectrumGrid grid;
  grid.width = stack.width / bin;
  grid.height = stack.height / bin;
  if (grid.width == 0 || grid.height == 0) throw ImagingError("pixel_spectra: bin larger than the image");

  std::vector<std::size_t> order(stack.n_delays());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return stack.delays[a] > stack.delays[b]; });

  grid.spectra.resize(grid.width * grid.height);
  for (std::size_t gy = 0; gy < grid.height; ++gy) {
    for (std::size_t gx = 0; gx < grid.width; ++gx) {
      Spectrum& s = grid.spectra[gy * grid.width + gx];
      s.k = stack.k;
      s.sensor = stack.sensor;
      for (const std::size_t d : order) {
        double a = 0.0, b = 0.0;
        for (std::size_t y = gy * bin; y < (gy + 1) * bin; ++y) {
          for (std::size_t x = gx * bin; x < (gx + 1) * bin; ++x) {
            a += stack.f1[d][y * stack.width + x];
            b += stack.f2[d][y * stack.width + x];
          }
        }
        if (!(a + b > 0.0)) {
          throw ImagingError("pixel_spectra: zero counts at pixel (" + std::to_string(gx) + "," +
                             std::to_string(gy) + ") delay " + std::to_string(d));
        }
        s.nu_hz.push_back(0.5 / stack.delays[d]);
        s.contrast.push_back(contrast_from_counts(a, b));
      }
    }
  }
  return grid;
}

std::vector<double>& PixelMap::layer(const std::string& name) {
  const auto it = layers.find(name);
  if (it == layers.end()) throw ImagingError("pixel map has no layer '" + name + "'");
  return it->second;
}

const std::vector<double>& PixelMap::layer(const std::string& name) const {
  const auto it = layers.find(name);
  if (it == layers.end()) throw ImagingError("pixel map has no layer '" + name + "'");
  return it->second;
}

std::size_t PixelMap::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

namespace {

std::vector<std::string> dip_names(const SampleStack& stack) {
  std::vector<std::string> names;
  std::map<std::string, int> count;
  for (const auto& l : stack.layers) ++count[l.species.name];
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    const auto& n = stack.layers[i].species.name;
    names.push_back("dip_" + n + (count[n] > 1 ? "_" + std::to_string(i) : ""));
  }
  return names;
}

}  // namespace

PixelMap fit_map(const SpectrumGrid& spectra, const FitProblem& model, const MapOptions& options) {
  if (spectra.spectra.size() != spectra.width * spectra.height) {
    throw ImagingError("fit_map: grid dimensions do not match its spectra");
  }
  const std::size_t n = spectra.spectra.size();
  const std::vector<std::string> dips = dip_names(model.stack);
  std::vector<NuclearSpecies> species;
  {
    std::set<std::string> names;
    for (const auto& l : model.stack.layers) {
      if (names.insert(l.species.name).second) species.push_back(l.species);
    }
  }

  struct PixelOut {
    bool ok = false;
    std::string failure;
    std::vector<double> values, sigmas, dip;
    double rss = 0.0;
  };
  std::vector<PixelOut> out(n);
  parallel_for(n, options.threads, [&](std::size_t i) {
    PixelOut& po = out[i];
    try {
      Spectrum s = spectra.spectra[i];
      if (options.baseline) {
        s = baseline_correct(s, resonance_windows(s, species, options.window_bandwidths));
      }
      FitProblem p = model;
      p.spectra = {s};
      p.require_convergence = false;
      const FitResult r = fit_spectrum(p);
      if (!r.converged) {
        po.failure = r.message;
        return;
      }
      for (const auto& e : r.estimates) {
        po.values.push_back(e.value);
        po.sigmas.push_back(e.uncertainty);
      }
      po.rss = r.rss;
      for (const auto& layer : r.stack.layers) {
        const double nu_l = larmor_frequency(layer.species, r.sensors[0].b0) / kTwoPi;
        const double x = nu_l > 0.0 ? chi(layer, r.sensors[0], PulseSequence{s.k, 0.5 / nu_l}) : 0.0;
        po.dip.push_back(-std::expm1(-x));
      }
      po.ok = true;
    } catch (const std::exception& e) {
      po.failure = e.what();
    }
  }, 4);

  PixelMap map;
  map.width = spectra.width;
  map.height = spectra.height;
  map.valid.assign(n, 0);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& p : model.parameters) {
    map.layers[p.name].assign(n, nan);
    map.layers[p.name + "_sigma"].assign(n, nan);
  }
  for (const auto& d : dips) map.layers[d].assign(n, nan);
  map.layers["rss"].assign(n, nan);
  std::vector<std::pair<std::size_t, std::string>> detectors;  // parameter → dip layer
  for (std::size_t j = 0; j < model.parameters.size(); ++j) {
    const auto& b = model.parameters[j].bindings.front();
    if (b.target == FitTarget::density) {
      detectors.emplace_back(j, dips.at(b.index));
      map.layers["detected_" + model.parameters[j].name].assign(n, nan);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const PixelOut& po = out[i];
    if (!po.ok) {
      map.failures.push_back(std::to_string(i % map.width) + "," + std::to_string(i / map.width) + ": " +
                             po.failure);
      continue;
    }
    map.valid[i] = 1;
    for (std::size_t j = 0; j < model.parameters.size(); ++j) {
      map.layers[model.parameters[j].name][i] = po.values[j];
      map.layers[model.parameters[j].name + "_sigma"][i] = po.sigmas[j];
    }
    for (std::size_t j = 0; j < dips.size(); ++j) map.layers[dips[j]][i] = po.dip[j];
    map.layers["rss"][i] = po.rss;
    for (const auto& [j, dip] : detectors) {
      const double v = po.values[j];
      const double s = po.sigmas[j];
      const bool significant = s > 0.0 ? v >= options.detection_sigma * s : v > 0.0;
      const bool visible = map.layers[dip][i] >= options.min_dip;
      map.layers["detected_" + model.parameters[j].name][i] = significant && visible ? 1.0 : 0.0;
    }
  }
  return map;
}

std::vector<double> gaussian_blur(const std::vector<double>& values, std::size_t width, std::size_t height,
                                  const std::vector<std::uint8_t>& mask, double sigma) {
  if (!(sigma > 0.0)) throw ImagingError("gaussian_blur: width must be > 0");
  if (values.size() != width * height) throw ImagingError("gaussian_blur: grid size mismatch");
  const int radius = std::max(1, static_cast<int>(std::ceil(5.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  for (int j = -radius; j <= radius; ++j) kernel[j + radius] = std::exp(-0.5 * j * j / (sigma * sigma));

  const std::size_t n = values.size();
  std::vector<double> num(n, 0.0), den(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const bool ok = (mask.empty() || mask[i]) && std::isfinite(values[i]);
    num[i] = ok ? values[i] : 0.0;
    den[i] = ok ? 1.0 : 0.0;
  }
  auto pass = [&](std::vector<double>& a, bool along_x) {
    std::vector<double> tmp(n, 0.0);
    const auto W = static_cast<long>(width), H = static_cast<long>(height);
    for (long y = 0; y < H; ++y) {
      for (long x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int j = -radius; j <= radius; ++j) {
          const long xx = along_x ? x + j : x;
          const long yy = along_x ? y : y + j;
          if (xx < 0 || xx >= W || yy < 0 || yy >= H) continue;
          acc += kernel[j + radius] * a[static_cast<std::size_t>(yy * W + xx)];
        }
        tmp[static_cast<std::size_t>(y * W + x)] = acc;
      }
    }
    a.swap(tmp);
  };
  pass(num, true);
  pass(num, false);
  pass(den, true);
  pass(den, false);
  std::vector<double> out(n, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < n; ++i) {
    const bool ok = (mask.empty() || mask[i]) && std::isfinite(values[i]);
    if (ok && den[i] > 0.0) out[i] = num[i] / den[i];
  }
  return out;
}

PixelMap gaussian_blur(const PixelMap& map, double width_pixels, const BlurOptions& options) {
  if (!(width_pixels > 0.0)) throw ImagingError("gaussian_blur: width must be > 0");
  const double sigma = options.width_is_fwhm ? width_pixels / (2.0 * std::sqrt(2.0 * std::log(2.0)))
                                             : width_pixels;
  PixelMap out = map;
  for (auto& [name, grid] : out.layers) {
    if (name.rfind("detected_", 0) == 0) continue;
    grid = gaussian_blur(grid, map.width, map.height, map.valid, sigma);
  }
  return out;
}

void Scene::validate() const {
  if (width == 0 || height == 0) throw ImagingError("scene: dimensions must be set");
  if (region.size() != width * height) throw ImagingError("scene: region map size mismatch");
  if (stacks.empty()) throw ImagingError("scene: no region stacks");
  for (auto r : region) {
    if (r >= stacks.size()) throw ImagingError("scene: region index without a stack");
  }
  for (const auto& s : stacks) s.validate();
  sensor.validate();
  if (k < 1) throw ImagingError("scene: k must be >= 1");
  if (nu_hz.empty()) throw ImagingError("scene: empty frequency sweep");
}

FrameStack synthesize_scene(const Scene& scene, const NoiseModel& noise, unsigned threads) {
  scene.validate();
  if (!(noise.counts > 0.0)) throw ImagingError("noise model: counts must be > 0");
  if (!(noise.visibility >= 0.0 && noise.visibility <= 1.0)) {
    throw ImagingError("noise model: visibility must lie in [0, 1]");
  }
  std::vector<std::vector<double>> contrast;
  for (const auto& st : scene.stacks) contrast.push_back(model_contrast(st, scene.sensor, scene.k, scene.nu_hz));

  FrameStack fs;
  fs.width = scene.width;
  fs.height = scene.height;
  fs.pixel_pitch = scene.pixel_pitch;
  fs.k = scene.k;
  fs.sensor = scene.sensor;
  const std::size_t nd = scene.nu_hz.size();
  for (double nu : scene.nu_hz) fs.delays.push_back(0.5 / nu);
  fs.f1.assign(nd, std::vector<double>(fs.n_pixels()));
  fs.f2.assign(nd, std::vector<double>(fs.n_pixels()));

  parallel_for(fs.n_pixels(), threads, [&](std::size_t p) {
    std::mt19937_64 eng(splitmix64(noise.seed + p));
    std::normal_distribution<double> normal;
    const auto& c = contrast[scene.region[p]];
    for (std::size_t d = 0; d < nd; ++d) {
      const double m1 = noise.counts * (1.0 - noise.visibility * c[d]);
      const double m2 = noise.counts * (1.0 + noise.visibility * c[d]);
      double a = m1, b = m2;
      switch (noise.kind) {
        case NoiseKind::none: break;
        case NoiseKind::poisson:
          a = static_cast<double>(std::poisson_distribution<long long>(m1)(eng));
          b = static_cast<double>(std::poisson_distribution<long long>(m2)(eng));
          break;
        case NoiseKind::gaussian:
          a = std::max(0.0, m1 + std::sqrt(m1) * normal(eng));
          b = std::max(0.0, m2 + std::sqrt(m2) * normal(eng));
          break;
      }
      fs.f1[d][p] = a;
      fs.f2[d][p] = b;
    }
  }, 64);
  return fs;
}

Scene corner_mask_scene(const CornerMaskOptions& o) {
  Scene scene;
  scene.width = o.width;
  scene.height = o.height;
  scene.sensor = {o.depth, o.b0};
  scene.k = o.k;
  scene.pixel_pitch = 1e-6;
  const double tp = o.proton_thickness;
  const SampleLayer protons{species::proton(o.proton_density), 0.0, tp};
  scene.stacks = {
      SampleStack{{protons, SampleLayer{species::fluorine(o.fluorine_density), tp, tp + o.fluorine_thickness}}},
      SampleStack{{protons, SampleLayer{species::fluorine(o.fluorine_density), tp + o.mask_offset,
                                        tp + o.mask_offset + o.fluorine_thickness}}}};
  const auto mw = static_cast<std::size_t>(std::lround(o.mask_fraction * static_cast<double>(o.width)));
  const auto mh = static_cast<std::size_t>(std::lround(o.mask_fraction * static_cast<double>(o.height)));
  scene.region.assign(o.width * o.height, 0);
  for (std::size_t y = 0; y < std::min(mh, o.height); ++y) {
    for (std::size_t x = 0; x < std::min(mw, o.width); ++x) scene.region[y * o.width + x] = 1;
  }
  for (const auto& pt : frequency_sweep(o.k, o.nu_min, o.nu_max, o.n_points)) {
    scene.nu_hz.push_back(filter_center_frequency(pt));
  }
  return scene;
}

FitProblem corner_mask_template(const CornerMaskOptions& o) {
  FitProblem p;
  const double tp = o.proton_thickness;
  p.stack.layers = {SampleLayer{species::proton(0.5 * o.proton_density), 0.0, tp},
                    SampleLayer{species::fluorine(0.5 * o.fluorine_density), tp, tp + o.fluorine_thickness}};
  const double upper = 200.0 * units::per_nm3;
  p.parameters = {{"rho_h", 0.5 * o.proton_density, 0.0, upper, {{FitTarget::density, 0}}},
                  {"rho_f", 0.5 * o.fluorine_density, 0.0, upper, {{FitTarget::density, 1}}}};
  return p;
}

// ---------------------------------------------------------------------------
// I/O

namespace {

void write_pgm16(const fs::path& path, const std::vector<double>& counts, std::size_t w, std::size_t h) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImagingError("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n65535\n";
  std::vector<unsigned char> buf(2 * counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double r = std::round(counts[i]);
    if (!(r >= 0.0 && r <= 65535.0)) {
      throw ImagingError(path.string() + ": count " + std::to_string(counts[i]) + " does not fit 16 bits");
    }
    const auto v = static_cast<std::uint16_t>(r);
    buf[2 * i] = static_cast<unsigned char>(v >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(v & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

std::vector<double> read_pgm(const fs::path& path, std::size_t w, std::size_t h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImagingError("missing frame " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  try {
    if (token() != "P5") throw ImagingError("not a binary PGM (P5)");
    const std::size_t fw = std::stoul(token());
    const std::size_t fh = std::stoul(token());
    const unsigned long maxval = std::stoul(token());
    if (fw != w || fh != h) {
      throw ImagingError("frame is " + std::to_string(fw) + "x" + std::to_string(fh) + ", manifest says " +
                         std::to_string(w) + "x" + std::to_string(h));
    }
    if (maxval == 0 || maxval > 65535) throw ImagingError("bad maxval");
    const std::size_t bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(bytes * w * h);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw ImagingError("truncated pixel data");
    std::vector<double> counts(w * h);
    for (std::size_t i = 0; i < counts.size(); ++i) {
      counts[i] = bytes == 2 ? static_cast<double>((buf[2 * i] << 8) | buf[2 * i + 1]) : buf[i];
    }
    return counts;
  } catch (const ImagingError& e) {
    throw ImagingError(path.string() + ": " + e.what());
  } catch (const std::logic_error&) {
    throw ImagingError(path.string() + ": malformed PGM header");
  }
}

std::string frame_name(std::size_t d, int channel) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "delay_%04zu_f%d.pgm", d, channel);
  return buf;
}

}  // namespace

std::vector<fs::path> write_frame_stack(const FrameStack& stack, const fs::path& dir) {
  stack.validate();
  fs::create_directories(dir);
  std::vector<fs::path> written;
  json delays = json::array();
  for (std::size_t d = 0; d < stack.n_delays(); ++d) {
    const auto n1 = frame_name(d, 1), n2 = frame_name(d, 2);
    write_pgm16(dir / n1, stack.f1[d], stack.width, stack.height);
    write_pgm16(dir / n2, stack.f2[d], stack.width, stack.height);
    written.push_back(dir / n1);
    written.push_back(dir / n2);
    delays.push_back({{"index", d}, {"tau_s", stack.delays[d]}, {"f1", n1}, {"f2", n2}});
  }
  const json manifest = {{"format", "nvnmr-frames/1"},
                         {"width", stack.width},
                         {"height", stack.height},
                         {"pixel_pitch_m", stack.pixel_pitch},
                         {"sequence", {{"family", "XY8"}, {"k", stack.k}}},
                         {"sensor", to_json(stack.sensor)},
                         {"phases", {{"f1", "final pi/2 pulse phase 0"}, {"f2", "final pi/2 pulse phase 180"}}},
                         {"delays", delays}};
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw ImagingError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
  written.push_back(dir / "manifest.json");
  return written;
}

FrameStack read_frame_stack(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream in(mpath, std::ios::binary);
  if (!in) throw ImagingError("frame stack: missing " + mpath.string());
  FrameStack stack;
  json m;
  try {
    m = json::parse(in);
    stack.width = m.at("width").get<std::size_t>();
    stack.height = m.at("height").get<std::size_t>();
    stack.pixel_pitch = m.at("pixel_pitch_m").get<double>();
    stack.k = m.at("sequence").at("k").get<int>();
    stack.sensor = sensor_from_json(m.at("sensor"));
    for (const auto& d : m.at("delays")) {
      stack.delays.push_back(d.at("tau_s").get<double>());
      stack.f1.push_back(read_pgm(dir / d.at("f1").get<std::string>(), stack.width, stack.height));
      stack.f2.push_back(read_pgm(dir / d.at("f2").get<std::string>(), stack.width, stack.height));
    }
  } catch (const json::exception& e) {
    throw ImagingError(mpath.string() + ": malformed manifest: " + e.what());
  }
  try {
    stack.validate();
  } catch (const std::exception& e) {
    throw ImagingError(mpath.string() + ": " + e.what());
  }
  return stack;
}

std::vector<fs::path> write_pixel_map(const PixelMap& map, const fs::path& dir, const json& metadata) {
  fs::create_directories(dir);
  std::vector<fs::path> written;
  auto write_grid = [&](const std::string& name, auto get) {
    const fs::path p = dir / (name + ".csv");
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ImagingError("cannot write " + p.string());
    for (std::size_t y = 0; y < map.height; ++y) {
      for (std::size_t x = 0; x < map.width; ++x) {
        if (x) out << ',';
        const double v = get(y * map.width + x);
        out << (std::isfinite(v) ? format_double(v) : std::string("nan"));
      }
      out << '\n';
    }
    written.push_back(p);
  };
  json names = json::array();
  for (const auto& [name, grid] : map.layers) {
    write_grid(name, [&](std::size_t i) { return grid[i]; });
    names.push_back(name);
  }
  write_grid("valid", [&](std::size_t i) { return static_cast<double>(map.valid[i]); });
  const json meta = {{"format", "nvnmr-pixelmap/1"},
                     {"width", map.width},
                     {"height", map.height},
                     {"layers", names},
                     {"valid_pixels", map.valid_count()},
                     {"failures", map.failures},
                     {"metadata", metadata}};
  const fs::path mp = dir / "map.json";
  std::ofstream out(mp, std::ios::binary);
  if (!out) throw ImagingError("cannot write " + mp.string());
  out << meta.dump(2) << '\n';
  written.push_back(mp);
  return written;
}

void write_heatmap_png(const std::vector<double>& values, std::size_t width, std::size_t height, double vmax,
                       const fs::path& path, int scale) {
  if (values.size() != width * height) throw ImagingError("heat map: grid size mismatch");
  if (!(vmax > 0.0)) throw ImagingError("heat map: vmax must be > 0");
  if (scale < 1) throw ImagingError("heat map: scale must be >= 1");
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw ImagingError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw ImagingError("libpng failed writing " + path.string());
  }
  const auto W = static_cast<png_uint_32>(width * static_cast<std::size_t>(scale));
  const auto H = static_cast<png_uint_32>(height * static_cast<std::size_t>(scale));
  png_init_io(png, fp);
  png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(3 * static_cast<std::size_t>(W));
  for (png_uint_32 py = 0; py < H; ++py) {
    const std::size_t y = py / static_cast<png_uint_32>(scale);
    for (png_uint_32 px = 0; px < W; ++px) {
      const double v = values[y * width + px / static_cast<png_uint_32>(scale)];
      png_byte r = 128, g = 128, b = 128;
      if (std::isfinite(v)) {
        const double t = std::clamp(v / vmax, 0.0, 1.0);
        if (t < 0.5) {
          r = 255;
          g = b = static_cast<png_byte>(std::lround(510.0 * t));
        } else {
          r = g = static_cast<png_byte>(std::lround(255.0 - 510.0 * (t - 0.5)));
          b = 255;
        }
      }
      row[3 * px] = r;
      row[3 * px + 1] = g;
      row[3 * px + 2] = b;
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace nvnmr
