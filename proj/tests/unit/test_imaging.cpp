#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "nvnmr/imaging.hpp"

using namespace nvnmr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "nvnmr-unit-imaging" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Scene uniform_scene(std::size_t w, std::size_t h, const SampleStack& stack) {
  Scene s;
  s.width = w;
  s.height = h;
  s.region.assign(w * h, 0);
  s.stacks = {stack};
  s.sensor = {10e-9, 0.02};
  s.k = 10;
  for (int i = 0; i < 31; ++i) s.nu_hz.push_back(740e3 + 6e3 * i);
  return s;
}

SampleStack pfos() {
  return {{{species::proton(60 * units::per_nm3), 0.0, 1e-9}, {species::fluorine(20 * units::per_nm3), 1e-9, 31e-9}}};
}

}  // namespace

TEST_CASE("contrast from counts") {
  CHECK(contrast_from_counts(5.0, 5.0) == 0.0);
  CHECK(contrast_from_counts(0.0, 3.0) == 1.0);
  CHECK(contrast_from_counts(450.0, 550.0) == doctest::Approx(0.1));
  CHECK_THROWS_AS(contrast_from_counts(0.0, 0.0), ImagingError);
}

TEST_CASE("noiseless synthesis recovers the forward model") {
  const Scene scene = uniform_scene(3, 2, pfos());
  const auto frames = synthesize_scene(scene, {NoiseKind::none, 1e4, 1.0, 1});
  const auto grid = pixel_spectra(frames);
  std::vector<PulseSequence> sweep;
  for (double nu : scene.nu_hz) sweep.push_back({scene.k, 0.5 / nu});
  const auto model = contrast_spectrum(scene.stacks[0], scene.sensor, sweep);
  REQUIRE(grid.spectra.size() == 6);
  for (const auto& s : grid.spectra) {
    REQUIRE(s.size() == model.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(s.nu_hz[i] == doctest::Approx(model.nu_hz[i]).epsilon(1e-14));
      CHECK(s.contrast[i] == doctest::Approx(model.contrast[i]).epsilon(1e-14));
    }
    CHECK(s.contrast == grid.spectra[0].contrast);
  }
}

TEST_CASE("poisson contrast noise") {
  const Scene scene = uniform_scene(40, 40, {});
  const auto frames = synthesize_scene(scene, {NoiseKind::poisson, 1e4, 0.0, 9});
  const auto grid = pixel_spectra(frames);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& s : grid.spectra) {
    for (double c : s.contrast) {
      sum += c;
      sq += c * c;
      ++n;
    }
  }
  const double mean = sum / n;
  const double sigma = std::sqrt(sq / n - mean * mean);
  CHECK(sigma == doctest::Approx(1 / std::sqrt(2e4)).epsilon(0.1));
}

TEST_CASE("synthesis is deterministic and thread independent") {
  const Scene scene = uniform_scene(8, 8, pfos());
  const auto a = synthesize_scene(scene, {NoiseKind::poisson, 3e4, 0.3, 4}, 1);
  const auto b = synthesize_scene(scene, {NoiseKind::poisson, 3e4, 0.3, 4}, 4);
  CHECK(a.f1 == b.f1);
  CHECK(a.f2 == b.f2);
}

TEST_CASE("frame stack file round trip") {
  const Scene scene = uniform_scene(5, 4, pfos());
  const auto frames = synthesize_scene(scene, {NoiseKind::poisson, 3e4, 0.3, 2});
  const fs::path dir = scratch("frames");
  const auto files = write_frame_stack(frames, dir);
  CHECK(files.size() == 2 * scene.nu_hz.size() + 1);
  const auto back = read_frame_stack(dir);
  CHECK(back.width == 5);
  CHECK(back.height == 4);
  CHECK(back.delays == frames.delays);
  CHECK(back.f1 == frames.f1);
  CHECK(back.f2 == frames.f2);
  CHECK(back.k == frames.k);
  CHECK(back.sensor.d_nv == frames.sensor.d_nv);

  SUBCASE("truncated frame is named") {
    const fs::path victim = dir / "delay_0003_f2.pgm";
    fs::resize_file(victim, fs::file_size(victim) - 7);
    try {
      read_frame_stack(dir);
      FAIL("expected an error");
    } catch (const ImagingError& e) {
      CHECK(std::string(e.what()).find("delay_0003_f2.pgm") != std::string::npos);
    }
  }
  SUBCASE("missing channel") {
    fs::remove(dir / "delay_0001_f1.pgm");
    CHECK_THROWS_WITH_AS(read_frame_stack(dir), doctest::Contains("delay_0001_f1.pgm"), ImagingError);
  }
  SUBCASE("counts too large for 16 bits") {
    FrameStack big = frames;
    big.f1[0][0] = 70000;
    CHECK_THROWS_AS(write_frame_stack(big, scratch("big")), ImagingError);
  }
}

TEST_CASE("delay order does not matter") {
  const Scene scene = uniform_scene(2, 2, pfos());
  const auto frames = synthesize_scene(scene, {NoiseKind::poisson, 3e4, 0.3, 5});
  FrameStack shuffled = frames;
  const std::size_t n = frames.n_delays();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = (7 * i + 3) % n;
    shuffled.delays[i] = frames.delays[j];
    shuffled.f1[i] = frames.f1[j];
    shuffled.f2[i] = frames.f2[j];
  }
  const auto a = pixel_spectra(frames);
  const auto b = pixel_spectra(shuffled);
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(a.spectra[p].nu_hz == b.spectra[p].nu_hz);
    CHECK(a.spectra[p].contrast == b.spectra[p].contrast);
  }
}

TEST_CASE("binning") {
  const Scene scene = uniform_scene(5, 4, pfos());
  const auto frames = synthesize_scene(scene, {NoiseKind::poisson, 3e4, 0.3, 2});
  const auto g = pixel_spectra(frames, 2);
  CHECK(g.width == 2);
  CHECK(g.height == 2);
  double a = 0, b = 0;
  for (std::size_t y = 0; y < 2; ++y) {
    for (std::size_t x = 0; x < 2; ++x) {
      a += frames.f1[0][y * 5 + x];
      b += frames.f2[0][y * 5 + x];
    }
  }
  const auto& s = g.at(0, 0);
  const std::size_t last = frames.n_delays() - 1;  // largest τ is the lowest ν
  CHECK(frames.delays[0] > frames.delays[last]);
  CHECK(s.contrast[0] == doctest::Approx(contrast_from_counts(a, b)));
}

TEST_CASE("corner mask scene end to end") {
  CornerMaskOptions o;
  o.width = 16;
  o.height = 16;
  const Scene scene = corner_mask_scene(o);
  CHECK(std::count(scene.region.begin(), scene.region.end(), 1) == 64);
  CHECK(scene.region[0] == 1);
  CHECK(scene.region[15] == 0);
  const auto frames = synthesize_scene(scene, {}, 0);
  const auto map = fit_map(pixel_spectra(frames), corner_mask_template(o));
  CHECK(map.valid_count() == 256);
  const auto& f = map.layer("detected_rho_f");
  const auto& h = map.layer("detected_rho_h");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < f.size(); ++i) correct += (f[i] == 1.0) == (scene.region[i] == 0);
  CHECK(correct >= 254);
  CHECK(std::count(h.begin(), h.end(), 1.0) == 256);

  SUBCASE("parallel fit is identical") {
    MapOptions one;
    one.threads = 1;
    const auto serial = fit_map(pixel_spectra(frames), corner_mask_template(o), one);
    for (const auto& [name, values] : map.layers) {
      const auto& other = serial.layer(name);
      for (std::size_t i = 0; i < values.size(); ++i) {
        CHECK(((std::isnan(values[i]) && std::isnan(other[i])) || values[i] == other[i]));
      }
    }
  }
}

TEST_CASE("identical pixels give identical fits") {
  Scene scene = uniform_scene(4, 4, pfos());
  const auto frames = synthesize_scene(scene, {NoiseKind::none, 3e4, 0.3, 1});
  CornerMaskOptions o;
  o.nu_min = 740e3;
  o.nu_max = 920e3;
  const auto map = fit_map(pixel_spectra(frames), corner_mask_template(o));
  for (const auto& [name, values] : map.layers) {
    for (double v : values) CHECK(((std::isnan(v) && std::isnan(values[0])) || v == values[0]));
  }
}

TEST_CASE("background scene has no detections") {
  Scene scene = uniform_scene(4, 4, {});
  const auto frames = synthesize_scene(scene, {NoiseKind::poisson, 3e4, 0.3, 3});
  const auto map = fit_map(pixel_spectra(frames), corner_mask_template());
  for (const char* name : {"detected_rho_f", "detected_rho_h"}) {
    const auto& d = map.layer(name);
    CHECK(std::count(d.begin(), d.end(), 1.0) == 0);
  }
}

TEST_CASE("single pixel matches the scalar fit") {
  Scene scene = uniform_scene(1, 1, pfos());
  const auto frames = synthesize_scene(scene, {NoiseKind::poisson, 3e4, 0.3, 8});
  const auto grid = pixel_spectra(frames);
  MapOptions mo;
  mo.baseline = false;
  FitProblem tmpl = corner_mask_template();
  const auto map = fit_map(grid, tmpl, mo);
  tmpl.spectra = {grid.spectra[0]};
  const auto r = fit_spectrum(tmpl);
  CHECK(map.layer("rho_f")[0] == r.value("rho_f"));
  CHECK(map.layer("rho_h")[0] == r.value("rho_h"));
}

TEST_CASE("gaussian blur") {
  const std::size_t w = 41, h = 41;
  SUBCASE("impulse") {
    std::vector<double> img(w * h, 0.0);
    img[20 * w + 20] = 1.0;
    const double sigma = 2.0;
    const auto b = gaussian_blur(img, w, h, {}, sigma);
    CHECK(std::accumulate(b.begin(), b.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    const double g0 = 1 / (2 * M_PI * sigma * sigma);
    CHECK(b[20 * w + 20] / b[20 * w + 23] == doctest::Approx(std::exp(9 / (2 * sigma * sigma))).epsilon(0.02));
    CHECK(b[20 * w + 20] == doctest::Approx(g0).epsilon(0.02));
  }
  SUBCASE("tiny width is the identity") {
    std::vector<double> img(w * h);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::sin(0.3 * i);
    const auto b = gaussian_blur(img, w, h, {}, 0.05);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(b[i] == doctest::Approx(img[i]).scale(1e-6).epsilon(1e-6));
  }
  SUBCASE("step edge follows the erf profile") {
    std::vector<double> img(w * h);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) img[y * w + x] = x >= 20 ? 1.0 : 0.0;
    }
    PixelMap m;
    m.width = w;
    m.height = h;
    m.valid.assign(w * h, 1);
    m.layers["v"] = img;
    const auto b = gaussian_blur(m, 3.0).layer("v");
    // 10–90% distance of a blurred step is 2·1.2816·σ, σ = 3/2.3548
    auto crossing = [&](double level) {
      for (std::size_t x = 1; x < w; ++x) {
        const double a = b[20 * w + x - 1], c = b[20 * w + x];
        if (a < level && c >= level) return (x - 1) + (level - a) / (c - a);
      }
      return -1.0;
    };
    const double sigma = 3.0 / (2 * std::sqrt(2 * std::log(2.0)));
    CHECK(crossing(0.9) - crossing(0.1) == doctest::Approx(2 * 1.2815515655 * sigma).epsilon(0.05));
  }
  SUBCASE("mean is conserved in the interior") {
    std::vector<double> img(w * h);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = (i * 2654435761u % 1000) / 1000.0;
    std::vector<double> periodic(w * h);
    const auto b = gaussian_blur(img, w, h, {}, 1.0);
    double before = 0, after = 0;
    int n = 0;
    for (std::size_t y = 8; y < h - 8; ++y) {
      for (std::size_t x = 8; x < w - 8; ++x) {
        before += img[y * w + x];
        after += b[y * w + x];
        ++n;
      }
    }
    CHECK(after / n == doctest::Approx(before / n).epsilon(0.01));
    const std::vector<double> flat(w * h, 0.37);
    for (double v : gaussian_blur(flat, w, h, {}, 2.5)) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  }
  SUBCASE("masked pixels") {
    std::vector<double> img(w * h, 2.0);
    std::vector<std::uint8_t> mask(w * h, 1);
    img[5] = std::nan("");
    mask[5] = 0;
    const auto b = gaussian_blur(img, w, h, mask, 2.0);
    CHECK(std::isnan(b[5]));
    CHECK(b[6] == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("invalid width") {
    PixelMap m;
    m.width = 1;
    m.height = 1;
    m.valid = {1};
    m.layers["v"] = {1.0};
    CHECK_THROWS_AS(gaussian_blur(m, 0.0), ImagingError);
    CHECK_THROWS_AS(gaussian_blur(m, -1.0), ImagingError);
  }
}

TEST_CASE("map export") {
  PixelMap m;
  m.width = 3;
  m.height = 2;
  m.valid = {1, 1, 0, 1, 1, 1};
  m.layers["dip_19F"] = {0.0, 0.1, std::nan(""), 0.3, 0.4, 0.5};
  const fs::path dir = scratch("map");
  const auto files = write_pixel_map(m, dir, {{"note", "x"}});
  CHECK(fs::exists(dir / "dip_19F.csv"));
  CHECK(fs::exists(dir / "valid.csv"));
  CHECK(fs::exists(dir / "map.json"));
  CHECK(files.size() == 3);
  std::ifstream in(dir / "dip_19F.csv");
  std::string first;
  std::getline(in, first);
  CHECK(first == "0,0.1,nan");
  write_heatmap_png(m.layer("dip_19F"), 3, 2, 0.5, dir / "dip.png", 2);
  std::ifstream png(dir / "dip.png", std::ios::binary);
  char sig[8];
  png.read(sig, 8);
  CHECK(std::string(sig + 1, 3) == "PNG");
}
