#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nvnmr/fitting.hpp"

namespace nvnmr {

class ImagingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Photon counts for the two phase channels at every delay, row-major
/// height × width per frame.
struct FrameStack {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> delays;  // τ per delay index, s
  std::vector<std::vector<double>> f1, f2;
  double pixel_pitch = 1e-6;   // m
  int k = 1;
  SensorConfig sensor;

  std::size_t n_delays() const { return delays.size(); }
  std::size_t n_pixels() const { return width * height; }
  void validate() const;
};

/// (f2 − f1)/(f2 + f1).
double contrast_from_counts(double f1, double f2);

struct SpectrumGrid {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Spectrum> spectra;  // row-major

  const Spectrum& at(std::size_t x, std::size_t y) const { return spectra[y * width + x]; }
};

/// Per-pixel contrast spectra, ν = 1/(2τ), sorted by frequency. Counts are
/// summed over bin × bin blocks first; edge blocks that do not fill a whole
/// bin are dropped.
SpectrumGrid pixel_spectra(const FrameStack& stack, std::size_t bin = 1);

struct PixelMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::map<std::string, std::vector<double>> layers;  // named quantity grids, NaN where invalid
  std::vector<std::uint8_t> valid;                    // 1 where the pixel fit converged
  std::vector<std::string> failures;                  // "x,y: message" for masked pixels

  std::vector<double>& layer(const std::string& name);
  const std::vector<double>& layer(const std::string& name) const;
  std::size_t valid_count() const;
};

struct MapOptions {
  unsigned threads = 0;
  bool baseline = true;               // baseline_correct each pixel first
  double window_bandwidths = 3.0;     // resonance windows for the baseline
  double detection_sigma = 5.0;       // density/σ needed to count as detected
  double min_dip = 0.02;              // and a dip at least this deep
};

/// Fits every pixel with `model` (its `spectra` are ignored and replaced by
/// the pixel spectrum). Layers: each parameter and "<name>_sigma", "rss",
/// "dip_<species>" (1 − e^{−χ} at that layer's Larmor frequency) and
/// "detected_<name>" (0/1) for every density parameter.
PixelMap fit_map(const SpectrumGrid& spectra, const FitProblem& model, const MapOptions& options = {});

struct BlurOptions {
  bool width_is_fwhm = true;  // false: width is σ
};

/// Masked Gaussian blur of every non-"detected_" layer; weights renormalized
/// over valid pixels. Invalid pixels stay NaN.
PixelMap gaussian_blur(const PixelMap& map, double width_pixels, const BlurOptions& options = {});

/// Same, on a single grid with an explicit mask (empty mask = all valid).
std::vector<double> gaussian_blur(const std::vector<double>& values, std::size_t width, std::size_t height,
                                  const std::vector<std::uint8_t>& mask, double sigma_pixels);

enum class NoiseKind { none, poisson, gaussian };

struct NoiseModel {
  NoiseKind kind = NoiseKind::poisson;
  double counts = 3e4;      // mean counts per pixel per phase channel per delay
  double visibility = 0.3;  // f1,2 = counts·(1 ∓ visibility·C)
  std::uint64_t seed = 1;
};

struct Scene {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> region;  // index into stacks, row-major
  std::vector<SampleStack> stacks;
  SensorConfig sensor;
  int k = 10;
  std::vector<double> nu_hz;
  double pixel_pitch = 1e-6;

  void validate() const;
};

FrameStack synthesize_scene(const Scene& scene, const NoiseModel& noise, unsigned threads = 0);

struct CornerMaskOptions {
  std::size_t width = 64;
  std::size_t height = 64;
  double mask_fraction = 0.5;       // masked corner spans this share of each side
  double mask_offset = 90e-9;       // fluorine pushed away under the mask
  double proton_thickness = 1e-9;   // ubiquitous surface layer
  double proton_density = 60.0 * units::per_nm3;
  double fluorine_thickness = 30e-9;
  double fluorine_density = 20.0 * units::per_nm3;
  double depth = 10e-9;
  double b0 = 0.02;
  int k = 10;
  double nu_min = 740e3;
  double nu_max = 920e3;
  std::size_t n_points = 61;
};

/// Two-region scene: region 0 bare (¹H surface layer + ¹⁹F on top), region 1
/// the masked top-left corner with the ¹⁹F layer offset by mask_offset.
Scene corner_mask_scene(const CornerMaskOptions& options = {});

/// Per-pixel fit template matching corner_mask_scene: free ¹H and ¹⁹F
/// densities ("rho_h", "rho_f") at the bare-region geometry, depth known.
FitProblem corner_mask_template(const CornerMaskOptions& options = {});

// I/O

/// Writes delay_NNNN_f1.pgm / delay_NNNN_f2.pgm (16-bit P5) and manifest.json.
/// Counts are rounded to integers and must lie in [0, 65535].
std::vector<std::filesystem::path> write_frame_stack(const FrameStack& stack, const std::filesystem::path& dir);
FrameStack read_frame_stack(const std::filesystem::path& dir);

/// One CSV per layer plus valid.csv and map.json. Returns the files written.
std::vector<std::filesystem::path> write_pixel_map(const PixelMap& map, const std::filesystem::path& dir,
                                                   const nlohmann::json& metadata = {});

/// Heat map of dip depth: 0 (no dip) red, mid white, vmax (deep dip) blue,
/// invalid pixels grey. Each grid pixel becomes scale × scale image pixels.
void write_heatmap_png(const std::vector<double>& values, std::size_t width, std::size_t height,
                       double vmax, const std::filesystem::path& path, int scale = 4);

}  // namespace nvnmr
