#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "tcpdiff/datasets.hpp"

namespace tcpdiff::data {

/// Parametric storm generator. Rainfall is an axisymmetric exp(-d/lambda) vortex with
/// an eye, k rotating spiral bands and multiplicative small-scale noise, scaled by an
/// AR(1) intensity series with per-storm drift. Environment fields are rendered from
/// the same storm state; the forecast proxy is a bias-perturbed, smoothed rendering of
/// the true future state.
struct SynthConfig {
  GridSpec grid = GridSpec::desk();
  std::size_t n = 4;
  std::size_t m = 4;
  std::uint64_t seed = 7;

  double ar_coeff = 0.7;
  double drift_min = -2.0;   // m/s per 3-hour step
  double drift_max = 4.0;
  double intensity_min = 20.0;  // initial intensity range, m/s
  double intensity_max = 55.0;
  double intensity_noise = 0.8;

  double decay_length_cells = 8.0;
  int band_count = 2;
  double rotation_rate = 0.35;  // rad per step
  double band_amplitude = 0.35;
  double rain_per_intensity = 1.6;  // peak mm/3hr per m/s

  double nwp_smoothing_cells = 3.0;
  double nwp_bias = 0.15;

  double rain_noise = 0.05;  // relative, multiplicative
  double env_noise = 0.02;   // relative to each field's natural scale

  void validate() const;
  std::string to_json() const;
  static SynthConfig from_json(const std::string& text);

  /// Config whose decay length is scaled for the given grid (8 cells per 40).
  static SynthConfig for_grid(const GridSpec& grid);
};

/// Deterministic record `index` of the configured run; independent of generation order.
SampleRecord synthesize_sample(const SynthConfig& cfg, std::size_t index);

/// Generates `count` records (the first `train_count` form the training split) and
/// writes them to `dir`. The config is validated before anything is written.
/// `threads` > 1 generates records concurrently with identical results.
DatasetManifest generate_dataset(const SynthConfig& cfg, std::size_t count, const fs::path& dir,
                                 std::size_t train_count = 0, unsigned threads = 1);

/// Separable box-blur smoothing of each [H, W] plane, three passes of half-width r.
void smooth_field(std::span<float> field, std::size_t height, std::size_t width, std::size_t radius);

}  // namespace tcpdiff::data
