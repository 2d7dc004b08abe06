#include "tcpdiff/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "json.hpp"
#include "tcpdiff/error.hpp"
#include "tcpdiff/io.hpp"
#include "tcpdiff/parallel.hpp"
#include "tcpdiff/rng.hpp"

namespace tcpdiff::data {

using nlohmann::json;

void SynthConfig::validate() const {
  grid.validate();
  if (n < 1 || m < 1) throw ConfigError("n and m must be at least 1");
  if (!(ar_coeff > 0.0 && ar_coeff < 1.0)) throw ConfigError("AR(1) coefficient must lie in (0, 1)");
  if (drift_min > drift_max) throw ConfigError("drift range is inverted");
  if (!(intensity_min > 0.0) || intensity_min > intensity_max) throw ConfigError("invalid intensity range");
  if (!(decay_length_cells > 0.0)) throw ConfigError("decay length must be positive");
  if (band_count < 0) throw ConfigError("band count must be nonnegative");
  if (nwp_smoothing_cells < 1.0) throw ConfigError("forecast-proxy smoothing width must be at least 1 cell");
  if (nwp_bias < 0.0 || nwp_bias >= 1.0) throw ConfigError("forecast-proxy bias factor must lie in [0, 1)");
  for (double a : {intensity_noise, band_amplitude, rain_per_intensity, rain_noise, env_noise})
    if (!(a >= 0.0)) throw ConfigError("amplitudes must be nonnegative");
  if (band_amplitude >= 1.0) throw ConfigError("band amplitude must be below 1 to keep rainfall nonnegative");
}

std::string SynthConfig::to_json() const {
  json j{{"grid", {{"height", grid.height}, {"width", grid.width}, {"cell_size_deg", grid.cell_size_deg}}},
         {"n", n},
         {"m", m},
         {"seed", seed},
         {"ar_coeff", ar_coeff},
         {"drift_min", drift_min},
         {"drift_max", drift_max},
         {"intensity_min", intensity_min},
         {"intensity_max", intensity_max},
         {"intensity_noise", intensity_noise},
         {"decay_length_cells", decay_length_cells},
         {"band_count", band_count},
         {"rotation_rate", rotation_rate},
         {"band_amplitude", band_amplitude},
         {"rain_per_intensity", rain_per_intensity},
         {"nwp_smoothing_cells", nwp_smoothing_cells},
         {"nwp_bias", nwp_bias},
         {"rain_noise", rain_noise},
         {"env_noise", env_noise}};
  return j.dump();
}

SynthConfig SynthConfig::from_json(const std::string& text) {
  SynthConfig c;
  const json j = json::parse(text);
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    c.grid = {g.value("height", c.grid.height), g.value("width", c.grid.width),
              g.value("cell_size_deg", c.grid.cell_size_deg)};
  }
  c.n = j.value("n", c.n);
  c.m = j.value("m", c.m);
  c.seed = j.value("seed", c.seed);
  c.ar_coeff = j.value("ar_coeff", c.ar_coeff);
  c.drift_min = j.value("drift_min", c.drift_min);
  c.drift_max = j.value("drift_max", c.drift_max);
  c.intensity_min = j.value("intensity_min", c.intensity_min);
  c.intensity_max = j.value("intensity_max", c.intensity_max);
  c.intensity_noise = j.value("intensity_noise", c.intensity_noise);
  c.decay_length_cells = j.value("decay_length_cells", c.decay_length_cells);
  c.band_count = j.value("band_count", c.band_count);
  c.rotation_rate = j.value("rotation_rate", c.rotation_rate);
  c.band_amplitude = j.value("band_amplitude", c.band_amplitude);
  c.rain_per_intensity = j.value("rain_per_intensity", c.rain_per_intensity);
  c.nwp_smoothing_cells = j.value("nwp_smoothing_cells", c.nwp_smoothing_cells);
  c.nwp_bias = j.value("nwp_bias", c.nwp_bias);
  c.rain_noise = j.value("rain_noise", c.rain_noise);
  c.env_noise = j.value("env_noise", c.env_noise);
  return c;
}

SynthConfig SynthConfig::for_grid(const GridSpec& grid) {
  SynthConfig c;
  c.grid = grid;
  const double scale = static_cast<double>(grid.height) / 40.0;
  c.decay_length_cells *= scale;
  c.nwp_smoothing_cells = std::max(1.0, std::round(c.nwp_smoothing_cells * scale));
  return c;
}

void smooth_field(std::span<float> field, std::size_t height, std::size_t width, std::size_t radius) {
  if (radius == 0) return;
  std::vector<double> tmp(field.size());
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const auto h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);
  for (int pass = 0; pass < 3; ++pass) {
    // Rows, clamped edges.
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t k = -r; k <= r; ++k) s += field[y * w + std::clamp(x + k, std::ptrdiff_t{0}, w - 1)];
        tmp[y * w + x] = s / static_cast<double>(2 * r + 1);
      }
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t k = -r; k <= r; ++k) s += tmp[std::clamp(y + k, std::ptrdiff_t{0}, h - 1) * w + x];
        field[y * w + x] = static_cast<float>(s / static_cast<double>(2 * r + 1));
      }
  }
}

namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::array<double, 4> kBaseT{218.0, 268.0, 290.0, 295.0};
constexpr std::array<double, 4> kWarmCore{5.0, 4.0, 1.5, 0.8};
constexpr std::array<double, 4> kBaseQ{5e-5, 5e-3, 1.3e-2, 1.6e-2};
constexpr std::array<double, 4> kWindFactor{-0.25, 0.65, 0.95, 1.0};
constexpr std::array<double, 4> kBaseZ{12350.0, 4420.0, 1500.0, 780.0};
constexpr std::array<double, 4> kHeightDip{-30.0, 60.0, 120.0, 140.0};

struct Basin {
  const char* name;
  double lat_lo, lat_hi, lon_lo, lon_hi;
};
constexpr std::array<Basin, 6> kBasins{{{"WP", 8, 30, 110, 170},
                                         {"EP", 10, 25, -140, -95},
                                         {"NA", 12, 35, -90, -40},
                                         {"NI", 8, 22, 60, 95},
                                         {"SI", -25, -8, 40, 110},
                                         {"SP", -25, -10, 150, 200}}};

// Everything about one storm that stays fixed over its frames.
struct Storm {
  std::vector<double> intensity;  // per frame
  double lambda = 8.0, eye = 2.0, cx = 0.0, cy = 0.0;
  double band_phase = 0.0, twist = 0.6, rotation = 0.35, band_amp = 0.35;
  double motion_u = 0.0, motion_v = 0.0, lat0 = 0.0, lon0 = 0.0;
  int month = 1;
  double spin = 1.0;  // +1 cyclonic in the northern hemisphere
  double drift = 0.0;
  double nwp_bias = 1.0;
  const Basin* basin = nullptr;
  std::vector<double> dist, theta, topo;
};

class Renderer {
 public:
  Renderer(const SynthConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng), h_(cfg.grid.height), w_(cfg.grid.width) {}

  Storm make_storm() {
    Storm s;
    const std::size_t frames = cfg_.n + cfg_.m + 1;
    const double i0 = rng_.uniform(cfg_.intensity_min, cfg_.intensity_max);
    s.drift = rng_.uniform(cfg_.drift_min, cfg_.drift_max);
    double dev = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      if (t > 0) dev = cfg_.ar_coeff * dev + cfg_.intensity_noise * rng_.normal();
      s.intensity.push_back(std::max(5.0, i0 + s.drift * static_cast<double>(t) + dev));
    }
    s.lambda = cfg_.decay_length_cells * rng_.uniform(0.85, 1.15);
    s.eye = 0.25 * s.lambda;
    s.cx = 0.5 * static_cast<double>(w_ - 1) + rng_.uniform(-1.0, 1.0);
    s.cy = 0.5 * static_cast<double>(h_ - 1) + rng_.uniform(-1.0, 1.0);
    s.band_phase = rng_.uniform(0.0, 2.0 * kPi);
    s.rotation = cfg_.rotation_rate * rng_.uniform(0.8, 1.2);
    s.band_amp = cfg_.band_amplitude * rng_.uniform(0.7, 1.3);
    s.band_amp = std::min(s.band_amp, 0.95);
    s.basin = &kBasins[rng_.uniform_index(kBasins.size())];
    s.spin = s.basin->lat_lo < 0.0 ? -1.0 : 1.0;
    s.motion_u = rng_.uniform(-6.0, 2.0);
    s.motion_v = s.spin * rng_.uniform(1.0, 6.0);
    s.lat0 = rng_.uniform(s.basin->lat_lo, s.basin->lat_hi);
    s.lon0 = rng_.uniform(s.basin->lon_lo, s.basin->lon_hi);
    s.month = 1 + static_cast<int>(rng_.uniform_index(12));
    s.nwp_bias = rng_.uniform(1.0 - cfg_.nwp_bias, 1.0 + cfg_.nwp_bias);

    s.dist.resize(h_ * w_);
    s.theta.resize(h_ * w_);
    for (std::size_t y = 0; y < h_; ++y)
      for (std::size_t x = 0; x < w_; ++x) {
        const double dx = static_cast<double>(x) - s.cx, dy = s.cy - static_cast<double>(y);
        s.dist[y * w_ + x] = std::hypot(dx, dy);
        s.theta[y * w_ + x] = std::atan2(dy, dx);
      }

    s.topo.assign(h_ * w_, 0.0);
    const bool land = rng_.uniform() < 0.3;
    const double hx = rng_.uniform(0.0, static_cast<double>(w_)), hy = rng_.uniform(0.0, static_cast<double>(h_));
    const double amp = rng_.uniform(200.0, 1500.0);
    const double width = rng_.uniform(3.0, 8.0) * static_cast<double>(h_) / 40.0;
    if (land)
      for (std::size_t y = 0; y < h_; ++y)
        for (std::size_t x = 0; x < w_; ++x) {
          const double d2 = std::pow(static_cast<double>(x) - hx, 2) + std::pow(static_cast<double>(y) - hy, 2);
          s.topo[y * w_ + x] = amp * std::exp(-d2 / (2.0 * width * width));
        }
    return s;
  }

  // Rainfall at frame t (includes small-scale multiplicative noise).
  void rain(const Storm& s, std::size_t t, std::span<float> out) {
    const double amp = cfg_.rain_per_intensity * s.intensity[t];
    std::vector<float> noise(h_ * w_);
    for (auto& v : noise) v = static_cast<float>(rng_.normal());
    smooth_field(noise, h_, w_, 1);
    // Three box passes of width 3 shrink white-noise variance; restore unit scale.
    double var = 0.0;
    for (float v : noise) var += static_cast<double>(v) * v;
    const double inv_std = var > 0.0 ? 1.0 / std::sqrt(var / static_cast<double>(noise.size())) : 0.0;
    for (std::size_t i = 0; i < h_ * w_; ++i) {
      const double d = s.dist[i];
      const double radial = std::exp(-d / s.lambda) * (1.0 - std::exp(-(d * d) / (s.eye * s.eye)));
      const double band =
          1.0 + s.band_amp * std::cos(cfg_.band_count * (s.theta[i] * s.spin - s.rotation * static_cast<double>(t)) +
                                      s.band_phase + s.twist * d / s.lambda);
      const double outer = 0.2 * std::exp(-d / (3.0 * s.lambda));
      const double mult = std::max(0.0, 1.0 + cfg_.rain_noise * noise[i] * inv_std);
      out[i] = static_cast<float>(std::max(0.0, (amp * radial * band + outer) * mult));
    }
  }

  double noise(double scale) { return cfg_.env_noise * scale * rng_.normal(); }

  void surface(const Storm& s, std::size_t t, double intensity, double lat, std::span<float> out, bool noisy) {
    const std::size_t hw = h_ * w_;
    const double k = intensity / 50.0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double d = s.dist[i];
      out[0 * hw + i] = static_cast<float>(300.0 - 3.0 * k * std::exp(-d / (1.5 * s.lambda)) -
                                           0.15 * (std::abs(lat) - 15.0) + (noisy ? noise(2.0) : 0.0));
      out[1 * hw + i] = static_cast<float>(302.0 - 0.1 * (std::abs(lat) - 15.0) -
                                           1.0 * k * std::exp(-d / (2.0 * s.lambda)) + (noisy ? noise(1.0) : 0.0));
      out[2 * hw + i] = static_cast<float>(1010.0 - 1.1 * intensity * std::exp(-d / (1.2 * s.lambda)) +
                                           (noisy ? noise(10.0) : 0.0));
      out[3 * hw + i] = static_cast<float>(s.topo[i]);
    }
    (void)t;
  }

  // One level-variable field; `var` indexes kLevelVariables, `level` kPressureLevels.
  double level_value(const Storm& s, std::size_t i, std::size_t var, std::size_t level, double intensity, double lat,
                     double wet) const {
    const double d = s.dist[i];
    const double k = intensity / 50.0;
    switch (var) {
      case 0:
        return kBaseT[level] - 0.15 * (std::abs(lat) - 15.0) +
               kWarmCore[level] * k * std::exp(-0.5 * (d * d) / (s.lambda * s.lambda));
      case 1: return kBaseQ[level] * (0.5 + 0.7 * wet);
      case 2:
      case 3: {
        const double rm = 0.45 * s.lambda;
        const double vt = s.spin * intensity * kWindFactor[level] * (d / rm) * std::exp(1.0 - d / rm);
        return var == 2 ? -vt * std::sin(s.theta[i]) + s.motion_u : vt * std::cos(s.theta[i]) + s.motion_v;
      }
      default: return kBaseZ[level] - kHeightDip[level] * k * std::exp(-d / (1.2 * s.lambda));
    }
  }

  static constexpr std::array<double, 5> kVarScale{5.0, 2e-3, 10.0, 10.0, 50.0};

 private:
  const SynthConfig& cfg_;
  Rng& rng_;
  std::size_t h_, w_;
};

}  // namespace

SampleRecord synthesize_sample(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  const std::uint64_t seed = mix_seed(cfg.seed, index);
  Rng rng(seed);
  Renderer render(cfg, rng);
  const Storm s = render.make_storm();
  const std::size_t n = cfg.n, m = cfg.m, h = cfg.grid.height, w = cfg.grid.width, hw = h * w;

  SampleRecord r;
  r.seed = seed;
  r.rain_hist = Tensor({n + 1, h, w});
  r.target_rain = Tensor({m, h, w});
  r.sfc_env = Tensor({n, kSurfaceCount, h, w});
  r.pl_env = Tensor({n, kLevelVarCount, kLevelCount, h, w});
  r.scalars = Tensor({n, kScalarCount});
  r.future_nwp = Tensor({m, kFutureCount, h, w});

  std::vector<std::vector<float>> rain(n + m + 1, std::vector<float>(hw));
  for (std::size_t t = 0; t <= n + m; ++t) render.rain(s, t, rain[t]);
  for (std::size_t t = 0; t <= n; ++t) std::copy(rain[t].begin(), rain[t].end(), r.rain_hist.slab(t).begin());
  for (std::size_t t = 0; t < m; ++t)
    std::copy(rain[n + 1 + t].begin(), rain[n + 1 + t].end(), r.target_rain.slab(t).begin());

  constexpr double kStepSeconds = 3.0 * 3600.0;
  auto lat_at = [&](std::size_t t) { return s.lat0 + s.motion_v * kStepSeconds / 111000.0 * static_cast<double>(t); };
  auto lon_at = [&](std::size_t t) {
    return s.lon0 + s.motion_u * kStepSeconds / (111000.0 * std::cos(s.lat0 * kPi / 180.0)) * static_cast<double>(t);
  };
  auto wetness = [&](const std::vector<float>& frame, double intensity) {
    std::vector<float> wet(frame);
    smooth_field(wet, h, w, 2);
    const double amp = cfg.rain_per_intensity * intensity + 1e-6;
    for (auto& v : wet) v = static_cast<float>(std::min(1.5, v / amp));
    return wet;
  };

  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t t = k + 1;
    const double inten = s.intensity[t], lat = lat_at(t);
    render.surface(s, t, inten, lat, r.sfc_env.slab(k), true);
    const auto wet = wetness(rain[t], inten);
    auto pl = r.pl_env.slab(k);
    for (std::size_t var = 0; var < kLevelVarCount; ++var)
      for (std::size_t lev = 0; lev < kLevelCount; ++lev) {
        float* out = pl.data() + (var * kLevelCount + lev) * hw;
        for (std::size_t i = 0; i < hw; ++i)
          out[i] = static_cast<float>(render.level_value(s, i, var, lev, inten, lat, wet[i]) +
                                      render.noise(Renderer::kVarScale[var]));
      }
    float* sc = r.scalars.data.data() + k * kScalarCount;
    sc[0] = static_cast<float>(inten);
    sc[1] = static_cast<float>(s.motion_u + render.noise(10.0));
    sc[2] = static_cast<float>(s.motion_v + render.noise(10.0));
    sc[3] = static_cast<float>(std::sin(2.0 * kPi * s.month / 12.0));
    sc[4] = static_cast<float>(std::cos(2.0 * kPi * s.month / 12.0));
    sc[5] = static_cast<float>(lat);
    sc[6] = static_cast<float>(lon_at(t));
  }

  const auto radius = static_cast<std::size_t>(std::lround(cfg.nwp_smoothing_cells));
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t t = n + 1 + k;
    const double inten = s.intensity[t] * s.nwp_bias, lat = lat_at(t);
    const auto wet = wetness(rain[t], s.intensity[t]);
    auto fut = r.future_nwp.slab(k);
    std::size_t ch = 0;
    for (std::size_t lev : {std::size_t{0}, std::size_t{2}}) {  // 200 and 850 hPa
      for (std::size_t var = 0; var < 4; ++var, ++ch) {
        float* out = fut.data() + ch * hw;
        for (std::size_t i = 0; i < hw; ++i)
          out[i] = static_cast<float>(render.level_value(s, i, var, lev, inten, lat, wet[i]));
      }
    }
    float* tp = fut.data() + kFuturePrecipChannel * hw;
    for (std::size_t i = 0; i < hw; ++i) tp[i] = static_cast<float>(rain[t][i] * s.nwp_bias);
    std::vector<float> sfc(kSurfaceCount * hw);
    render.surface(s, t, inten, lat, sfc, false);
    std::copy_n(sfc.begin(), hw, fut.begin() + 9 * hw);           // t2m
    std::copy_n(sfc.begin() + 2 * hw, hw, fut.begin() + 10 * hw);  // msl
    for (std::size_t c = 0; c < kFutureCount; ++c) smooth_field(fut.subspan(c * hw, hw), h, w, radius);
    for (std::size_t i = 0; i < hw; ++i) tp[i] = std::max(0.0f, tp[i]);
  }

  r.tags["basin"] = s.basin->name;
  r.tags["phase"] = s.drift > 0.5 ? "intensifying" : (s.drift < -0.5 ? "weakening" : "steady");
  const double last = s.intensity[n];
  r.tags["intensity_class"] = last < 17.2 ? "TD" : (last < 32.7 ? "TS" : (last < 49.4 ? "TY" : "STY"));
  return r;
}

DatasetManifest generate_dataset(const SynthConfig& cfg, std::size_t count, const fs::path& dir,
                                 std::size_t train_count, unsigned threads) {
  cfg.validate();
  if (count < 1) throw ConfigError("sample count must be at least 1");
  if (train_count == 0) train_count = count;
  if (train_count > count) throw ConfigError("train count exceeds sample count");
  io::ensure_writable_dir(dir);
  std::vector<SampleRecord> records(count);
  parallel_for(count, threads, [&](std::size_t i) { records[i] = synthesize_sample(cfg, i); });
  return write_dataset(dir, records, cfg.grid, train_count, cfg.seed, cfg.to_json());
}

}  // namespace tcpdiff::data
