#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tcpdiff/tensor.hpp"

namespace tcpdiff::data {

namespace fs = std::filesystem;

inline constexpr std::array<std::string_view, 4> kSurfaceChannels{"t2m", "sst", "msl", "topography"};
inline constexpr std::array<std::string_view, 5> kLevelVariables{"t", "q", "u", "v", "z"};
inline constexpr std::array<int, 4> kPressureLevels{200, 600, 850, 925};
/// Month is carried as a sin/cos pair; track location as degrees.
inline constexpr std::array<std::string_view, 7> kScalarChannels{
    "intensity", "motion_u", "motion_v", "month_sin", "month_cos", "lat", "lon"};
inline constexpr std::array<std::string_view, 11> kFutureChannels{
    "t_200", "q_200", "u_200", "v_200", "t_850", "q_850", "u_850", "v_850", "tp", "t2m", "msl"};
inline constexpr std::size_t kFuturePrecipChannel = 8;

inline constexpr std::size_t kSurfaceCount = kSurfaceChannels.size();
inline constexpr std::size_t kLevelVarCount = kLevelVariables.size();
inline constexpr std::size_t kLevelCount = kPressureLevels.size();
inline constexpr std::size_t kScalarCount = kScalarChannels.size();
inline constexpr std::size_t kFutureCount = kFutureChannels.size();

struct GridSpec {
  std::size_t height = 40;
  std::size_t width = 40;
  double cell_size_deg = 0.25;

  double domain_extent_deg() const { return static_cast<double>(height) * cell_size_deg; }
  void validate() const;

  /// 100x100 cells at 0.1 degrees.
  static GridSpec full_scale() { return {100, 100, 0.1}; }
  /// 40x40 cells covering the same 10 degree window.
  static GridSpec desk() { return {40, 40, 0.25}; }

  bool operator==(const GridSpec&) const = default;
};

/// One storm-centered case. Layouts (C order):
///   rain_hist   [n+1, H, W]    mm/3hr, frame 0 precedes the first historical step
///   sfc_env     [n, 4, H, W]   t2m K, sst K, msl hPa, topography m
///   pl_env      [n, 5, 4, H, W] (t, q, u, v, z) x (200, 600, 850, 925 hPa)
///   scalars     [n, 7]         see kScalarChannels
///   future_nwp  [m, 11, H, W]  see kFutureChannels
///   target_rain [m, H, W]      mm/3hr
struct SampleRecord {
  Tensor rain_hist;
  Tensor sfc_env;
  Tensor pl_env;
  Tensor scalars;
  Tensor future_nwp;
  Tensor target_rain;
  std::map<std::string, std::string> tags;
  std::uint64_t seed = 0;

  std::size_t n() const { return sfc_env.dim(0); }
  std::size_t m() const { return target_rain.dim(0); }
  std::size_t height() const { return target_rain.dim(1); }
  std::size_t width() const { return target_rain.dim(2); }

  /// Checks every shape against (n, m, grid) and value finiteness. `raw` additionally
  /// requires nonnegative rainfall (normalized records may be negative).
  void validate(std::size_t n, std::size_t m, const GridSpec& grid, bool raw = true) const;

  bool operator==(const SampleRecord&) const = default;
};

/// Array groups in on-disk order.
enum class Group { RainHist, SfcEnv, PlEnv, Scalars, FutureNwp, TargetRain };
inline constexpr std::array<Group, 6> kGroups{Group::RainHist, Group::SfcEnv,    Group::PlEnv,
                                              Group::Scalars,  Group::FutureNwp, Group::TargetRain};
std::string_view group_name(Group g);

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;
  /// Set when the observed std was zero and 1 was substituted.
  bool degenerate = false;
};

/// Per-channel statistics in transformed space (log1p for rainfall channels).
struct NormStats {
  std::vector<ChannelStats> rain;    // 1 entry, shared by rain_hist and target_rain
  std::vector<ChannelStats> sfc;     // 4
  std::vector<ChannelStats> pl;      // 20, index var*4 + level
  std::vector<ChannelStats> scalars; // 7
  std::vector<ChannelStats> future;  // 11, tp is log1p-transformed

  bool any_degenerate() const;
};

/// Sidecar description of a dataset directory, serialized as `manifest.json`:
///
///   format_version  "tcpdiff-dataset/1"
///   grid            {height, width, cell_size_deg}
///   n, m            historical / future step counts
///   dtype           "float32-le"
///   sample_count    total records
///   train_count     records [0, train_count) form the training split, the rest the test split
///   channels        {group: [names...]} for sfc_env, pl_env, scalars, future_nwp
///   arrays          {group: file name}; layout [sample, time, (channel, level,) y, x]
///   stats           {group: [{mean, std, degenerate}...]} from the training split
///   generator       {seed, config} when produced by the synthetic generator
///   samples         [{seed, tags}] one entry per record
struct DatasetManifest {
  std::string format_version = "tcpdiff-dataset/1";
  GridSpec grid;
  std::size_t n = 4;
  std::size_t m = 4;
  std::string dtype = "float32-le";
  std::size_t sample_count = 0;
  std::size_t train_count = 0;
  std::map<std::string, std::vector<std::string>> channels;
  std::map<std::string, std::string> arrays;
  NormStats stats;
  std::uint64_t generator_seed = 0;
  std::string generator_config;  // JSON text, empty when not synthetic
  std::vector<std::uint64_t> sample_seeds;
  std::vector<std::map<std::string, std::string>> sample_tags;

  /// Directory the manifest was read from; not serialized.
  fs::path root;

  /// Values per record for a group.
  std::size_t group_size(Group g) const;
  Shape group_shape(Group g) const;
};

std::map<std::string, std::vector<std::string>> default_channel_inventory();

/// Stats as a JSON object {rain, sfc_env, pl_env, scalars, future_nwp}.
std::string norm_stats_to_json(const NormStats& stats);
NormStats norm_stats_from_json(const std::string& text);

DatasetManifest read_manifest(const fs::path& dir);
void write_manifest(const DatasetManifest& manifest, const fs::path& dir);

/// Writes records plus a manifest to `dir`. Stats are computed from the first
/// `train_count` records. Returns the manifest as written.
DatasetManifest write_dataset(const fs::path& dir, const std::vector<SampleRecord>& records,
                              const GridSpec& grid, std::size_t train_count,
                              std::uint64_t generator_seed = 0, const std::string& generator_config = {});

/// Reads one record. Throws RangeError for a bad index and CorruptionError when the
/// files disagree with the manifest.
SampleRecord load_sample(const DatasetManifest& manifest, std::size_t index);

/// Statistics over records in transformed space.
NormStats compute_stats(const std::vector<SampleRecord>& records);

SampleRecord normalize(const SampleRecord& record, const NormStats& stats);
SampleRecord denormalize(const SampleRecord& record, const NormStats& stats);

/// Rain-only transforms shared by the target and forecast paths.
Tensor normalize_rain(const Tensor& rain, const NormStats& stats);
Tensor denormalize_rain(const Tensor& rain, const NormStats& stats);

}  // namespace tcpdiff::data
