#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tcpdiff/tensor.hpp"

namespace tcpdiff::verify {

namespace fs = std::filesystem;

inline constexpr std::array<double, 3> kThresholds{6.0, 24.0, 60.0};  // mm/3hr

struct ContingencyCounts {
  std::uint64_t hits = 0;               // N_A
  std::uint64_t false_alarms = 0;       // N_B
  std::uint64_t misses = 0;             // N_C
  std::uint64_t correct_negatives = 0;  // N_D

  std::uint64_t total() const { return hits + false_alarms + misses + correct_negatives; }
  ContingencyCounts& operator+=(const ContingencyCounts& o);
  bool operator==(const ContingencyCounts&) const = default;
};

/// Both fields binarized at value >= threshold.
template <class T>
ContingencyCounts contingency(const BasicTensor<T>& pred, const BasicTensor<T>& obs, double threshold);

/// Equitable threat score. Empty when N_A + N_B + N_C - R is zero (no events anywhere,
/// reported as the "no-events" sentinel).
struct Ets {
  std::optional<double> value;
  bool defined() const { return value.has_value(); }
  std::string str() const;
};
Ets ets(const ContingencyCounts& counts);

inline constexpr const char* kNoEvents = "no-events";

/// Mean absolute difference over all cells.
template <class T>
double tp_mae(const BasicTensor<T>& pred, const BasicTensor<T>& obs);

/// Edges 0, 2, ..., 160 mm/3hr.
std::vector<double> default_histogram_edges();

/// counts[i] holds values in [edges[i], edges[i+1]); values outside are dropped.
template <class T>
std::vector<std::uint64_t> frequency_histogram(const std::vector<BasicTensor<T>>& fields,
                                               const std::vector<double>& edges);

struct SpectrumCurve {
  std::vector<double> wavenumber;  // cycles per domain, 1..floor(H/2)
  std::vector<double> power;       // mean |F|^2 in the bin
  std::vector<std::size_t> count;  // frequencies in the bin
};

/// Full 2D power |F|^2 of an unnormalized forward DFT, row-major [H, W].
std::vector<double> power_spectrum(const std::vector<double>& field, std::size_t height, std::size_t width);

/// Radially averaged power spectral density of a square [H, W] field (DC excluded).
template <class T>
SpectrumCurve rapsd(const BasicTensor<T>& field);

struct EvalOptions {
  std::vector<double> thresholds{kThresholds.begin(), kThresholds.end()};
  std::vector<double> histogram_edges = default_histogram_edges();
  /// Sum consecutive 3-hourly frames into 6-hourly totals before scoring.
  bool aggregate_6h = false;
  /// Tag key for a group-by breakdown (e.g. "basin"); empty disables it.
  std::string group_by;
};

/// One metric value. lead_time is the lead in hours or 0 for all leads; member is a
/// member index, "mean" or "std".
struct MetricRow {
  std::string metric;      // "ETS" or "TP_MAE"
  double threshold = 0.0;  // 0 for TP_MAE
  int lead_time = 0;
  std::string member;
  std::optional<double> value;  // empty for the no-events sentinel
  std::string group;       // "" or "<tag>=<value>"
};

struct HistogramRow {
  std::string source;  // "observed" or "member_<i>"
  std::vector<std::uint64_t> counts;
};

struct SpectrumRow {
  std::string source;
  int lead_time = 0;
  SpectrumCurve curve;
};

struct Report {
  std::vector<int> lead_hours;
  std::vector<double> histogram_edges;
  std::vector<MetricRow> metrics;
  std::vector<HistogramRow> histograms;
  std::vector<SpectrumRow> spectra;

  /// Lookup of a pooled (all leads, no group) row.
  std::optional<double> value(const std::string& metric, double threshold, const std::string& member,
                              int lead_time = 0) const;

  /// Writes metrics.csv, histogram.csv and rapsd.csv.
  void write(const fs::path& dir) const;
};

/// members[i][k] is member i's forecast for sample k, obs[k] the matching truth, both
/// [m, H, W] in mm/3hr. tags[k] is used by the group-by option.
Report evaluate(const std::vector<std::vector<Tensor>>& members, const std::vector<Tensor>& obs,
                const std::vector<int>& lead_hours, const EvalOptions& options = {},
                const std::vector<std::map<std::string, std::string>>& tags = {});

/// Sums frame pairs (0,1), (2,3), ...; an odd trailing frame is dropped.
Tensor aggregate_pairs(const Tensor& seq);

}  // namespace tcpdiff::verify
