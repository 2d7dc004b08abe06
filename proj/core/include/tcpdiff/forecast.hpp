#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tcpdiff/datasets.hpp"
#include "tcpdiff/diffusion.hpp"
#include "tcpdiff/network.hpp"
#include "tcpdiff/training.hpp"

namespace tcpdiff::forecast {

namespace fs = std::filesystem;

/// Lead times in hours for m 3-hourly steps.
std::vector<int> lead_hours(std::size_t m);

struct Ensemble {
  std::vector<Tensor> members;  // each [m, H, W], mm/3hr
  std::vector<std::uint64_t> seeds;
  std::vector<int> lead_hours;
};

/// Draws the normalized diffusion target D0 [m, H, W] for prepared inputs.
using Sampler = std::function<Tensor(const nn::ModelInputs<float>& inputs, const Shape& shape, Rng& rng)>;

/// Turns a sampled target into normalized absolute rainfall: accumulated from the
/// anchor when `use_arp`, unchanged otherwise.
Tensor reconstruct_normalized(const Tensor& sampled, const Tensor& anchor, bool use_arp,
                              train::Instrumentation* counters = nullptr);

class Forecaster {
 public:
  Forecaster(nn::Checkpoint checkpoint, data::NormStats stats, diffusion::Schedule schedule,
             std::string checkpoint_id = {});

  /// Reads a checkpoint written by train::train (stats and schedule come from its metadata).
  static Forecaster load(const fs::path& checkpoint_dir);

  const nn::NetworkConfig& config() const { return net_.config(); }
  const data::NormStats& stats() const { return stats_; }
  const diffusion::Schedule& schedule() const { return sched_; }
  const std::string& checkpoint_id() const { return id_; }

  /// Replaces reverse diffusion with another sampler (e.g. a stub for tests).
  void set_sampler(Sampler sampler) { sampler_ = std::move(sampler); }
  /// Bound on the start estimate implied by each noise prediction during sampling
  /// (see diffusion::clip_noise). load() takes it from the checkpoint; 0 disables it.
  void set_clip_bound(double bound) { clip_bound_ = bound; }
  double clip_bound() const { return clip_bound_; }

  /// Normalized absolute forecast before denormalization, [m, H, W].
  Tensor forecast_normalized(const data::SampleRecord& raw, std::uint64_t seed,
                             train::Instrumentation* counters = nullptr) const;
  /// Rainfall forecast in mm/3hr, clamped to be nonnegative.
  Tensor forecast(const data::SampleRecord& raw, std::uint64_t seed, train::Instrumentation* counters = nullptr) const;
  /// Member i uses seed mix_seed(base_seed, i). Members run on up to `threads` threads.
  Ensemble ensemble(const data::SampleRecord& raw, std::size_t members, std::uint64_t base_seed,
                    unsigned threads = 1) const;

 private:
  nn::Network<float> net_;
  data::NormStats stats_;
  diffusion::Schedule sched_;
  std::string id_;
  Sampler sampler_;
  double clip_bound_ = 0.0;
  Tensor sample_target(const nn::ModelInputs<float>& inputs, Rng& rng) const;
};

/// Every frame equals the last observed rainfall frame.
Tensor persistence_forecast(const data::SampleRecord& raw);

/// Forecast output directory:
///   manifest.json      format "tcpdiff-forecast/1", dataset, checkpoint id, grid, m,
///                      lead hours, sample indices, per-sample member seeds, arrays
///   member_NNN.bin     float32-le, [sample, m, H, W] in sample-index order
struct ForecastSet {
  std::string source;  // checkpoint id or "persistence"
  fs::path dataset;
  std::size_t grid = 0;
  std::size_t m = 0;
  std::vector<int> lead_hours;
  std::vector<std::size_t> sample_indices;
  std::uint64_t base_seed = 0;
  std::vector<std::vector<std::uint64_t>> seeds;  // [sample][member]
  std::vector<std::vector<Tensor>> members;       // [member][sample]

  std::size_t member_count() const { return members.size(); }
  void write(const fs::path& dir) const;
  static ForecastSet read(const fs::path& dir);
};

struct RunOptions {
  std::size_t members = 1;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::function<void(std::size_t done, std::size_t total)> progress;
};

/// Forecasts every listed sample of a dataset. Sample j uses base seed
/// mix_seed(seed, index_j), and its member i uses mix_seed(that, i).
ForecastSet run(const Forecaster& model, const data::DatasetManifest& manifest,
                const std::vector<std::size_t>& indices, const RunOptions& options);

/// Persistence for every listed sample, stored as a single-member set.
ForecastSet run_persistence(const data::DatasetManifest& manifest, const std::vector<std::size_t>& indices);

/// Indices of the test split ([train_count, sample_count)), or all samples when the
/// split is empty.
std::vector<std::size_t> test_indices(const data::DatasetManifest& manifest);

}  // namespace tcpdiff::forecast
