#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tcpdiff/datasets.hpp"
#include "tcpdiff/diffusion.hpp"
#include "tcpdiff/network.hpp"
#include "tcpdiff/rng.hpp"

namespace tcpdiff::train {

namespace fs = std::filesystem;

/// Counts how targets were built and reconstructed; lets tests confirm toggle wiring.
struct Instrumentation {
  std::size_t residual_targets = 0;  // targets built through arp::to_residuals
  std::size_t absolute_targets = 0;  // targets built from absolute rainfall
  std::size_t accumulations = 0;     // forecasts rebuilt through arp::accumulate
  std::size_t direct_outputs = 0;    // forecasts used without accumulation
};

/// Network inputs and diffusion target for one normalized record.
template <class T>
struct Prepared {
  nn::ModelInputs<T> inputs;
  BasicTensor<T> target;  // D0, [m, H, W]
  BasicTensor<T> anchor;  // latest observed frame, normalized, [H, W]
};

/// Builds inputs and target from a normalized record. With ARP on the target is the
/// residual sequence of [last observed frame, target frames]; otherwise the target
/// frames themselves. Groups disabled by the config are left empty.
template <class T>
Prepared<T> prepare(const data::SampleRecord& normalized, const nn::NetworkConfig& cfg,
                    Instrumentation* counters = nullptr);

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 2;
  double learning_rate = 2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool use_arp = true;
  bool use_multimodal = true;
  bool use_future = true;
  /// Checkpoint every k steps in addition to the final one; 0 writes only the final.
  std::size_t checkpoint_every = 0;
  fs::path dataset;
  fs::path out;
  std::size_t diffusion_steps = 200;
  double beta_min = diffusion::Schedule::kDefaultBetaMin;
  double beta_max = diffusion::Schedule::kDefaultBetaMax;
  /// Architecture; grid, n, m and the toggles are taken from the dataset and the flags above.
  nn::NetworkConfig network = nn::NetworkConfig::tiny();

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  /// `network` with grid, n, m and toggles filled in.
  nn::NetworkConfig effective_network(const data::DatasetManifest& manifest) const;
};

template <class T>
struct LossResult {
  double loss = 0.0;
  std::size_t step = 0;
  std::vector<std::vector<T>> grads;  // one per parameter, empty when not requested
};

/// One noise-prediction loss evaluation with the given diffusion step and noise.
template <class T>
LossResult<T> loss_with(const nn::Network<T>& net, const Prepared<T>& sample, const diffusion::Schedule& sched,
                        std::size_t s, const BasicTensor<T>& noise, bool want_grads = true);

/// Draws s uniformly from {0..N-1} and standard normal noise, then evaluates the loss.
template <class T>
LossResult<T> loss(const nn::Network<T>& net, const Prepared<T>& sample, const diffusion::Schedule& sched, Rng& rng,
                   bool want_grads = true);

/// Same objective for an arbitrary denoiser (no gradients).
template <class T>
double denoiser_loss(const diffusion::Denoiser<T>& denoiser, const BasicTensor<T>& target,
                     const diffusion::Schedule& sched, Rng& rng);

class Adam {
 public:
  Adam() = default;
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void update(nn::ParamStore<float>& params, const std::vector<std::vector<float>>& grads);

  std::uint64_t steps() const { return t_; }
  const std::vector<std::vector<float>>& first_moment() const { return m_; }
  const std::vector<std::vector<float>>& second_moment() const { return v_; }
  void restore(std::uint64_t steps, std::vector<std::vector<float>> m, std::vector<std::vector<float>> v);

 private:
  double lr_ = 2e-4, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Everything needed to continue a run bit-identically.
struct TrainState {
  nn::Checkpoint checkpoint;  // parameters + config
  Adam optimizer;
  std::size_t step = 0;       // completed optimizer steps
  std::string rng_state;
  double best_loss = 0.0;
  double ema_loss = 0.0;
  double target_bound = 0.0;  // largest |target| in the training split

  /// Writes a checkpoint (whose metadata carries step, rng state, normalization stats and
  /// the train config) plus adam_m.bin and adam_v.bin into dir.
  void save(const fs::path& dir, const TrainConfig& cfg, const data::NormStats& stats) const;
  static TrainState load(const fs::path& dir);
};

struct TrainResult {
  std::vector<double> losses;  // index i holds step i+1
  fs::path final_checkpoint;
  std::size_t parameter_count = 0;
  Instrumentation counters;
};

struct TrainOptions {
  /// Resume from a state directory written by a previous run.
  std::optional<fs::path> resume;
  /// Called after every step with (step, loss).
  std::function<void(std::size_t, double)> progress;
  /// Stop after this many steps in this invocation (for resume tests); 0 runs to cfg.steps.
  std::size_t stop_after = 0;
};

/// Runs the optimization loop. Writes to cfg.out:
///   train_config.json   effective configuration
///   loss.csv            step,loss
///   checkpoint/         final state (loadable by nn::Checkpoint::load)
///   checkpoints/step_NNNNNN/  periodic states when checkpoint_every > 0
TrainResult train(const TrainConfig& cfg, const TrainOptions& options = {});

/// Loads and normalizes the training split of a dataset.
std::vector<data::SampleRecord> load_normalized(const data::DatasetManifest& manifest, std::size_t begin,
                                                std::size_t end);

}  // namespace tcpdiff::train
