#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tcpdiff/autodiff.hpp"
#include "tcpdiff/tensor.hpp"

/// The denoiser: three condition encoders feeding a K-level space-time U-Net.
namespace tcpdiff::nn {

struct NetworkConfig {
  std::size_t grid = 40;
  std::size_t n = 4;
  std::size_t m = 4;
  std::size_t scalar_channels = 7;
  std::size_t future_channels = 11;

  std::size_t depth = 4;  // U-Net modules per side
  std::size_t base_channels = 32;
  std::vector<std::size_t> channel_mult{1, 2, 2, 2};
  std::size_t heads = 1;
  std::size_t norm_groups = 4;
  /// Spatial attention pools keys/values so at most this many positions are attended.
  std::size_t attn_max_tokens = 100;

  std::size_t scalar_width = 32;
  std::size_t future_width = 32;
  std::size_t step_width = 32;
  std::size_t future_base = 16;
  std::size_t future_stages = 2;

  bool use_arp = true;         // residual target and residual input channels
  bool use_multimodal = true;  // environment channels + scalar encoder
  bool use_future = true;      // forecast-proxy encoder

  void validate() const;

  /// Channels at U-Net level i: level 0 is the stem, level i >= 1 the output of module i.
  std::size_t level_channels(std::size_t i) const;
  std::size_t cond_width() const;
  /// Channels of the fixed (non-noised) historical input per time step.
  std::size_t his2d_context_channels() const;
  /// Largest depth <= 4 for which the grid halves cleanly.
  static std::size_t max_depth_for(std::size_t grid, std::size_t limit = 4);

  std::string to_json() const;
  static NetworkConfig from_json(const std::string& text);

  /// Small CPU-trainable configuration.
  static NetworkConfig tiny(std::size_t grid = 40);
  /// Smallest valid configuration, used for gradient checks.
  static NetworkConfig smallest();

  bool operator==(const NetworkConfig&) const = default;
};

/// Ordered, named parameter tensors.
template <class T>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<BasicTensor<T>> values;

  std::size_t add(std::string name, BasicTensor<T> value);
  std::size_t index(std::string_view name) const;
  std::size_t count() const;
  /// Parameters whose name starts with `prefix`.
  std::size_t count(std::string_view prefix) const;
  bool has_prefix(std::string_view prefix) const;
  bool all_finite() const;

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    out.names = names;
    for (const auto& v : values) out.values.push_back(v.template cast<U>());
    return out;
  }
};

/// Normalized conditioning inputs for one case (layouts as SampleRecord, rain is the
/// last n historical frames and deltas the n preceding differences).
template <class T>
struct ModelInputs {
  BasicTensor<T> rain;     // [n, H, W]
  BasicTensor<T> deltas;   // [n, H, W]
  BasicTensor<T> sfc;      // [n, 4, H, W]
  BasicTensor<T> pl;       // [n, 5, 4, H, W]
  BasicTensor<T> scalars;  // [n, S]
  BasicTensor<T> future;   // [m, Cf, H, W]

  template <class U>
  ModelInputs<U> cast() const {
    return {rain.template cast<U>(),    deltas.template cast<U>(),  sfc.template cast<U>(),
            pl.template cast<U>(),      scalars.template cast<U>(), future.template cast<U>()};
  }
};

/// Step-independent encoder outputs. Absent groups hold empty tensors.
template <class T>
struct EncodedContext {
  BasicTensor<T> his_context;  // [C0, n, H, W], pre-activation
  BasicTensor<T> e_scalar;     // [scalar_width]
  BasicTensor<T> e_future;     // [future_width]
};

template <class T>
class Network {
 public:
  struct InitOptions {
    std::uint64_t seed = 0;
    bool zero_output_head = true;
  };

  /// Throws ConfigError for an invalid config (e.g. grid not divisible by 2^K).
  explicit Network(NetworkConfig config, InitOptions init = {});
  Network(NetworkConfig config, ParamStore<T> params);

  const NetworkConfig& config() const { return config_; }
  const ParamStore<T>& params() const { return params_; }
  ParamStore<T>& params() { return params_; }
  std::size_t parameter_count() const { return params_.count(); }

  /// Graph-level building blocks; `p` holds one variable per parameter.
  struct Context {
    Var<T> his_context;
    Var<T> e_scalar;
    Var<T> e_future;
    bool has_scalar = false;
    bool has_future = false;
  };
  std::vector<Var<T>> bind(Graph<T>& g, bool trainable) const;
  Context encode(Graph<T>& g, const std::vector<Var<T>>& p, const ModelInputs<T>& in) const;
  Context bind_context(Graph<T>& g, const EncodedContext<T>& ctx) const;
  /// Predicted noise for the noised target at `step`.
  Var<T> denoise(Graph<T>& g, const std::vector<Var<T>>& p, const Context& ctx, Var<T> noised,
                 std::size_t step) const;

  /// Inference helpers (no gradients).
  EncodedContext<T> encode_context(const ModelInputs<T>& in) const;
  BasicTensor<T> predict_noise(const EncodedContext<T>& ctx, const BasicTensor<T>& noised, std::size_t step) const;
  BasicTensor<T> predict_noise(const ModelInputs<T>& in, const BasicTensor<T>& noised, std::size_t step) const;

  /// Individual encoders, exposed for inspection. Feature layout is [C0, n, H, W].
  BasicTensor<T> encode_his2d(const ModelInputs<T>& in, const BasicTensor<T>& noised) const;
  BasicTensor<T> encode_scalars(const BasicTensor<T>& scalars) const;
  BasicTensor<T> encode_future(const BasicTensor<T>& future) const;

  /// Input channels seen by the historical encoder per time step (context + noised target).
  std::size_t his2d_input_channels() const { return config_.his2d_context_channels() + 1; }

 private:
  NetworkConfig config_;
  ParamStore<T> params_;

  void build(std::uint64_t seed, bool zero_head);
  void check_inputs(const ModelInputs<T>& in) const;
  Var<T> his_context_graph(Graph<T>& g, const std::vector<Var<T>>& p, const ModelInputs<T>& in) const;
  Var<T> scalar_graph(Graph<T>& g, const std::vector<Var<T>>& p, const BasicTensor<T>& scalars) const;
  Var<T> future_graph(Graph<T>& g, const std::vector<Var<T>>& p, const BasicTensor<T>& future) const;
  Var<T> his2d_features(Graph<T>& g, const std::vector<Var<T>>& p, Var<T> his_context, Var<T> noised) const;
  Var<T> cond_vector(Graph<T>& g, const std::vector<Var<T>>& p, const Context& ctx, std::size_t step) const;
  Var<T> res_block(const std::vector<Var<T>>& p, const std::string& name, Var<T> x, Var<T> cond) const;
  Var<T> spatial_attention(const std::vector<Var<T>>& p, const std::string& name, Var<T> x) const;
  Var<T> temporal_attention(const std::vector<Var<T>>& p, const std::string& name, Var<T> x) const;
  Var<T> unet_module(const std::vector<Var<T>>& p, const std::string& name, Var<T> x, Var<T> cond) const;
  const Var<T>& P(const std::vector<Var<T>>& p, const std::string& name) const;
};

/// Sinusoidal embedding of an integer position.
template <class T>
BasicTensor<T> sinusoidal_embedding(std::size_t position, std::size_t width);

/// Checkpoint directory: `checkpoint.json` (config, parameter names and shapes, extra
/// metadata) plus `params.bin` with raw little-endian float32 values in listed order.
struct Checkpoint {
  NetworkConfig config;
  ParamStore<float> params;
  std::string metadata;  // JSON object text

  void save(const std::filesystem::path& dir) const;
  static Checkpoint load(const std::filesystem::path& dir);
};

}  // namespace tcpdiff::nn
