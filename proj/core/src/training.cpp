#include "tcpdiff/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tcpdiff/arp.hpp"
#include "tcpdiff/error.hpp"
#include "tcpdiff/io.hpp"
#include "tcpdiff/parallel.hpp"

namespace tcpdiff::train {

using nlohmann::json;

template <class T>
Prepared<T> prepare(const data::SampleRecord& rec, const nn::NetworkConfig& cfg, Instrumentation* counters) {
  const std::size_t n = cfg.n, m = cfg.m, h = cfg.grid, plane = h * h;
  if (rec.n() != n || rec.m() != m || rec.height() != h || rec.width() != h)
    throw ShapeError("record (n=" + std::to_string(rec.n()) + ", m=" + std::to_string(rec.m()) + ", " +
                     std::to_string(rec.height()) + "x" + std::to_string(rec.width()) + ") does not match network (n=" +
                     std::to_string(n) + ", m=" + std::to_string(m) + ", grid " + std::to_string(h) + ")");
  const BasicTensor<T> hist = rec.rain_hist.cast<T>();
  Prepared<T> out;
  out.inputs.rain = BasicTensor<T>({n, h, h}, std::vector<T>(hist.data.begin() + static_cast<std::ptrdiff_t>(plane),
                                                              hist.data.end()));
  if (cfg.use_arp) out.inputs.deltas = arp::to_residuals(hist).deltas;
  if (cfg.use_multimodal) {
    out.inputs.sfc = rec.sfc_env.cast<T>();
    out.inputs.pl = rec.pl_env.cast<T>();
    out.inputs.scalars = rec.scalars.cast<T>();
  }
  if (cfg.use_future) out.inputs.future = rec.future_nwp.cast<T>();
  out.anchor = BasicTensor<T>({h, h}, std::vector<T>(hist.data.end() - static_cast<std::ptrdiff_t>(plane),
                                                     hist.data.end()));
  const BasicTensor<T> target = rec.target_rain.cast<T>();
  if (cfg.use_arp) {
    BasicTensor<T> seq({m + 1, h, h});
    std::copy(out.anchor.data.begin(), out.anchor.data.end(), seq.data.begin());
    std::copy(target.data.begin(), target.data.end(), seq.data.begin() + static_cast<std::ptrdiff_t>(plane));
    out.target = arp::to_residuals(seq).deltas;
    if (counters) ++counters->residual_targets;
  } else {
    out.target = target;
    if (counters) ++counters->absolute_targets;
  }
  return out;
}

// ---- config ----------------------------------------------------------------------

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train config: steps must be at least 1");
  if (batch < 1) throw ConfigError("train config: batch must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train config: learning rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("train config: Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train config: Adam eps must be positive");
  if (diffusion_steps < 2) throw ConfigError("train config: diffusion steps must be at least 2");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw ConfigError("train config: need 0 < beta_min <= beta_max < 1");
}

std::string TrainConfig::to_json() const {
  const json j{{"steps", steps},
               {"batch", batch},
               {"learning_rate", learning_rate},
               {"adam_beta1", adam_beta1},
               {"adam_beta2", adam_beta2},
               {"adam_eps", adam_eps},
               {"seed", seed},
               {"use_arp", use_arp},
               {"use_multimodal", use_multimodal},
               {"use_future", use_future},
               {"checkpoint_every", checkpoint_every},
               {"dataset", dataset.string()},
               {"out", out.string()},
               {"diffusion_steps", diffusion_steps},
               {"beta_min", beta_min},
               {"beta_max", beta_max},
               {"network", json::parse(network.to_json())}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
  }
  TrainConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    c.use_arp = j.value("use_arp", c.use_arp);
    c.use_multimodal = j.value("use_multimodal", c.use_multimodal);
    c.use_future = j.value("use_future", c.use_future);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.dataset = j.value("dataset", c.dataset.string());
    c.out = j.value("out", c.out.string());
    c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
    c.beta_min = j.value("beta_min", c.beta_min);
    c.beta_max = j.value("beta_max", c.beta_max);
    if (j.contains("network")) c.network = nn::NetworkConfig::from_json(j.at("network").dump());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

nn::NetworkConfig TrainConfig::effective_network(const data::DatasetManifest& mf) const {
  if (mf.grid.height != mf.grid.width) throw ConfigError("dataset grid must be square");
  nn::NetworkConfig c = network;
  c.grid = mf.grid.height;
  c.n = mf.n;
  c.m = mf.m;
  c.scalar_channels = data::kScalarCount;
  c.future_channels = data::kFutureCount;
  c.use_arp = use_arp;
  c.use_multimodal = use_multimodal;
  c.use_future = use_future;
  return c;
}

// ---- loss ------------------------------------------------------------------------

namespace {

template <class T>
std::string activation_report(const nn::Graph<T>& g) {
  double max_abs = 0.0;
  std::size_t bad_nodes = 0, first_bad = g.size();
  for (std::size_t i = 0; i < g.size(); ++i) {
    bool bad = false;
    for (T v : g.value(i).data) {
      if (!std::isfinite(static_cast<double>(v))) {
        bad = true;
        continue;
      }
      max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
    }
    if (bad) {
      ++bad_nodes;
      first_bad = std::min(first_bad, i);
    }
  }
  std::ostringstream os;
  os << "max |activation| " << max_abs << ", " << bad_nodes << " of " << g.size() << " nodes non-finite";
  if (bad_nodes) os << " (first at node " << first_bad << ")";
  return os.str();
}

}  // namespace

template <class T>
LossResult<T> loss_with(const nn::Network<T>& net, const Prepared<T>& sample, const diffusion::Schedule& sched,
                        std::size_t s, const BasicTensor<T>& noise, bool want_grads) {
  const auto noised = diffusion::forward_noise_with(sched, sample.target, s, noise);
  nn::Graph<T> g(want_grads);
  const auto p = net.bind(g, want_grads);
  const auto ctx = net.encode(g, p, sample.inputs);
  const auto pred = net.denoise(g, p, ctx, g.constant(noised.data), s);
  const auto l = nn::mse(pred, noise);
  LossResult<T> out;
  out.step = s;
  out.loss = static_cast<double>(l.value()[0]);
  if (!std::isfinite(out.loss))
    throw NumericalError("non-finite loss at diffusion step " + std::to_string(s) + ": " + activation_report(g));
  if (want_grads) {
    g.backward(l);
    out.grads.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto& gr = g.grad_of(p[i]);
      out.grads[i].assign(gr.begin(), gr.end());
      if (out.grads[i].empty()) out.grads[i].assign(net.params().values[i].size(), T{0});
    }
  }
  return out;
}

template <class T>
LossResult<T> loss(const nn::Network<T>& net, const Prepared<T>& sample, const diffusion::Schedule& sched, Rng& rng,
                   bool want_grads) {
  const std::size_t s = static_cast<std::size_t>(rng.uniform_index(sched.steps));
  const BasicTensor<T> noise = diffusion::standard_normal<T>(sample.target.shape, rng);
  return loss_with(net, sample, sched, s, noise, want_grads);
}

template <class T>
double denoiser_loss(const diffusion::Denoiser<T>& denoiser, const BasicTensor<T>& target,
                     const diffusion::Schedule& sched, Rng& rng) {
  const std::size_t s = static_cast<std::size_t>(rng.uniform_index(sched.steps));
  const auto noised = diffusion::forward_noise(sched, target, s, rng);
  const BasicTensor<T> pred = denoiser(noised.data, s);
  if (pred.shape != target.shape) throw ShapeError("denoiser output shape " + shape_str(pred.shape));
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(noised.noise_used[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

// ---- optimizer -------------------------------------------------------------------

void Adam::update(nn::ParamStore<float>& params, const std::vector<std::vector<float>>& grads) {
  if (grads.size() != params.values.size()) throw ShapeError("gradient list does not match parameters");
  if (m_.empty()) {
    for (const auto& v : params.values) {
      m_.emplace_back(v.size(), 0.0f);
      v_.emplace_back(v.size(), 0.0f);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& w = params.values[i].data;
    if (grads[i].size() != w.size()) throw ShapeError("gradient size mismatch for " + params.names[i]);
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = grads[i][k];
      const double m = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
      const double v = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
      m_[i][k] = static_cast<float>(m);
      v_[i][k] = static_cast<float>(v);
      w[k] = static_cast<float>(w[k] - lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
    }
  }
}

void Adam::restore(std::uint64_t steps, std::vector<std::vector<float>> m, std::vector<std::vector<float>> v) {
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---- state -----------------------------------------------------------------------

namespace {

std::vector<float> flatten(const std::vector<std::vector<float>>& parts) {
  std::vector<float> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<std::vector<float>> unflatten(const std::vector<float>& flat, const nn::ParamStore<float>& like) {
  std::vector<std::vector<float>> out;
  std::size_t off = 0;
  for (const auto& v : like.values) {
    out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(off),
                     flat.begin() + static_cast<std::ptrdiff_t>(off + v.size()));
    off += v.size();
  }
  return out;
}

}  // namespace

void TrainState::save(const fs::path& dir, const TrainConfig& cfg, const data::NormStats& stats) const {
  nn::Checkpoint ck = checkpoint;
  const json meta{{"step", step},
                  {"rng_state", rng_state},
                  {"best_loss", best_loss},
                  {"ema_loss", ema_loss},
                  {"target_bound", target_bound},
                  {"adam_steps", optimizer.steps()},
                  {"norm_stats", json::parse(data::norm_stats_to_json(stats))},
                  {"schedule", {{"steps", cfg.diffusion_steps}, {"beta_min", cfg.beta_min}, {"beta_max", cfg.beta_max}}},
                  {"train_config", json::parse(cfg.to_json())}};
  ck.metadata = meta.dump();
  ck.save(dir);
  if (optimizer.steps() > 0) {
    io::write_f32(dir / "adam_m.bin", flatten(optimizer.first_moment()));
    io::write_f32(dir / "adam_v.bin", flatten(optimizer.second_moment()));
  }
}

TrainState TrainState::load(const fs::path& dir) {
  TrainState st;
  st.checkpoint = nn::Checkpoint::load(dir);
  json meta;
  try {
    meta = json::parse(st.checkpoint.metadata);
    st.step = meta.at("step").get<std::size_t>();
    st.rng_state = meta.at("rng_state").get<std::string>();
    st.best_loss = meta.at("best_loss").get<double>();
    st.ema_loss = meta.at("ema_loss").get<double>();
    st.target_bound = meta.value("target_bound", 0.0);
    const auto cfg = TrainConfig::from_json(meta.at("train_config").dump());
    st.optimizer = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    const auto adam_steps = meta.at("adam_steps").get<std::uint64_t>();
    if (adam_steps > 0) {
      const std::size_t count = st.checkpoint.params.count();
      if (io::f32_count(dir / "adam_m.bin") != count || io::f32_count(dir / "adam_v.bin") != count)
        throw CorruptionError("optimizer moments in " + dir.string() + " do not match the parameter count");
      st.optimizer.restore(adam_steps, unflatten(io::read_f32(dir / "adam_m.bin", 0, count), st.checkpoint.params),
                           unflatten(io::read_f32(dir / "adam_v.bin", 0, count), st.checkpoint.params));
    }
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint in " + dir.string() + " lacks training state: " + e.what());
  }
  return st;
}

// ---- loop ------------------------------------------------------------------------

std::vector<data::SampleRecord> load_normalized(const data::DatasetManifest& mf, std::size_t begin, std::size_t end) {
  std::vector<data::SampleRecord> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) out.push_back(data::normalize(data::load_sample(mf, i), mf.stats));
  return out;
}

namespace {

std::string format_loss(std::size_t step, double loss) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%zu,%.17g\n", step, loss);
  return buf;
}

std::vector<double> read_loss_csv(const fs::path& path, std::size_t rows) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string() + " to resume the loss log");
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (out.size() < rows && std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw CorruptionError("malformed row in " + path.string() + ": " + line);
    out.push_back(std::stod(line.substr(comma + 1)));
  }
  if (out.size() != rows)
    throw CorruptionError(path.string() + " has " + std::to_string(out.size()) + " rows, checkpoint is at step " +
                          std::to_string(rows));
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  const data::DatasetManifest mf = data::read_manifest(cfg.dataset);
  const nn::NetworkConfig netcfg = cfg.effective_network(mf);
  netcfg.validate();
  if (mf.train_count == 0) throw ConfigError("dataset " + cfg.dataset.string() + " has an empty training split");
  io::ensure_writable_dir(cfg.out);
  io::write_text(cfg.out / "train_config.json", cfg.to_json() + "\n");

  TrainResult result;
  std::vector<Prepared<float>> samples;
  samples.reserve(mf.train_count);
  for (const auto& rec : load_normalized(mf, 0, mf.train_count))
    samples.push_back(prepare<float>(rec, netcfg, &result.counters));

  const auto sched = diffusion::Schedule::cosine(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max);
  double target_bound = 0.0;
  for (const auto& smp : samples)
    for (float v : smp.target.data) target_bound = std::max(target_bound, std::abs(static_cast<double>(v)));

  std::optional<nn::Network<float>> net;
  Adam adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  Rng rng(mix_seed(cfg.seed, 2));
  TrainState state;
  if (options.resume) {
    state = TrainState::load(*options.resume);
    if (!(state.checkpoint.config == netcfg))
      throw ConfigError("checkpoint in " + options.resume->string() + " was trained with a different network config");
    if (state.step > cfg.steps) throw ConfigError("checkpoint step exceeds the configured step count");
    net.emplace(netcfg, state.checkpoint.params);
    adam = state.optimizer;
    rng.restore(state.rng_state);
    result.losses = read_loss_csv(cfg.out / "loss.csv", state.step);
  } else {
    net.emplace(netcfg, nn::Network<float>::InitOptions{mix_seed(cfg.seed, 1), true});
  }
  result.parameter_count = net->parameter_count();

  {
    std::string text = "step,loss\n";
    for (std::size_t i = 0; i < result.losses.size(); ++i) text += format_loss(i + 1, result.losses[i]);
    io::write_text(cfg.out / "loss.csv", text);
  }
  std::ofstream log(cfg.out / "loss.csv", std::ios::app);
  if (!log) throw IoError("cannot append to " + (cfg.out / "loss.csv").string());

  auto snapshot = [&](const fs::path& dir, std::size_t step) {
    state.checkpoint.config = netcfg;
    state.checkpoint.params = net->params();
    state.optimizer = adam;
    state.step = step;
    state.rng_state = rng.state();
    state.target_bound = target_bound;
    state.save(dir, cfg, mf.stats);
  };

  const unsigned threads = worker_threads();
  std::size_t end = cfg.steps;
  if (options.stop_after) end = std::min(end, state.step + options.stop_after);
  for (std::size_t step = state.step + 1; step <= end; ++step) {
    struct Draw {
      std::size_t index, s;
      Tensor noise;
    };
    std::vector<Draw> draws;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      Draw d;
      d.index = static_cast<std::size_t>(rng.uniform_index(samples.size()));
      d.s = static_cast<std::size_t>(rng.uniform_index(sched.steps));
      d.noise = diffusion::standard_normal<float>(samples[d.index].target.shape, rng);
      draws.push_back(std::move(d));
    }
    std::vector<LossResult<float>> parts(cfg.batch);
    try {
      parallel_for(cfg.batch, threads, [&](std::size_t b) {
        parts[b] = loss_with(*net, samples[draws[b].index], sched, draws[b].s, draws[b].noise, true);
      });
    } catch (const NumericalError& e) {
      throw NumericalError("training step " + std::to_string(step) + ": " + e.what());
    }
    double loss = 0.0;
    std::vector<std::vector<float>> grads = std::move(parts[0].grads);
    loss += parts[0].loss;
    for (std::size_t b = 1; b < cfg.batch; ++b) {
      loss += parts[b].loss;
      for (std::size_t i = 0; i < grads.size(); ++i)
        for (std::size_t k = 0; k < grads[i].size(); ++k) grads[i][k] += parts[b].grads[i][k];
    }
    const float inv = 1.0f / static_cast<float>(cfg.batch);
    for (auto& gvec : grads)
      for (float& v : gvec) v *= inv;
    loss /= static_cast<double>(cfg.batch);
    adam.update(net->params(), grads);
    if (!net->params().all_finite())
      throw NumericalError("training step " + std::to_string(step) + ": parameters became non-finite");

    result.losses.push_back(loss);
    log << format_loss(step, loss);
    state.ema_loss = step == 1 ? loss : 0.99 * state.ema_loss + 0.01 * loss;
    state.best_loss = step == 1 ? loss : std::min(state.best_loss, loss);
    if (options.progress) options.progress(step, loss);
    if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06zu", step);
      snapshot(cfg.out / "checkpoints" / name, step);
    }
  }
  log.close();
  if (!log) throw IoError("failed writing " + (cfg.out / "loss.csv").string());
  result.final_checkpoint = cfg.out / "checkpoint";
  snapshot(result.final_checkpoint, end);
  return result;
}

template Prepared<float> prepare<float>(const data::SampleRecord&, const nn::NetworkConfig&, Instrumentation*);
template Prepared<double> prepare<double>(const data::SampleRecord&, const nn::NetworkConfig&, Instrumentation*);
template LossResult<float> loss_with<float>(const nn::Network<float>&, const Prepared<float>&,
                                            const diffusion::Schedule&, std::size_t, const Tensor&, bool);
template LossResult<double> loss_with<double>(const nn::Network<double>&, const Prepared<double>&,
                                              const diffusion::Schedule&, std::size_t, const BasicTensor<double>&,
                                              bool);
template LossResult<float> loss<float>(const nn::Network<float>&, const Prepared<float>&, const diffusion::Schedule&,
                                       Rng&, bool);
template LossResult<double> loss<double>(const nn::Network<double>&, const Prepared<double>&,
                                         const diffusion::Schedule&, Rng&, bool);
template double denoiser_loss<float>(const diffusion::Denoiser<float>&, const Tensor&, const diffusion::Schedule&,
                                     Rng&);
template double denoiser_loss<double>(const diffusion::Denoiser<double>&, const BasicTensor<double>&,
                                      const diffusion::Schedule&, Rng&);

}  // namespace tcpdiff::train
