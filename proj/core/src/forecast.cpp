#include "tcpdiff/forecast.hpp"

#include <algorithm>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <mutex>

#include "json.hpp"
#include "tcpdiff/arp.hpp"
#include "tcpdiff/error.hpp"
#include "tcpdiff/io.hpp"
#include "tcpdiff/parallel.hpp"

namespace tcpdiff::forecast {

using nlohmann::json;

std::vector<int> lead_hours(std::size_t m) {
  std::vector<int> out;
  for (std::size_t t = 1; t <= m; ++t) out.push_back(static_cast<int>(3 * t));
  return out;
}

Tensor reconstruct_normalized(const Tensor& sampled, const Tensor& anchor, bool use_arp,
                              train::Instrumentation* counters) {
  if (!use_arp) {
    if (counters) ++counters->direct_outputs;
    return sampled;
  }
  arp::ResidualSequence<float> res{sampled, anchor, arp::Space::Normalized};
  if (counters) ++counters->accumulations;
  return arp::accumulate(res).rain;
}

namespace {

std::string fingerprint(const nn::ParamStore<float>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& v : params.values)
    for (float f : v.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ULL;
      }
    }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

Forecaster::Forecaster(nn::Checkpoint checkpoint, data::NormStats stats, diffusion::Schedule schedule,
                       std::string checkpoint_id)
    : net_(checkpoint.config, checkpoint.params),
      stats_(std::move(stats)),
      sched_(std::move(schedule)),
      id_(checkpoint_id.empty() ? "params:" + fingerprint(checkpoint.params) : std::move(checkpoint_id)) {}

Forecaster Forecaster::load(const fs::path& dir) {
  nn::Checkpoint ck = nn::Checkpoint::load(dir);
  data::NormStats stats;
  diffusion::Schedule sched;
  std::string id;
  double bound = 0.0;
  try {
    const json meta = json::parse(ck.metadata);
    stats = data::norm_stats_from_json(meta.at("norm_stats").dump());
    const auto& s = meta.at("schedule");
    sched = diffusion::Schedule::cosine(s.at("steps").get<std::size_t>(), s.at("beta_min").get<double>(),
                                        s.at("beta_max").get<double>());
    bound = meta.value("target_bound", 0.0);
    id = "step" + std::to_string(meta.value("step", std::size_t{0})) + ":" + fingerprint(ck.params);
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint in " + dir.string() + " lacks normalization or schedule metadata: " + e.what());
  }
  Forecaster out(std::move(ck), std::move(stats), std::move(sched), id);
  out.set_clip_bound(bound);
  return out;
}

Tensor Forecaster::sample_target(const nn::ModelInputs<float>& inputs, Rng& rng) const {
  const auto& c = net_.config();
  const Shape shape{c.m, c.grid, c.grid};
  Tensor out;
  if (sampler_) {
    out = sampler_(inputs, shape, rng);
  } else {
    const auto enc = net_.encode_context(inputs);
    const diffusion::Denoiser<float> denoiser = [&](const Tensor& x, std::size_t s) {
      return diffusion::clip_noise(sched_, x, s, net_.predict_noise(enc, x, s), clip_bound_);
    };
    out = diffusion::sample(sched_, denoiser, shape, rng);
  }
  if (out.shape != shape) throw ShapeError("sampler returned " + shape_str(out.shape) + ", expected " + shape_str(shape));
  if (!out.all_finite()) throw NumericalError("reverse diffusion produced non-finite values");
  return out;
}

Tensor Forecaster::forecast_normalized(const data::SampleRecord& raw, std::uint64_t seed,
                                       train::Instrumentation* counters) const {
  const auto& c = net_.config();
  if (raw.height() != c.grid || raw.width() != c.grid || raw.n() != c.n || raw.m() != c.m)
    throw ConfigError("checkpoint expects grid " + std::to_string(c.grid) + " with n=" + std::to_string(c.n) +
                      ", m=" + std::to_string(c.m) + "; sample is " + std::to_string(raw.height()) + "x" +
                      std::to_string(raw.width()) + " with n=" + std::to_string(raw.n()) +
                      ", m=" + std::to_string(raw.m()));
  const auto prep = train::prepare<float>(data::normalize(raw, stats_), c);
  Rng rng(seed);
  const Tensor sampled = sample_target(prep.inputs, rng);
  return reconstruct_normalized(sampled, prep.anchor, c.use_arp, counters);
}

Tensor Forecaster::forecast(const data::SampleRecord& raw, std::uint64_t seed, train::Instrumentation* counters) const {
  Tensor out = data::denormalize_rain(forecast_normalized(raw, seed, counters), stats_);
  for (float& v : out.data) v = std::max(v, 0.0f);
  return out;
}

Ensemble Forecaster::ensemble(const data::SampleRecord& raw, std::size_t members, std::uint64_t base_seed,
                              unsigned threads) const {
  if (members < 1) throw ConfigError("ensemble needs at least one member");
  Ensemble out;
  out.lead_hours = lead_hours(net_.config().m);
  out.members.resize(members);
  for (std::size_t i = 0; i < members; ++i) out.seeds.push_back(mix_seed(base_seed, i));
  parallel_for(members, threads, [&](std::size_t i) { out.members[i] = forecast(raw, out.seeds[i]); });
  return out;
}

Tensor persistence_forecast(const data::SampleRecord& raw) {
  const std::size_t m = raw.m(), h = raw.height(), w = raw.width(), plane = h * w;
  const std::size_t frames = raw.rain_hist.dim(0);
  Tensor out({m, h, w});
  const auto last = raw.rain_hist.data.begin() + static_cast<std::ptrdiff_t>((frames - 1) * plane);
  for (std::size_t t = 0; t < m; ++t)
    std::copy_n(last, plane, out.data.begin() + static_cast<std::ptrdiff_t>(t * plane));
  return out;
}

// ---- output sets -----------------------------------------------------------------

namespace {

std::string member_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "member_%03zu.bin", i);
  return buf;
}

}  // namespace

void ForecastSet::write(const fs::path& dir) const {
  io::ensure_writable_dir(dir);
  json arrays = json::object();
  for (std::size_t i = 0; i < members.size(); ++i) {
    std::vector<float> flat;
    for (const auto& t : members[i]) flat.insert(flat.end(), t.data.begin(), t.data.end());
    io::write_f32(dir / member_file(i), flat);
    arrays["member_" + std::to_string(i)] = member_file(i);
  }
  const json j{{"format_version", "tcpdiff-forecast/1"},
               {"source", source},
               {"dataset", dataset.string()},
               {"grid", grid},
               {"m", m},
               {"dtype", "float32-le"},
               {"layout", "[sample, lead, y, x]"},
               {"units", "mm/3hr"},
               {"lead_hours", lead_hours},
               {"members", members.size()},
               {"base_seed", base_seed},
               {"seed_derivation", "sample seed = mix(base_seed, sample_index); member seed = mix(sample seed, member)"},
               {"sample_indices", sample_indices},
               {"seeds", seeds},
               {"arrays", arrays}};
  io::write_text(dir / "manifest.json", j.dump(2) + "\n");
}

ForecastSet ForecastSet::read(const fs::path& dir) {
  json j;
  try {
    j = json::parse(io::read_text(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw CorruptionError("unparseable forecast manifest in " + dir.string() + ": " + e.what());
  }
  ForecastSet fs_;
  try {
    if (j.at("format_version").get<std::string>() != "tcpdiff-forecast/1")
      throw CorruptionError("unsupported forecast format in " + dir.string());
    fs_.source = j.at("source").get<std::string>();
    fs_.dataset = j.at("dataset").get<std::string>();
    fs_.grid = j.at("grid").get<std::size_t>();
    fs_.m = j.at("m").get<std::size_t>();
    fs_.lead_hours = j.at("lead_hours").get<std::vector<int>>();
    fs_.base_seed = j.at("base_seed").get<std::uint64_t>();
    fs_.sample_indices = j.at("sample_indices").get<std::vector<std::size_t>>();
    fs_.seeds = j.at("seeds").get<std::vector<std::vector<std::uint64_t>>>();
    const std::size_t members = j.at("members").get<std::size_t>();
    const std::size_t per = fs_.m * fs_.grid * fs_.grid, samples = fs_.sample_indices.size();
    for (std::size_t i = 0; i < members; ++i) {
      const fs::path file = dir / member_file(i);
      if (io::f32_count(file) != per * samples)
        throw CorruptionError(file.string() + " does not hold " + std::to_string(samples) + " forecasts");
      const auto flat = io::read_f32(file, 0, per * samples);
      std::vector<Tensor> frames;
      for (std::size_t k = 0; k < samples; ++k)
        frames.emplace_back(Shape{fs_.m, fs_.grid, fs_.grid},
                            std::vector<float>(flat.begin() + static_cast<std::ptrdiff_t>(k * per),
                                               flat.begin() + static_cast<std::ptrdiff_t>((k + 1) * per)));
      fs_.members.push_back(std::move(frames));
    }
  } catch (const json::exception& e) {
    throw CorruptionError("malformed forecast manifest in " + dir.string() + ": " + e.what());
  }
  return fs_;
}

std::vector<std::size_t> test_indices(const data::DatasetManifest& mf) {
  std::vector<std::size_t> out;
  const std::size_t begin = mf.train_count < mf.sample_count ? mf.train_count : 0;
  for (std::size_t i = begin; i < mf.sample_count; ++i) out.push_back(i);
  return out;
}

ForecastSet run(const Forecaster& model, const data::DatasetManifest& mf, const std::vector<std::size_t>& indices,
                const RunOptions& options) {
  if (options.members < 1) throw ConfigError("forecast needs at least one member");
  ForecastSet out;
  out.source = model.checkpoint_id();
  out.dataset = mf.root;
  out.grid = mf.grid.height;
  out.m = mf.m;
  out.lead_hours = lead_hours(mf.m);
  out.sample_indices = indices;
  out.base_seed = options.seed;
  std::vector<data::SampleRecord> raw;
  for (std::size_t idx : indices) raw.push_back(data::load_sample(mf, idx));
  for (std::size_t idx : indices) {
    std::vector<std::uint64_t> s;
    for (std::size_t i = 0; i < options.members; ++i) s.push_back(mix_seed(mix_seed(options.seed, idx), i));
    out.seeds.push_back(std::move(s));
  }
  out.members.assign(options.members, std::vector<Tensor>(indices.size()));
  const std::size_t total = indices.size() * options.members;
  std::mutex mu;
  std::size_t done = 0;
  parallel_for(total, options.threads, [&](std::size_t task) {
    const std::size_t k = task / options.members, i = task % options.members;
    out.members[i][k] = model.forecast(raw[k], out.seeds[k][i]);
    if (options.progress) {
      std::lock_guard lock(mu);
      options.progress(++done, total);
    }
  });
  return out;
}

ForecastSet run_persistence(const data::DatasetManifest& mf, const std::vector<std::size_t>& indices) {
  ForecastSet out;
  out.source = "persistence";
  out.dataset = mf.root;
  out.grid = mf.grid.height;
  out.m = mf.m;
  out.lead_hours = lead_hours(mf.m);
  out.sample_indices = indices;
  out.members.resize(1);
  for (std::size_t idx : indices) {
    out.members[0].push_back(persistence_forecast(data::load_sample(mf, idx)));
    out.seeds.push_back({0});
  }
  return out;
}

}  // namespace tcpdiff::forecast
