#include "tcpdiff/datasets.hpp"

#include <cmath>

#include "json.hpp"
#include "tcpdiff/error.hpp"
#include "tcpdiff/io.hpp"

namespace tcpdiff::data {

using nlohmann::json;

void GridSpec::validate() const {
  if (height != width)
    throw ConfigError("grid must be square, got " + std::to_string(height) + "x" + std::to_string(width));
  if (height < 8) throw ConfigError("grid must be at least 8x8, got " + std::to_string(height));
  if (!(cell_size_deg > 0.0)) throw ConfigError("cell_size_deg must be positive");
}

std::string_view group_name(Group g) {
  switch (g) {
    case Group::RainHist: return "rain_hist";
    case Group::SfcEnv: return "sfc_env";
    case Group::PlEnv: return "pl_env";
    case Group::Scalars: return "scalars";
    case Group::FutureNwp: return "future_nwp";
    case Group::TargetRain: return "target_rain";
  }
  return "?";
}

bool NormStats::any_degenerate() const {
  for (const auto* group : {&rain, &sfc, &pl, &scalars, &future})
    for (const auto& c : *group)
      if (c.degenerate) return true;
  return false;
}

Shape DatasetManifest::group_shape(Group g) const {
  const std::size_t h = grid.height, w = grid.width;
  switch (g) {
    case Group::RainHist: return {n + 1, h, w};
    case Group::SfcEnv: return {n, channels.at("sfc_env").size(), h, w};
    case Group::PlEnv: return {n, kLevelVarCount, channels.at("pl_env").size() / kLevelVarCount, h, w};
    case Group::Scalars: return {n, channels.at("scalars").size()};
    case Group::FutureNwp: return {m, channels.at("future_nwp").size(), h, w};
    case Group::TargetRain: return {m, h, w};
  }
  return {};
}

std::size_t DatasetManifest::group_size(Group g) const { return shape_numel(group_shape(g)); }

std::map<std::string, std::vector<std::string>> default_channel_inventory() {
  std::map<std::string, std::vector<std::string>> inv;
  for (auto c : kSurfaceChannels) inv["sfc_env"].emplace_back(c);
  for (auto v : kLevelVariables)
    for (int level : kPressureLevels) inv["pl_env"].push_back(std::string(v) + "_" + std::to_string(level));
  for (auto c : kScalarChannels) inv["scalars"].emplace_back(c);
  for (auto c : kFutureChannels) inv["future_nwp"].emplace_back(c);
  return inv;
}

void SampleRecord::validate(std::size_t n_steps, std::size_t m_steps, const GridSpec& grid, bool raw) const {
  const std::size_t h = grid.height, w = grid.width;
  auto check = [](const Tensor& t, const Shape& expected, std::string_view name) {
    if (t.shape != expected)
      throw ShapeError(std::string(name) + " has shape " + shape_str(t.shape) + ", expected " +
                       shape_str(expected));
    if (!t.all_finite()) throw NumericalError(std::string(name) + " contains non-finite values");
  };
  check(rain_hist, {n_steps + 1, h, w}, "rain_hist");
  check(sfc_env, {n_steps, kSurfaceCount, h, w}, "sfc_env");
  check(pl_env, {n_steps, kLevelVarCount, kLevelCount, h, w}, "pl_env");
  check(scalars, {n_steps, kScalarCount}, "scalars");
  check(future_nwp, {m_steps, kFutureCount, h, w}, "future_nwp");
  check(target_rain, {m_steps, h, w}, "target_rain");
  if (raw) {
    for (const Tensor* t : {&rain_hist, &target_rain})
      for (float v : t->data)
        if (v < 0.0f) throw NumericalError("negative rainfall value in record");
  }
}

namespace {

json stats_to_json(const std::vector<ChannelStats>& stats) {
  json arr = json::array();
  for (const auto& s : stats) arr.push_back({{"mean", s.mean}, {"std", s.std}, {"degenerate", s.degenerate}});
  return arr;
}

std::vector<ChannelStats> stats_from_json(const json& arr) {
  std::vector<ChannelStats> out;
  for (const auto& e : arr)
    out.push_back({e.at("mean").get<double>(), e.at("std").get<double>(), e.at("degenerate").get<bool>()});
  return out;
}

}  // namespace

std::string norm_stats_to_json(const NormStats& st) {
  const json j{{"rain", stats_to_json(st.rain)},
               {"sfc_env", stats_to_json(st.sfc)},
               {"pl_env", stats_to_json(st.pl)},
               {"scalars", stats_to_json(st.scalars)},
               {"future_nwp", stats_to_json(st.future)}};
  return j.dump();
}

NormStats norm_stats_from_json(const std::string& text) {
  const json s = json::parse(text);
  NormStats st;
  st.rain = stats_from_json(s.at("rain"));
  st.sfc = stats_from_json(s.at("sfc_env"));
  st.pl = stats_from_json(s.at("pl_env"));
  st.scalars = stats_from_json(s.at("scalars"));
  st.future = stats_from_json(s.at("future_nwp"));
  return st;
}

namespace {

const Tensor& group_of(const SampleRecord& r, Group g) {
  switch (g) {
    case Group::RainHist: return r.rain_hist;
    case Group::SfcEnv: return r.sfc_env;
    case Group::PlEnv: return r.pl_env;
    case Group::Scalars: return r.scalars;
    case Group::FutureNwp: return r.future_nwp;
    case Group::TargetRain: return r.target_rain;
  }
  throw Error("unknown group");
}

Tensor& group_of(SampleRecord& r, Group g) {
  return const_cast<Tensor&>(group_of(static_cast<const SampleRecord&>(r), g));
}

}  // namespace

void write_manifest(const DatasetManifest& mf, const fs::path& dir) {
  json j;
  j["format_version"] = mf.format_version;
  j["grid"] = {{"height", mf.grid.height}, {"width", mf.grid.width}, {"cell_size_deg", mf.grid.cell_size_deg}};
  j["n"] = mf.n;
  j["m"] = mf.m;
  j["dtype"] = mf.dtype;
  j["sample_count"] = mf.sample_count;
  j["train_count"] = mf.train_count;
  j["channels"] = mf.channels;
  j["arrays"] = mf.arrays;
  j["stats"] = json::parse(norm_stats_to_json(mf.stats));
  j["generator"] = {{"seed", mf.generator_seed},
                    {"config", mf.generator_config.empty() ? json(nullptr) : json::parse(mf.generator_config)}};
  json samples = json::array();
  for (std::size_t i = 0; i < mf.sample_count; ++i)
    samples.push_back({{"seed", mf.sample_seeds.at(i)}, {"tags", mf.sample_tags.at(i)}});
  j["samples"] = samples;
  io::write_text(dir / "manifest.json", j.dump(2) + "\n");
}

DatasetManifest read_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw CorruptionError("unparseable manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest mf;
  try {
    mf.format_version = j.at("format_version").get<std::string>();
    if (mf.format_version != "tcpdiff-dataset/1")
      throw CorruptionError("unsupported dataset format '" + mf.format_version + "'");
    const auto& g = j.at("grid");
    mf.grid = {g.at("height").get<std::size_t>(), g.at("width").get<std::size_t>(),
               g.at("cell_size_deg").get<double>()};
    mf.n = j.at("n").get<std::size_t>();
    mf.m = j.at("m").get<std::size_t>();
    mf.dtype = j.at("dtype").get<std::string>();
    mf.sample_count = j.at("sample_count").get<std::size_t>();
    mf.train_count = j.at("train_count").get<std::size_t>();
    mf.channels = j.at("channels").get<std::map<std::string, std::vector<std::string>>>();
    mf.arrays = j.at("arrays").get<std::map<std::string, std::string>>();
    mf.stats = norm_stats_from_json(j.at("stats").dump());
    mf.generator_seed = j.at("generator").at("seed").get<std::uint64_t>();
    const auto& cfg = j.at("generator").at("config");
    if (!cfg.is_null()) mf.generator_config = cfg.dump();
    for (const auto& e : j.at("samples")) {
      mf.sample_seeds.push_back(e.at("seed").get<std::uint64_t>());
      mf.sample_tags.push_back(e.at("tags").get<std::map<std::string, std::string>>());
    }
  } catch (const json::exception& e) {
    throw CorruptionError("malformed manifest " + path.string() + ": " + e.what());
  }
  mf.root = dir;

  if (mf.dtype != "float32-le") throw CorruptionError("unsupported dtype '" + mf.dtype + "'");
  mf.grid.validate();
  const auto expected = default_channel_inventory();
  for (const auto& [group, names] : expected) {
    auto it = mf.channels.find(group);
    if (it == mf.channels.end()) throw CorruptionError("manifest lacks channel list for " + group);
    if (it->second.size() != names.size())
      throw CorruptionError("manifest lists " + std::to_string(it->second.size()) + " channels for " + group +
                            ", layout requires " + std::to_string(names.size()));
  }
  auto check_stats = [](const std::vector<ChannelStats>& st, std::size_t want, std::string_view name) {
    if (st.size() != want)
      throw CorruptionError("stats for " + std::string(name) + " have " + std::to_string(st.size()) +
                            " entries, expected " + std::to_string(want));
  };
  check_stats(mf.stats.rain, 1, "rain");
  check_stats(mf.stats.sfc, kSurfaceCount, "sfc_env");
  check_stats(mf.stats.pl, kLevelVarCount * kLevelCount, "pl_env");
  check_stats(mf.stats.scalars, kScalarCount, "scalars");
  check_stats(mf.stats.future, kFutureCount, "future_nwp");
  if (mf.sample_seeds.size() != mf.sample_count)
    throw CorruptionError("manifest sample list disagrees with sample_count");
  if (mf.train_count > mf.sample_count) throw CorruptionError("train_count exceeds sample_count");
  for (Group g : kGroups) {
    const auto name = std::string(group_name(g));
    auto it = mf.arrays.find(name);
    if (it == mf.arrays.end()) throw CorruptionError("manifest lacks array entry for " + name);
    const auto count = io::f32_count(dir / it->second);
    if (count != mf.sample_count * mf.group_size(g))
      throw CorruptionError(name + " holds " + std::to_string(count) + " values, manifest implies " +
                            std::to_string(mf.sample_count * mf.group_size(g)));
  }
  return mf;
}

DatasetManifest write_dataset(const fs::path& dir, const std::vector<SampleRecord>& records, const GridSpec& grid,
                              std::size_t train_count, std::uint64_t generator_seed,
                              const std::string& generator_config) {
  if (records.empty()) throw ConfigError("cannot write an empty dataset");
  if (train_count == 0 || train_count > records.size())
    throw ConfigError("train_count must be in [1, sample_count]");
  grid.validate();
  const std::size_t n = records.front().n(), m = records.front().m();
  for (const auto& r : records) r.validate(n, m, grid);
  io::ensure_writable_dir(dir);

  DatasetManifest mf;
  mf.grid = grid;
  mf.n = n;
  mf.m = m;
  mf.sample_count = records.size();
  mf.train_count = train_count;
  mf.channels = default_channel_inventory();
  for (Group g : kGroups) mf.arrays[std::string(group_name(g))] = std::string(group_name(g)) + ".bin";
  mf.stats = compute_stats({records.begin(), records.begin() + static_cast<std::ptrdiff_t>(train_count)});
  mf.generator_seed = generator_seed;
  mf.generator_config = generator_config;
  for (const auto& r : records) {
    mf.sample_seeds.push_back(r.seed);
    mf.sample_tags.push_back(r.tags);
  }
  for (Group g : kGroups) {
    const auto path = dir / mf.arrays.at(std::string(group_name(g)));
    io::write_f32(path, {});
    for (const auto& r : records) io::append_f32(path, group_of(r, g).data);
  }
  write_manifest(mf, dir);
  mf.root = dir;
  return mf;
}

SampleRecord load_sample(const DatasetManifest& mf, std::size_t index) {
  if (index >= mf.sample_count)
    throw RangeError("sample index " + std::to_string(index) + " out of range [0, " +
                     std::to_string(mf.sample_count) + ")");
  SampleRecord r;
  for (Group g : kGroups) {
    const auto name = std::string(group_name(g));
    const auto path = mf.root / mf.arrays.at(name);
    const std::size_t per = mf.group_size(g);
    if (io::f32_count(path) != mf.sample_count * per)
      throw CorruptionError(name + " size disagrees with manifest");
    group_of(r, g) = Tensor(mf.group_shape(g), io::read_f32(path, index * per, per));
  }
  r.seed = mf.sample_seeds.at(index);
  r.tags = mf.sample_tags.at(index);
  try {
    r.validate(mf.n, mf.m, mf.grid);
  } catch (const ShapeError& e) {
    throw CorruptionError(std::string("record disagrees with manifest: ") + e.what());
  }
  return r;
}

namespace {

struct Accum {
  double sum = 0.0, sumsq = 0.0;
  std::size_t count = 0;
  void add(double v) {
    sum += v;
    sumsq += v * v;
    ++count;
  }
  ChannelStats finish() const {
    ChannelStats s;
    if (count == 0) return s;
    s.mean = sum / static_cast<double>(count);
    const double var = std::max(0.0, sumsq / static_cast<double>(count) - s.mean * s.mean);
    s.std = std::sqrt(var);
    // Relative floor so that float round-off on a constant channel still counts as constant.
    if (!(s.std > 1e-6 * std::max(1.0, std::abs(s.mean)))) {
      s.std = 1.0;
      s.degenerate = true;
    }
    return s;
  }
};

// Visits a tensor whose layout is [lead, channels, rest...] with channel index.
template <class F>
void for_each_channel(const Tensor& t, std::size_t lead, std::size_t channels, F&& f) {
  const std::size_t inner = t.size() / (lead * channels);
  for (std::size_t a = 0; a < lead; ++a)
    for (std::size_t c = 0; c < channels; ++c) {
      const float* p = t.data.data() + (a * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) f(c, p + i);
    }
}

bool is_log_channel_future(std::size_t c) { return c == kFuturePrecipChannel; }

double fwd(double v, bool log_space, const ChannelStats& s) {
  return ((log_space ? std::log1p(v) : v) - s.mean) / s.std;
}
double inv(double z, bool log_space, const ChannelStats& s) {
  const double v = z * s.std + s.mean;
  return log_space ? std::expm1(v) : v;
}

template <class F>
SampleRecord transform(const SampleRecord& in, const NormStats& st, F&& op) {
  SampleRecord out = in;
  const std::size_t n = in.n(), m = in.m();
  auto apply = [&](Tensor& t, std::size_t lead, std::size_t channels, const std::vector<ChannelStats>& stats,
                   auto is_log) {
    for_each_channel(t, lead, channels, [&](std::size_t c, const float* p) {
      float* q = const_cast<float*>(p);
      *q = static_cast<float>(op(static_cast<double>(*q), is_log(c), stats[c]));
    });
  };
  auto always = [](std::size_t) { return true; };
  auto never = [](std::size_t) { return false; };
  apply(out.rain_hist, n + 1, 1, st.rain, always);
  apply(out.target_rain, m, 1, st.rain, always);
  apply(out.sfc_env, n, kSurfaceCount, st.sfc, never);
  apply(out.pl_env, n, kLevelVarCount * kLevelCount, st.pl, never);
  apply(out.scalars, n, kScalarCount, st.scalars, never);
  apply(out.future_nwp, m, kFutureCount, st.future, is_log_channel_future);
  return out;
}

}  // namespace

NormStats compute_stats(const std::vector<SampleRecord>& records) {
  if (records.empty()) throw ConfigError("statistics need at least one record");
  std::vector<Accum> rain(1), sfc(kSurfaceCount), pl(kLevelVarCount * kLevelCount), sc(kScalarCount),
      fut(kFutureCount);
  for (const auto& r : records) {
    const std::size_t n = r.n(), m = r.m();
    for (float v : r.rain_hist.data) rain[0].add(std::log1p(static_cast<double>(v)));
    for (float v : r.target_rain.data) rain[0].add(std::log1p(static_cast<double>(v)));
    for_each_channel(r.sfc_env, n, kSurfaceCount, [&](std::size_t c, const float* p) { sfc[c].add(*p); });
    for_each_channel(r.pl_env, n, pl.size(), [&](std::size_t c, const float* p) { pl[c].add(*p); });
    for_each_channel(r.scalars, n, kScalarCount, [&](std::size_t c, const float* p) { sc[c].add(*p); });
    for_each_channel(r.future_nwp, m, kFutureCount, [&](std::size_t c, const float* p) {
      fut[c].add(is_log_channel_future(c) ? std::log1p(static_cast<double>(*p)) : *p);
    });
  }
  auto finish = [](const std::vector<Accum>& a) {
    std::vector<ChannelStats> out;
    for (const auto& x : a) out.push_back(x.finish());
    return out;
  };
  return {finish(rain), finish(sfc), finish(pl), finish(sc), finish(fut)};
}

SampleRecord normalize(const SampleRecord& record, const NormStats& stats) {
  return transform(record, stats, fwd);
}

SampleRecord denormalize(const SampleRecord& record, const NormStats& stats) {
  return transform(record, stats, inv);
}

Tensor normalize_rain(const Tensor& rain, const NormStats& stats) {
  Tensor out = rain;
  for (float& v : out.data) v = static_cast<float>(fwd(v, true, stats.rain.at(0)));
  return out;
}

Tensor denormalize_rain(const Tensor& rain, const NormStats& stats) {
  Tensor out = rain;
  for (float& v : out.data) v = static_cast<float>(inv(v, true, stats.rain.at(0)));
  return out;
}

}  // namespace tcpdiff::data
