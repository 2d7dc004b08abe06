#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "tcpdiff/datasets.hpp"
#include "tcpdiff/io.hpp"
#include "tcpdiff/network.hpp"
#include "tcpdiff/synth.hpp"
#include "tcpdiff/training.hpp"
#include "test_util.hpp"

using namespace tcpdiff;
using namespace tcpdiff::nn;
using tcpdiff::testing::random_normal;

namespace {

template <class T = float>
ModelInputs<T> random_inputs(const NetworkConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t g = c.grid;
  ModelInputs<T> in;
  in.rain = random_normal<T>({c.n, g, g}, rng);
  if (c.use_arp) in.deltas = random_normal<T>({c.n, g, g}, rng);
  if (c.use_multimodal) {
    in.sfc = random_normal<T>({c.n, 4, g, g}, rng);
    in.pl = random_normal<T>({c.n, 5, 4, g, g}, rng);
    in.scalars = random_normal<T>({c.n, c.scalar_channels}, rng);
  }
  if (c.use_future) in.future = random_normal<T>({c.m, c.future_channels, g, g}, rng);
  return in;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(double(a[i]) - double(b[i])));
  return d;
}

Network<float> live_net(NetworkConfig c, std::uint64_t seed = 3) {
  return Network<float>(std::move(c), {seed, false});
}

}  // namespace

TEST(NetworkConfig, Validation) {
  EXPECT_NO_THROW(NetworkConfig::tiny().validate());
  EXPECT_NO_THROW(NetworkConfig::smallest().validate());
  auto c = NetworkConfig::tiny();
  c.grid = 42;  // not divisible by 4
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(Network<float>{c}, ConfigError);
  c = NetworkConfig::tiny();
  c.m = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = NetworkConfig::tiny();
  c.depth = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = NetworkConfig::tiny();
  c.base_channels = 6;  // not divisible by norm groups
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(NetworkConfig, JsonRoundTripAndDepth) {
  auto c = NetworkConfig::tiny(64);
  c.use_future = false;
  c.heads = 2;
  EXPECT_EQ(NetworkConfig::from_json(c.to_json()), c);
  EXPECT_EQ(NetworkConfig::max_depth_for(40), 3u);
  EXPECT_EQ(NetworkConfig::max_depth_for(100), 2u);
  EXPECT_EQ(NetworkConfig::max_depth_for(64), 4u);
  EXPECT_EQ(NetworkConfig::max_depth_for(32), 4u);
}

TEST(Network, ShapeContractAcrossGrids) {
  for (std::size_t grid : {32u, 40u, 64u, 100u}) {
    const auto c = NetworkConfig::tiny(grid);
    ASSERT_EQ(grid % (std::size_t{1} << c.depth), 0u);
    const auto net = live_net(c);
    const auto in = random_inputs(c, grid);
    Rng rng(1);
    const auto out = net.predict_noise(in, random_normal<float>({4, grid, grid}, rng), 17);
    EXPECT_EQ(out.shape, (Shape{4, grid, grid})) << "grid " << grid;
    EXPECT_TRUE(out.all_finite());
  }
}

TEST(Network, His2dFeatureShape) {
  auto c = NetworkConfig::tiny();
  const auto net = live_net(c);
  Rng rng(2);
  const auto f = net.encode_his2d(random_inputs(c, 4), random_normal<float>({4, 40, 40}, rng));
  EXPECT_EQ(f.shape, (Shape{c.base_channels, 4, 40, 40}));
}

TEST(Network, ZeroInputsGiveZeroFeatures) {
  const auto c = NetworkConfig::tiny();
  const Network<float> net(c, {5, true});
  auto in = random_inputs(c, 5);
  for (auto* t : {&in.rain, &in.deltas, &in.sfc, &in.pl, &in.scalars, &in.future}) std::fill(t->data.begin(), t->data.end(), 0.0f);
  const auto f = net.encode_his2d(in, Tensor({4, 40, 40}));
  for (float v : f.data) ASSERT_EQ(v, 0.0f);
}

TEST(Network, MultimodalToggleDrops24Channels) {
  auto c = NetworkConfig::tiny();
  const std::size_t with = Network<float>(c).his2d_input_channels();
  c.use_multimodal = false;
  EXPECT_EQ(with - Network<float>(c).his2d_input_channels(), 24u);
}

TEST(Network, ParameterCountMonotone) {
  auto c = NetworkConfig::tiny();
  const std::size_t full = Network<float>(c).parameter_count();
  auto f_off = c;
  f_off.use_future = false;
  auto m_off = c;
  m_off.use_multimodal = false;
  const Network<float> nf(f_off), nm(m_off);
  EXPECT_GT(full, nf.parameter_count());
  EXPECT_GT(full, nm.parameter_count());
  EXPECT_FALSE(nf.params().has_prefix("future."));
  EXPECT_FALSE(nm.params().has_prefix("scalar."));
  EXPECT_TRUE(Network<float>(c).params().has_prefix("future."));
}

TEST(Network, ScalarEncoder) {
  const auto c = NetworkConfig::tiny();
  auto net = live_net(c);
  Rng rng(6);
  const auto x = random_normal<float>({4, 7}, rng);
  const auto e = net.encode_scalars(x);
  EXPECT_EQ(e.shape, (Shape{c.scalar_width}));

  auto swapped = x;
  for (std::size_t j = 0; j < 7; ++j) std::swap(swapped[j], swapped[3 * 7 + j]);
  EXPECT_GT(max_abs_diff(e, net.encode_scalars(swapped)), 0.0);

  for (const char* name : {"scalar.head.w", "scalar.head.b"}) {
    auto& t = net.params().values[net.params().index(name)];
    std::fill(t.data.begin(), t.data.end(), 0.0f);
  }
  for (float v : net.encode_scalars(Tensor({4, 7})).data) EXPECT_EQ(v, 0.0f);
}

TEST(Network, FutureEncoder) {
  const auto c = NetworkConfig::tiny();
  const auto net = live_net(c);
  Rng rng(7);
  const auto x = random_normal<float>({4, 11, 40, 40}, rng);
  const auto e = net.encode_future(x);
  EXPECT_EQ(e.shape, (Shape{c.future_width}));
  auto doubled = x;
  for (auto& v : doubled.data) v *= 2.0f;
  const auto e2 = net.encode_future(doubled);
  double diff = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) diff = std::max(diff, std::abs(double(e2[i]) - 2.0 * e[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(Network, ConditionSensitivityFollowsFutureToggle) {
  auto c = NetworkConfig::tiny();
  Rng rng(8);
  const auto noised = random_normal<float>({4, 40, 40}, rng);
  for (bool use_future : {true, false}) {
    c.use_future = use_future;
    const auto net = live_net(c);
    auto a = random_inputs(c, 9);
    auto b = a;
    b.future = random_normal<float>({4, 11, 40, 40}, rng);
    const double d = max_abs_diff(net.predict_noise(a, noised, 50), net.predict_noise(b, noised, 50));
    if (use_future)
      EXPECT_GT(d, 0.0);
    else
      EXPECT_EQ(d, 0.0);
  }
}

TEST(Network, StepChangesOutputAndZeroHeadIsZero) {
  const auto c = NetworkConfig::tiny();
  const auto in = random_inputs(c, 10);
  Rng rng(10);
  const auto noised = random_normal<float>({4, 40, 40}, rng);
  const auto net = live_net(c);
  EXPECT_GT(max_abs_diff(net.predict_noise(in, noised, 3), net.predict_noise(in, noised, 150)), 0.0);
  const Network<float> fresh(c, {1, true});
  for (float v : fresh.predict_noise(in, noised, 3).data) ASSERT_EQ(v, 0.0f);
}

TEST(Network, ForwardIsDeterministicAndCachedContextMatches) {
  const auto c = NetworkConfig::tiny();
  const auto net = live_net(c);
  const auto in = random_inputs(c, 11);
  Rng rng(11);
  const auto noised = random_normal<float>({4, 40, 40}, rng);
  const auto a = net.predict_noise(in, noised, 42);
  EXPECT_EQ(a, net.predict_noise(in, noised, 42));
  const auto ctx = net.encode_context(in);
  EXPECT_LE(max_abs_diff(a, net.predict_noise(ctx, noised, 42)), 1e-5);
}

TEST(Network, InputShapeErrorsNameTheGroup) {
  const auto c = NetworkConfig::tiny();
  const auto net = live_net(c);
  auto in = random_inputs(c, 12);
  in.pl = Tensor({4, 5, 3, 40, 40});
  try {
    net.predict_noise(in, Tensor({4, 40, 40}), 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pl"), std::string::npos);
  }
}

TEST(Network, SinusoidalEmbedding) {
  const auto a = sinusoidal_embedding<double>(0, 8), b = sinusoidal_embedding<double>(5, 8);
  EXPECT_EQ(a.shape, (Shape{8}));
  EXPECT_NE(a, b);
  for (double v : b.data) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Network, GradientMatchesFiniteDifferences) {
  auto cfg = NetworkConfig::smallest();
  data::SynthConfig sc = data::SynthConfig::for_grid({8, 8, 1.25});
  sc.n = sc.m = 2;
  const auto raw = data::synthesize_sample(sc, 0);
  const auto stats = data::compute_stats({raw, data::synthesize_sample(sc, 1)});
  const auto sample = train::prepare<double>(data::normalize(raw, stats), cfg);

  Network<double> net(cfg, {21, false});
  const auto sched = diffusion::Schedule::cosine(20);
  Rng rng(22);
  const auto noise = random_normal<double>(sample.target.shape, rng);
  const std::size_t s = 7;
  const auto base = train::loss_with(net, sample, sched, s, noise, true);

  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t i = 0; i < 64; ++i) {
    const std::size_t p = rng.uniform_index(net.params().values.size());
    picks.emplace_back(p, rng.uniform_index(net.params().values[p].size()));
  }
  const double h = 1e-3;
  std::size_t nonzero = 0;
  for (auto [p, e] : picks) {
    auto& x = net.params().values[p][e];
    const double orig = x;
    x = orig + h;
    const double up = train::loss_with(net, sample, sched, s, noise, false).loss;
    x = orig - h;
    const double down = train::loss_with(net, sample, sched, s, noise, false).loss;
    x = orig;
    const double fd = (up - down) / (2 * h), g = base.grads[p][e];
    if (std::abs(fd) > 1e-8) ++nonzero;
    EXPECT_LE(std::abs(g - fd), 1e-3 * std::max(std::abs(fd), std::abs(g)) + 1e-8)
        << net.params().names[p] << "[" << e << "] analytic " << g << " numeric " << fd;
  }
  EXPECT_GT(nonzero, 32u);
}

TEST(Checkpoint, RoundTrip) {
  tcpdiff::testing::TempDir dir("ckpt");
  auto c = NetworkConfig::tiny();
  c.use_multimodal = false;
  const auto net = live_net(c);
  Checkpoint ck{c, net.params(), R"({"note":"x"})"};
  ck.save(dir.path());
  const auto back = Checkpoint::load(dir.path());
  EXPECT_EQ(back.config, c);
  EXPECT_EQ(back.params.names, ck.params.names);
  for (std::size_t i = 0; i < ck.params.values.size(); ++i) EXPECT_EQ(back.params.values[i], ck.params.values[i]);
  const Network<float> restored(back.config, back.params);
  const auto in = random_inputs(c, 13);
  Rng rng(13);
  const auto noised = random_normal<float>({4, 40, 40}, rng);
  EXPECT_EQ(restored.predict_noise(in, noised, 9), net.predict_noise(in, noised, 9));
}

TEST(Checkpoint, MissingOrCorrupt) {
  tcpdiff::testing::TempDir dir("ckpt");
  EXPECT_THROW(Checkpoint::load(dir / "none"), Error);
  const auto c = NetworkConfig::smallest();
  Checkpoint{c, Network<float>(c).params(), "{}"}.save(dir.path());
  const auto bytes = tcpdiff::testing::file_bytes(dir / "params.bin");
  io::write_text(dir / "params.bin", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(Checkpoint::load(dir.path()), CorruptionError);
}
