#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>

#include "tcpdiff/forecast.hpp"
#include "tcpdiff/io.hpp"
#include "tcpdiff/synth.hpp"
#include "tcpdiff/verify.hpp"
#include "test_util.hpp"

using namespace tcpdiff;
using namespace tcpdiff::verify;
using tcpdiff::testing::TempDir;

namespace {

Tensor grid2(std::initializer_list<float> v) {
  return Tensor({2, 2}, std::vector<float>(v));
}

/// R and ETS straight from the four counts.
std::optional<double> ets_oracle(double a, double b, double c, double d) {
  const double r = (a + b) * (a + c) / (a + b + c + d);
  const double den = a + b + c - r;
  if (den == 0.0) return std::nullopt;
  return (a - r) / den;
}

std::vector<double> naive_power(const std::vector<double>& f, std::size_t n) {
  std::vector<double> out(n * n);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) {
      std::complex<double> acc = 0.0;
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
          acc += f[y * n + x] * std::polar(1.0, -2.0 * std::numbers::pi * double(u * y + v * x) / double(n));
      out[u * n + v] = std::norm(acc);
    }
  return out;
}

}  // namespace

TEST(Contingency, WorkedExample) {
  const auto c = contingency(grid2({7, 0, 0, 7}), grid2({7, 7, 0, 0}), 6.0);
  EXPECT_EQ(c, (ContingencyCounts{1, 1, 1, 1}));
  const auto e = ets(c);
  ASSERT_TRUE(e.defined());
  EXPECT_DOUBLE_EQ(*e.value, 0.0);
}

TEST(Contingency, IdentityAndAllBelow) {
  Rng rng(1);
  const auto f = tcpdiff::testing::random_uniform({3, 5, 5}, rng, 0.0, 40.0);
  for (double t : kThresholds) {
    const auto c = contingency(f, f, t);
    EXPECT_EQ(c.false_alarms, 0u);
    EXPECT_EQ(c.misses, 0u);
    EXPECT_EQ(c.total(), 75u);
  }
  const auto low = contingency(f, f, 100.0);
  EXPECT_EQ(low.correct_negatives, 75u);
  EXPECT_EQ(low.hits + low.false_alarms + low.misses, 0u);
  EXPECT_THROW(contingency(f, Tensor({3, 5, 4}), 6.0), ShapeError);
}

TEST(Contingency, ThresholdIsInclusive) {
  const auto c = contingency(grid2({6, 5.99f, 0, 0}), grid2({6, 6, 0, 0}), 6.0);
  EXPECT_EQ(c.hits, 1u);
  EXPECT_EQ(c.misses, 1u);
}

TEST(Ets, PerfectAndDegenerate) {
  EXPECT_DOUBLE_EQ(*ets({3, 0, 0, 5}).value, 1.0);
  const auto none = ets({0, 0, 0, 9});
  EXPECT_FALSE(none.defined());
  EXPECT_EQ(none.str(), kNoEvents);
  EXPECT_FALSE(ets({}).defined());
}

TEST(Ets, MatchesBruteForceOracleOnRandomGrids) {
  Rng rng(2);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t h = 1 + rng.uniform_index(9), w = 1 + rng.uniform_index(9);
    Tensor p({h, w}), o({h, w});
    const double rate = rng.uniform();
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = rng.uniform() < rate ? 10.0f : 0.0f;
      o[i] = rng.uniform() < rate ? 10.0f : 0.0f;
    }
    double a = 0, b = 0, c = 0, d = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const bool pp = p[i] >= 6.0f, oo = o[i] >= 6.0f;
      a += pp && oo;
      b += pp && !oo;
      c += !pp && oo;
      d += !pp && !oo;
    }
    const auto got = ets(contingency(p, o, 6.0)).value;
    const auto want = ets_oracle(a, b, c, d);
    ASSERT_EQ(got.has_value(), want.has_value());
    if (want) {
      ASSERT_EQ(*got, *want);
      ASSERT_LE(*got, 1.0);
      ASSERT_GE(*got, -1.0 / 3.0 - 1e-12);
    }
  }
}

TEST(Ets, InvariantUnderSharedPermutation) {
  Rng rng(3);
  const auto p = tcpdiff::testing::random_uniform({8, 8}, rng, 0.0, 30.0);
  const auto o = tcpdiff::testing::random_uniform({8, 8}, rng, 0.0, 30.0);
  std::vector<std::size_t> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 63; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
  Tensor pp({8, 8}), op({8, 8});
  for (std::size_t i = 0; i < 64; ++i) pp[i] = p[perm[i]], op[i] = o[perm[i]];
  for (double t : kThresholds) EXPECT_EQ(ets(contingency(p, o, t)).value, ets(contingency(pp, op, t)).value);
}

TEST(TpMae, Examples) {
  Rng rng(4);
  const auto a = tcpdiff::testing::random_uniform<double>({4, 6, 6}, rng, 0.0, 20.0);
  EXPECT_EQ(tp_mae(a, a), 0.0);
  auto b = a;
  for (auto& v : b.data) v += 0.5;
  EXPECT_NEAR(tp_mae(b, a), 0.5, 1e-9);
  const auto c = tcpdiff::testing::random_uniform<double>({4, 6, 6}, rng, 0.0, 20.0);
  EXPECT_EQ(tp_mae(a, c), tp_mae(c, a));
  EXPECT_LE(tp_mae(a, c), tp_mae(a, b) + tp_mae(b, c) + 1e-12);
  EXPECT_THROW(tp_mae(a, BasicTensor<double>({4, 6, 5})), ShapeError);
}

TEST(Histogram, Conventions) {
  const auto edges = default_histogram_edges();
  ASSERT_EQ(edges.size(), 81u);
  EXPECT_EQ(edges.front(), 0.0);
  EXPECT_EQ(edges.back(), 160.0);
  const auto ones = frequency_histogram<float>({Tensor({3, 4}, 1.0f)}, edges);
  EXPECT_EQ(ones[0], 12u);
  EXPECT_EQ(std::accumulate(ones.begin(), ones.end(), std::uint64_t{0}), 12u);
  const auto edge = frequency_histogram<float>({Tensor({1}, 2.0f)}, edges);
  EXPECT_EQ(edge[1], 1u);
  EXPECT_THROW(frequency_histogram<float>({Tensor({1})}, {0.0, 2.0, 2.0}), ConfigError);
}

TEST(Histogram, UniformMass) {
  Rng rng(5);
  const auto f = tcpdiff::testing::random_uniform({1000000}, rng, 0.0, 160.0);
  const auto counts = frequency_histogram<float>({f}, default_histogram_edges());
  const double expected = 1e6 / 80.0;
  for (auto c : counts) EXPECT_NEAR(double(c), expected, 0.05 * expected);
}

TEST(Rapsd, ParsevalAndNaiveDft) {
  Rng rng(6);
  const std::size_t n = 12;
  std::vector<double> f(n * n);
  for (auto& v : f) v = rng.normal();
  const auto power = power_spectrum(f, n, n);
  const auto naive = naive_power(f, n);
  double total = 0.0, energy = 0.0;
  for (std::size_t i = 0; i < power.size(); ++i) {
    EXPECT_NEAR(power[i], naive[i], 1e-9 * std::max(1.0, naive[i]));
    total += power[i];
  }
  for (double v : f) energy += v * v;
  EXPECT_NEAR(total, double(n * n) * energy, 1e-6 * total);
}

TEST(Rapsd, SinusoidConcentratesInItsBin) {
  const std::size_t n = 32;
  for (std::size_t k : {3u, 7u}) {
    BasicTensor<double> f({n, n});
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) f[y * n + x] = std::cos(2.0 * std::numbers::pi * double(k * x) / double(n));
    const auto c = rapsd(f);
    ASSERT_EQ(c.power.size(), n / 2);
    double total = 0.0;
    for (std::size_t b = 0; b < c.power.size(); ++b) total += c.power[b] * double(c.count[b]);
    EXPECT_GE(c.power[k - 1] * double(c.count[k - 1]), 0.99 * total);
  }
}

TEST(Rapsd, ConstantFieldHasNoPower) {
  const auto c = rapsd(Tensor({16, 16}, 3.0f));
  for (double p : c.power) EXPECT_EQ(p, 0.0);
  EXPECT_EQ(c.wavenumber.front(), 1.0);
  EXPECT_EQ(c.wavenumber.back(), 8.0);
  EXPECT_THROW(rapsd(Tensor({16, 8})), ShapeError);
}

TEST(Rapsd, WhiteNoiseIsFlat) {
  Rng rng(7);
  const std::size_t n = 32;
  std::vector<double> mean(n / 2, 0.0);
  for (int r = 0; r < 64; ++r) {
    const auto c = rapsd(tcpdiff::testing::random_normal<double>({n, n}, rng));
    for (std::size_t b = 0; b < mean.size(); ++b) mean[b] += c.power[b] / 64.0;
  }
  const double avg = std::accumulate(mean.begin(), mean.end(), 0.0) / double(mean.size());
  for (double v : mean) EXPECT_NEAR(v, avg, 0.1 * avg);
}

TEST(Evaluate, IdentityDataset) {
  Rng rng(8);
  std::vector<Tensor> obs;
  for (int k = 0; k < 3; ++k) obs.push_back(tcpdiff::testing::random_uniform({4, 8, 8}, rng, 0.0, 80.0));
  const auto rep = evaluate({obs}, obs, {3, 6, 9, 12});
  for (double t : kThresholds) EXPECT_DOUBLE_EQ(*rep.value("ETS", t, "0"), 1.0);
  EXPECT_EQ(*rep.value("TP_MAE", 0, "0"), 0.0);
  EXPECT_EQ(*rep.value("TP_MAE", 0, "0", 9), 0.0);
  EXPECT_EQ(*rep.value("TP_MAE", 0, "std"), 0.0);
}

TEST(Evaluate, MeanAndStdAcrossMembers) {
  Rng rng(9);
  std::vector<Tensor> obs;
  for (int k = 0; k < 2; ++k) obs.push_back(tcpdiff::testing::random_uniform({4, 8, 8}, rng, 0.0, 80.0));
  std::vector<std::vector<Tensor>> members(8);
  for (auto& m : members)
    for (int k = 0; k < 2; ++k) m.push_back(tcpdiff::testing::random_uniform({4, 8, 8}, rng, 0.0, 80.0));
  const auto rep = evaluate(members, obs, {3, 6, 9, 12});
  std::vector<double> v;
  for (int i = 0; i < 8; ++i) v.push_back(*rep.value("TP_MAE", 0, std::to_string(i)));
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / 8.0;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  EXPECT_NEAR(*rep.value("TP_MAE", 0, "mean"), mean, 1e-12);
  EXPECT_NEAR(*rep.value("TP_MAE", 0, "std"), std::sqrt(var / 8.0), 1e-12);
}

TEST(Evaluate, SentinelExcludedFromMean) {
  std::vector<Tensor> obs{Tensor({1, 2, 2})};
  std::vector<std::vector<Tensor>> members{{Tensor({1, 2, 2})}, {Tensor({1, 2, 2}, 10.0f)}};
  const auto rep = evaluate(members, obs, {3});
  EXPECT_FALSE(rep.value("ETS", 6, "0").has_value());
  EXPECT_TRUE(rep.value("ETS", 6, "1").has_value());
  EXPECT_EQ(rep.value("ETS", 6, "mean"), rep.value("ETS", 6, "1"));
}

TEST(Evaluate, AggregationSumsPairs) {
  Rng rng(10);
  const auto seq = tcpdiff::testing::random_uniform({4, 3, 3}, rng, 0.0, 10.0);
  const auto agg = aggregate_pairs(seq);
  ASSERT_EQ(agg.shape, (Shape{2, 3, 3}));
  EXPECT_EQ(agg[0], seq[0] + seq[9]);
  EXPECT_EQ(agg[9 + 4], seq[18 + 4] + seq[27 + 4]);
  EvalOptions opt;
  opt.aggregate_6h = true;
  const auto rep = evaluate({{seq}}, {seq}, {3, 6, 9, 12}, opt);
  EXPECT_EQ(rep.lead_hours, (std::vector<int>{6, 12}));
}

TEST(Evaluate, GroupByAndShapeErrors) {
  Rng rng(11);
  std::vector<Tensor> obs, pred;
  for (int k = 0; k < 4; ++k) {
    obs.push_back(tcpdiff::testing::random_uniform({2, 4, 4}, rng, 0.0, 30.0));
    pred.push_back(tcpdiff::testing::random_uniform({2, 4, 4}, rng, 0.0, 30.0));
  }
  EvalOptions opt;
  opt.group_by = "basin";
  const std::vector<std::map<std::string, std::string>> tags{{{"basin", "WP"}}, {{"basin", "NA"}}, {{"basin", "WP"}}, {}};
  const auto rep = evaluate({pred}, obs, {3, 6}, opt, tags);
  // WP holds samples 0 and 2.
  double s = 0.0;
  for (int k : {0, 2}) s += tp_mae(pred[k], obs[k]);
  bool found = false;
  for (const auto& r : rep.metrics)
    if (r.group == "basin=WP" && r.metric == "TP_MAE" && r.member == "0" && r.lead_time == 0) {
      EXPECT_NEAR(*r.value, s / 2.0, 1e-9);
      found = true;
    }
  EXPECT_TRUE(found);
  EXPECT_THROW(evaluate({{pred[0]}}, obs, {3, 6}), ShapeError);
}

TEST(Evaluate, PersistenceMatchesBruteForce) {
  TempDir dir("verify");
  auto cfg = data::SynthConfig::for_grid({16, 16, 0.625});
  cfg.seed = 13;
  data::generate_dataset(cfg, 8, dir / "data", 4);
  const auto mf = data::read_manifest(dir / "data");
  const auto idx = forecast::test_indices(mf);
  const auto set = forecast::run_persistence(mf, idx);
  std::vector<Tensor> obs;
  for (auto i : idx) obs.push_back(data::load_sample(mf, i).target_rain);
  const auto rep = evaluate(set.members, obs, set.lead_hours);

  // Oracle: direct loops over the raw arrays on disk.
  const std::size_t plane = 256, hist = 5 * plane, tgt = 4 * plane;
  const auto rain = io::read_f32(dir / "data" / "rain_hist.bin", 0, 8 * hist);
  const auto target = io::read_f32(dir / "data" / "target_rain.bin", 0, 8 * tgt);
  double abs = 0.0;
  for (double t : kThresholds) {
    double a = 0, b = 0, c = 0, d = 0;
    abs = 0.0;
    for (std::size_t k = 4; k < 8; ++k)
      for (std::size_t f = 0; f < 4; ++f)
        for (std::size_t i = 0; i < plane; ++i) {
          const double p = rain[k * hist + 4 * plane + i], o = target[k * tgt + f * plane + i];
          abs += std::abs(p - o);
          a += p >= t && o >= t;
          b += p >= t && o < t;
          c += p < t && o >= t;
          d += p < t && o < t;
        }
    const auto want = ets_oracle(a, b, c, d);
    const auto got = rep.value("ETS", t, "0");
    ASSERT_EQ(got.has_value(), want.has_value());
    if (want) EXPECT_NEAR(*got, *want, 1e-9);
  }
  EXPECT_NEAR(*rep.value("TP_MAE", 0, "0"), abs / (4.0 * 4.0 * plane), 1e-9);
}

TEST(Report, WritesCsvArtifacts) {
  TempDir dir("report");
  Rng rng(12);
  std::vector<Tensor> obs{tcpdiff::testing::random_uniform({4, 8, 8}, rng, 0.0, 80.0)};
  EvalOptions opt;
  const auto rep = evaluate({obs, {Tensor({4, 8, 8})}}, obs, {3, 6, 9, 12}, opt);
  rep.write(dir.path());
  const auto metrics = io::read_text(dir / "metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), "metric,threshold,lead_time,member,value");
  EXPECT_NE(metrics.find("ETS,24,all,mean,"), std::string::npos);
  EXPECT_NE(metrics.find("TP_MAE,,12,1,"), std::string::npos);
  const auto hist = io::read_text(dir / "histogram.csv");
  EXPECT_EQ(hist.rfind("# edges_mm_per_3hr: 0,2,4", 0), 0u);
  EXPECT_NE(hist.find("observed,0,2,"), std::string::npos);
  const auto spec = io::read_text(dir / "rapsd.csv");
  EXPECT_NE(spec.find("source,lead_time,wavenumber,power,count"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir / "metrics_by_group.csv"));
}
