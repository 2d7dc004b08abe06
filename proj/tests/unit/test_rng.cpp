#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "tcpdiff/parallel.hpp"
#include "tcpdiff/rng.hpp"
#include "tcpdiff/error.hpp"

using namespace tcpdiff;

TEST(Rng, SplitmixReferenceValues) {
  // Reference outputs of splitmix64 for inputs 0 and 1, computed by hand-rolled oracle.
  auto oracle = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  };
  for (std::uint64_t v : {0ULL, 1ULL, 42ULL, 0xFFFFFFFFFFFFFFFFULL}) EXPECT_EQ(splitmix64(v), oracle(v));
  EXPECT_EQ(splitmix64(0), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, MixSeedSeparatesIndices) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(mix_seed(7, i));
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_NE(mix_seed(7, 0), mix_seed(8, 0));
}

TEST(Rng, StateRoundTripContinuesSequence) {
  Rng a(123);
  for (int i = 0; i < 10; ++i) a.normal();
  const std::string st = a.state();
  Rng b;
  b.restore(st);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_EQ(a.normal(), b.normal());
  }
}

TEST(Rng, RestoreRejectsGarbage) {
  Rng r;
  EXPECT_THROW(r.restore("not a state"), CorruptionError);
}

TEST(Rng, UniformIndexInRangeAndUnbiased) {
  Rng r(5);
  std::vector<int> counts(7, 0);
  const int draws = 70000;
  for (int i = 0; i < draws; ++i) {
    const auto k = r.uniform_index(7);
    ASSERT_LT(k, 7u);
    ++counts[k];
  }
  for (int c : counts) EXPECT_NEAR(c, draws / 7.0, 5 * std::sqrt(draws / 7.0));
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  const int n = 200000;
  double s = 0, q = 0;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    q += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(q / n, 1.0, 0.01);
}

TEST(Parallel, ResultsIndependentOfThreadCount) {
  std::vector<double> one(64), four(64);
  auto body = [](std::vector<double>& out) {
    return [&out](std::size_t i) {
      Rng r(mix_seed(1, i));
      out[i] = r.normal();
    };
  };
  parallel_for(64, 1, body(one));
  parallel_for(64, 4, body(four));
  EXPECT_EQ(one, four);
}

TEST(Parallel, RethrowsWorkerException) {
  EXPECT_THROW(parallel_for(8, 3, [](std::size_t i) {
                 if (i == 5) throw RangeError("boom");
               }),
               RangeError);
}
