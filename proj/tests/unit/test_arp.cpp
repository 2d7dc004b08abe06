#include <gtest/gtest.h>

#include "tcpdiff/arp.hpp"
#include "test_util.hpp"

using namespace tcpdiff;
using namespace tcpdiff::arp;

namespace {

template <class T>
BasicTensor<T> column(std::initializer_list<T> values) {
  BasicTensor<T> t({values.size(), 1, 1});
  std::copy(values.begin(), values.end(), t.data.begin());
  return t;
}

}  // namespace

TEST(Arp, ResidualsOfShortSequence) {
  const auto r = to_residuals(column<double>({1, 3, 2}));
  ASSERT_EQ(r.deltas.shape, (Shape{2, 1, 1}));
  EXPECT_EQ(r.deltas[0], 2.0);
  EXPECT_EQ(r.deltas[1], -1.0);
  EXPECT_EQ(r.anchor[0], 2.0);
}

TEST(Arp, ConstantAndSingleStep) {
  const auto c = to_residuals(column<float>({4, 4, 4, 4}));
  for (float v : c.deltas.data) EXPECT_EQ(v, 0.0f);
  const auto s = to_residuals(column<float>({1.5f, 4.0f}));
  ASSERT_EQ(s.deltas.size(), 1u);
  EXPECT_EQ(s.deltas[0], 2.5f);
}

TEST(Arp, RejectsBadInput) {
  EXPECT_THROW(to_residuals(column<float>({1})), ShapeError);
  EXPECT_THROW(to_residuals(column<float>({1, std::numeric_limits<float>::quiet_NaN()})), NumericalError);
}

TEST(Arp, AccumulateExamples) {
  ResidualSequence<double> r;
  r.deltas = column<double>({2, -1});
  r.anchor = BasicTensor<double>({1, 1}, {2.0});
  const auto a = accumulate(r);
  EXPECT_EQ(a.rain[0], 4.0);
  EXPECT_EQ(a.rain[1], 3.0);
  EXPECT_EQ(a.clamped, 0u);

  r.deltas = column<double>({0, 0, 0});
  for (double v : accumulate(r).rain.data) EXPECT_EQ(v, 2.0);

  r.deltas = column<double>({-1, 0});
  r.anchor[0] = 0.5;
  r.space = Space::Raw;
  const auto c = accumulate(r);
  EXPECT_EQ(c.rain[0], 0.0);
  EXPECT_EQ(c.rain[1], 0.0);
  EXPECT_EQ(c.clamped, 2u);

  // Normalized space never clamps.
  r.space = Space::Normalized;
  EXPECT_EQ(accumulate(r).rain[0], -0.5);
}

TEST(Arp, RoundTripFloatAndDouble) {
  Rng rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    const auto seq = tcpdiff::testing::random_uniform<float>({5, 7, 6}, rng, 0.0, 50.0);
    // Accumulating from the first frame rebuilds the rest of the sequence.
    auto res = to_residuals(seq, Space::Raw);
    res.anchor = BasicTensor<float>({7, 6}, std::vector<float>(seq.data.begin(), seq.data.begin() + 42));
    const auto back = accumulate(res);
    EXPECT_EQ(back.clamped, 0u);
    const std::size_t plane = 42;
    for (std::size_t i = 0; i < back.rain.size(); ++i) ASSERT_NEAR(back.rain[i], seq[plane + i], 1e-5 * 50);

    BasicTensor<double> sd(seq.shape);
    for (std::size_t i = 0; i < seq.size(); ++i) sd[i] = std::round(seq[i] * 8.0) / 8.0;
    auto rd = to_residuals(sd);
    rd.anchor = BasicTensor<double>({7, 6}, std::vector<double>(sd.data.begin(), sd.data.begin() + 42));
    const auto bd = accumulate(rd);
    for (std::size_t i = 0; i < bd.rain.size(); ++i) ASSERT_EQ(bd.rain[i], sd[plane + i]);
  }
}

TEST(Arp, Linearity) {
  Rng rng(18);
  const auto seq = tcpdiff::testing::random_normal<double>({4, 5, 5}, rng);
  const double a = -2.5;
  BasicTensor<double> scaled(seq.shape);
  for (std::size_t i = 0; i < seq.size(); ++i) scaled[i] = a * seq[i];
  const auto r1 = to_residuals(seq), r2 = to_residuals(scaled);
  for (std::size_t i = 0; i < r1.deltas.size(); ++i) EXPECT_NEAR(r2.deltas[i], a * r1.deltas[i], 1e-12);
}

TEST(Arp, Telescoping) {
  Rng rng(19);
  ResidualSequence<double> r;
  r.deltas = tcpdiff::testing::random_normal<double>({6, 3, 4}, rng);
  r.anchor = tcpdiff::testing::random_normal<double>({3, 4}, rng);
  const auto out = accumulate(r);
  for (std::size_t i = 0; i < 12; ++i) {
    double expected = r.anchor[i];
    for (std::size_t t = 0; t < 6; ++t) expected += r.deltas[t * 12 + i];
    EXPECT_NEAR(out.rain[5 * 12 + i], expected, 1e-12);
  }
}
