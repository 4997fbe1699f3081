#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fedwsq/danuq.hpp"
#include "support.hpp"

namespace fedwsq {
namespace {

using danuq::QuantLevels;

// Maclaurin series of erf in long double; accurate to ~1e-18 for |x| <= 3.
double erf_series(double x) {
  long double term = x, sum = x;
  const long double x2 = static_cast<long double>(x) * x;
  for (int n = 1; n < 200; ++n) {
    term *= -x2 / n;
    sum += term / (2 * n + 1);
  }
  return static_cast<double>(sum * 2.0L / std::sqrt(std::numbers::pi_v<long double>));
}

// Composite Simpson integration of (x - Q(x))^2 phi(x) over [-12, 12].
double integrated_error(std::span<const double> levels) {
  const auto u = danuq::cell_bounds(levels);
  double total = 0.0;
  for (std::size_t r = 0; r < levels.size(); ++r) {
    const double a = std::max(u[r], -12.0), b = std::min(u[r + 1], 12.0);
    if (!(b > a)) continue;
    const int n = 20000;
    const double h = (b - a) / n;
    auto f = [&](double x) { return (x - levels[r]) * (x - levels[r]) * danuq::normal_pdf(x); };
    double s = f(a) + f(b);
    for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
    total += s * h / 3.0;
  }
  return total;
}

std::vector<double> free_levels_perturbed(const QuantLevels& t, std::size_t r, double delta) {
  std::vector<double> q(t.levels().begin(), t.levels().end());
  q[r] += delta;
  return q;
}

TEST(Erf, MatchesSeriesOracle) {
  EXPECT_EQ(danuq::erf(0.0), 0.0);
  EXPECT_NEAR(danuq::erf(1.0), 0.8427008, 1e-7);
  for (double x = -3.0; x <= 3.0; x += 0.125) {
    EXPECT_NEAR(danuq::erf(x), erf_series(x), 1e-13) << x;
    EXPECT_EQ(danuq::erf(-x), -danuq::erf(x));
  }
  for (double x : {6.0, 10.0, 1e3}) EXPECT_NEAR(danuq::erf(x), 1.0, 1e-7);
}

TEST(NormalMass, TailsAndTotals) {
  EXPECT_NEAR(danuq::normal_mass(-danuq::kInf, danuq::kInf), 1.0, 1e-15);
  EXPECT_NEAR(danuq::normal_mass(0.0, danuq::kInf), 0.5, 1e-15);
  EXPECT_NEAR(danuq::normal_mass(8.0, danuq::kInf), 6.22096057427178e-16, 1e-25);
}

TEST(QuantLevels, ValidatesTables) {
  EXPECT_THROW(QuantLevels(2, {-1, 0, 1}, true), ArgumentError);
  EXPECT_THROW(QuantLevels(2, {-1, 0, 0, 1}, true), ArgumentError);
  EXPECT_THROW(QuantLevels(2, {-1, -0.5, 0.5, 1}, true), ArgumentError);
  EXPECT_THROW(QuantLevels(1, {0, 1}, true), ArgumentError);
  EXPECT_NO_THROW(QuantLevels(1, {-1, 1}, false));
}

TEST(QuantLevels, BoundariesAreMidpoints) {
  const auto t = danuq::published_levels(2);
  const auto u = t.boundaries();
  ASSERT_EQ(u.size(), 5u);
  EXPECT_TRUE(std::isinf(u[0]) && u[0] < 0);
  EXPECT_DOUBLE_EQ(u[1], -0.612);
  EXPECT_DOUBLE_EQ(u[2], 0.3825);
  EXPECT_DOUBLE_EQ(u[3], 1.2445);
  EXPECT_TRUE(std::isinf(u[4]) && u[4] > 0);
}

TEST(OptimizeLevels, OneBitIsAnalyticOptimum) {
  const auto t = danuq::optimize_levels(1);
  EXPECT_FALSE(t.zero_pinned());
  const double q = std::sqrt(2.0 / std::numbers::pi);
  EXPECT_NEAR(t[0], -q, 1e-6);
  EXPECT_NEAR(t[1], q, 1e-6);
  EXPECT_NEAR(danuq::expected_error(t), 1.0 - 2.0 / std::numbers::pi, 1e-6);
  EXPECT_NEAR(t[1], 0.798, 0.0005);
}

TEST(OptimizeLevels, TwoBitMatchesPublishedTable) {
  const auto t = danuq::optimize_levels(2);
  const auto p = danuq::published_levels(2);
  EXPECT_EQ(t[danuq::pinned_zero_index(2)], 0.0);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(t[r], p[r], 0.005) << r;
}

TEST(OptimizeLevels, FourBitMatchesPublishedTable) {
  const auto t = danuq::optimize_levels(4);
  const auto p = danuq::published_levels(4);
  EXPECT_EQ(t[danuq::pinned_zero_index(4)], 0.0);
  for (std::size_t r = 0; r < 16; ++r) EXPECT_NEAR(t[r], p[r], 0.005) << "level " << r;
}

TEST(OptimizeLevels, FourBitBeatsPublishedTableOnExpectedError) {
  EXPECT_LT(danuq::expected_error(danuq::optimize_levels(4)), danuq::expected_error(danuq::published_levels(4)));
}

TEST(OptimizeLevels, AgreesWithGridSearch) {
  for (int bits : {1, 2}) {
    const auto t = danuq::optimize_levels(bits);
    const auto g = danuq::grid_search_levels(bits, true);
    for (std::size_t r = 0; r < t.size(); ++r) EXPECT_NEAR(t[r], g[r], 2e-4);
  }
}

TEST(OptimizeLevels, UnsupportedBitsThrowConfigError) {
  for (int bits : {0, 3, 5, 8}) EXPECT_THROW(danuq::optimize_levels(bits), ConfigError);
}

TEST(OptimizeLevels, CentroidConditionHolds) {
  for (int bits : {1, 2, 4}) {
    const auto t = danuq::optimize_levels(bits);
    const auto u = t.boundaries();
    for (std::size_t r = 0; r < t.size(); ++r) {
      if (t.zero_pinned() && r == danuq::pinned_zero_index(bits)) continue;
      // Conditional mean over the cell: (phi(a) - phi(b)) / P(a <= X < b).
      const double m = (danuq::normal_pdf(u[r]) - danuq::normal_pdf(u[r + 1])) / danuq::normal_mass(u[r], u[r + 1]);
      EXPECT_NEAR(t[r], m, 1e-6) << bits << "-bit level " << r;
    }
  }
}

TEST(OptimizeLevels, PerturbationNeverHelps) {
  for (int bits : {1, 2, 4}) {
    const auto t = danuq::optimize_levels(bits);
    const double base = danuq::expected_error(t);
    for (std::size_t r = 0; r < t.size(); ++r) {
      if (t.zero_pinned() && r == danuq::pinned_zero_index(bits)) continue;
      for (double d : {-0.01, 0.01}) EXPECT_GE(danuq::expected_error(free_levels_perturbed(t, r, d)), base);
    }
  }
}

TEST(OptimizeLevels, ErrorDecreasesWithBits) {
  const double e1 = danuq::expected_error(danuq::optimize_levels(1));
  const double e2 = danuq::expected_error(danuq::optimize_levels(2));
  const double e4 = danuq::expected_error(danuq::optimize_levels(4));
  EXPECT_GT(e1, e2);
  EXPECT_GT(e2, e4);
}

TEST(ExpectedError, SingleLevelIsVariance) {
  EXPECT_NEAR(danuq::expected_error(std::vector<double>{0.0}), 1.0, 1e-15);
  EXPECT_NEAR(danuq::expected_error(std::vector<double>{0.5}), 1.25, 1e-15);
}

TEST(ExpectedError, ClosedFormMatchesQuadrature) {
  for (int bits : {1, 2, 4}) {
    for (const auto& t : {danuq::optimize_levels(bits), danuq::published_levels(bits)})
      EXPECT_NEAR(danuq::expected_error(t), integrated_error(t.levels()), 1e-10);
  }
  const std::vector<double> odd{-2.0, -0.3, 0.1, 2.5};
  EXPECT_NEAR(danuq::expected_error(odd), integrated_error(odd), 1e-10);
}

TEST(ExpectedError, MonteCarloAgreement) {
  Rng rng(99);
  const auto t = danuq::optimize_levels(2);
  const std::size_t n = 1000000;
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = standard_normal(rng);
    const double e = (x - t[t.encode(x)]) * (x - t[t.encode(x)]);
    sum += e;
    sq += e * e;
  }
  const double m = sum / n, se = std::sqrt((sq / n - m * m) / n);
  EXPECT_LT(std::abs(m - danuq::expected_error(t)), 3 * se);
}

TEST(Quantize, NearestLevelExamples) {
  const auto t = danuq::published_levels(2);
  auto code_of = [&](double v, double s) {
    return danuq::unpack_codes(danuq::quantize(std::vector<double>{v}, s, t).codes, 1, 2)[0];
  };
  EXPECT_EQ(code_of(0.3, 1.0), 1u);
  EXPECT_EQ(code_of(0.6, 2.0), 1u);
  EXPECT_EQ(code_of(1e6, 1.0), 3u);
  EXPECT_EQ(code_of(-1e6, 1.0), 0u);
  EXPECT_EQ(code_of(t.boundaries()[2], 1.0), 2u);
  EXPECT_EQ(code_of(t.boundaries()[1], 1.0), 1u);
  EXPECT_EQ(code_of(std::nextafter(t.boundaries()[2], 0.0), 1.0), 1u);
}

TEST(Quantize, ErrorsCarryPosition) {
  const auto t = danuq::published_levels(1);
  try {
    danuq::quantize(std::vector<double>{0.0, 1.0, NAN}, 1.0, t);
    FAIL();
  } catch (const EncodingError& e) {
    EXPECT_EQ(e.position(), 2u);
  }
  EXPECT_THROW(danuq::quantize(std::vector<double>{1.0}, 0.0, t), ArgumentError);
}

TEST(Dequantize, CodomainAndFixedPoints) {
  Rng rng(4);
  for (int bits : {1, 2, 4}) {
    const auto t = danuq::optimize_levels(bits);
    const double s = 0.37;
    const auto v = testing::random_vector(257, rng, -2, 2);
    const auto out = danuq::dequantize(danuq::quantize(v, s, t), s, t);
    ASSERT_EQ(out.size(), v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t r = 1; r < t.size(); ++r)
        if (std::abs(v[i] / s - t[r]) < std::abs(v[i] / s - t[best])) best = r;
      EXPECT_EQ(out[i], t[best] * s);
    }
    std::vector<double> fixed;
    for (double q : t.levels()) fixed.push_back(q * s);
    EXPECT_EQ(danuq::dequantize(danuq::quantize(fixed, s, t), s, t), fixed);
  }
}

TEST(Dequantize, BitMismatchAndTruncation) {
  const auto t2 = danuq::published_levels(2), t4 = danuq::published_levels(4);
  auto b = danuq::quantize(std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5}, 1.0, t2);
  EXPECT_THROW(danuq::dequantize(b, 1.0, t4), ArgumentError);
  b.codes.pop_back();
  EXPECT_THROW(danuq::dequantize(b, 1.0, t2), DecodingError);
}

TEST(Dequantize, FourBitMonteCarloWithinFivePercent) {
  Rng rng(5);
  const auto t = danuq::optimize_levels(4);
  const double s = 0.02;
  std::vector<double> v(200000);
  for (double& x : v) x = s * standard_normal(rng);
  const auto out = danuq::dequantize(danuq::quantize(v, s, t), s, t);
  double mse = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) mse += (v[i] - out[i]) * (v[i] - out[i]);
  mse /= static_cast<double>(v.size()) * s * s;
  EXPECT_NEAR(mse / danuq::expected_error(t), 1.0, 0.05);
}

TEST(Packing, RoundTripsAllLengthsAndBits) {
  Rng rng(6);
  for (int bits : {1, 2, 3, 4, 7, 32}) {
    for (std::size_t n = 0; n < 70; ++n) {
      std::vector<std::uint32_t> codes(n);
      for (auto& c : codes)
        c = static_cast<std::uint32_t>(bits == 32 ? rng() : uniform_index(rng, std::uint64_t{1} << bits));
      const auto packed = danuq::pack_codes(codes, bits);
      ASSERT_EQ(packed.size(), (n * static_cast<std::size_t>(bits) + 7) / 8);
      EXPECT_EQ(danuq::unpack_codes(packed, n, bits), codes);
    }
  }
}

TEST(Packing, LsbFirstLayoutAndZeroTail) {
  const std::vector<std::uint32_t> codes{1, 0, 1};
  EXPECT_EQ(danuq::pack_codes(codes, 1), (std::vector<std::uint8_t>{0b00000101}));
  const std::vector<std::uint32_t> nibbles{0x3, 0xA, 0xF};
  EXPECT_EQ(danuq::pack_codes(nibbles, 4), (std::vector<std::uint8_t>{0xA3, 0x0F}));
}

TEST(Packing, Errors) {
  EXPECT_THROW(danuq::pack_codes(std::vector<std::uint32_t>{4}, 2), EncodingError);
  EXPECT_THROW(danuq::unpack_codes(std::vector<std::uint8_t>{0xFF}, 3, 4), DecodingError);
}

TEST(UniformQuantize, EndpointsRoundTripExactly) {
  Rng rng(7);
  const auto r = danuq::uniform_quantize_absmax(std::vector<double>{-1.0, 1.0}, 1, rng);
  EXPECT_EQ(r.scale, 1.0);
  EXPECT_EQ(danuq::uniform_dequantize(r.block, r.scale), (std::vector<double>{-1.0, 1.0}));
}

TEST(UniformQuantize, AllZeroInputRoundTripsToZero) {
  Rng rng(8);
  for (int bits : {1, 2, 4}) {
    const auto r = danuq::uniform_quantize_absmax(std::vector<double>(9, 0.0), bits, rng);
    for (double v : danuq::uniform_dequantize(r.block, r.scale)) EXPECT_EQ(v, 0.0);
  }
}

TEST(UniformQuantize, GridAndUnbiasedRounding) {
  Rng rng(9);
  const std::vector<double> v{0.2, -0.55, 1.0};
  std::vector<double> acc(3, 0.0);
  const int trials = 200000;
  for (int k = 0; k < trials; ++k) {
    const auto r = danuq::uniform_quantize_absmax(v, 2, rng);
    const auto out = danuq::uniform_dequantize(r.block, r.scale);
    for (std::size_t i = 0; i < 3; ++i) {
      const double lvl = out[i] * 3.0;
      EXPECT_NEAR(lvl, std::round(lvl), 1e-12);
      acc[i] += out[i];
    }
  }
  // Stochastic rounding is unbiased: E[Q(v)] = v. Per-draw variance <= (1/3)^2.
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(acc[i] / trials, v[i], 4 * (1.0 / 3.0) / std::sqrt(trials));
}

TEST(UniformQuantize, DeterministicForSeed) {
  const auto v = std::vector<double>{0.3, -0.7, 0.11, 0.9};
  Rng a(3), b(3);
  EXPECT_EQ(danuq::uniform_quantize_absmax(v, 2, a).block, danuq::uniform_quantize_absmax(v, 2, b).block);
}

TEST(UniformQuantize, RejectsBadInput) {
  Rng rng(1);
  EXPECT_THROW(danuq::uniform_quantize_absmax(std::vector<double>{}, 2, rng), ArgumentError);
  EXPECT_THROW(danuq::uniform_quantize_absmax(std::vector<double>{1.0}, 3, rng), ConfigError);
  EXPECT_THROW(danuq::uniform_quantize_absmax(std::vector<double>{INFINITY}, 2, rng), EncodingError);
}

TEST(UniformQuantize, DanuqHasLowerMseOnGaussianData) {
  Rng rng(10);
  std::vector<double> v(200000);
  for (double& x : v) x = standard_normal(rng);
  const double s = population_std(v);
  for (int bits : {1, 2, 4}) {
    const auto t = danuq::optimize_levels(bits);
    const auto dq = danuq::dequantize(danuq::quantize(v, s, t), s, t);
    const auto r = danuq::uniform_quantize_absmax(v, bits, rng);
    const auto uq = danuq::uniform_dequantize(r.block, r.scale);
    double e_dq = 0.0, e_uq = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      e_dq += (v[i] - dq[i]) * (v[i] - dq[i]);
      e_uq += (v[i] - uq[i]) * (v[i] - uq[i]);
    }
    EXPECT_LT(e_dq, e_uq) << bits;
  }
}

TEST(Wire, HeaderLayout) {
  danuq::QuantizedBlock b{258, 4, 3, danuq::pack_codes(std::vector<std::uint32_t>{1, 2, 3}, 4), 1.0};
  std::vector<std::uint8_t> out;
  danuq::serialize_block(b, out);
  const std::vector<std::uint8_t> expect{0x02, 0x01, 0x04, 0x03, 0x00, 0x00, 0x00,
                                         0x00, 0x00, 0x80, 0x3F, 0x21, 0x03};
  EXPECT_EQ(out, expect);
  EXPECT_EQ(danuq::serialized_size(b), expect.size());
}

TEST(Wire, RoundTripAndErrors) {
  Rng rng(11);
  const auto t = danuq::optimize_levels(2);
  const auto b = danuq::quantize(testing::random_vector(13, rng), 0.5, t, 7);
  const auto raw = danuq::encode_raw(std::vector<double>{1.5, -2.25}, 3);
  std::vector<std::uint8_t> out;
  danuq::serialize_block(b, out);
  danuq::serialize_block(raw, out);
  EXPECT_EQ(out.size(), danuq::serialized_size(b) + danuq::serialized_size(raw));
  danuq::wire::Reader rd(out);
  EXPECT_EQ(danuq::deserialize_block(rd), b);
  const auto raw_back = danuq::deserialize_block(rd);
  EXPECT_EQ(raw_back, raw);
  EXPECT_EQ(danuq::decode_raw(raw_back), (std::vector<double>{1.5, -2.25}));
  EXPECT_EQ(rd.remaining(), 0u);

  out.pop_back();
  danuq::wire::Reader short_rd(out);
  danuq::deserialize_block(short_rd);
  EXPECT_THROW(danuq::deserialize_block(short_rd), DecodingError);

  std::vector<std::uint8_t> bad{0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0};
  danuq::wire::Reader bad_rd(bad);
  EXPECT_THROW(danuq::deserialize_block(bad_rd), DecodingError);
}

}  // namespace
}  // namespace fedwsq
