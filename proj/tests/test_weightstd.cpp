#include <gtest/gtest.h>

#include <cmath>

#include "fedwsq/weightstd.hpp"
#include "support.hpp"

namespace fedwsq {
namespace {

using testing::numeric_gradient;
using testing::random_vector;
using testing::relative_error;
using weightstd::WsConfig;

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

TEST(WsForward, HandExample) {
  const WsConfig cfg{1.0, 1e-10};
  const auto ctx = weightstd::ws_forward(std::vector<double>{1, 2, 3}, cfg);
  EXPECT_EQ(ctx.centered, (std::vector<double>{-1, 0, 1}));
  EXPECT_NEAR(ctx.sigma, std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(ctx.standardized[0], -1.224744871391589, 1e-12);
  EXPECT_NEAR(ctx.standardized[1], 0.0, 1e-15);
  EXPECT_NEAR(ctx.standardized[2], 1.224744871391589, 1e-12);
}

TEST(WsForward, ConstantVectorIsZero) {
  const auto ctx = weightstd::ws_forward(std::vector<double>{4.5, 4.5, 4.5}, WsConfig{});
  EXPECT_TRUE(ctx.degenerate);
  for (double v : ctx.standardized) EXPECT_EQ(v, 0.0);
  const auto g = weightstd::ws_backward(std::vector<double>{1, 2, 3}, ctx, WsConfig{});
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(WsForward, ShortVectorThrows) {
  EXPECT_THROW(weightstd::ws_forward(std::vector<double>{1.0}, WsConfig{}), ArgumentError);
}

TEST(WsForward, ZeroMeanAndStdRho) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const WsConfig cfg{trial % 2 ? 1e-3 : 2.5, 1e-10};
    const auto w = random_vector(2 + uniform_index(rng, 30), rng, -3, 3);
    const auto ctx = weightstd::ws_forward(w, cfg);
    EXPECT_NEAR(mean(ctx.standardized), 0.0, 1e-12);
    EXPECT_NEAR(population_std(ctx.standardized), cfg.rho, 1e-9);
  }
}

TEST(WsForward, ScaleInvariance) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto w = random_vector(2 + uniform_index(rng, 20), rng);
    const auto base = weightstd::ws_forward(w, WsConfig{}).standardized;
    for (double c : {0.25, 2.0, 1024.0}) {
      auto cw = w;
      for (double& v : cw) v *= c;
      EXPECT_EQ(weightstd::ws_forward(cw, WsConfig{}).standardized, base);
    }
    for (double c : {0.3, 7.0, 1e5}) {
      auto cw = w;
      for (double& v : cw) v *= c;
      const auto out = weightstd::ws_forward(cw, WsConfig{}).standardized;
      for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], base[i], 1e-15);
    }
  }
}

TEST(WsForward, LemmaTwoNormIdentity) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const WsConfig cfg{1e-3, 1e-10};
    const auto w = random_vector(2 + uniform_index(rng, 40), rng, -2, 2);
    const auto ctx = weightstd::ws_forward(w, cfg);
    const auto alt = weightstd::normalize_by_norm(ctx.centered, cfg.rho);
    for (std::size_t i = 0; i < alt.size(); ++i) EXPECT_NEAR(ctx.standardized[i], alt[i], 1e-12);
  }
}

TEST(ProjectOut, Examples) {
  EXPECT_EQ(weightstd::project_out(std::vector<double>{1, 1}, std::vector<double>{1, 0}),
            (std::vector<double>{0, 1}));
  EXPECT_EQ(weightstd::project_out(std::vector<double>{0, 3}, std::vector<double>{2, 0}),
            (std::vector<double>{0, 3}));
  for (double v : weightstd::project_out(std::vector<double>{2, 4, -6}, std::vector<double>{1, 2, -3}))
    EXPECT_NEAR(v, 0.0, 1e-15);
  EXPECT_THROW(weightstd::project_out(std::vector<double>{1, 1}, std::vector<double>{0, 0}), ArgumentError);
  EXPECT_THROW(weightstd::project_out(std::vector<double>{1, 1}, std::vector<double>{1}), DimensionError);
}

TEST(ProjectOut, ResultIsOrthogonal) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 30);
    const auto v = random_vector(n, rng, -5, 5), d = random_vector(n, rng, -5, 5);
    const auto r = weightstd::project_out(v, d);
    EXPECT_LE(std::abs(dot(r, d)), 1e-12 * norm(v) * norm(d));
  }
}

TEST(WsBackward, HandProjection) {
  // w = [-1, 0, 1] has sigma = sqrt(2/3); rho = sigma makes the gain 1.
  const WsConfig cfg{std::sqrt(2.0 / 3.0), 1e-10};
  const auto ctx = weightstd::ws_forward(std::vector<double>{-1, 0, 1}, cfg);
  const auto g = weightstd::ws_backward(std::vector<double>{1, 0, 0}, ctx, cfg);
  EXPECT_NEAR(g[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(g[1], -1.0 / 3.0, 1e-15);
  EXPECT_NEAR(g[2], 1.0 / 6.0, 1e-15);
}

TEST(WsBackward, AnnihilatesSpanOfStandardizedAndOnes) {
  Rng rng(5);
  const WsConfig cfg{};
  const auto w = random_vector(7, rng);
  const auto ctx = weightstd::ws_forward(w, cfg);
  auto along = ctx.standardized;
  for (double& v : along) v *= 123.0;
  for (double v : weightstd::ws_backward(along, ctx, cfg)) EXPECT_NEAR(v, 0.0, 1e-12);
  for (double v : weightstd::ws_backward(std::vector<double>(7, 2.5), ctx, cfg)) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(WsBackward, LengthMismatchThrows) {
  const auto ctx = weightstd::ws_forward(std::vector<double>{1, 2, 3}, WsConfig{});
  EXPECT_THROW(weightstd::ws_backward(std::vector<double>{1, 2}, ctx, WsConfig{}), DimensionError);
}

TEST(WsBackward, OrthogonalToOnesAndStandardized) {
  Rng rng(6);
  for (int trial = 0; trial < 500; ++trial) {
    const WsConfig cfg{trial % 2 ? 1e-3 : 1.0, 1e-10};
    const std::size_t n = 3 + uniform_index(rng, 60);
    const auto ctx = weightstd::ws_forward(random_vector(n, rng, -4, 4), cfg);
    const auto up = random_vector(n, rng, -10, 10);
    const auto g = weightstd::ws_backward(up, ctx, cfg);
    const std::vector<double> ones(n, 1.0);
    EXPECT_LE(std::abs(dot(g, ones)), 1e-10 * norm(g) * norm(ones));
    EXPECT_LE(std::abs(dot(g, ctx.standardized)), 1e-10 * norm(g) * norm(ctx.standardized));
  }
}

TEST(WsBackward, ProjectionPairIsIdempotent) {
  Rng rng(7);
  const WsConfig unit{1.0, 1e-10};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 20);
    const auto ctx = weightstd::ws_forward(random_vector(n, rng), unit);
    // With rho = sigma the gain is one and ws_backward is the bare projection pair.
    const WsConfig gain_one{ctx.sigma, 1e-10};
    const auto once = weightstd::ws_backward(random_vector(n, rng), ctx, gain_one);
    const auto twice = weightstd::ws_backward(once, ctx, gain_one);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(twice[i], once[i], 1e-12);
  }
}

TEST(WsBackward, MatchesFiniteDifferencesOfComposedLoss) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const WsConfig cfg{trial % 2 ? 1e-3 : 1.0, 1e-10};
    // Two-element vectors standardize to +-rho, so their gradient is identically zero.
    const std::size_t n = 3 + uniform_index(rng, 15);
    const auto w = random_vector(n, rng, -2, 2);
    const auto a = random_vector(n, rng), b = random_vector(n, rng);
    // Nonlinear loss: L(v) = sum_i a_i v_i + (b . v)^2 / rho.
    auto loss = [&](const std::vector<double>& x) {
      const auto v = weightstd::ws_forward(x, cfg).standardized;
      const double bv = dot(b, v);
      return dot(a, v) + bv * bv / cfg.rho;
    };
    const auto ctx = weightstd::ws_forward(w, cfg);
    std::vector<double> up(n);
    const double bv = dot(b, ctx.standardized);
    for (std::size_t i = 0; i < n; ++i) up[i] = a[i] + 2.0 * bv * b[i] / cfg.rho;
    const auto g = weightstd::ws_backward(up, ctx, cfg);
    EXPECT_LT(relative_error(g, numeric_gradient(loss, w, 1e-6)), 1e-5);
  }
}

TEST(WsMatrix, StandardizesEachOutputColumn) {
  Rng rng(9);
  const Tensor w = testing::random_tensor({5, 3}, rng);
  const auto [ws, ctxs] = weightstd::ws_forward_matrix(w, WsConfig{1.0, 1e-10});
  ASSERT_EQ(ctxs.size(), 3u);
  for (std::size_t o = 0; o < 3; ++o) {
    std::vector<double> col(5);
    for (std::size_t i = 0; i < 5; ++i) col[i] = ws(i, o);
    EXPECT_NEAR(mean(col), 0.0, 1e-12);
    EXPECT_NEAR(population_std(col), 1.0, 1e-12);
  }
}

}  // namespace
}  // namespace fedwsq
