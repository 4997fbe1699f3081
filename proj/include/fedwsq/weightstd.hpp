#pragma once

// Weight standardization as a projection pair.
//
// Forward:  w_std = (rho / sigma(w)) (I - P_1) w
// Backward: dL/dw = (rho / sigma(w)) (I - P_1)(I - P_{w_std}) dL/dw_std
//
// Both projections are applied as vector updates; no d x d matrix is formed.

#include <cmath>
#include <span>
#include <vector>

#include "fedwsq/error.hpp"
#include "fedwsq/tensor.hpp"

namespace fedwsq::weightstd {

struct WsConfig {
  double rho = 1e-3;
  double sigma_eps = 1e-10;

  void validate() const {
    if (!(rho > 0.0)) throw ConfigError("ws: rho must be > 0", "rho");
    if (!(sigma_eps > 0.0)) throw ConfigError("ws: sigma_eps must be > 0", "sigma_eps");
  }
};

/// Cached forward state for one weight vector.
struct WsContext {
  std::vector<double> centered;
  double sigma = 0.0;
  std::vector<double> standardized;
  bool degenerate = false;  // sigma <= sigma_eps; output and gradient are zero
};

/// (I - P_direction) v.
inline std::vector<double> project_out(std::span<const double> v, std::span<const double> direction) {
  if (v.size() != direction.size()) throw DimensionError("project_out: length mismatch");
  const double dd = dot(direction, direction);
  if (!(dd > 0.0)) throw ArgumentError("project_out: zero direction");
  const double coef = dot(v, direction) / dd;
  std::vector<double> out(v.begin(), v.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= coef * direction[i];
  return out;
}

/// (I - P_1) v, i.e. mean removal.
inline std::vector<double> remove_mean(std::span<const double> v) {
  const double m = mean(v);
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x -= m;
  return out;
}

/// Standardizes one weight vector (one output neuron's input weights).
inline WsContext ws_forward(std::span<const double> w, const WsConfig& cfg) {
  if (w.size() < 2) throw ArgumentError("ws_forward: weight vector needs at least 2 elements");
  WsContext ctx;
  ctx.centered = remove_mean(w);
  ctx.sigma = std::sqrt(dot(ctx.centered, ctx.centered) / static_cast<double>(w.size()));
  ctx.standardized.assign(w.size(), 0.0);
  ctx.degenerate = !(ctx.sigma > cfg.sigma_eps);
  if (!ctx.degenerate) {
    const double gain = cfg.rho / ctx.sigma;
    for (std::size_t i = 0; i < w.size(); ++i) ctx.standardized[i] = gain * ctx.centered[i];
  }
  return ctx;
}

/// Gradient with respect to the pre-standardized vector, given the gradient
/// with respect to the standardized one. Removes the w_std-aligned component,
/// then the mean component, then rescales by rho / sigma.
inline std::vector<double> ws_backward(std::span<const double> upstream, const WsContext& ctx,
                                       const WsConfig& cfg) {
  if (upstream.size() != ctx.centered.size())
    throw DimensionError("ws_backward: upstream length does not match context");
  if (ctx.degenerate) return std::vector<double>(upstream.size(), 0.0);
  // span{w_std} == span{centered}; the centered copy avoids the rho/sigma rounding.
  std::vector<double> g = project_out(upstream, ctx.centered);
  g = remove_mean(g);
  const double gain = cfg.rho / ctx.sigma;
  for (double& x : g) x *= gain;
  return g;
}

/// Standardization written as rho * sqrt(d) / ||v_bar|| * v_bar for a
/// zero-mean v_bar. Used to cross-check ws_forward.
inline std::vector<double> normalize_by_norm(std::span<const double> centered, double rho) {
  const double n = std::sqrt(dot(centered, centered));
  if (!(n > 0.0)) throw ArgumentError("normalize_by_norm: zero vector");
  const double gain = rho * std::sqrt(static_cast<double>(centered.size())) / n;
  std::vector<double> out(centered.begin(), centered.end());
  for (double& x : out) x *= gain;
  return out;
}

/// Applies ws_forward to every column of a (input_dim x output_dim) weight
/// matrix. Returns the standardized matrix and one context per column.
inline std::pair<Tensor, std::vector<WsContext>> ws_forward_matrix(const Tensor& weights,
                                                                   const WsConfig& cfg) {
  if (weights.rank() != 2) throw DimensionError("ws_forward_matrix: weights must be 2-D");
  const std::size_t in = weights.shape[0], out = weights.shape[1];
  Tensor result({in, out});
  std::vector<WsContext> ctxs;
  ctxs.reserve(out);
  std::vector<double> column(in);
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) column[i] = weights(i, o);
    ctxs.push_back(ws_forward(column, cfg));
    for (std::size_t i = 0; i < in; ++i) result(i, o) = ctxs.back().standardized[i];
  }
  return {std::move(result), std::move(ctxs)};
}

/// Column-wise ws_backward over a weight-shaped gradient.
inline Tensor ws_backward_matrix(const Tensor& grad_standardized, const std::vector<WsContext>& ctxs,
                                 const WsConfig& cfg) {
  const std::size_t in = grad_standardized.shape.at(0), out = grad_standardized.shape.at(1);
  if (ctxs.size() != out) throw DimensionError("ws_backward_matrix: context count mismatch");
  Tensor result({in, out});
  std::vector<double> column(in);
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) column[i] = grad_standardized(i, o);
    const auto g = ws_backward(column, ctxs[o], cfg);
    for (std::size_t i = 0; i < in; ++i) result(i, o) = g[i];
  }
  return result;
}

}  // namespace fedwsq::weightstd
