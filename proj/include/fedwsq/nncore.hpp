#pragma once

// Minimal deterministic MLP core with hand-written backward passes.
// Everything is 64-bit and single-threaded per call.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedwsq/error.hpp"
#include "fedwsq/rng.hpp"
#include "fedwsq/tensor.hpp"
#include "fedwsq/weightstd.hpp"

namespace fedwsq::nn {

inline constexpr double kGroupNormEps = 1e-5;

namespace detail {
inline Tensor as_batch(const Tensor& x) {
  if (x.rank() == 1) return Tensor({1, x.size()}, x.data);
  if (x.rank() != 2) throw DimensionError("expected a 1-D or 2-D tensor");
  return x;
}
}  // namespace detail

/// y = W^T x for each row x of the input. A 1-D input yields a 1-D output.
inline Tensor linear_forward(const Tensor& weights, const Tensor& input) {
  if (weights.rank() != 2) throw DimensionError("linear_forward: weights must be 2-D");
  const std::size_t in = weights.shape[0], out = weights.shape[1];
  if (input.cols() != in) throw DimensionError("linear_forward: input width != weight input_dim");
  const Tensor x = detail::as_batch(input);
  const std::size_t batch = x.rows();
  Tensor y({batch, out});
  for (std::size_t b = 0; b < batch; ++b) {
    double* yr = y.data.data() + b * out;
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = x(b, i);
      const double* wr = weights.data.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += wr[o] * xi;
    }
  }
  if (input.rank() == 1) y.shape = {out};
  return y;
}

inline Tensor linear_forward(const ParamBlock& weights, const Tensor& input) {
  return linear_forward(weights.tensor, input);
}

struct LinearGrads {
  Tensor grad_weights;
  Tensor grad_input;
};

inline LinearGrads linear_backward(const Tensor& weights, const Tensor& input, const Tensor& upstream) {
  if (weights.rank() != 2) throw DimensionError("linear_backward: weights must be 2-D");
  const std::size_t in = weights.shape[0], out = weights.shape[1];
  const Tensor x = detail::as_batch(input);
  const Tensor g = detail::as_batch(upstream);
  if (x.cols() != in || g.cols() != out || x.rows() != g.rows())
    throw DimensionError("linear_backward: upstream does not match forward output");
  const std::size_t batch = x.rows();
  LinearGrads r{Tensor({in, out}), Tensor({batch, in})};
  for (std::size_t b = 0; b < batch; ++b) {
    const double* gr = g.data.data() + b * out;
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = x(b, i);
      const double* wr = weights.data.data() + i * out;
      double* gw = r.grad_weights.data.data() + i * out;
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) {
        gw[o] += xi * gr[o];
        acc += wr[o] * gr[o];
      }
      r.grad_input(b, i) = acc;
    }
  }
  if (input.rank() == 1) r.grad_input.shape = {in};
  return r;
}

inline LinearGrads linear_backward(const ParamBlock& weights, const Tensor& input, const Tensor& upstream) {
  return linear_backward(weights.tensor, input, upstream);
}

/// Forward cache of a group-norm layer without affine parameters.
struct GroupNormCache {
  std::size_t groups = 1;
  Tensor normalized;             // batch x features
  std::vector<double> inv_std;   // batch x groups
};

inline GroupNormCache group_norm_forward(const Tensor& input, std::size_t groups,
                                         double eps = kGroupNormEps) {
  const Tensor x = detail::as_batch(input);
  const std::size_t batch = x.rows(), features = x.cols();
  if (groups == 0 || features % groups != 0)
    throw ConfigError("group_norm: feature dimension not divisible by groups", "groups");
  const std::size_t gsize = features / groups;
  GroupNormCache c{groups, Tensor({batch, features}), std::vector<double>(batch * groups)};
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = g * gsize;
      double m = 0.0;
      for (std::size_t k = 0; k < gsize; ++k) m += x(b, base + k);
      m /= static_cast<double>(gsize);
      double var = 0.0;
      for (std::size_t k = 0; k < gsize; ++k) var += (x(b, base + k) - m) * (x(b, base + k) - m);
      var /= static_cast<double>(gsize);
      const double inv = 1.0 / std::sqrt(var + eps);
      c.inv_std[b * groups + g] = inv;
      for (std::size_t k = 0; k < gsize; ++k) c.normalized(b, base + k) = (x(b, base + k) - m) * inv;
    }
  }
  return c;
}

inline Tensor group_norm_backward(const GroupNormCache& c, const Tensor& upstream) {
  const Tensor dy = detail::as_batch(upstream);
  const std::size_t batch = c.normalized.rows(), features = c.normalized.cols();
  if (dy.rows() != batch || dy.cols() != features)
    throw DimensionError("group_norm_backward: upstream shape mismatch");
  const std::size_t gsize = features / c.groups;
  const double m = static_cast<double>(gsize);
  Tensor dx({batch, features});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t g = 0; g < c.groups; ++g) {
      const std::size_t base = g * gsize;
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t k = 0; k < gsize; ++k) {
        sum_dy += dy(b, base + k);
        sum_dy_xhat += dy(b, base + k) * c.normalized(b, base + k);
      }
      const double inv = c.inv_std[b * c.groups + g];
      for (std::size_t k = 0; k < gsize; ++k) {
        dx(b, base + k) =
            inv / m * (m * dy(b, base + k) - sum_dy - c.normalized(b, base + k) * sum_dy_xhat);
      }
    }
  }
  return dx;
}

struct GroupNormResult {
  Tensor output;
  Tensor grad_input;
};

inline GroupNormResult group_norm_forward_backward(const Tensor& input, std::size_t groups,
                                                   const Tensor& upstream) {
  auto cache = group_norm_forward(input, groups);
  Tensor dx = group_norm_backward(cache, upstream);
  return {std::move(cache.normalized), std::move(dx)};
}

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Mean softmax cross-entropy over the batch.
inline LossResult cross_entropy_loss(const Tensor& logits, std::span<const int> labels) {
  const Tensor z = detail::as_batch(logits);
  const std::size_t batch = z.rows(), classes = z.cols();
  if (batch == 0 || labels.empty()) throw ArgumentError("cross_entropy_loss: empty batch");
  if (labels.size() != batch) throw DimensionError("cross_entropy_loss: label count != batch");
  LossResult r{0.0, Tensor({batch, classes})};
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw ArgumentError("cross_entropy_loss: label out of range");
    const auto row = z.row(b);
    const double mx = *std::max_element(row.begin(), row.end());
    double se = 0.0;
    for (double v : row) se += std::exp(v - mx);
    const double lse = mx + std::log(se);
    r.loss += (lse - row[static_cast<std::size_t>(y)]) * inv_batch;
    for (std::size_t k = 0; k < classes; ++k) {
      const double p = std::exp(row[k] - lse);
      r.grad_logits(b, k) = (p - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0)) * inv_batch;
    }
  }
  return r;
}

/// Plain SGD with global-norm clipping and decoupled-into-gradient weight decay:
/// w <- w - lr * (clip(g) + weight_decay * w). Returns the pre-clip gradient norm.
inline double sgd_step(ParamList& params, const std::vector<Tensor>& grads, double lr,
                       double weight_decay, double clip_norm) {
  if (params.size() != grads.size()) throw DimensionError("sgd_step: params/grads count mismatch");
  if (!(lr >= 0.0)) throw ArgumentError("sgd_step: lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ArgumentError("sgd_step: weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) throw ArgumentError("sgd_step: clip_norm must be > 0");
  double sq = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p].size() != params[p].tensor.size())
      throw DimensionError("sgd_step: gradient shape mismatch for " + params[p].name);
    for (double g : grads[p].data) {
      if (!std::isfinite(g))
        throw TrainingError("non-finite gradient in layer " + std::to_string(params[p].layer_id) +
                                " (" + params[p].name + ")",
                            params[p].layer_id);
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double scale = norm > clip_norm ? clip_norm / norm : 1.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p].tensor.data;
    const auto& g = grads[p].data;
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] * scale + weight_decay * w[i]);
  }
  return norm;
}

enum class Activation { relu, tanh };

struct ModelSpec {
  std::vector<std::size_t> layer_sizes;  // input, hidden..., classes
  Activation activation = Activation::relu;
  bool use_group_norm = true;
  std::size_t groups = 8;
  std::set<int> ws_layers;  // 1-based linear layer ids

  int num_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }

  void validate() const {
    if (layer_sizes.size() < 2) throw ConfigError("model: need at least input and output sizes", "hidden");
    for (auto s : layer_sizes)
      if (s == 0) throw ConfigError("model: zero layer width", "hidden");
    const int L = num_layers();
    for (int l : ws_layers) {
      if (l < 1 || l > L) throw ConfigError("model: ws layer id out of range", "ws");
      if (l == L) throw ConfigError("model: classifier head cannot be standardized", "ws");
      if (layer_sizes[static_cast<std::size_t>(l - 1)] < 2)
        throw ConfigError("model: ws needs input width >= 2", "ws");
    }
    if (use_group_norm) {
      if (groups == 0) throw ConfigError("model: groups must be >= 1", "groups");
      for (int l = 1; l < L; ++l)
        if (layer_sizes[static_cast<std::size_t>(l)] % groups != 0)
          throw ConfigError("model: groups must divide every hidden width", "groups");
    }
  }

  /// Default desk-scale MLP [input, 128, 64, classes] with GN(8) and WS on both hidden layers.
  static ModelSpec desk_default(std::size_t input, std::size_t classes, bool ws = true) {
    ModelSpec s;
    s.layer_sizes = {input, 128, 64, classes};
    if (ws) s.ws_layers = {1, 2};
    return s;
  }
};

inline bool layer_has_bias(const ModelSpec& spec, int l) { return l == spec.num_layers() || !spec.use_group_norm; }

/// Parameter list in a fixed order: per layer the weight, then either a bias
/// or (hidden layers with GN) gamma and beta. A linear layer feeding GN has no
/// bias since GN removes it.
inline ParamList init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, {0x1717}));
  ParamList params;
  const int L = spec.num_layers();
  for (int l = 1; l <= L; ++l) {
    const std::size_t in = spec.layer_sizes[static_cast<std::size_t>(l - 1)];
    const std::size_t out = spec.layer_sizes[static_cast<std::size_t>(l)];
    const double stdev = spec.activation == Activation::relu && l < L
                             ? std::sqrt(2.0 / static_cast<double>(in))
                             : std::sqrt(1.0 / static_cast<double>(in));
    Tensor w({in, out});
    for (double& v : w.data) v = stdev * standard_normal(rng);
    const std::string id = std::to_string(l);
    params.push_back({l, BlockKind::weight, "fc" + id + ".weight", std::move(w)});
    if (layer_has_bias(spec, l)) {
      params.push_back({l, BlockKind::bias, "fc" + id + ".bias", Tensor({out})});
    } else {
      params.push_back({l, BlockKind::norm, "gn" + id + ".gamma", Tensor({out}, 1.0)});
      params.push_back({l, BlockKind::norm, "gn" + id + ".beta", Tensor({out})});
    }
  }
  return params;
}

namespace detail {
struct LayerRefs {
  std::size_t weight;
  std::ptrdiff_t bias = -1, gamma = -1, beta = -1;
};

inline std::vector<LayerRefs> layer_refs(const ModelSpec& spec, const ParamList& params) {
  std::vector<LayerRefs> refs;
  std::size_t p = 0;
  const int L = spec.num_layers();
  for (int l = 1; l <= L; ++l) {
    LayerRefs r{p++};
    if (layer_has_bias(spec, l)) {
      r.bias = static_cast<std::ptrdiff_t>(p++);
    } else {
      r.gamma = static_cast<std::ptrdiff_t>(p);
      r.beta = static_cast<std::ptrdiff_t>(p + 1);
      p += 2;
    }
    refs.push_back(r);
  }
  if (p != params.size()) throw DimensionError("model: parameter list does not match spec");
  return refs;
}

struct LayerCache {
  Tensor input;
  Tensor effective_weight;
  std::vector<weightstd::WsContext> ws;
  GroupNormCache gn;
  Tensor pre_activation;  // input to the nonlinearity
};
}  // namespace detail

struct ForwardResult {
  Tensor logits;
  std::vector<detail::LayerCache> caches;
};

inline ForwardResult forward(const ModelSpec& spec, const ParamList& params,
                             const weightstd::WsConfig& ws, const Tensor& batch) {
  const auto refs = detail::layer_refs(spec, params);
  const int L = spec.num_layers();
  ForwardResult fr;
  Tensor x = detail::as_batch(batch);
  for (int l = 1; l <= L; ++l) {
    const auto& r = refs[static_cast<std::size_t>(l - 1)];
    detail::LayerCache c;
    c.input = x;
    if (spec.ws_layers.count(l)) {
      auto [w, ctx] = weightstd::ws_forward_matrix(params[r.weight].tensor, ws);
      c.effective_weight = std::move(w);
      c.ws = std::move(ctx);
    } else {
      c.effective_weight = params[r.weight].tensor;
    }
    Tensor z = linear_forward(c.effective_weight, x);
    if (r.bias >= 0) {
      const auto& bias = params[static_cast<std::size_t>(r.bias)].tensor.data;
      for (std::size_t b = 0; b < z.rows(); ++b)
        for (std::size_t o = 0; o < z.cols(); ++o) z(b, o) += bias[o];
    }
    if (l < L) {
      if (r.gamma >= 0) {
        c.gn = group_norm_forward(z, spec.groups);
        const auto& gamma = params[static_cast<std::size_t>(r.gamma)].tensor.data;
        const auto& beta = params[static_cast<std::size_t>(r.beta)].tensor.data;
        for (std::size_t b = 0; b < z.rows(); ++b)
          for (std::size_t o = 0; o < z.cols(); ++o) z(b, o) = gamma[o] * c.gn.normalized(b, o) + beta[o];
      }
      c.pre_activation = z;
      for (double& v : z.data) v = spec.activation == Activation::relu ? (v > 0.0 ? v : 0.0) : std::tanh(v);
    }
    fr.caches.push_back(std::move(c));
    x = std::move(z);
  }
  fr.logits = std::move(x);
  return fr;
}

struct LossAndGrads {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with the parameter list
};

/// Mean cross-entropy and its gradient with respect to every stored
/// (pre-standardized) parameter.
inline LossAndGrads loss_and_grads(const ModelSpec& spec, const ParamList& params,
                                   const weightstd::WsConfig& ws, const Tensor& batch,
                                   std::span<const int> labels) {
  const auto refs = detail::layer_refs(spec, params);
  auto fr = forward(spec, params, ws, batch);
  auto ce = cross_entropy_loss(fr.logits, labels);
  LossAndGrads out;
  out.loss = ce.loss;
  out.grads.reserve(params.size());
  for (const auto& p : params) out.grads.emplace_back(p.tensor.shape);

  Tensor up = std::move(ce.grad_logits);
  for (int l = spec.num_layers(); l >= 1; --l) {
    const auto& r = refs[static_cast<std::size_t>(l - 1)];
    auto& c = fr.caches[static_cast<std::size_t>(l - 1)];
    if (l < spec.num_layers()) {
      for (std::size_t i = 0; i < up.size(); ++i) {
        const double a = c.pre_activation.data[i];
        up.data[i] *= spec.activation == Activation::relu ? (a > 0.0 ? 1.0 : 0.0)
                                                          : 1.0 - std::tanh(a) * std::tanh(a);
      }
      if (r.gamma >= 0) {
        const auto& gamma = params[static_cast<std::size_t>(r.gamma)].tensor.data;
        auto& dgamma = out.grads[static_cast<std::size_t>(r.gamma)].data;
        auto& dbeta = out.grads[static_cast<std::size_t>(r.beta)].data;
        for (std::size_t b = 0; b < up.rows(); ++b) {
          for (std::size_t o = 0; o < up.cols(); ++o) {
            dgamma[o] += up(b, o) * c.gn.normalized(b, o);
            dbeta[o] += up(b, o);
            up(b, o) *= gamma[o];
          }
        }
        up = group_norm_backward(c.gn, up);
      }
    }
    if (r.bias >= 0) {
      auto& dbias = out.grads[static_cast<std::size_t>(r.bias)].data;
      for (std::size_t b = 0; b < up.rows(); ++b)
        for (std::size_t o = 0; o < up.cols(); ++o) dbias[o] += up(b, o);
    }
    auto lg = linear_backward(c.effective_weight, c.input, up);
    out.grads[r.weight] = spec.ws_layers.count(l)
                              ? weightstd::ws_backward_matrix(lg.grad_weights, c.ws, ws)
                              : std::move(lg.grad_weights);
    up = std::move(lg.grad_input);
  }
  return out;
}

inline Tensor predict_logits(const ModelSpec& spec, const ParamList& params,
                             const weightstd::WsConfig& ws, const Tensor& batch) {
  return forward(spec, params, ws, batch).logits;
}

}  // namespace fedwsq::nn
