#pragma once

// Server and client sides of one federated round:
//   sample clients -> local WS-filtered SGD -> quantize LMPUs with the global
//   scale -> (transport) -> dequantize -> weighted aggregation -> momentum
//   update of the global scaling vector.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "fedwsq/danuq.hpp"
#include "fedwsq/datagen.hpp"
#include "fedwsq/error.hpp"
#include "fedwsq/nncore.hpp"
#include "fedwsq/rng.hpp"
#include "fedwsq/tensor.hpp"
#include "fedwsq/weightstd.hpp"

namespace fedwsq::fed {

enum class Quantizer { none, danuq, uniform };
enum class DequantScale { local, global };
enum class Aggregate { weighted, sum };
enum class LevelSource { optimized, published };

struct BitAllocation {
  enum class Strategy { constant, fba, dba };
  Strategy strategy = Strategy::constant;
  int constant_bits = 4;
  std::array<int, 3> palette{1, 2, 4};
  std::uint64_t seed = 0;
};

/// Bit-width of a client in a round. fba depends on the client only; dba is a
/// seeded uniform draw per (round, client).
inline int assign_bits(const BitAllocation& alloc, std::uint64_t round, std::uint64_t client_id) {
  switch (alloc.strategy) {
    case BitAllocation::Strategy::constant: return alloc.constant_bits;
    case BitAllocation::Strategy::fba: return alloc.palette[client_id % alloc.palette.size()];
    case BitAllocation::Strategy::dba: {
      Rng rng(derive_seed(alloc.seed, {0xB175, round, client_id}));
      return alloc.palette[uniform_index(rng, alloc.palette.size())];
    }
  }
  throw ConfigError("unknown bit allocation strategy", "alloc");
}

struct ScalingVector {
  std::vector<double> per_layer;
  friend bool operator==(const ScalingVector&, const ScalingVector&) = default;
};

/// s_g <- (1 - beta) s_g + beta * mean(client scales). Clients are summed in
/// the order given; callers pass them sorted by client id.
inline ScalingVector update_global_scales(const ScalingVector& global, std::span<const ScalingVector> clients,
                                          double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ArgumentError("update_global_scales: beta must be in [0, 1]");
  if (clients.empty()) throw ArgumentError("update_global_scales: no client scales");
  const std::size_t L = global.per_layer.size();
  ScalingVector out{std::vector<double>(L)};
  for (std::size_t l = 0; l < L; ++l) {
    double sum = 0.0;
    for (const auto& c : clients) {
      if (c.per_layer.size() != L) throw DimensionError("update_global_scales: length mismatch");
      sum += c.per_layer[l];
    }
    const double client_mean = sum / static_cast<double>(clients.size());
    out.per_layer[l] = (1.0 - beta) * global.per_layer[l] + beta * client_mean;
  }
  return out;
}

struct FedConfig {
  nn::ModelSpec model;
  weightstd::WsConfig ws;
  std::size_t num_clients = 100;
  double participation_rate = 0.05;
  std::size_t local_epochs = 5;
  std::size_t iterations_per_epoch = 10;
  double lr0 = 0.1;
  double lr_decay = 0.995;
  double weight_decay = 1e-3;
  double clip_norm = 10.0;
  double beta = 0.1;
  Quantizer quantizer = Quantizer::danuq;
  BitAllocation alloc;
  DequantScale dequant_scale = DequantScale::local;
  Aggregate aggregate = Aggregate::weighted;
  LevelSource level_source = LevelSource::optimized;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::size_t local_steps() const { return local_epochs * iterations_per_epoch; }
};

/// Level tables for the bit-widths in use, built once per run.
class LevelBank {
 public:
  explicit LevelBank(LevelSource source = LevelSource::optimized) {
    for (int b : {1, 2, 4})
      tables_.emplace(b, source == LevelSource::published ? danuq::published_levels(b) : danuq::optimize_levels(b));
  }
  const danuq::QuantLevels& at(int bits) const {
    auto it = tables_.find(bits);
    if (it == tables_.end()) throw ConfigError("no level table for " + std::to_string(bits) + " bits", "bits");
    return it->second;
  }

 private:
  std::map<int, danuq::QuantLevels> tables_;
};

struct GlobalState {
  std::uint64_t round = 0;  // completed rounds
  ParamList params;
  ScalingVector scales;
  bool scales_initialized = false;
  double lr = 0.0;
  std::uint64_t rng_seed = 0;
};

inline std::size_t count_weight_layers(const ParamList& params) {
  return static_cast<std::size_t>(
      std::count_if(params.begin(), params.end(), [](const ParamBlock& p) { return p.kind == BlockKind::weight; }));
}

inline GlobalState initial_state(const FedConfig& cfg, ParamList params) {
  GlobalState s;
  s.scales.per_layer.assign(count_weight_layers(params), 0.0);
  s.params = std::move(params);
  s.lr = cfg.lr0;
  s.rng_seed = cfg.seed;
  return s;
}

struct ClientReport {
  std::uint64_t client_id = 0;
  int bits = 0;
  Quantizer quantizer = Quantizer::danuq;
  std::vector<danuq::QuantizedBlock> quantized;  // one per weight layer (danuq/uniform)
  ParamList weight_deltas;                       // full-precision weight deltas (none mode)
  ParamList local_params;                        // W_i after local training (none mode)
  ScalingVector local_scales;
  ParamList full_precision;                      // bias and norm deltas
  std::size_t sample_count = 0;
  std::size_t uplink_bytes = 0;
  std::vector<int> bootstrap_layers;             // layers encoded with s_i instead of s_g
  double train_loss = 0.0;                       // mean minibatch loss over local steps
};

/// Raw binary32 blocks that stand in for weight layers in the unquantized mode.
inline std::vector<danuq::QuantizedBlock> wire_weight_blocks(const ClientReport& r) {
  if (r.quantizer != Quantizer::none) return r.quantized;
  std::vector<danuq::QuantizedBlock> out;
  for (const auto& p : r.weight_deltas) out.push_back(danuq::encode_raw(p.tensor.data, p.layer_id));
  return out;
}

/// Exact uplink size: per weight layer an 11-byte header plus packed codes,
/// then the scaling vector (4 bytes per layer) and every full-precision
/// value at 4 bytes.
inline std::size_t account_bytes(const ClientReport& r) {
  std::size_t bytes = 0;
  if (r.quantizer == Quantizer::none) {
    for (const auto& p : r.weight_deltas) bytes += danuq::kBlockHeaderBytes + 4 * p.tensor.size();
  } else {
    for (const auto& b : r.quantized) bytes += danuq::serialized_size(b);
  }
  bytes += 4 * r.local_scales.per_layer.size();
  for (const auto& p : r.full_precision) bytes += 4 * p.tensor.size();
  return bytes;
}

/// Bytes spent on weight codes alone (headers, scales and 1-D blocks excluded).
inline std::size_t weight_payload_bytes(const ClientReport& r) {
  std::size_t bytes = 0;
  for (const auto& b : wire_weight_blocks(r)) bytes += danuq::payload_bytes(b);
  return bytes;
}

inline std::vector<std::uint8_t> serialize_report(const ClientReport& r) {
  std::vector<std::uint8_t> out;
  for (const auto& b : wire_weight_blocks(r)) danuq::serialize_block(b, out);
  for (double s : r.local_scales.per_layer) danuq::wire::put_f32(out, s);
  for (const auto& p : r.full_precision)
    for (double v : p.tensor.data) danuq::wire::put_f32(out, v);
  return out;
}

/// What the receiver decodes from the wire, at wire precision.
struct WireReport {
  std::vector<danuq::QuantizedBlock> weight_blocks;
  std::vector<float> local_scales;
  std::vector<std::vector<float>> full_precision;
};

/// The receiver knows the architecture: the number of weight layers and the
/// sizes of the full-precision blocks, in order.
inline WireReport deserialize_report(std::span<const std::uint8_t> bytes, std::size_t weight_layers,
                                     std::span<const std::size_t> full_precision_sizes) {
  danuq::wire::Reader rd(bytes);
  WireReport w;
  for (std::size_t l = 0; l < weight_layers; ++l) w.weight_blocks.push_back(danuq::deserialize_block(rd));
  for (std::size_t l = 0; l < weight_layers; ++l) w.local_scales.push_back(rd.f32());
  for (auto n : full_precision_sizes) {
    std::vector<float> v(n);
    for (auto& x : v) x = rd.f32();
    w.full_precision.push_back(std::move(v));
  }
  if (rd.remaining() != 0) throw DecodingError("report: trailing bytes");
  return w;
}

/// Minibatch indices for one local step: a seeded per-epoch shuffle sliced
/// into iterations_per_epoch batches of floor(n / iterations) (at least 1),
/// each sorted so gradient sums run in index order.
inline std::vector<std::vector<std::size_t>> local_batches(std::size_t n, std::size_t epochs,
                                                           std::size_t iterations, std::uint64_t stream_seed) {
  std::vector<std::vector<std::size_t>> batches;
  if (n == 0) return batches;
  Rng rng(stream_seed);
  const std::size_t bs = std::max<std::size_t>(1, n / std::max<std::size_t>(1, iterations));
  std::vector<std::size_t> perm(n);
  for (std::size_t e = 0; e < epochs; ++e) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    data::detail::shuffle(perm, rng);
    for (std::size_t it = 0; it < iterations; ++it) {
      std::vector<std::size_t> b(bs);
      for (std::size_t j = 0; j < bs; ++j) b[j] = perm[(it * bs + j) % n];
      std::sort(b.begin(), b.end());
      batches.push_back(std::move(b));
    }
  }
  return batches;
}

/// Runs K local steps from the global model and packages the quantized update.
inline ClientReport client_local_training(const ParamList& global_params, const ScalingVector& global_scales,
                                          bool scales_initialized, const data::Dataset& client_data, int bits,
                                          const FedConfig& cfg, const LevelBank& levels, std::uint64_t round,
                                          std::uint64_t client_id, double lr) {
  if (client_data.size() == 0) throw ArgumentError("client_local_training: empty client data");
  ClientReport rep;
  rep.client_id = client_id;
  rep.bits = bits;
  rep.quantizer = cfg.quantizer;
  rep.sample_count = client_data.size();

  ParamList local = global_params;
  const auto batches = local_batches(client_data.size(), cfg.local_epochs, cfg.iterations_per_epoch,
                                     derive_seed(cfg.seed, {round, client_id, 1}));
  double loss_sum = 0.0;
  for (const auto& b : batches) {
    const auto mb = data::subset(client_data, b);
    auto lg = nn::loss_and_grads(cfg.model, local, cfg.ws, mb.features, mb.labels);
    loss_sum += lg.loss;
    nn::sgd_step(local, lg.grads, lr, cfg.weight_decay, cfg.clip_norm);
  }
  rep.train_loss = batches.empty() ? 0.0 : loss_sum / static_cast<double>(batches.size());
  if (cfg.quantizer == Quantizer::none) rep.local_params = local;

  Rng uq_rng(derive_seed(cfg.seed, {round, client_id, 2}));
  std::size_t layer_index = 0;
  for (std::size_t p = 0; p < local.size(); ++p) {
    ParamBlock delta = local[p];
    for (std::size_t i = 0; i < delta.tensor.size(); ++i) delta.tensor.data[i] -= global_params[p].tensor.data[i];
    if (delta.kind != BlockKind::weight) {
      rep.full_precision.push_back(std::move(delta));
      continue;
    }
    const auto& values = delta.tensor.data;
    const double local_scale = population_std(values);
    rep.local_scales.per_layer.push_back(local_scale);
    switch (cfg.quantizer) {
      case Quantizer::none: rep.weight_deltas.push_back(std::move(delta)); break;
      case Quantizer::uniform:
        rep.quantized.push_back(danuq::uniform_quantize_absmax(values, bits, uq_rng, delta.layer_id).block);
        break;
      case Quantizer::danuq: {
        const auto& table = levels.at(bits);
        double scale = scales_initialized ? global_scales.per_layer.at(layer_index) : 0.0;
        if (!(scale > 0.0)) {
          scale = local_scale;
          rep.bootstrap_layers.push_back(delta.layer_id);
        }
        if (scale > 0.0) {
          rep.quantized.push_back(danuq::quantize(values, scale, table, delta.layer_id));
        } else {
          // zero update: scale 0 marks the block as degenerate
          std::vector<std::uint32_t> codes(values.size(), table.encode(0.0));
          rep.quantized.push_back({delta.layer_id, bits, values.size(), danuq::pack_codes(codes, bits), 0.0});
        }
        break;
      }
    }
    ++layer_index;
  }
  rep.uplink_bytes = account_bytes(rep);
  return rep;
}

/// Aggregation weights h_i: |D_i| / sum |D_j| (weighted) or 1 (sum).
inline std::vector<double> aggregation_weights(std::span<const std::size_t> sample_counts, Aggregate mode) {
  std::vector<double> h(sample_counts.size(), 1.0);
  if (mode == Aggregate::weighted) {
    std::size_t total = 0;
    for (auto n : sample_counts) total += n;
    if (total == 0) throw ArgumentError("aggregation_weights: no samples");
    for (std::size_t i = 0; i < h.size(); ++i)
      h[i] = static_cast<double>(sample_counts[i]) / static_cast<double>(total);
  }
  return h;
}

/// Server-side reconstruction of one client's weight deltas. A block whose
/// reconstruction scale is not positive is zeroed and counted in `degenerate`.
inline std::vector<std::vector<double>> reconstruct_weights(const ClientReport& r, const FedConfig& cfg,
                                                            const LevelBank& levels, std::size_t& degenerate) {
  std::vector<std::vector<double>> out;
  if (r.quantizer == Quantizer::none) {
    for (const auto& p : r.weight_deltas) out.push_back(p.tensor.data);
    return out;
  }
  for (std::size_t l = 0; l < r.quantized.size(); ++l) {
    const auto& b = r.quantized[l];
    double scale = b.scale_used;
    if (r.quantizer == Quantizer::danuq && cfg.dequant_scale == DequantScale::local)
      scale = r.local_scales.per_layer.at(l);
    if (!(scale > 0.0)) {
      ++degenerate;
      out.emplace_back(b.count, 0.0);
      continue;
    }
    out.push_back(r.quantizer == Quantizer::danuq ? danuq::dequantize(b, scale, levels.at(b.bits))
                                                  : danuq::uniform_dequantize(b, scale));
  }
  return out;
}

struct RoundOutcome {
  std::vector<std::uint64_t> participants;
  std::vector<int> bits;
  std::size_t uplink_bytes = 0;
  std::size_t weight_payload_bytes = 0;
  double client_train_loss = 0.0;
  std::size_t degenerate_scales = 0;
};

/// Seeded sample of max(1, round(rate * N)) distinct clients, sorted by id.
inline std::vector<std::uint64_t> sample_clients(std::size_t num_clients, double rate, std::uint64_t seed,
                                                 std::uint64_t round) {
  if (num_clients == 0) throw ConfigError("no clients", "num_clients");
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("participation rate must be in (0, 1]", "participation_rate");
  const auto m = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(rate * static_cast<double>(num_clients))), 1, num_clients);
  std::vector<std::uint64_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), std::uint64_t{0});
  Rng rng(derive_seed(seed, {0x5A3, round}));
  for (std::size_t i = 0; i < m; ++i) std::swap(ids[i], ids[i + uniform_index(rng, num_clients - i)]);
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Server update from a set of client reports (sorted by client id):
/// dequantize, aggregate with h_i, apply to W_g, mix the scaling vector, and
/// advance the round counter and learning rate.
inline void apply_reports(GlobalState& state, std::span<const ClientReport> reports, const FedConfig& cfg,
                          const LevelBank& levels, RoundOutcome& out) {
  if (reports.empty()) throw ConfigError("empty participant set", "participation_rate");
  const std::uint64_t round = state.round + 1;
  std::vector<std::size_t> counts;
  for (const auto& r : reports) counts.push_back(r.sample_count);
  const auto h = aggregation_weights(counts, cfg.aggregate);

  std::vector<Tensor> delta;
  for (const auto& p : state.params) delta.emplace_back(p.tensor.shape);
  std::vector<ScalingVector> client_scales;
  double loss_sum = 0.0;
  for (std::size_t k = 0; k < reports.size(); ++k) {
    const auto& r = reports[k];
    const auto weights = reconstruct_weights(r, cfg, levels, out.degenerate_scales);
    std::size_t wl = 0, fp = 0;
    for (std::size_t p = 0; p < state.params.size(); ++p) {
      const auto& src = state.params[p].kind == BlockKind::weight ? weights.at(wl++) : r.full_precision.at(fp++).tensor.data;
      auto& dst = delta[p].data;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += h[k] * src[i];
    }
    client_scales.push_back(r.local_scales);
    out.uplink_bytes += r.uplink_bytes;
    out.weight_payload_bytes += weight_payload_bytes(r);
    loss_sum += r.train_loss;
  }
  out.client_train_loss = loss_sum / static_cast<double>(reports.size());

  // Unquantized weighted mode is plain FedAvg over local models; it equals
  // W_g + sum h_i delta_i in exact arithmetic and avoids the W_g + (W_i - W_g)
  // rounding round trip.
  const bool model_average = cfg.quantizer == Quantizer::none && cfg.aggregate == Aggregate::weighted &&
                             std::all_of(reports.begin(), reports.end(),
                                         [&](const ClientReport& r) { return r.local_params.size() == state.params.size(); });
  for (std::size_t p = 0; p < state.params.size(); ++p) {
    auto& w = state.params[p].tensor.data;
    if (model_average) {
      std::vector<double> avg(w.size(), 0.0);
      for (std::size_t k = 0; k < reports.size(); ++k) {
        const auto& src = reports[k].local_params[p].tensor.data;
        for (std::size_t i = 0; i < w.size(); ++i) avg[i] += h[k] * src[i];
      }
      w = std::move(avg);
    } else {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += delta[p].data[i];
    }
  }
  state.scales = update_global_scales(state.scales, client_scales, state.scales_initialized ? cfg.beta : 1.0);
  state.scales_initialized = true;
  state.round = round;
  state.lr = cfg.lr0 * std::pow(cfg.lr_decay, static_cast<double>(round));
}

/// One communication round over an explicit participant list (sorted ids).
inline RoundOutcome run_round_with(GlobalState& state, std::span<const data::Dataset> clients,
                                   std::span<const std::uint64_t> participants, const FedConfig& cfg,
                                   const LevelBank& levels) {
  if (participants.empty()) throw ConfigError("empty participant set", "participation_rate");
  const std::uint64_t round = state.round + 1;
  RoundOutcome out;
  out.participants.assign(participants.begin(), participants.end());
  for (auto id : participants) out.bits.push_back(assign_bits(cfg.alloc, round, id));

  // Clients see an immutable snapshot; results land in id order.
  std::vector<ClientReport> reports(participants.size());
  std::vector<std::exception_ptr> errors(participants.size());
  auto work = [&](std::size_t k) {
    try {
      reports[k] = client_local_training(state.params, state.scales, state.scales_initialized,
                                         clients[participants[k]], out.bits[k], cfg, levels, round,
                                         participants[k], state.lr);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  const std::size_t nthreads = std::clamp<std::size_t>(cfg.threads, 1, participants.size());
  if (nthreads == 1) {
    for (std::size_t k = 0; k < participants.size(); ++k) work(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t)
      pool.emplace_back([&] {
        for (std::size_t k; (k = next.fetch_add(1)) < participants.size();) work(k);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  apply_reports(state, reports, cfg, levels, out);
  return out;
}

/// One communication round with seeded client sampling.
inline RoundOutcome run_round(GlobalState& state, std::span<const data::Dataset> clients, const FedConfig& cfg,
                              const LevelBank& levels) {
  const auto participants = sample_clients(clients.size(), cfg.participation_rate, cfg.seed, state.round + 1);
  return run_round_with(state, clients, participants, cfg, levels);
}

}  // namespace fedwsq::fed
