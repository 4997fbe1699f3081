#pragma once

// Experiment driver: data setup, per-round evaluation with EMA smoothing,
// metrics CSV rows, and the WS x quantizer comparison grid.

#include <chrono>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fedwsq/config.hpp"
#include "fedwsq/datagen.hpp"
#include "fedwsq/federation.hpp"
#include "fedwsq/nncore.hpp"

namespace fedwsq::exp {

/// Argmax accuracy; ties resolve to the lowest class index.
inline double accuracy_from_logits(const Tensor& logits, std::span<const int> labels) {
  if (labels.empty()) throw ArgumentError("evaluate: empty test set");
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = logits.row(b);
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
      if (row[k] > row[best]) best = k;
    correct += static_cast<int>(best) == labels[b];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

inline double evaluate(const nn::ModelSpec& spec, const ParamList& params, const weightstd::WsConfig& ws,
                       const data::Dataset& test) {
  if (test.size() == 0) throw ArgumentError("evaluate: empty test set");
  return accuracy_from_logits(nn::predict_logits(spec, params, ws, test.features), test.labels);
}

inline double mean_loss(const nn::ModelSpec& spec, const ParamList& params, const weightstd::WsConfig& ws,
                        const data::Dataset& ds) {
  return nn::cross_entropy_loss(nn::predict_logits(spec, params, ws, ds.features), ds.labels).loss;
}

/// ema(0) = raw(0); ema(t) = s * ema(t-1) + (1 - s) * raw(t).
class Ema {
 public:
  explicit Ema(double smoothing) : smoothing_(smoothing) {}
  double update(double raw) {
    value_ = started_ ? smoothing_ * value_ + (1.0 - smoothing_) * raw : raw;
    started_ = true;
    return value_;
  }
  double value() const { return value_; }

 private:
  double smoothing_;
  double value_ = 0.0;
  bool started_ = false;
};

struct RoundRow {
  std::size_t round = 0;
  double train_loss = 0.0;
  double acc_raw = 0.0;
  double acc_ema = 0.0;
  std::size_t uplink_bytes = 0;
  std::size_t bits_1 = 0, bits_2 = 0, bits_4 = 0;
  double wallclock_ms = 0.0;
};

inline constexpr const char* kCsvHeader = "round,train_loss,acc_raw,acc_ema,uplink_bytes,bits_1,bits_2,bits_4,wallclock_ms";

inline std::string csv_row(const RoundRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%zu,%zu,%zu,%zu,%.3f", r.round, r.train_loss, r.acc_raw,
                r.acc_ema, r.uplink_bytes, r.bits_1, r.bits_2, r.bits_4, r.wallclock_ms);
  return buf;
}

struct Setup {
  data::Dataset train, test;
  data::Partition partition;
  std::vector<data::Dataset> clients;
  fed::FedConfig fed;
};

inline Setup build_setup(const RunConfig& cfg) {
  cfg.validate();
  Setup s;
  if (cfg.dataset == "idx") {
    s.train = data::load_idx(cfg.train_images, cfg.train_labels);
    s.test = data::load_idx(cfg.test_images, cfg.test_labels, s.train.num_classes);
    s.train.num_classes = std::max(s.train.num_classes, s.test.num_classes);
    s.test.num_classes = s.train.num_classes;
  } else {
    s.train = data::synth_classification(cfg.num_classes, cfg.dim, cfg.train_per_class, cfg.spread, cfg.seed, 0);
    s.test = data::synth_classification(cfg.num_classes, cfg.dim, cfg.test_per_class, cfg.spread, cfg.seed, 1);
  }
  s.partition = cfg.alpha ? data::dirichlet_partition(s.train.labels, cfg.num_clients, *cfg.alpha, cfg.seed)
                          : data::iid_partition(s.train.size(), cfg.num_clients, cfg.seed);
  for (const auto& shard : s.partition.client_shards) s.clients.push_back(data::subset(s.train, shard));
  RunConfig effective = cfg;
  effective.num_classes = s.train.num_classes;
  s.fed = effective.federation(s.train.dim());
  s.fed.model.validate();
  return s;
}

/// Numerical failure tagged with the round in which it happened.
class RoundError : public NumericalError {
 public:
  RoundError(const std::string& what, std::size_t round)
      : NumericalError("round " + std::to_string(round) + ": " + what), round_(round) {}
  std::size_t round() const noexcept { return round_; }

 private:
  std::size_t round_;
};

struct RunSummary {
  std::vector<RoundRow> rows;
  std::uint64_t partition_hash = 0;
  std::size_t total_uplink_bytes = 0;
  std::size_t total_weight_payload_bytes = 0;
  std::size_t degenerate_scales = 0;
  double final_acc_raw = 0.0;
  double final_acc_ema = 0.0;
  double final_train_loss = 0.0;
};

/// Runs cfg.rounds rounds; `on_row` sees each row as soon as it is complete.
inline RunSummary run_experiment(const RunConfig& cfg, const std::function<void(const RoundRow&)>& on_row = {}) {
  const Setup s = build_setup(cfg);
  const fed::LevelBank levels(s.fed.level_source);
  auto state = fed::initial_state(s.fed, nn::init_params(s.fed.model, cfg.seed));
  RunSummary sum;
  sum.partition_hash = data::partition_hash(s.partition);
  Ema ema(cfg.ema_smoothing);
  double last_acc = 0.0, last_loss = 0.0;
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    const auto start = std::chrono::steady_clock::now();
    fed::RoundOutcome out;
    try {
      out = fed::run_round(state, s.clients, s.fed, levels);
    } catch (const NumericalError& e) {
      throw RoundError(e.what(), t);
    }
    if (t % cfg.eval_every == 0 || t == cfg.rounds || t == 1) {
      last_acc = evaluate(s.fed.model, state.params, s.fed.ws, s.test);
      last_loss = mean_loss(s.fed.model, state.params, s.fed.ws, s.train);
      if (!std::isfinite(last_loss)) throw RoundError("non-finite training loss", t);
    }
    RoundRow row;
    row.round = t;
    row.train_loss = last_loss;
    row.acc_raw = last_acc;
    row.acc_ema = ema.update(last_acc);
    row.uplink_bytes = out.uplink_bytes;
    for (int b : out.bits) {
      row.bits_1 += b == 1;
      row.bits_2 += b == 2;
      row.bits_4 += b == 4;
    }
    if (cfg.record_wallclock)
      row.wallclock_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    sum.total_uplink_bytes += out.uplink_bytes;
    sum.total_weight_payload_bytes += out.weight_payload_bytes;
    sum.degenerate_scales += out.degenerate_scales;
    sum.rows.push_back(row);
    if (on_row) on_row(row);
  }
  if (!sum.rows.empty()) {
    sum.final_acc_raw = sum.rows.back().acc_raw;
    sum.final_acc_ema = sum.rows.back().acc_ema;
    sum.final_train_loss = sum.rows.back().train_loss;
  }
  return sum;
}

inline void write_summary(std::ostream& os, const RunConfig& cfg, const RunSummary& s) {
  os << "rounds = " << s.rows.size() << "\n"
     << "final_acc_raw = " << s.final_acc_raw << "\n"
     << "final_acc_ema = " << s.final_acc_ema << "\n"
     << "final_train_loss = " << s.final_train_loss << "\n"
     << "total_uplink_bytes = " << s.total_uplink_bytes << "\n"
     << "total_weight_payload_bytes = " << s.total_weight_payload_bytes << "\n"
     << "degenerate_scales = " << s.degenerate_scales << "\n"
     << "partition_hash = " << s.partition_hash << "\n"
     << "\n# effective configuration\n"
     << serialize_config(cfg);
}

struct Arm {
  std::string name;
  bool ws = true;
  fed::Quantizer quantizer = fed::Quantizer::danuq;
};

/// {WS, no-WS} x {DANUQ, UQ} at the configured bit-width plus a
/// full-precision WS control.
inline std::vector<Arm> compare_arms() {
  return {{"ws_danuq", true, fed::Quantizer::danuq},
          {"ws_uq", true, fed::Quantizer::uniform},
          {"nows_danuq", false, fed::Quantizer::danuq},
          {"nows_uq", false, fed::Quantizer::uniform},
          {"ws_fp32", true, fed::Quantizer::none}};
}

struct ArmResult {
  Arm arm;
  RunSummary summary;
};

inline RunConfig arm_config(const RunConfig& base, const Arm& arm) {
  RunConfig c = base;
  c.ws = arm.ws;
  c.quantizer = arm.quantizer;
  c.alloc = fed::BitAllocation::Strategy::constant;
  return c;
}

inline constexpr const char* kCompareHeader =
    "arm,ws,quantizer,bits,partition_hash,final_acc_raw,final_acc_ema,final_train_loss,uplink_bytes,"
    "weight_payload_bytes";

inline std::string compare_row(const RunConfig& base, const ArmResult& r) {
  char buf[512];
  const auto& s = r.summary;
  std::snprintf(buf, sizeof buf, "%s,%s,%s,%d,%llu,%.17g,%.17g,%.17g,%zu,%zu", r.arm.name.c_str(),
                r.arm.ws ? "true" : "false", config_detail::kQuantizer.str(r.arm.quantizer).c_str(),
                r.arm.quantizer == fed::Quantizer::none ? 32 : base.bits,
                static_cast<unsigned long long>(s.partition_hash), s.final_acc_raw, s.final_acc_ema,
                s.final_train_loss, s.total_uplink_bytes, s.total_weight_payload_bytes);
  return buf;
}

inline std::vector<ArmResult> run_compare(const RunConfig& base, const std::vector<Arm>& arms = compare_arms()) {
  std::vector<ArmResult> out;
  for (const auto& arm : arms) out.push_back({arm, run_experiment(arm_config(base, arm))});
  return out;
}

}  // namespace fedwsq::exp
