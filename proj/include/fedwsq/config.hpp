#pragma once

// Flat `key = value` run configuration. '#' starts a comment. Unknown keys,
// duplicate keys and unparsable values are errors that name the key.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedwsq/error.hpp"
#include "fedwsq/federation.hpp"

namespace fedwsq {

struct RunConfig {
  // data
  std::string dataset = "synthetic";  // synthetic | idx
  int num_classes = 10;
  std::size_t dim = 16;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  double spread = 3.0;
  std::string train_images, train_labels, test_images, test_labels;
  std::optional<double> alpha = 0.3;  // nullopt = iid

  // model
  std::vector<std::size_t> hidden{128, 64};
  nn::Activation activation = nn::Activation::relu;
  bool group_norm = true;
  std::size_t groups = 8;
  bool ws = true;
  double rho = 1e-3;

  // federation
  std::size_t num_clients = 100;
  double participation_rate = 0.05;
  std::size_t rounds = 200;
  std::size_t local_epochs = 5;
  std::size_t iterations_per_epoch = 10;
  double lr0 = 0.1;
  double lr_decay = 0.995;
  double weight_decay = 1e-3;
  double clip_norm = 10.0;
  double beta = 0.1;
  fed::Quantizer quantizer = fed::Quantizer::danuq;
  fed::BitAllocation::Strategy alloc = fed::BitAllocation::Strategy::constant;
  int bits = 4;
  fed::DequantScale dequant_scale = fed::DequantScale::local;
  fed::Aggregate aggregate = fed::Aggregate::weighted;
  fed::LevelSource levels = fed::LevelSource::optimized;

  // run
  std::uint64_t seed = 1;
  double ema_smoothing = 0.9;
  std::size_t eval_every = 1;
  bool record_wallclock = false;
  std::size_t threads = 1;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  void validate() const;
  /// Federation settings for a dataset with the given input width.
  fed::FedConfig federation(std::size_t input_dim) const;
};

namespace config_detail {

template <typename E>
struct EnumNames {
  std::vector<std::pair<E, const char*>> names;
  std::string str(E e) const {
    for (auto& [v, n] : names)
      if (v == e) return n;
    return "?";
  }
  E parse(const std::string& s, const std::string& key) const {
    for (auto& [v, n] : names)
      if (s == n) return v;
    throw ConfigError("config: invalid value '" + s + "' for key " + key, key);
  }
};

inline const EnumNames<fed::Quantizer> kQuantizer{
    {{fed::Quantizer::danuq, "danuq"}, {fed::Quantizer::uniform, "uniform"}, {fed::Quantizer::none, "none"}}};
inline const EnumNames<fed::BitAllocation::Strategy> kAlloc{{{fed::BitAllocation::Strategy::constant, "constant"},
                                                             {fed::BitAllocation::Strategy::fba, "fba"},
                                                             {fed::BitAllocation::Strategy::dba, "dba"}}};
inline const EnumNames<fed::DequantScale> kDequant{
    {{fed::DequantScale::local, "local"}, {fed::DequantScale::global, "global"}}};
inline const EnumNames<fed::Aggregate> kAggregate{
    {{fed::Aggregate::weighted, "weighted"}, {fed::Aggregate::sum, "sum"}}};
inline const EnumNames<fed::LevelSource> kLevels{
    {{fed::LevelSource::optimized, "optimized"}, {fed::LevelSource::published, "published"}}};
inline const EnumNames<nn::Activation> kActivation{{{nn::Activation::relu, "relu"}, {nn::Activation::tanh, "tanh"}}};

inline std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size() || !std::isfinite(v))
    throw ConfigError("config: invalid number '" + s + "' for key " + key, key);
  return v;
}

inline std::uint64_t parse_uint(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw ConfigError("config: invalid integer '" + s + "' for key " + key, key);
  return v;
}

template <typename T>
T parse_int(const std::string& s, const std::string& key) {
  T v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw ConfigError("config: invalid integer '" + s + "' for key " + key, key);
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("config: invalid boolean '" + s + "' for key " + key, key);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define FEDWSQ_NUM_FIELD(name, type)                                                             \
  {#name, {[](const RunConfig& c) { return fmt(static_cast<double>(c.name)); },                  \
           [](RunConfig& c, const std::string& v, const std::string& k) {                        \
             if constexpr (std::is_floating_point_v<type>) c.name = parse_double(v, k);          \
             else if constexpr (std::is_signed_v<type>) c.name = parse_int<type>(v, k);                  \
             else c.name = static_cast<type>(parse_uint(v, k));                                  \
           }}}
#define FEDWSQ_ENUM_FIELD(name, table)                                                                  \
  {#name, {[](const RunConfig& c) { return table.str(c.name); },                                        \
           [](RunConfig& c, const std::string& v, const std::string& k) { c.name = table.parse(v, k); }}}
#define FEDWSQ_BOOL_FIELD(name)                                                                         \
  {#name, {[](const RunConfig& c) { return std::string(c.name ? "true" : "false"); },                 \
           [](RunConfig& c, const std::string& v, const std::string& k) { c.name = parse_bool(v, k); }}}
#define FEDWSQ_STR_FIELD(name)                                                                          \
  {#name, {[](const RunConfig& c) { return c.name; },                                                   \
           [](RunConfig& c, const std::string& v, const std::string&) { c.name = v; }}}

/// Ordered key table; serialization follows this order.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      FEDWSQ_STR_FIELD(dataset),
      FEDWSQ_NUM_FIELD(num_classes, int),
      FEDWSQ_NUM_FIELD(dim, std::size_t),
      FEDWSQ_NUM_FIELD(train_per_class, std::size_t),
      FEDWSQ_NUM_FIELD(test_per_class, std::size_t),
      FEDWSQ_NUM_FIELD(spread, double),
      FEDWSQ_STR_FIELD(train_images),
      FEDWSQ_STR_FIELD(train_labels),
      FEDWSQ_STR_FIELD(test_images),
      FEDWSQ_STR_FIELD(test_labels),
      {"alpha",
       {[](const RunConfig& c) { return c.alpha ? fmt(*c.alpha) : std::string("iid"); },
        [](RunConfig& c, const std::string& v, const std::string& k) {
          if (v == "iid") c.alpha.reset();
          else c.alpha = parse_double(v, k);
        }}},
      {"hidden",
       {[](const RunConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.hidden.size(); ++i) s += (i ? "," : "") + std::to_string(c.hidden[i]);
          return s;
        },
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.hidden.clear();
          std::stringstream ss(v);
          for (std::string item; std::getline(ss, item, ',');)
            if (!trim(item).empty()) c.hidden.push_back(static_cast<std::size_t>(parse_uint(trim(item), k)));
        }}},
      FEDWSQ_ENUM_FIELD(activation, kActivation),
      FEDWSQ_BOOL_FIELD(group_norm),
      FEDWSQ_NUM_FIELD(groups, std::size_t),
      FEDWSQ_BOOL_FIELD(ws),
      FEDWSQ_NUM_FIELD(rho, double),
      FEDWSQ_NUM_FIELD(num_clients, std::size_t),
      FEDWSQ_NUM_FIELD(participation_rate, double),
      FEDWSQ_NUM_FIELD(rounds, std::size_t),
      FEDWSQ_NUM_FIELD(local_epochs, std::size_t),
      FEDWSQ_NUM_FIELD(iterations_per_epoch, std::size_t),
      FEDWSQ_NUM_FIELD(lr0, double),
      FEDWSQ_NUM_FIELD(lr_decay, double),
      FEDWSQ_NUM_FIELD(weight_decay, double),
      FEDWSQ_NUM_FIELD(clip_norm, double),
      FEDWSQ_NUM_FIELD(beta, double),
      FEDWSQ_ENUM_FIELD(quantizer, kQuantizer),
      FEDWSQ_ENUM_FIELD(alloc, kAlloc),
      FEDWSQ_NUM_FIELD(bits, int),
      FEDWSQ_ENUM_FIELD(dequant_scale, kDequant),
      FEDWSQ_ENUM_FIELD(aggregate, kAggregate),
      FEDWSQ_ENUM_FIELD(levels, kLevels),
      {"seed",
       {[](const RunConfig& c) { return std::to_string(c.seed); },
        [](RunConfig& c, const std::string& v, const std::string& k) { c.seed = parse_uint(v, k); }}},
      FEDWSQ_NUM_FIELD(ema_smoothing, double),
      FEDWSQ_NUM_FIELD(eval_every, std::size_t),
      FEDWSQ_BOOL_FIELD(record_wallclock),
      FEDWSQ_NUM_FIELD(threads, std::size_t),
  };
  return table;
}

#undef FEDWSQ_NUM_FIELD
#undef FEDWSQ_ENUM_FIELD
#undef FEDWSQ_BOOL_FIELD
#undef FEDWSQ_STR_FIELD

}  // namespace config_detail

inline void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) { throw ConfigError("config: " + msg, key); };
  if (dataset != "synthetic" && dataset != "idx") fail("dataset", "dataset must be synthetic or idx");
  if (dataset == "idx" && (train_images.empty() || train_labels.empty() || test_images.empty() || test_labels.empty()))
    fail("train_images", "idx dataset needs train/test image and label paths");
  if (dataset == "synthetic") {
    if (num_classes < 2) fail("num_classes", "need at least 2 classes");
    if (dim < 1) fail("dim", "dim must be >= 1");
    if (train_per_class < 1) fail("train_per_class", "train_per_class must be >= 1");
    if (test_per_class < 1) fail("test_per_class", "test_per_class must be >= 1");
    if (!(spread > 0.0)) fail("spread", "spread must be > 0");
  }
  if (alpha && !(*alpha > 0.0)) fail("alpha", "alpha must be > 0 or iid");
  if (!(rho > 0.0)) fail("rho", "rho must be > 0");
  if (num_clients < 1) fail("num_clients", "num_clients must be >= 1");
  if (!(participation_rate > 0.0 && participation_rate <= 1.0)) fail("participation_rate", "must be in (0, 1]");
  if (!(lr0 >= 0.0)) fail("lr0", "lr0 must be >= 0");
  if (!(lr_decay > 0.0)) fail("lr_decay", "lr_decay must be > 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) fail("clip_norm", "clip_norm must be > 0");
  if (!(beta >= 0.0 && beta <= 1.0)) fail("beta", "beta must be in [0, 1]");
  if (!danuq::supported_bits(bits)) fail("bits", "bits must be 1, 2 or 4");
  if (!(ema_smoothing >= 0.0 && ema_smoothing < 1.0)) fail("ema_smoothing", "must be in [0, 1)");
  if (eval_every < 1) fail("eval_every", "eval_every must be >= 1");
  if (threads < 1) fail("threads", "threads must be >= 1");
  if (group_norm)
    for (auto h : hidden)
      if (groups == 0 || h % groups != 0) fail("groups", "groups must divide every hidden width");
  if (ws && hidden.empty()) fail("ws", "ws needs at least one hidden layer");
}

inline fed::FedConfig RunConfig::federation(std::size_t input_dim) const {
  fed::FedConfig f;
  f.model.layer_sizes.push_back(input_dim);
  f.model.layer_sizes.insert(f.model.layer_sizes.end(), hidden.begin(), hidden.end());
  f.model.layer_sizes.push_back(static_cast<std::size_t>(num_classes));
  f.model.activation = activation;
  f.model.use_group_norm = group_norm;
  f.model.groups = groups;
  if (ws)
    for (int l = 1; l <= static_cast<int>(hidden.size()); ++l) f.model.ws_layers.insert(l);
  f.ws.rho = rho;
  f.num_clients = num_clients;
  f.participation_rate = participation_rate;
  f.local_epochs = local_epochs;
  f.iterations_per_epoch = iterations_per_epoch;
  f.lr0 = lr0;
  f.lr_decay = lr_decay;
  f.weight_decay = weight_decay;
  f.clip_norm = clip_norm;
  f.beta = beta;
  f.quantizer = quantizer;
  f.alloc.strategy = alloc;
  f.alloc.constant_bits = bits;
  f.alloc.seed = seed;
  f.dequant_scale = dequant_scale;
  f.aggregate = aggregate;
  f.level_source = levels;
  f.seed = seed;
  f.threads = threads;
  return f;
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  const auto& table = config_detail::fields();
  std::map<std::string, int> seen;
  std::stringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(line_no) + " is not key = value", line);
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.first == key; });
    if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'", key);
    if (seen[key]++) throw ConfigError("config: duplicate key '" + key + "'", key);
    it->second.set(cfg, value, key);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path, "config");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every effective key, defaults included, one per line.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : config_detail::fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

}  // namespace fedwsq
