#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fedwsq/error.hpp"
#include "fedwsq/rng.hpp"
#include "fedwsq/tensor.hpp"

namespace fedwsq::data {

struct Dataset {
  Tensor features;  // n x d
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
};

struct Partition {
  std::vector<std::vector<std::size_t>> client_shards;
  std::optional<double> alpha;  // nullopt for iid

  std::size_t num_clients() const noexcept { return client_shards.size(); }
};

/// Gathers rows of a dataset, in the given order.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t d = ds.dim();
  Dataset out;
  out.num_classes = ds.num_classes;
  out.features = Tensor({indices.size(), d});
  out.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto row = ds.features.row(indices[k]);
    std::copy(row.begin(), row.end(), out.features.row(k).begin());
    out.labels.push_back(ds.labels[indices[k]]);
  }
  return out;
}

namespace detail {
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

inline int infer_classes(std::span<const int> labels) {
  int mx = -1;
  for (int y : labels) {
    if (y < 0) throw ArgumentError("negative label");
    mx = std::max(mx, y);
  }
  return mx + 1;
}
}  // namespace detail

/// Gaussian blobs: class means are random unit vectors scaled by `spread`,
/// samples add N(0, I) noise. Means depend only on `seed`; `stream` selects
/// an independent sample set (e.g. 0 = train, 1 = test) around the same means.
inline Dataset synth_classification(int num_classes, std::size_t dim, std::size_t per_class, double spread,
                                    std::uint64_t seed, std::uint64_t stream = 0) {
  if (num_classes < 1) throw ArgumentError("synth: num_classes must be >= 1");
  if (dim < 1) throw ArgumentError("synth: dim must be >= 1");
  if (per_class == 0) throw ArgumentError("synth: per_class must be >= 1");
  if (!(spread > 0.0)) throw ArgumentError("synth: spread must be > 0");
  Rng mean_rng(derive_seed(seed, {0x5eed, 0}));
  std::vector<std::vector<double>> means(static_cast<std::size_t>(num_classes), std::vector<double>(dim));
  for (auto& m : means) {
    double norm = 0.0;
    do {
      for (double& v : m) v = standard_normal(mean_rng);
      norm = std::sqrt(dot(m, m));
    } while (norm == 0.0);
    for (double& v : m) v *= spread / norm;
  }
  Rng rng(derive_seed(seed, {0x5eed, stream + 1}));
  Dataset ds;
  ds.num_classes = num_classes;
  const std::size_t n = per_class * static_cast<std::size_t>(num_classes);
  ds.features = Tensor({n, dim});
  ds.labels.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const int c = static_cast<int>(k % static_cast<std::size_t>(num_classes));
    auto row = ds.features.row(k);
    for (std::size_t j = 0; j < dim; ++j) row[j] = means[static_cast<std::size_t>(c)][j] + standard_normal(rng);
    ds.labels.push_back(c);
  }
  return ds;
}

/// Random split into near-equal shards (sizes differ by at most one).
inline Partition iid_partition(std::size_t n, std::size_t num_clients, std::uint64_t seed) {
  if (num_clients == 0) throw ConfigError("partition: num_clients must be >= 1", "num_clients");
  if (num_clients > n) throw ConfigError("partition: more clients than samples", "num_clients");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {0xD1A, 1}));
  detail::shuffle(idx, rng);
  Partition p;
  p.client_shards.resize(num_clients);
  for (std::size_t c = 0; c < num_clients; ++c) {
    const std::size_t begin = c * n / num_clients, end = (c + 1) * n / num_clients;
    p.client_shards[c].assign(idx.begin() + static_cast<std::ptrdiff_t>(begin),
                              idx.begin() + static_cast<std::ptrdiff_t>(end));
    std::sort(p.client_shards[c].begin(), p.client_shards[c].end());
  }
  return p;
}

/// Label-skewed split: for each class, client proportions ~ Dirichlet(alpha)
/// and the shuffled class indices are sliced proportionally. A draw that
/// leaves any client empty is redrawn (up to 100 times); if that still fails,
/// each empty client takes one sample from the currently largest shard.
inline Partition dirichlet_partition(std::span<const int> labels, std::size_t num_clients, double alpha,
                                     std::uint64_t seed) {
  if (!(alpha > 0.0)) throw ConfigError("partition: alpha must be > 0", "alpha");
  if (num_clients == 0) throw ConfigError("partition: num_clients must be >= 1", "num_clients");
  const std::size_t n = labels.size();
  if (num_clients > n) throw ConfigError("partition: more clients than samples", "num_clients");
  const int classes = detail::infer_classes(labels);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);

  Partition p;
  p.alpha = alpha;
  if (num_clients == 1) {
    p.client_shards.assign(1, std::vector<std::size_t>(n));
    std::iota(p.client_shards[0].begin(), p.client_shards[0].end(), std::size_t{0});
    return p;
  }

  Rng rng(derive_seed(seed, {0xD1A, 2}));
  std::gamma_distribution<double> gamma(alpha, 1.0);
  constexpr int kMaxRedraws = 100;
  for (int attempt = 0; attempt <= kMaxRedraws; ++attempt) {
    p.client_shards.assign(num_clients, {});
    for (auto idx : by_class) {
      if (idx.empty()) continue;
      detail::shuffle(idx, rng);
      std::vector<double> prop(num_clients);
      double total = 0.0;
      for (double& v : prop) total += (v = gamma(rng));
      if (!(total > 0.0)) {  // every gamma draw underflowed
        std::fill(prop.begin(), prop.end(), 0.0);
        prop[uniform_index(rng, num_clients)] = 1.0;
        total = 1.0;
      }
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t c = 0; c < num_clients; ++c) {
        cum += prop[c];
        const std::size_t stop =
            c + 1 == num_clients ? idx.size()
                                 : std::min(idx.size(), static_cast<std::size_t>(std::llround(cum / total *
                                                                                             static_cast<double>(idx.size()))));
        for (std::size_t k = start; k < stop; ++k) p.client_shards[c].push_back(idx[k]);
        start = std::max(start, stop);
      }
    }
    const bool all_nonempty =
        std::none_of(p.client_shards.begin(), p.client_shards.end(), [](const auto& s) { return s.empty(); });
    if (all_nonempty) break;
    if (attempt == kMaxRedraws) {
      for (auto& shard : p.client_shards) {
        if (!shard.empty()) continue;
        auto largest = std::max_element(p.client_shards.begin(), p.client_shards.end(),
                                        [](const auto& a, const auto& b) { return a.size() < b.size(); });
        shard.push_back(largest->back());
        largest->pop_back();
      }
    }
  }
  for (auto& s : p.client_shards) std::sort(s.begin(), s.end());
  return p;
}

inline std::vector<std::size_t> label_histogram(std::span<const int> labels, std::span<const std::size_t> indices,
                                                int num_classes) {
  std::vector<std::size_t> h(static_cast<std::size_t>(num_classes), 0);
  for (auto i : indices) ++h.at(static_cast<std::size_t>(labels[i]));
  return h;
}

/// Shannon entropy (nats) of a histogram.
inline double entropy(std::span<const std::size_t> hist) {
  const double total = static_cast<double>(std::accumulate(hist.begin(), hist.end(), std::size_t{0}));
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (auto c : hist)
    if (c) {
      const double p = static_cast<double>(c) / total;
      h -= p * std::log(p);
    }
  return h;
}

inline double mean_label_entropy(const Partition& p, std::span<const int> labels, int num_classes) {
  double s = 0.0;
  for (const auto& shard : p.client_shards) s += entropy(label_histogram(labels, shard, num_classes));
  return s / static_cast<double>(p.num_clients());
}

/// FNV-1a over shard sizes and contents; identifies a partition in reports.
inline std::uint64_t partition_hash(const Partition& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int k = 0; k < 8; ++k) {
      h ^= (v >> (8 * k)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : p.client_shards) {
    mix(s.size());
    for (auto i : s) mix(i);
  }
  return h;
}

namespace detail {
inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("idx: cannot open " + path, 0);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& what) {
  if (off + 4 > b.size()) throw FormatError("idx: truncated header in " + what, off);
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}
}  // namespace detail

/// Reads an IDX image/label pair (MNIST family). Pixels are scaled to [0, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, int num_classes = 0) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::be32(img, 0, images_path) != 0x00000803u) throw FormatError("idx: bad image magic in " + images_path, 0);
  if (detail::be32(lab, 0, labels_path) != 0x00000801u) throw FormatError("idx: bad label magic in " + labels_path, 0);
  const std::size_t n = detail::be32(img, 4, images_path);
  const std::size_t rows = detail::be32(img, 8, images_path);
  const std::size_t cols = detail::be32(img, 12, images_path);
  const std::size_t nl = detail::be32(lab, 4, labels_path);
  if (nl != n) throw FormatError("idx: image/label count mismatch", 4);
  const std::size_t d = rows * cols;
  if (img.size() < 16 + n * d) throw FormatError("idx: truncated image data in " + images_path, img.size());
  if (lab.size() < 8 + n) throw FormatError("idx: truncated label data in " + labels_path, lab.size());
  Dataset ds;
  ds.features = Tensor({n, d});
  for (std::size_t i = 0; i < n * d; ++i) ds.features.data[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = lab[8 + i];
  const int inferred = detail::infer_classes(ds.labels);
  if (num_classes > 0 && inferred > num_classes) throw FormatError("idx: label exceeds num_classes", 8);
  ds.num_classes = num_classes > 0 ? num_classes : inferred;
  return ds;
}

}  // namespace fedwsq::data
