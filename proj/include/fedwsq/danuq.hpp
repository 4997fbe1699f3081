#pragma once

// Distribution-aware non-uniform quantization (DANUQ).
//
// Level tables minimize E[(X - Q(X))^2] for X ~ N(0, 1). A value x falls into
// the half-open cell [u_r, u_{r+1}) whose bounds are midpoints between
// adjacent levels, and is reconstructed as q_r. Codes are packed LSB-first.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fedwsq/error.hpp"
#include "fedwsq/rng.hpp"

namespace fedwsq::danuq {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kSqrt2 = 1.41421356237309504880;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double erf(double x) { return std::erf(x); }

inline double normal_pdf(double x) { return std::isinf(x) ? 0.0 : kInvSqrt2Pi * std::exp(-0.5 * x * x); }

/// P(a <= X < b) for X ~ N(0,1); uses erfc on one-sided tails to keep precision.
inline double normal_mass(double a, double b) {
  if (a >= 0.0) return 0.5 * (std::erfc(a / kSqrt2) - std::erfc(b / kSqrt2));
  if (b <= 0.0) return 0.5 * (std::erfc(-b / kSqrt2) - std::erfc(-a / kSqrt2));
  return 0.5 * (erf(b / kSqrt2) - erf(a / kSqrt2));
}

/// E[X | a <= X < b] for X ~ N(0,1).
inline double normal_centroid(double a, double b) {
  const double mass = normal_mass(a, b);
  if (!(mass > 0.0)) return std::isinf(a) ? b : (std::isinf(b) ? a : 0.5 * (a + b));
  return (normal_pdf(a) - normal_pdf(b)) / mass;
}

inline bool supported_bits(int bits) { return bits == 1 || bits == 2 || bits == 4; }

/// Cell bounds for an ascending level list: [-inf, midpoints..., +inf].
inline std::vector<double> cell_bounds(std::span<const double> levels) {
  std::vector<double> u;
  u.reserve(levels.size() + 1);
  u.push_back(-kInf);
  for (std::size_t r = 1; r < levels.size(); ++r) u.push_back(0.5 * (levels[r - 1] + levels[r]));
  u.push_back(kInf);
  return u;
}

/// An immutable, validated level table for one bit-width.
class QuantLevels {
 public:
  QuantLevels(int bits, std::vector<double> levels, bool zero_pinned)
      : bits_(bits), levels_(std::move(levels)), zero_pinned_(zero_pinned) {
    if (bits_ < 1 || bits_ > 8) throw ConfigError("levels: unsupported bit-width " + std::to_string(bits_), "bits");
    if (levels_.size() != (std::size_t{1} << bits_))
      throw ArgumentError("levels: table must have 2^bits entries");
    for (std::size_t r = 0; r < levels_.size(); ++r) {
      if (!std::isfinite(levels_[r])) throw ArgumentError("levels: non-finite level");
      if (r > 0 && !(levels_[r] > levels_[r - 1])) throw ArgumentError("levels: not strictly ascending");
    }
    if (zero_pinned_) {
      if (bits_ < 2) throw ArgumentError("levels: 1-bit tables carry no zero level");
      if (std::count(levels_.begin(), levels_.end(), 0.0) != 1)
        throw ArgumentError("levels: zero-pinned table needs exactly one zero level");
    }
    bounds_ = cell_bounds(levels_);
  }

  int bits() const noexcept { return bits_; }
  bool zero_pinned() const noexcept { return zero_pinned_; }
  std::span<const double> levels() const noexcept { return levels_; }
  /// u_0 = -inf, u_r = (q_{r-1} + q_r) / 2, u_{2^B} = +inf.
  std::span<const double> boundaries() const noexcept { return bounds_; }
  std::size_t size() const noexcept { return levels_.size(); }
  double operator[](std::size_t r) const { return levels_[r]; }

  /// Index r with x in [u_r, u_{r+1}); ties on a boundary go to the upper cell.
  std::uint32_t encode(double x) const {
    const auto first = bounds_.begin() + 1, last = bounds_.end() - 1;
    return static_cast<std::uint32_t>(std::upper_bound(first, last, x) - first);
  }

 private:
  int bits_;
  std::vector<double> levels_;
  bool zero_pinned_;
  std::vector<double> bounds_;
};

/// Level tables as published for the method (4-bit is asymmetric, zero at index 7).
inline QuantLevels published_levels(int bits) {
  switch (bits) {
    case 1: return QuantLevels(1, {-0.798, 0.798}, false);
    case 2: return QuantLevels(2, {-1.224, 0.0, 0.765, 1.724}, true);
    case 4:
      return QuantLevels(4,
                         {-2.654, -1.974, -1.508, -1.149, -0.834, -0.544, -0.269, 0.0, 0.230, 0.465,
                          0.708, 0.966, 1.248, 1.568, 1.968, 2.649},
                         true);
    default: throw ConfigError("levels: unsupported bit-width " + std::to_string(bits), "bits");
  }
}

/// Closed-form E[(X - Q(X))^2], X ~ N(0,1), summed cell by cell:
///   phi(u_{r+1})(2 q_r - u_{r+1}) - phi(u_r)(2 q_r - u_r) + (q_r^2 + 1) P(u_r <= X < u_{r+1}).
/// Accepts any ascending list, including a single level.
inline double expected_error(std::span<const double> levels) {
  if (levels.empty()) throw ArgumentError("expected_error: empty level list");
  const auto u = cell_bounds(levels);
  double total = 0.0;
  for (std::size_t r = 0; r < levels.size(); ++r) {
    const double q = levels[r], a = u[r], b = u[r + 1];
    const double upper = std::isinf(b) ? 0.0 : normal_pdf(b) * (2.0 * q - b);
    const double lower = std::isinf(a) ? 0.0 : normal_pdf(a) * (2.0 * q - a);
    total += upper - lower + (q * q + 1.0) * normal_mass(a, b);
  }
  return total;
}

inline double expected_error(const QuantLevels& levels) { return expected_error(levels.levels()); }

/// Index of the pinned zero level for a 2^bits table: one more level on the positive side.
inline std::size_t pinned_zero_index(int bits) { return (std::size_t{1} << (bits - 1)) - 1; }

namespace detail {
inline std::vector<double> initial_levels(int bits, bool pin) {
  const std::size_t n = std::size_t{1} << bits;
  const double step = 3.0 / static_cast<double>(n / 2 + 1);
  std::vector<double> q(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double centre = pin ? static_cast<double>(pinned_zero_index(bits))
                              : 0.5 * static_cast<double>(n - 1);
    q[i] = (static_cast<double>(i) - centre) * step;
  }
  if (pin) q[pinned_zero_index(bits)] = 0.0;
  return q;
}
}  // namespace detail

/// Coarse-to-fine exhaustive search over the free levels (grid 0.1 down to
/// 1e-4). Practical for at most 4 free levels; used to cross-check Lloyd-Max.
inline std::vector<double> grid_search_levels(int bits, bool pin_zero) {
  if (bits != 1 && bits != 2) throw ConfigError("grid search supports bits in {1,2}", "bits");
  const bool pin = pin_zero && bits >= 2;
  const std::size_t n = std::size_t{1} << bits;
  const std::size_t zero_at = pin ? pinned_zero_index(bits) : n;
  std::vector<std::size_t> free_idx;
  for (std::size_t i = 0; i < n; ++i)
    if (i != zero_at) free_idx.push_back(i);
  const std::size_t k = free_idx.size();

  std::vector<double> best = detail::initial_levels(bits, pin);
  double best_err = expected_error(best);
  std::vector<double> lo(k, -3.0), hi(k, 3.0);
  for (double step : {0.1, 0.01, 1e-3, 1e-4}) {
    std::vector<std::size_t> counts(k);
    for (std::size_t j = 0; j < k; ++j)
      counts[j] = static_cast<std::size_t>(std::llround((hi[j] - lo[j]) / step)) + 1;
    std::vector<std::size_t> odo(k, 0);
    std::vector<double> cand(n, 0.0);
    for (;;) {
      bool ascending = true;
      for (std::size_t j = 0; j < k; ++j) cand[free_idx[j]] = lo[j] + step * static_cast<double>(odo[j]);
      for (std::size_t i = 1; i < n && ascending; ++i) ascending = cand[i] > cand[i - 1];
      if (ascending) {
        const double e = expected_error(cand);
        if (e < best_err) {
          best_err = e;
          best = cand;
        }
      }
      std::size_t j = 0;
      while (j < k && ++odo[j] == counts[j]) odo[j++] = 0;
      if (j == k) break;
    }
    for (std::size_t j = 0; j < k; ++j) {
      lo[j] = best[free_idx[j]] - step;
      hi[j] = best[free_idx[j]] + step;
    }
  }
  return best;
}

/// Optimal levels for N(0,1) by Lloyd-Max fixed-point iteration: alternate
/// midpoint boundaries and conditional-mean levels, holding the zero level
/// fixed when pinned (bits >= 2 only; 1-bit tables never carry a zero).
/// For bits <= 2 the result is checked against grid_search_levels.
inline QuantLevels optimize_levels(int bits, bool pin_zero = true) {
  if (!supported_bits(bits)) throw ConfigError("levels: unsupported bit-width " + std::to_string(bits), "bits");
  const bool pin = pin_zero && bits >= 2;
  std::vector<double> q = detail::initial_levels(bits, pin);
  const std::size_t zero_at = pin ? pinned_zero_index(bits) : q.size();
  constexpr int kMaxIterations = 10000;
  bool converged = false;
  for (int it = 0; it < kMaxIterations && !converged; ++it) {
    const auto u = cell_bounds(q);
    double change = 0.0;
    std::vector<double> next = q;
    for (std::size_t r = 0; r < q.size(); ++r) {
      if (r == zero_at) continue;
      next[r] = normal_centroid(u[r], u[r + 1]);
      change = std::max(change, std::abs(next[r] - q[r]));
    }
    q = std::move(next);
    converged = change < 1e-9;
  }
  if (!converged) throw NumericalError("optimize_levels: Lloyd-Max did not converge");

  if (bits <= 2) {
    const auto grid = grid_search_levels(bits, pin);
    for (std::size_t r = 0; r < q.size(); ++r)
      if (std::abs(grid[r] - q[r]) > 2e-3)
        throw NumericalError("optimize_levels: grid search disagrees with Lloyd-Max");
  }
  return QuantLevels(bits, std::move(q), pin);
}

// ---------------------------------------------------------------------------
// Bit packing

inline std::size_t packed_size(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

/// LSB-first within each byte, no padding between values, zero-filled tail.
inline std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, int bits) {
  if (bits < 1 || bits > 32) throw ArgumentError("pack_codes: bits out of range");
  std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (bits < 32 && codes[i] >> bits) throw EncodingError("pack_codes: code does not fit", i);
    for (int k = 0; k < bits; ++k, ++pos)
      out[pos / 8] |= static_cast<std::uint8_t>(((codes[i] >> k) & 1u) << (pos % 8));
  }
  return out;
}

inline std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count, int bits) {
  if (bits < 1 || bits > 32) throw ArgumentError("unpack_codes: bits out of range");
  if (packed.size() < packed_size(count, bits)) throw DecodingError("unpack_codes: truncated bit stream");
  std::vector<std::uint32_t> codes(count, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < count; ++i)
    for (int k = 0; k < bits; ++k, ++pos)
      codes[i] |= static_cast<std::uint32_t>((packed[pos / 8] >> (pos % 8)) & 1u) << k;
  return codes;
}

// ---------------------------------------------------------------------------
// Blocks

/// Bit-width marker for an unquantized block carrying raw binary32 values.
inline constexpr int kRawFloatBits = 32;

struct QuantizedBlock {
  int layer_id = 0;
  int bits = 0;
  std::size_t count = 0;
  std::vector<std::uint8_t> codes;
  double scale_used = 0.0;

  friend bool operator==(const QuantizedBlock&, const QuantizedBlock&) = default;
};

/// Encodes values / scale with nearest-level (half-open cell) assignment.
inline QuantizedBlock quantize(std::span<const double> values, double scale, const QuantLevels& levels,
                               int layer_id = 0) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ArgumentError("quantize: scale must be finite and > 0");
  std::vector<std::uint32_t> codes(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i]))
      throw EncodingError("quantize: non-finite value at position " + std::to_string(i), i);
    codes[i] = levels.encode(values[i] / scale);
  }
  return {layer_id, levels.bits(), values.size(), pack_codes(codes, levels.bits()), scale};
}

/// Reconstructs q_r * scale for every code.
inline std::vector<double> dequantize(const QuantizedBlock& block, double scale, const QuantLevels& levels) {
  if (block.bits != levels.bits()) throw ArgumentError("dequantize: block bits do not match level table");
  if (scale < 0.0 || !std::isfinite(scale)) throw ArgumentError("dequantize: invalid scale");
  const auto codes = unpack_codes(block.codes, block.count, block.bits);
  std::vector<double> out(block.count);
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = levels[codes[i]] * scale;
  return out;
}

/// Level k of the uniform 2^bits grid on [-1, 1].
inline double uniform_level(int bits, std::uint32_t k) {
  const double top = static_cast<double>((1u << bits) - 1);
  return -1.0 + 2.0 * static_cast<double>(k) / top;
}

struct UniformResult {
  QuantizedBlock block;
  double scale = 0.0;
};

/// Absmax uniform quantization with stochastic rounding between the two
/// neighbouring grid points. An all-zero input yields scale 0 and the
/// nearest-to-zero code, so it reconstructs to zeros.
inline UniformResult uniform_quantize_absmax(std::span<const double> values, int bits, Rng& rng,
                                             int layer_id = 0) {
  if (!supported_bits(bits)) throw ConfigError("uq: unsupported bit-width " + std::to_string(bits), "bits");
  if (values.empty()) throw ArgumentError("uq: empty input");
  double amax = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw EncodingError("uq: non-finite value at position " + std::to_string(i), i);
    amax = std::max(amax, std::abs(values[i]));
  }
  const std::uint32_t top = (1u << bits) - 1;
  std::vector<std::uint32_t> codes(values.size());
  if (amax == 0.0) {
    std::fill(codes.begin(), codes.end(), (top + 1) / 2);
    return {{layer_id, bits, values.size(), pack_codes(codes, bits), 0.0}, 0.0};
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double pos = (values[i] / amax + 1.0) * 0.5 * static_cast<double>(top);
    const double floor_pos = std::floor(pos);
    auto lo = static_cast<std::uint32_t>(std::clamp(floor_pos, 0.0, static_cast<double>(top)));
    const double frac = pos - floor_pos;
    if (lo < top && uniform01(rng) < frac) ++lo;
    codes[i] = lo;
  }
  return {{layer_id, bits, values.size(), pack_codes(codes, bits), amax}, amax};
}

inline std::vector<double> uniform_dequantize(const QuantizedBlock& block, double scale) {
  const auto codes = unpack_codes(block.codes, block.count, block.bits);
  std::vector<double> out(block.count);
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = uniform_level(block.bits, codes[i]) * scale;
  return out;
}

// ---------------------------------------------------------------------------
// Wire format
//
//   u16 layer_id | u8 bits | u32 count | f32 scale_used | packed codes
//
// All little-endian. bits == 32 marks a raw binary32 payload (count * 4 bytes).

inline constexpr std::size_t kBlockHeaderBytes = 11;

namespace wire {
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}
inline void put_f32(std::vector<std::uint8_t>& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::uint8_t u8() { need(1); return bytes_[pos_++]; }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(bytes_[pos_ + k]) << (8 * k);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw DecodingError("wire: truncated stream at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};
}  // namespace wire

/// Raw binary32 block for full-precision transport of weights.
inline QuantizedBlock encode_raw(std::span<const double> values, int layer_id = 0) {
  std::vector<std::uint8_t> payload;
  payload.reserve(values.size() * 4);
  for (double v : values) wire::put_f32(payload, v);
  return {layer_id, kRawFloatBits, values.size(), std::move(payload), 1.0};
}

inline std::vector<double> decode_raw(const QuantizedBlock& block) {
  if (block.bits != kRawFloatBits) throw ArgumentError("decode_raw: not a raw block");
  wire::Reader rd(block.codes);
  std::vector<double> out(block.count);
  for (auto& v : out) v = rd.f32();
  return out;
}

inline std::size_t payload_bytes(const QuantizedBlock& b) { return packed_size(b.count, b.bits); }

inline std::size_t serialized_size(const QuantizedBlock& b) { return kBlockHeaderBytes + payload_bytes(b); }

inline void serialize_block(const QuantizedBlock& b, std::vector<std::uint8_t>& out) {
  if (b.layer_id < 0 || b.layer_id > 0xFFFF) throw EncodingError("wire: layer_id out of u16 range", 0);
  if (b.count > 0xFFFFFFFFull) throw EncodingError("wire: count out of u32 range", 0);
  if (b.codes.size() != payload_bytes(b)) throw EncodingError("wire: payload size does not match header", 0);
  wire::put_u16(out, static_cast<std::uint16_t>(b.layer_id));
  out.push_back(static_cast<std::uint8_t>(b.bits));
  wire::put_u32(out, static_cast<std::uint32_t>(b.count));
  wire::put_f32(out, b.scale_used);
  out.insert(out.end(), b.codes.begin(), b.codes.end());
}

inline QuantizedBlock deserialize_block(wire::Reader& rd) {
  QuantizedBlock b;
  b.layer_id = rd.u16();
  b.bits = rd.u8();
  if (b.bits < 1 || b.bits > 32) throw DecodingError("wire: invalid bit-width " + std::to_string(b.bits));
  b.count = rd.u32();
  b.scale_used = rd.f32();
  const auto payload = rd.take(payload_bytes(b));
  b.codes.assign(payload.begin(), payload.end());
  return b;
}

}  // namespace fedwsq::danuq
