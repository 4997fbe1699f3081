#pragma once

// Shared helpers for the test suites: random tensors and finite differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fedwsq/rng.hpp"
#include "fedwsq/tensor.hpp"

namespace fedwsq::testing {

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = uniform(rng, lo, hi);
  return t;
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = uniform(rng, lo, hi);
  return v;
}

/// Central finite-difference gradient of f at x.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x);
    x[i] = saved - h;
    const double fm = f(x);
    x[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Fourth-order central finite-difference gradient of f at x.
inline std::vector<double> numeric_gradient4(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> x, double h = 1e-4) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    double fs[4];
    const double offsets[4] = {2 * h, h, -h, -2 * h};
    for (int k = 0; k < 4; ++k) {
      x[i] = saved + offsets[k];
      fs[k] = f(x);
    }
    x[i] = saved;
    g[i] = (-fs[0] + 8 * fs[1] - 8 * fs[2] + fs[3]) / (12 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace fedwsq::testing
