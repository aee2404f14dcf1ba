#pragma once

// Shared fixtures for the unit and acceptance tests: small random models,
// central finite differences and brute-force oracles.

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "modguard/nn.hpp"
#include "modguard/rng.hpp"
#include "modguard/svm.hpp"

namespace modguard::testing {

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

/// Small conv/relu/dense net on a 2 x w input with random weights and biases.
inline nn::Model small_model(Rng& rng, std::size_t w = 8, std::size_t k = 3) {
  using L = nn::LayerSpec;
  nn::Model m({1, 2, w}, {L::conv(3, 1, 3), L::relu(), L::conv(2, 2, 3), L::relu(), L::dense(5), L::relu(),
                          L::dense(k)},
              5);
  for (auto p : m.parameters())
    for (double& v : p) v = std::normal_distribution<double>(0.0, 0.6)(rng);
  return m;
}

/// Central difference of f along every coordinate of x.
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, |b|_inf): relative to the gradient's scale.
inline double rel_error(std::span<const double> a, std::span<const double> b) {
  double scale = 1.0, worst = 0.0;
  for (double v : b) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst / scale;
}

/// Decision value of one machine as an explicit kernel sum.
inline double brute_score(const BinaryMachine& m, double gamma, std::span<const double> z) {
  const std::size_t f = z.size();
  double s = m.bias;
  for (std::size_t i = 0; i < m.coef.size(); ++i) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < f; ++j) {
      const double d = z[j] - static_cast<double>(m.support_vectors[i * f + j]);
      d2 += d * d;
    }
    s += m.coef[i] * std::exp(-gamma * d2);
  }
  return s;
}

/// Gaussian blobs in f dimensions, one per class, centres spaced `sep` apart.
struct Blobs {
  std::vector<double> x;
  std::vector<std::size_t> y;
};

inline Blobs blobs(std::size_t per_class, std::size_t k, std::size_t f, double sep, Rng& rng) {
  Blobs b;
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t d = 0; d < f; ++d) b.x.push_back(g(rng) + (d == c % f ? sep * static_cast<double>(1 + c / f) : 0.0));
      b.y.push_back(c);
    }
  return b;
}

} // namespace modguard::testing
