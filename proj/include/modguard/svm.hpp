#pragma once

// One-vs-all RBF support vector machines over feature-layer activations, the
// single-threshold reject rule, and threshold calibration.
//
// Each binary machine k scores
//   S_k(z) = sum_i coef_i * exp(-gamma * |z - sv_i|^2) + bias
// with coef_i = alpha_i * y_i. A sample is accepted as class argmax_k S_k only
// when that maximum is strictly above the global threshold S0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modguard/binary_io.hpp"
#include "modguard/error.hpp"

namespace modguard {

inline constexpr double kDefaultGamma = 0.01;
inline constexpr double kDefaultSvmC = 1.0;

struct BinaryMachine {
  std::vector<float> support_vectors;  // n_sv x F, row-major
  std::vector<double> coef;            // alpha_i * y_i
  double bias = 0.0;

  std::size_t num_support_vectors() const { return coef.size(); }
  bool operator==(const BinaryMachine&) const = default;
};

struct SvmModel {
  std::size_t feature_dim = 0;
  double gamma = kDefaultGamma;
  double c = kDefaultSvmC;
  double threshold = -std::numeric_limits<double>::infinity();  // S0
  std::vector<BinaryMachine> machines;

  std::size_t num_classes() const { return machines.size(); }
  bool operator==(const SvmModel&) const = default;
};

/// Decision value of one machine.
inline double machine_score(const BinaryMachine& m, double gamma, std::span<const double> z) {
  const std::size_t f = z.size();
  double s = m.bias;
  for (std::size_t i = 0; i < m.coef.size(); ++i) {
    const float* sv = m.support_vectors.data() + i * f;
    double d2 = 0.0;
    for (std::size_t k = 0; k < f; ++k) {
      const double diff = z[k] - static_cast<double>(sv[k]);
      d2 += diff * diff;
    }
    s += m.coef[i] * std::exp(-gamma * d2);
  }
  return s;
}

inline std::vector<double> svm_scores(const SvmModel& svm, std::span<const double> z) {
  if (z.size() != svm.feature_dim)
    throw ShapeError("feature vector has " + std::to_string(z.size()) + " entries, SVM expects " +
                     std::to_string(svm.feature_dim));
  std::vector<double> s(svm.machines.size());
  for (std::size_t k = 0; k < s.size(); ++k) s[k] = machine_score(svm.machines[k], svm.gamma, z);
  return s;
}

/// d S_k / d z = sum_i -2 gamma coef_i exp(-gamma |z - sv_i|^2) (z - sv_i).
inline std::vector<double> svm_input_gradient(const SvmModel& svm, std::size_t k, std::span<const double> z) {
  if (z.size() != svm.feature_dim) throw ShapeError("feature vector width differs from the SVM feature width");
  const auto& m = svm.machines.at(k);
  const std::size_t f = z.size();
  std::vector<double> g(f, 0.0);
  std::vector<double> diff(f);
  for (std::size_t i = 0; i < m.coef.size(); ++i) {
    const float* sv = m.support_vectors.data() + i * f;
    double d2 = 0.0;
    for (std::size_t j = 0; j < f; ++j) {
      diff[j] = z[j] - static_cast<double>(sv[j]);
      d2 += diff[j] * diff[j];
    }
    const double w = -2.0 * svm.gamma * m.coef[i] * std::exp(-svm.gamma * d2);
    for (std::size_t j = 0; j < f; ++j) g[j] += w * diff[j];
  }
  return g;
}

struct RejectDecision {
  std::optional<std::size_t> label;  // empty means REJECT
  std::vector<double> scores;

  bool rejected() const { return !label.has_value(); }
};

/// Argmax class (lowest id on ties) if its score strictly exceeds S0, otherwise reject.
inline RejectDecision decide(std::vector<double> scores, double threshold) {
  RejectDecision d;
  const auto best = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  if (scores[best] > threshold) d.label = best;
  d.scores = std::move(scores);
  return d;
}

inline RejectDecision classify_with_rejection(const SvmModel& svm, std::span<const double> z) {
  return decide(svm_scores(svm, z), svm.threshold);
}

inline constexpr std::size_t kMinCalibrationSamples = 100;

/// Threshold rejecting round(rate * n) of the given max-scores: the midpoint
/// between the k-th and (k+1)-th smallest values.
inline double reject_threshold(std::vector<double> max_scores, double rate,
                               std::size_t min_samples = kMinCalibrationSamples) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidArgument("reject rate must lie in [0, 1)");
  if (max_scores.size() < min_samples || max_scores.empty())
    throw InvalidArgument("calibration needs at least " + std::to_string(std::max<std::size_t>(min_samples, 1)) +
                          " benign samples, got " + std::to_string(max_scores.size()));
  std::sort(max_scores.begin(), max_scores.end());
  const auto n = max_scores.size();
  const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
  if (k == 0) return max_scores.front() - 1.0;
  if (k >= n) return max_scores.back();
  return 0.5 * (max_scores[k - 1] + max_scores[k]);
}

/// Threshold flagging round(rate * n) of the given values as anomalous (value > threshold).
inline double flag_threshold(std::vector<double> values, double rate,
                             std::size_t min_samples = kMinCalibrationSamples) {
  for (double& v : values) v = -v;
  return -reject_threshold(std::move(values), rate, min_samples);
}

/// Calibrate S0 on benign feature rows (n x F, row-major) so the benign reject
/// fraction equals `rate` up to quantile granularity. Stores and returns S0.
inline double calibrate_threshold(SvmModel& svm, std::span<const double> benign_features, double rate,
                                  std::size_t min_samples = kMinCalibrationSamples) {
  if (!(rate > 0.0 && rate < 1.0)) throw InvalidArgument("target reject rate must lie in (0, 1)");
  const std::size_t f = svm.feature_dim;
  if (f == 0 || benign_features.size() % f != 0) throw ShapeError("benign features are not a multiple of F");
  std::vector<double> mx;
  for (std::size_t i = 0; i < benign_features.size() / f; ++i) {
    const auto s = svm_scores(svm, benign_features.subspan(i * f, f));
    mx.push_back(*std::max_element(s.begin(), s.end()));
  }
  svm.threshold = reject_threshold(std::move(mx), rate, min_samples);
  return svm.threshold;
}

namespace detail {

/// Dense or on-the-fly RBF Gram matrix.
class Gram {
public:
  Gram(std::span<const double> x, std::size_t n, std::size_t f, double gamma) : x_(x), n_(n), f_(f), gamma_(gamma) {
    if (n_ <= kDenseLimit) {
      dense_.resize(n_ * n_);
      for (std::size_t i = 0; i < n_; ++i) {
        dense_[i * n_ + i] = 1.0;
        for (std::size_t j = 0; j < i; ++j) dense_[i * n_ + j] = dense_[j * n_ + i] = eval(i, j);
      }
    }
  }

  double operator()(std::size_t i, std::size_t j) const { return dense_.empty() ? eval(i, j) : dense_[i * n_ + j]; }

  void row(std::size_t i, std::vector<double>& out) const {
    out.resize(n_);
    if (!dense_.empty()) {
      std::copy(dense_.begin() + static_cast<long>(i * n_), dense_.begin() + static_cast<long>((i + 1) * n_),
                out.begin());
    } else {
      for (std::size_t j = 0; j < n_; ++j) out[j] = eval(i, j);
    }
  }

private:
  static constexpr std::size_t kDenseLimit = 8000;

  double eval(std::size_t i, std::size_t j) const {
    double d2 = 0.0;
    for (std::size_t k = 0; k < f_; ++k) {
      const double d = x_[i * f_ + k] - x_[j * f_ + k];
      d2 += d * d;
    }
    return std::exp(-gamma_ * d2);
  }

  std::span<const double> x_;
  std::size_t n_, f_;
  double gamma_;
  std::vector<double> dense_;
};

struct SmoResult {
  std::vector<double> alpha;
  double rho = 0.0;  // decision = sum alpha_i y_i K_i(z) - rho
  std::size_t iterations = 0;
};

/// Soft-margin dual solved by SMO with second-order working-set selection.
/// Stops when the maximal KKT violation m(alpha) - M(alpha) drops below tol.
inline SmoResult smo_solve(const Gram& k, std::span<const int> y, double c, double tol, std::size_t max_iter) {
  const std::size_t n = y.size();
  constexpr double tau = 1e-12;
  SmoResult r;
  r.alpha.assign(n, 0.0);
  std::vector<double> grad(n, -1.0);  // gradient of 0.5 a'Qa - e'a
  std::vector<double> ki, kj;

  auto in_up = [&](std::size_t t) { return (y[t] == 1 && r.alpha[t] < c) || (y[t] == -1 && r.alpha[t] > 0.0); };
  auto in_low = [&](std::size_t t) { return (y[t] == -1 && r.alpha[t] < c) || (y[t] == 1 && r.alpha[t] > 0.0); };

  for (; r.iterations < max_iter; ++r.iterations) {
    double gmax = -std::numeric_limits<double>::infinity();
    std::size_t i = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (in_up(t) && -y[t] * grad[t] >= gmax) {
        gmax = -y[t] * grad[t];
        i = t;
      }
    }
    if (i == n) break;
    k.row(i, ki);
    double gmin = std::numeric_limits<double>::infinity();
    double best = std::numeric_limits<double>::infinity();
    std::size_t j = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      const double v = -y[t] * grad[t];
      gmin = std::min(gmin, v);
      const double b = gmax - v;
      if (b > 0.0) {
        double a = ki[i] + k(t, t) - 2.0 * ki[t];
        if (a <= 0.0) a = tau;
        const double obj = -(b * b) / a;
        if (obj <= best) {
          best = obj;
          j = t;
        }
      }
    }
    if (gmax - gmin < tol || j == n) break;
    k.row(j, kj);

    const double yi = y[i], yj = y[j];
    const double old_ai = r.alpha[i], old_aj = r.alpha[j];
    double quad = ki[i] + kj[j] - 2.0 * ki[j];
    if (quad <= 0.0) quad = tau;
    if (yi != yj) {
      const double delta = (-grad[i] - grad[j]) / quad;
      const double diff = r.alpha[i] - r.alpha[j];
      r.alpha[i] += delta;
      r.alpha[j] += delta;
      if (diff > 0 && r.alpha[j] < 0) {
        r.alpha[j] = 0;
        r.alpha[i] = diff;
      } else if (diff <= 0 && r.alpha[i] < 0) {
        r.alpha[i] = 0;
        r.alpha[j] = -diff;
      }
      if (diff > 0 && r.alpha[i] > c) {
        r.alpha[i] = c;
        r.alpha[j] = c - diff;
      } else if (diff <= 0 && r.alpha[j] > c) {
        r.alpha[j] = c;
        r.alpha[i] = c + diff;
      }
    } else {
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = r.alpha[i] + r.alpha[j];
      r.alpha[i] -= delta;
      r.alpha[j] += delta;
      if (sum > c && r.alpha[i] > c) {
        r.alpha[i] = c;
        r.alpha[j] = sum - c;
      } else if (sum <= c && r.alpha[j] < 0) {
        r.alpha[j] = 0;
        r.alpha[i] = sum;
      }
      if (sum > c && r.alpha[j] > c) {
        r.alpha[j] = c;
        r.alpha[i] = sum - c;
      } else if (sum <= c && r.alpha[i] < 0) {
        r.alpha[i] = 0;
        r.alpha[j] = sum;
      }
    }
    const double dai = r.alpha[i] - old_ai, daj = r.alpha[j] - old_aj;
    for (std::size_t t = 0; t < n; ++t) grad[t] += y[t] * (yi * ki[t] * dai + yj * kj[t] * daj);
  }

  // rho from free vectors, else the midpoint of the feasible interval
  double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity();
  double sum_free = 0.0;
  std::size_t n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * grad[t];
    if (r.alpha[t] >= c) {
      if (y[t] == -1)
        ub = std::min(ub, yg);
      else
        lb = std::max(lb, yg);
    } else if (r.alpha[t] <= 0.0) {
      if (y[t] == 1)
        ub = std::min(ub, yg);
      else
        lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }
  r.rho = n_free > 0 ? sum_free / static_cast<double>(n_free) : 0.5 * (ub + lb);
  return r;
}

} // namespace detail

struct SvmTrainOptions {
  double gamma = kDefaultGamma;
  double c = kDefaultSvmC;
  double tol = 1e-3;
  std::size_t max_iter = 2'000'000;
};

/// Train K one-vs-all machines on n x F features (row-major). Features are
/// rounded to float32 first, the precision support vectors are stored in.
/// When `alphas` is given it receives every machine's full dual vector.
inline SvmModel svm_train(std::span<const double> features, std::span<const std::size_t> labels,
                          std::size_t num_classes, const SvmTrainOptions& opt = {},
                          std::vector<std::vector<double>>* alphas = nullptr) {
  const std::size_t n = labels.size();
  if (n == 0 || features.size() % n != 0) throw ShapeError("feature matrix does not match the label count");
  const std::size_t f = features.size() / n;
  if (!(opt.gamma > 0.0) || !(opt.c > 0.0)) throw InvalidArgument("gamma and C must be positive");
  if (num_classes < 2) throw InvalidArgument("degenerate single-class input");
  if (n < num_classes) throw InvalidArgument("need at least one sample per class");
  std::vector<std::size_t> counts(num_classes, 0);
  for (auto l : labels) {
    if (l >= num_classes) throw InvalidArgument("label out of range");
    ++counts[l];
  }
  for (std::size_t k = 0; k < num_classes; ++k)
    if (counts[k] == 0) throw InvalidArgument("class " + std::to_string(k) + " has no training samples");

  std::vector<double> xr(features.begin(), features.end());
  for (double& v : xr) v = static_cast<double>(static_cast<float>(v));
  const detail::Gram gram(xr, n, f, opt.gamma);

  SvmModel svm;
  svm.feature_dim = f;
  svm.gamma = opt.gamma;
  svm.c = opt.c;
  std::vector<int> y(n);
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (std::size_t i = 0; i < n; ++i) y[i] = labels[i] == k ? 1 : -1;
    const auto res = detail::smo_solve(gram, y, opt.c, opt.tol, opt.max_iter);
    BinaryMachine m;
    m.bias = -res.rho;
    for (std::size_t i = 0; i < n; ++i) {
      if (res.alpha[i] > 0.0) {
        m.coef.push_back(res.alpha[i] * y[i]);
        for (std::size_t d = 0; d < f; ++d) m.support_vectors.push_back(static_cast<float>(xr[i * f + d]));
      }
    }
    svm.machines.push_back(std::move(m));
    if (alphas) alphas->push_back(res.alpha);
  }
  return svm;
}

// MGS1: magic, u32 K, u32 F, f64 gamma, f64 C, f64 S0, then per machine
// u32 n_sv, f64 bias, n_sv x f64 duals (alpha*y), n_sv x F float32 support vectors.
inline io::ByteWriter encode_svm(const SvmModel& svm) {
  io::ByteWriter w;
  w.put_bytes("MGS1");
  w.put(static_cast<std::uint32_t>(svm.machines.size()));
  w.put(static_cast<std::uint32_t>(svm.feature_dim));
  w.put(svm.gamma);
  w.put(svm.c);
  w.put(svm.threshold);
  for (const auto& m : svm.machines) {
    w.put(static_cast<std::uint32_t>(m.coef.size()));
    w.put(m.bias);
    for (double a : m.coef) w.put(a);
    for (float v : m.support_vectors) w.put(v);
  }
  return w;
}

inline void save_svm(const SvmModel& svm, const std::string& path) { encode_svm(svm).write_file(path); }

inline SvmModel decode_svm(io::ByteReader& r) {
  if (r.remaining() < 4) throw MalformedHeaderError("SVM file too short for a header");
  const auto magic = r.get_bytes(4);
  if (magic.substr(0, 3) != "MGS") throw MalformedHeaderError("not an MGS SVM file");
  if (magic[3] != '1') throw VersionMismatchError(std::string("unsupported SVM format version '") + magic[3] + "'");
  SvmModel svm;
  std::uint32_t k;
  try {
    k = r.get<std::uint32_t>();
    svm.feature_dim = r.get<std::uint32_t>();
    svm.gamma = r.get<double>();
    svm.c = r.get<double>();
    svm.threshold = r.get<double>();
  } catch (const TruncatedPayloadError&) {
    throw MalformedHeaderError("SVM header is incomplete");
  }
  for (std::uint32_t i = 0; i < k; ++i) {
    BinaryMachine m;
    const auto nsv = r.get<std::uint32_t>();
    m.bias = r.get<double>();
    if (r.remaining() < static_cast<std::size_t>(nsv) * (8 + 4 * svm.feature_dim))
      throw TruncatedPayloadError("SVM machine " + std::to_string(i) + " is truncated");
    m.coef.resize(nsv);
    for (auto& a : m.coef) a = r.get<double>();
    m.support_vectors.resize(static_cast<std::size_t>(nsv) * svm.feature_dim);
    for (auto& v : m.support_vectors) v = r.get<float>();
    svm.machines.push_back(std::move(m));
  }
  return svm;
}

inline SvmModel load_svm(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  return decode_svm(r);
}

} // namespace modguard
