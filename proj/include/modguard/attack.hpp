#pragma once

// l2-constrained projected gradient attacks.
//
// All three attacks take normalised steps: x' <- P(x' +/- step * g / |g|),
// where P projects onto the l2 ball of radius epsilon around the clean frame.
//
//   pgd_untargeted  ascends the cross-entropy of the bare classifier.
//   attack_htrd     descends psi = s_y - max_{j != y} s_j of the SVM head,
//                   back-propagated through the feature layer.
//   attack_twofold  alternates between the classifier margin and the
//                   autoencoder reconstruction error depending on which of
//                   the two detectors still stops the sample.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "modguard/autoencoder.hpp"
#include "modguard/error.hpp"
#include "modguard/nn.hpp"
#include "modguard/rng.hpp"
#include "modguard/svm.hpp"

namespace modguard {

struct AttackConfig {
  double epsilon = 0.0;
  double step_size = 0.0;  // absolute l2 length of one step
  std::size_t max_iters = 50;
  double tol = 1e-5;
  bool random_start = false;
  bool early_stop = true;  // pgd_untargeted: stop at the first misclassified iterate
  std::uint64_t seed = 0;

  /// Defaults used for evaluation: step = eps / 10, 50 iterations, tol 1e-5.
  static AttackConfig for_budget(double epsilon, double step_fraction = 0.1, std::size_t iters = 50,
                                 double tol = 1e-5) {
    AttackConfig c;
    c.epsilon = epsilon;
    c.step_size = step_fraction * epsilon;
    c.max_iters = iters;
    c.tol = tol;
    return c;
  }

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw InvalidArgument("epsilon must be finite and >= 0");
    if (epsilon > 0.0 && !(step_size > 0.0)) throw InvalidArgument("step size must be positive");
    if (max_iters < 1) throw InvalidArgument("attack needs at least one iteration");
    if (!(tol > 0.0)) throw InvalidArgument("tolerance must be positive");
  }
};

struct AttackResult {
  std::vector<double> x_adv;
  std::size_t iters_used = 0;
  bool success = false;
  std::vector<double> objective_trace;
};

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline double l2_norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

/// x0 + eps * (x' - x0) / max(|x' - x0|, eps). Points inside the ball are returned unchanged.
inline std::vector<double> project_l2(std::span<const double> x_prime, std::span<const double> x0, double epsilon) {
  if (x_prime.size() != x0.size()) throw ShapeError("projection operands differ in size");
  if (epsilon <= 0.0) return {x0.begin(), x0.end()};
  const double dist = l2_distance(x_prime, x0);
  if (dist <= epsilon) return {x_prime.begin(), x_prime.end()};
  const double scale = epsilon / dist;
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x0[i] + scale * (x_prime[i] - x0[i]);
  return out;
}

namespace detail {

inline void require_finite(std::span<const double> g, const char* what) {
  for (double v : g)
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite gradient");
}

/// x' +/- step * g / |g| projected back onto the ball; nullopt when g == 0.
inline std::optional<std::vector<double>> normalized_step(std::span<const double> x_cur, std::span<const double> g,
                                                          double step, double sign, std::span<const double> x0,
                                                          double epsilon) {
  const double gn = l2_norm(g);
  if (gn == 0.0) return std::nullopt;
  std::vector<double> cand(x_cur.size());
  for (std::size_t i = 0; i < cand.size(); ++i) cand[i] = x_cur[i] + sign * step * g[i] / gn;
  return project_l2(cand, x0, epsilon);
}

inline std::vector<double> random_start(std::span<const double> x0, double epsilon, std::uint64_t seed) {
  Rng rng(substream_seed(seed, "attack-start"));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> dir(x0.size());
  for (double& v : dir) v = gauss(rng);
  const double n = l2_norm(dir);
  const double r = epsilon * std::pow(uni(rng), 1.0 / static_cast<double>(x0.size()));
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x0[i] + (n > 0 ? r * dir[i] / n : 0.0);
  return project_l2(out, x0, epsilon);
}

} // namespace detail

/// Untargeted l2 PGD ascending cross-entropy against `target` (one-hot y when omitted).
inline AttackResult pgd_untargeted(const nn::Model& m, std::span<const double> x, std::size_t y,
                                   const AttackConfig& cfg, std::span<const double> target = {}) {
  cfg.validate();
  const std::size_t k = m.output_size();
  if (y >= k) throw InvalidArgument("label out of range");
  std::vector<double> onehot;
  if (target.empty()) {
    onehot.assign(k, 0.0);
    onehot[y] = 1.0;
    target = onehot;
  }
  AttackResult r;
  if (cfg.epsilon == 0.0) {
    r.x_adv.assign(x.begin(), x.end());
    r.success = nn::predict(m, x) != y;
    return r;
  }
  r.x_adv = cfg.random_start ? detail::random_start(x, cfg.epsilon, cfg.seed) : std::vector<double>(x.begin(), x.end());
  auto t = nn::forward_trace(m, r.x_adv);
  if (cfg.early_stop && nn::argmax(t.output()) != y) {
    r.success = true;
    return r;
  }
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    std::vector<double> g;
    nn::backward(m, t, m.layers().size(), nn::loss_ce_grad(t.output(), target), nullptr, &g);
    detail::require_finite(g, "pgd_untargeted");
    auto next = detail::normalized_step(r.x_adv, g, cfg.step_size, +1.0, x, cfg.epsilon);
    if (!next) break;
    r.x_adv = std::move(*next);
    t = nn::forward_trace(m, r.x_adv);
    r.objective_trace.push_back(nn::loss_ce(t.output(), target));
    ++r.iters_used;
    if (cfg.early_stop && nn::argmax(t.output()) != y) break;
  }
  r.success = nn::argmax(t.output()) != y;
  return r;
}

/// s_y - max_{j != y} s_j, plus the competing class j.
inline std::pair<double, std::size_t> htrd_psi(std::span<const double> scores, std::size_t y) {
  double best = -std::numeric_limits<double>::infinity();
  std::size_t j_best = y;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j != y && scores[j] > best) {
      best = scores[j];
      j_best = j;
    }
  }
  return {scores[y] - best, j_best};
}

/// True when a wrong class beats both the true class and the reject score S0.
inline bool htrd_escaped(std::span<const double> scores, std::size_t y, double threshold) {
  const auto [psi, j] = htrd_psi(scores, y);
  return scores[j] > std::max(scores[y], threshold);
}

inline double htrd_objective(const nn::Model& m, const SvmModel& svm, std::span<const double> x, std::size_t y) {
  if (m.feature_size() != svm.feature_dim) throw ShapeError("SVM feature width differs from the model feature layer");
  if (y >= svm.num_classes()) throw InvalidArgument("label out of range");
  const auto feat = nn::forward(m, x).features;
  return htrd_psi(svm_scores(svm, feat), y).first;
}

/// PGD descent on psi through the feature layer. A step that raises psi by
/// more than tol is retried at half length (up to 10 times), so the recorded
/// objective never increases by more than tol.
inline AttackResult attack_htrd(const nn::Model& m, const SvmModel& svm, std::span<const double> x, std::size_t y,
                                const AttackConfig& cfg) {
  cfg.validate();
  if (m.feature_size() != svm.feature_dim) throw ShapeError("SVM feature width differs from the model feature layer");
  if (y >= svm.num_classes()) throw InvalidArgument("label out of range");

  auto eval = [&](std::span<const double> xp) {
    const auto feat = nn::forward(m, xp).features;
    return std::pair{feat, svm_scores(svm, feat)};
  };

  AttackResult r;
  r.x_adv = cfg.random_start && cfg.epsilon > 0.0 ? detail::random_start(x, cfg.epsilon, cfg.seed)
                                                  : std::vector<double>(x.begin(), x.end());
  auto [feat, scores] = eval(r.x_adv);
  if (cfg.epsilon == 0.0 || htrd_escaped(scores, y, svm.threshold)) {
    r.success = htrd_escaped(scores, y, svm.threshold);
    return r;
  }
  double psi = htrd_psi(scores, y).first;
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const auto j = htrd_psi(scores, y).second;
    auto gy = svm_input_gradient(svm, y, feat);
    const auto gj = svm_input_gradient(svm, j, feat);
    for (std::size_t d = 0; d < gy.size(); ++d) gy[d] -= gj[d];
    const auto gx = nn::feature_vjp(m, r.x_adv, gy);
    detail::require_finite(gx, "attack_htrd");

    double step = cfg.step_size;
    std::optional<std::vector<double>> accepted;
    std::vector<double> acc_feat, acc_scores;
    double acc_psi = psi;
    for (int halving = 0; halving <= 10; ++halving, step *= 0.5) {
      auto cand = detail::normalized_step(r.x_adv, gx, step, -1.0, x, cfg.epsilon);
      if (!cand) break;
      auto [cf, cs] = eval(*cand);
      const double cpsi = htrd_psi(cs, y).first;
      if (!std::isfinite(cpsi)) throw NumericError("attack_htrd: non-finite objective");
      if (cpsi <= psi + cfg.tol) {
        accepted = std::move(cand);
        acc_feat = std::move(cf);
        acc_scores = std::move(cs);
        acc_psi = cpsi;
        break;
      }
    }
    if (!accepted) break;
    r.x_adv = std::move(*accepted);
    feat = std::move(acc_feat);
    scores = std::move(acc_scores);
    r.objective_trace.push_back(acc_psi);
    ++r.iters_used;
    const bool converged = std::abs(acc_psi - psi) <= cfg.tol;
    psi = acc_psi;
    if (htrd_escaped(scores, y, svm.threshold) || converged) break;
  }
  r.success = htrd_escaped(scores, y, svm.threshold);
  return r;
}

/// g_y - max_{j != y} g_j on classifier logits.
inline std::pair<double, std::size_t> logit_margin(std::span<const double> logits, std::size_t y) {
  return htrd_psi(logits, y);
}

/// White-box attack on classifier g guarded by autoencoder detector h.
/// While g still predicts y the step descends the logit margin; once g is
/// fooled but h flags the sample, the step descends the reconstruction error.
/// Stops at joint success (misclassified and not flagged).
inline AttackResult attack_twofold(const nn::Model& g, const Autoencoder& h, std::span<const double> x, std::size_t y,
                                   const AttackConfig& cfg) {
  cfg.validate();
  if (y >= g.output_size()) throw InvalidArgument("label out of range");
  AttackResult r;
  r.x_adv = cfg.random_start && cfg.epsilon > 0.0 ? detail::random_start(x, cfg.epsilon, cfg.seed)
                                                  : std::vector<double>(x.begin(), x.end());
  auto joint = [&](std::span<const double> xp) {
    return nn::predict(g, xp) != y && !ae_detect(h, xp).flagged;
  };
  if (cfg.epsilon == 0.0 || joint(r.x_adv)) {
    r.success = joint(r.x_adv);
    return r;
  }
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const auto t = nn::forward_trace(g, r.x_adv);
    std::vector<double> grad;
    double objective;
    const auto [margin, j] = logit_margin(t.output(), y);
    if (nn::argmax(t.output()) == y) {
      std::vector<double> cot(g.output_size(), 0.0);
      cot[y] = 1.0;
      cot[j] = -1.0;
      nn::backward(g, t, g.layers().size(), std::move(cot), nullptr, &grad);
      objective = margin;
    } else {
      grad = ae_mse_input_gradient(h.net, r.x_adv);
      objective = ae_mse(h.net, r.x_adv);
    }
    detail::require_finite(grad, "attack_twofold");
    auto next = detail::normalized_step(r.x_adv, grad, cfg.step_size, -1.0, x, cfg.epsilon);
    if (!next) break;
    r.x_adv = std::move(*next);
    r.objective_trace.push_back(objective);
    ++r.iters_used;
    if (joint(r.x_adv)) break;
  }
  r.success = joint(r.x_adv);
  return r;
}

} // namespace modguard
