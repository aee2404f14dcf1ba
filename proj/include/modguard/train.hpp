#pragma once

// Training procedures sharing one minibatch SGD loop:
//
//   train_standard      cross-entropy on clean frames
//   train_adversarial   every frame replaced by its PGD counterpart at a fixed radius
//   cat_train           per-sample adaptive radius with radius-proportional label smoothing
//   ls_gna_train        Gaussian input noise plus uniform label smoothing
//
// All procedures draw initialisation, shuffling and noise from separate
// sub-streams of cfg.seed, so two runs with one seed are bitwise identical,
// and the degenerate settings of the robust variants reproduce
// train_standard exactly.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "modguard/attack.hpp"
#include "modguard/error.hpp"
#include "modguard/nn.hpp"
#include "modguard/rng.hpp"
#include "modguard/signal.hpp"

namespace modguard {

/// Frames of one split as double-precision model inputs.
struct LabeledSet {
  std::vector<std::vector<double>> x;
  std::vector<std::size_t> y;
  std::size_t num_classes = 0;
  std::size_t frame_length = 0;

  std::size_t size() const { return y.size(); }
};

inline LabeledSet labeled_set(const Dataset& d, std::span<const std::size_t> indices) {
  LabeledSet s;
  s.num_classes = d.num_classes();
  s.frame_length = d.frame_length;
  for (auto i : indices) {
    s.x.push_back(nn::to_double(d.frames.at(i).samples));
    s.y.push_back(d.frames[i].label);
  }
  return s;
}

inline LabeledSet labeled_set(const Dataset& d, Split split) {
  const auto idx = d.indices(split);
  return labeled_set(d, idx);
}

inline double median_norm(const LabeledSet& s) {
  if (s.size() == 0) throw InvalidArgument("empty set has no median norm");
  std::vector<double> n;
  for (const auto& x : s.x) n.push_back(std::sqrt(signal_power(std::span<const double>(x))));
  std::sort(n.begin(), n.end());
  const auto m = n.size();
  return m % 2 ? n[m / 2] : 0.5 * (n[m / 2 - 1] + n[m / 2]);
}

/// Root-mean-square over every entry of every frame.
inline double entry_rms(const LabeledSet& s) {
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& x : s.x) {
    acc += signal_power(std::span<const double>(x));
    count += x.size();
  }
  return count ? std::sqrt(acc / static_cast<double>(count)) : 0.0;
}

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t inner_steps = 10;        // PGD iterations inside adversarial training
  double inner_step_fraction = 0.25;   // inner PGD step as a fraction of the radius
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw InvalidArgument("epochs and batch size must be positive");
    if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
    if (inner_steps == 0 || !(inner_step_fraction > 0.0)) throw InvalidArgument("inner PGD settings must be positive");
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double mean_eps = 0.0;
};

using TrainLog = std::vector<EpochLog>;

/// (1 - c eps) y + c eps u with u the uniform distribution over K classes.
inline nn::LabelDist smooth_label(const nn::LabelDist& y, double eps, double c) {
  const double a = c * eps;
  if (!(a >= 0.0 && a <= 1.0)) throw InvalidArgument("label smoothing weight c*eps must lie in [0, 1]");
  const double u = 1.0 / static_cast<double>(y.size());
  nn::LabelDist out{std::vector<double>(y.size())};
  for (std::size_t k = 0; k < y.size(); ++k) out.probs[k] = (1.0 - a) * y.probs[k] + a * u;
  return out;
}

namespace detail {

struct Prepared {
  std::vector<double> input;
  std::vector<double> target;
};

/// prepare(model, sample index) -> Prepared, called for every sample of a
/// batch before the update; after(model, sample index, prepared) runs on the
/// updated model.
template <typename Prepare, typename After>
nn::Model run_training(const LabeledSet& set, const TrainConfig& cfg, Prepare&& prepare, After&& after,
                       const std::function<double()>& mean_eps, TrainLog* log, const nn::Model* start = nullptr) {
  cfg.validate();
  if (set.size() == 0) throw InvalidArgument("training split is empty");
  auto model = nn::make_classifier(set.frame_length, set.num_classes);
  if (start) {
    if (start->input_size() != model.input_size() || start->output_size() != model.output_size())
      throw ShapeError("starting model does not fit the training set");
    model = *start;
  } else {
    Rng init_rng(substream_seed(cfg.seed, "init"));
    model.init(init_rng);
  }
  Rng shuffle_rng(substream_seed(cfg.seed, "shuffle"));
  nn::Sgd opt(cfg.lr, cfg.momentum);

  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Prepared> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t b = start; b < end; ++b) batch.push_back(prepare(model, order[b]));
      auto g = model.zero_grads();
      const double scale = 1.0 / static_cast<double>(end - start);
      for (const auto& p : batch) epoch_loss += nn::accumulate_ce_grads(model, p.input, p.target, scale, g);
      opt.step(model, g);
      for (std::size_t b = start; b < end; ++b) after(model, order[b], batch[b - start]);
    }
    const double loss = epoch_loss / static_cast<double>(set.size());
    if (!std::isfinite(loss)) throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch));
    if (log) log->push_back({epoch, loss, mean_eps ? mean_eps() : 0.0});
  }
  return model;
}

inline std::vector<double> one_hot(std::size_t k, std::size_t y) {
  std::vector<double> t(k, 0.0);
  t[y] = 1.0;
  return t;
}

} // namespace detail

inline nn::Model train_standard(const LabeledSet& set, const TrainConfig& cfg, TrainLog* log = nullptr) {
  return detail::run_training(
      set, cfg,
      [&](const nn::Model&, std::size_t i) {
        return detail::Prepared{set.x[i], detail::one_hot(set.num_classes, set.y[i])};
      },
      [](const nn::Model&, std::size_t, const detail::Prepared&) {}, {}, log);
}

/// Min-max training: each frame is replaced by PGD(x, fixed_eps) against the current model.
/// With `start` the weights continue from an already trained classifier (adversarial re-training).
inline nn::Model train_adversarial(const LabeledSet& set, const TrainConfig& cfg, double fixed_eps,
                                   TrainLog* log = nullptr, const nn::Model* start = nullptr) {
  if (!(fixed_eps >= 0.0)) throw InvalidArgument("fixed_eps must be non-negative");
  AttackConfig inner;
  inner.epsilon = fixed_eps;
  inner.step_size = cfg.inner_step_fraction * fixed_eps;
  inner.max_iters = cfg.inner_steps;
  inner.early_stop = false;
  return detail::run_training(
      set, cfg,
      [&](const nn::Model& m, std::size_t i) {
        auto adv = pgd_untargeted(m, set.x[i], set.y[i], inner);
        return detail::Prepared{std::move(adv.x_adv), detail::one_hot(set.num_classes, set.y[i])};
      },
      [](const nn::Model&, std::size_t, const detail::Prepared&) {}, [&] { return fixed_eps; }, log, start);
}

/// Per-sample radii for CAT, stored as whole multiples of eta so each visit
/// changes a radius by exactly +eta, -eta or 0.
class CatState {
public:
  CatState(std::size_t num_samples, double eta, double c, double eps_max)
      : level_(num_samples, 0), eta_(eta), c_(c), eps_max_(eps_max) {
    if (!(eta >= 0.0) || !(c >= 0.0) || !(eps_max >= 0.0)) throw InvalidArgument("CAT parameters must be >= 0");
    if (c * eps_max > 1.0) throw InvalidArgument("CAT requires c * eps_max <= 1 so smoothed labels stay valid");
    max_level_ = eta > 0.0 ? static_cast<std::size_t>(std::floor(eps_max / eta + 1e-9)) : 0;
  }

  double eps(std::size_t i) const { return static_cast<double>(level_.at(i)) * eta_; }
  double eta() const { return eta_; }
  double c() const { return c_; }
  double eps_max() const { return eps_max_; }
  std::size_t size() const { return level_.size(); }

  /// Radius used for the next attack on sample i: one increment above the stored value.
  double trial_eps(std::size_t i) const { return static_cast<double>(level_.at(i) + 1) * eta_; }
  void increment_capped(std::size_t i) { level_.at(i) = std::min(level_.at(i) + 1, max_level_); }
  void decrement(std::size_t i) {
    if (level_.at(i) > 0) --level_[i];
  }

  double mean_eps() const {
    if (level_.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < level_.size(); ++i) s += eps(i);
    return s / static_cast<double>(level_.size());
  }

private:
  std::vector<std::size_t> level_;
  double eta_, c_, eps_max_;
  std::size_t max_level_ = 0;
};

/// Customized adversarial training. Per batch and sample: smooth the label
/// with the current radius, attack at radius + eta, cap the radius at
/// eps_max, re-smooth, then one SGD step on the batch; afterwards every sample
/// the updated model still misclassifies gives back its increment.
inline nn::Model cat_train(const LabeledSet& set, const TrainConfig& cfg, CatState& state, TrainLog* log = nullptr) {
  if (state.size() != set.size()) throw InvalidArgument("CAT state size differs from the training set");
  const auto k = set.num_classes;
  return detail::run_training(
      set, cfg,
      [&](const nn::Model& m, std::size_t i) {
        const auto y = nn::LabelDist::one_hot(k, set.y[i]);
        const auto pre = smooth_label(y, state.eps(i), state.c());
        AttackConfig inner;
        inner.epsilon = state.trial_eps(i);
        inner.step_size = cfg.inner_step_fraction * inner.epsilon;
        inner.max_iters = cfg.inner_steps;
        inner.early_stop = false;
        auto adv = pgd_untargeted(m, set.x[i], set.y[i], inner, pre.probs);
        state.increment_capped(i);
        auto smoothed = smooth_label(y, state.eps(i), state.c());
        return detail::Prepared{std::move(adv.x_adv), std::move(smoothed.probs)};
      },
      [&](const nn::Model& m, std::size_t i, const detail::Prepared& p) {
        if (nn::predict(m, p.input) != set.y[i]) state.decrement(i);
      },
      [&] { return state.mean_eps(); }, log);
}

/// Label smoothing with Gaussian noise augmentation.
inline nn::Model ls_gna_train(const LabeledSet& set, const TrainConfig& cfg, double noise_sigma, double smooth_alpha,
                              TrainLog* log = nullptr) {
  if (!(noise_sigma >= 0.0)) throw InvalidArgument("noise sigma must be non-negative");
  if (!(smooth_alpha >= 0.0 && smooth_alpha <= 1.0)) throw InvalidArgument("smoothing factor must lie in [0, 1]");
  Rng noise_rng(substream_seed(cfg.seed, "noise"));
  const auto k = set.num_classes;
  return detail::run_training(
      set, cfg,
      [&](const nn::Model&, std::size_t i) {
        auto x = set.x[i];
        if (noise_sigma > 0.0) {
          std::normal_distribution<double> gauss(0.0, noise_sigma);
          for (double& v : x) v += gauss(noise_rng);
        }
        auto t = smooth_label(nn::LabelDist::one_hot(k, set.y[i]), smooth_alpha, 1.0);
        return detail::Prepared{std::move(x), std::move(t.probs)};
      },
      [](const nn::Model&, std::size_t, const detail::Prepared&) {}, {}, log);
}

/// Fraction of the set classified correctly by the softmax head.
inline double clean_accuracy(const nn::Model& m, const LabeledSet& s) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < s.size(); ++i) ok += nn::predict(m, s.x[i]) == s.y[i];
  return s.size() ? static_cast<double>(ok) / static_cast<double>(s.size()) : 0.0;
}

/// Feature-layer activations of every frame, row-major n x F.
inline std::vector<double> feature_matrix(const nn::Model& m, const LabeledSet& s) {
  std::vector<double> out;
  out.reserve(s.size() * m.feature_size());
  for (const auto& x : s.x) {
    const auto f = nn::forward(m, x).features;
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

} // namespace modguard
