#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "modguard/checkpoint.hpp"
#include "modguard/signal.hpp"
#include "modguard/train.hpp"

using namespace modguard;
using Catch::Approx;

namespace {

// Small two-class set on an N = 8 frame: class 0 has positive I rail, class 1 negative.
LabeledSet toy_set(std::size_t per_class, double offset, std::uint64_t seed) {
  LabeledSet s;
  s.num_classes = 2;
  s.frame_length = 8;
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 0.3);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> x(16);
      for (std::size_t j = 0; j < 16; ++j) x[j] = g(rng) + (j < 8 ? (c == 0 ? offset : -offset) : 0.0);
      s.x.push_back(std::move(x));
      s.y.push_back(c);
    }
  return s;
}

TrainConfig quick(std::size_t epochs = 3) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.inner_steps = 3;
  c.seed = 42;
  return c;
}

bool same_params(const nn::Model& a, const nn::Model& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!std::equal(pa[i].begin(), pa[i].end(), pb[i].begin(), pb[i].end())) return false;
  return true;
}

} // namespace

TEST_CASE("smooth_label endpoints and the worked example") {
  const auto y = nn::LabelDist::one_hot(11, 3);
  CHECK(smooth_label(y, 0.0, 10.0).probs == y.probs);
  for (double p : smooth_label(y, 0.1, 10.0).probs) CHECK(p == Approx(1.0 / 11.0).epsilon(1e-15));
  const auto s = smooth_label(y, 2.0, 0.1);
  CHECK(s.probs[3] == Approx(0.8 + 0.2 / 11.0).epsilon(1e-14));
  CHECK(s.probs[3] == Approx(0.81818).margin(5e-6));
  CHECK(s.probs[0] == Approx(0.2 / 11.0).epsilon(1e-14));
  CHECK_THROWS_AS(smooth_label(y, 0.2, 10.0), InvalidArgument);
  CHECK_THROWS_AS(smooth_label(y, -0.1, 1.0), InvalidArgument);
}

TEST_CASE("smooth_label stays on the simplex and is affine in eps") {
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t k = 2 + static_cast<std::size_t>(u(rng) * 20);
    const auto y = nn::LabelDist::one_hot(k, static_cast<std::size_t>(u(rng) * static_cast<double>(k)));
    const double c = 0.01 + 10.0 * u(rng);
    const double e1 = u(rng) / c, e2 = u(rng) / c;
    const auto a = smooth_label(y, e1, c), b = smooth_label(y, e2, c), m = smooth_label(y, 0.5 * (e1 + e2), c);
    CHECK(std::accumulate(a.probs.begin(), a.probs.end(), 0.0) == Approx(1.0).epsilon(1e-12));
    for (std::size_t i = 0; i < k; ++i) {
      CHECK(a.probs[i] >= 0.0);
      CHECK(m.probs[i] == Approx(0.5 * (a.probs[i] + b.probs[i])).margin(1e-14));
    }
  }
}

TEST_CASE("standard training separates a separable toy set") {
  const auto set = toy_set(50, 1.0, 3);
  auto cfg = quick(50);
  TrainLog log;
  const auto m = train_standard(set, cfg, &log);
  CHECK(clean_accuracy(m, set) >= 0.99);
  REQUIRE(log.size() == 50);
  for (const auto& e : log) CHECK(std::isfinite(e.loss));
  CHECK(log.back().loss < log.front().loss);
}

TEST_CASE("training is deterministic in the seed") {
  const auto set = toy_set(20, 0.5, 4);
  const auto cfg = quick();
  CHECK(same_params(train_standard(set, cfg), train_standard(set, cfg)));
  CHECK(same_params(train_adversarial(set, cfg, 0.5), train_adversarial(set, cfg, 0.5)));
  CatState s1(set.size(), 0.1, 1.0, 0.5), s2(set.size(), 0.1, 1.0, 0.5);
  CHECK(same_params(cat_train(set, cfg, s1), cat_train(set, cfg, s2)));
  CHECK(same_params(ls_gna_train(set, cfg, 0.1, 0.1), ls_gna_train(set, cfg, 0.1, 0.1)));
  auto other = cfg;
  other.seed = 43;
  CHECK_FALSE(same_params(train_standard(set, cfg), train_standard(set, other)));
}

TEST_CASE("adversarial re-training continues from the given weights") {
  const auto set = toy_set(20, 0.5, 6);
  const auto cfg = quick();
  const auto base = train_standard(set, cfg);
  const auto cont = train_adversarial(set, cfg, 0.0, nullptr, &base);
  CHECK_FALSE(same_params(cont, train_adversarial(set, cfg, 0.0)));
  CHECK(clean_accuracy(cont, set) >= clean_accuracy(base, set) - 0.05);
  auto other = set;
  other.num_classes = 3;
  CHECK_THROWS_AS(train_adversarial(other, cfg, 0.1, nullptr, &base), ShapeError);
}

TEST_CASE("zero budgets reproduce standard training bit for bit") {
  const auto set = toy_set(20, 0.5, 5);
  const auto cfg = quick();
  const auto ref = train_standard(set, cfg);
  CHECK(same_params(train_adversarial(set, cfg, 0.0), ref));
  CatState zero(set.size(), 0.0, 10.0, 0.0);
  CHECK(same_params(cat_train(set, cfg, zero), ref));
  CatState no_step(set.size(), 0.0, 1.0, 0.5);
  CHECK(same_params(cat_train(set, cfg, no_step), ref));
  CHECK(same_params(ls_gna_train(set, cfg, 0.0, 0.0), ref));
  CHECK_FALSE(same_params(ls_gna_train(set, cfg, 0.1, 0.0), ref));
}

TEST_CASE("CAT radii move by one step per visit and respect the cap") {
  const auto set = toy_set(16, 0.3, 6);
  const double eta = 0.05, eps_max = 0.2;
  CatState state(set.size(), eta, 2.0, eps_max);
  auto cfg = quick(1);
  std::vector<double> prev(set.size(), 0.0);
  double max_seen = 0.0;
  for (int round = 0; round < 8; ++round) {
    cat_train(set, cfg, state);
    for (std::size_t i = 0; i < set.size(); ++i) {
      const double e = state.eps(i);
      const double steps = (e - prev[i]) / eta;
      CHECK(std::abs(steps - std::round(steps)) < 1e-12);
      CHECK(std::abs(steps) <= 1.0 + 1e-12);
      CHECK(e >= 0.0);
      CHECK(e <= eps_max + 1e-12);
      max_seen = std::max(max_seen, e);
      prev[i] = e;
    }
    cfg.seed += 1;
  }
  CHECK(max_seen > 0.0);
  CHECK(state.mean_eps() >= 0.0);
}

TEST_CASE("CatState unit behaviour") {
  CatState s(3, 0.25, 1.0, 0.5);
  CHECK(s.trial_eps(0) == 0.25);
  s.increment_capped(0);
  s.increment_capped(0);
  s.increment_capped(0);
  CHECK(s.eps(0) == 0.5);
  s.decrement(0);
  CHECK(s.eps(0) == 0.25);
  s.decrement(1);
  CHECK(s.eps(1) == 0.0);
  CHECK(s.mean_eps() == Approx(0.25 / 3.0));
  CHECK_THROWS_AS(CatState(3, 0.005, 10.0, 5.0), InvalidArgument);
  CHECK_THROWS_AS(CatState(3, -1.0, 1.0, 0.5), InvalidArgument);
  CatState wrong(2, 0.1, 1.0, 0.5);
  CHECK_THROWS_AS(cat_train(toy_set(4, 1.0, 1), quick(), wrong), InvalidArgument);
}

TEST_CASE("training argument validation") {
  const auto set = toy_set(4, 1.0, 7);
  auto cfg = quick();
  CHECK_THROWS_AS(train_adversarial(set, cfg, -1.0), InvalidArgument);
  CHECK_THROWS_AS(ls_gna_train(set, cfg, -0.1, 0.0), InvalidArgument);
  CHECK_THROWS_AS(ls_gna_train(set, cfg, 0.0, 1.5), InvalidArgument);
  cfg.lr = 0.0;
  CHECK_THROWS_AS(train_standard(set, cfg), InvalidArgument);
  CHECK_THROWS_AS(train_standard(LabeledSet{{}, {}, 2, 8}, quick()), InvalidArgument);
}

TEST_CASE("median norm and entry rms") {
  LabeledSet s;
  s.x = {{3.0, 4.0}, {0.0, 1.0}, {6.0, 8.0}};
  s.y = {0, 0, 0};
  CHECK(median_norm(s) == 5.0);
  CHECK(entry_rms(s) == Approx(std::sqrt((25.0 + 1.0 + 100.0) / 6.0)));
  CHECK_THROWS_AS(median_norm(LabeledSet{}), InvalidArgument);
}
