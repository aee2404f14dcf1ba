#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <numbers>

#include "modguard/attack.hpp"
#include "modguard/autoencoder.hpp"
#include "support.hpp"

using namespace modguard;
using Catch::Approx;
namespace mt = modguard::testing;

namespace {

SvmModel random_svm(Rng& rng, std::size_t k, std::size_t f, std::size_t n_sv, double gamma = 0.01) {
  SvmModel s;
  s.feature_dim = f;
  s.gamma = gamma;
  for (std::size_t c = 0; c < k; ++c) {
    BinaryMachine m;
    m.bias = std::normal_distribution<double>(0.0, 0.3)(rng);
    for (std::size_t i = 0; i < n_sv; ++i) {
      m.coef.push_back(std::normal_distribution<double>(0.0, 1.0)(rng));
      for (std::size_t d = 0; d < f; ++d)
        m.support_vectors.push_back(static_cast<float>(std::normal_distribution<double>(0.0, 2.0)(rng)));
    }
    s.machines.push_back(std::move(m));
  }
  return s;
}

} // namespace

TEST_CASE("project_l2 basic cases") {
  const std::vector<double> x0 = {1.0, -2.0, 0.5};
  CHECK(project_l2(x0, x0, 1.0) == x0);
  const std::vector<double> zero = {0.0, 0.0};
  const std::vector<double> far = {2.0 / std::sqrt(2.0), 2.0 / std::sqrt(2.0)};
  const auto p = project_l2(far, zero, 1.0);
  CHECK(p[0] == Approx(far[0] / 2));
  CHECK(p[1] == Approx(far[1] / 2));
  CHECK(project_l2(far, zero, 0.0) == zero);
}

TEST_CASE("project_l2 matches a 2-D grid search") {
  Rng rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int t = 0; t < 20; ++t) {
    const std::vector<double> x0 = {u(rng), u(rng)};
    const double eps = 0.5 + std::abs(u(rng)) / 3.0;
    std::vector<double> xp = {x0[0] + 2 * eps + std::abs(u(rng)), x0[1] + u(rng)};
    const auto p = project_l2(xp, x0, eps);
    CHECK(std::abs(l2_distance(p, x0) - eps) < 1e-9);
    // brute force over the disc boundary and interior
    double best = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 20000; ++a) {
      const double th = 2.0 * std::numbers::pi * a / 20000.0;
      const std::vector<double> q = {x0[0] + eps * std::cos(th), x0[1] + eps * std::sin(th)};
      best = std::min(best, l2_distance(q, xp));
    }
    CHECK(l2_distance(p, xp) <= best + 1e-9);
    CHECK(l2_distance(p, xp) == Approx(best).epsilon(1e-6));
  }
}

TEST_CASE("one PGD step on a linear model is the normalised gradient") {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    nn::Model m({1, 1, 6}, {nn::LayerSpec::dense(4)}, 0);
    for (auto p : m.parameters())
      for (double& v : p) v = std::normal_distribution<double>(0.0, 1.0)(rng);
    const auto x = mt::random_vector(6, rng);
    const std::size_t y = nn::predict(m, x);
    AttackConfig cfg;
    cfg.epsilon = 0.3;
    cfg.step_size = 100.0;  // step far past the ball: projection lands on x + eps g/|g|
    cfg.max_iters = 1;
    const auto r = pgd_untargeted(m, x, y, cfg);
    std::vector<double> g;
    const auto tr = nn::forward_trace(m, x);
    nn::backward(m, tr, 1, nn::loss_ce_grad(tr.output(), nn::LabelDist::one_hot(4, y).probs), nullptr, &g);
    const double gn = l2_norm(g);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(r.x_adv[i] - (x[i] + 0.3 * g[i] / gn)) < 1e-9);
  }
}

TEST_CASE("zero budget returns the input for every attack") {
  Rng rng(3);
  auto m = mt::small_model(rng);
  const auto svm = random_svm(rng, 3, m.feature_size(), 4);
  Autoencoder ae{nn::make_autoencoder(8), 1.0};
  Rng init(4);
  ae.net.init(init);
  const auto x = mt::random_vector(16, rng);
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  for (std::size_t y = 0; y < 3; ++y) {
    const auto a = pgd_untargeted(m, x, y, cfg);
    CHECK(a.x_adv == x);
    CHECK(a.success == (nn::predict(m, x) != y));
    CHECK(attack_htrd(m, svm, x, y, cfg).x_adv == x);
    CHECK(attack_twofold(m, ae, x, y, cfg).x_adv == x);
  }
}

TEST_CASE("attacks stay inside the ball") {
  Rng rng(5);
  std::uniform_real_distribution<double> ue(0.01, 3.0), us(0.01, 2.0);
  for (int t = 0; t < 60; ++t) {
    auto m = mt::small_model(rng);
    auto svm = random_svm(rng, 3, m.feature_size(), 5);
    svm.threshold = std::normal_distribution<double>(0.0, 0.5)(rng);
    Autoencoder ae{nn::make_autoencoder(8), 0.0};
    Rng init(static_cast<std::uint64_t>(t));
    ae.net.init(init);
    ae.mse_threshold = 0.01;
    const auto x = mt::random_vector(16, rng);
    AttackConfig cfg;
    cfg.epsilon = ue(rng);
    cfg.step_size = us(rng) * cfg.epsilon;
    cfg.max_iters = 20;
    cfg.random_start = t % 2 == 0;
    cfg.seed = static_cast<std::uint64_t>(t);
    const std::size_t y = static_cast<std::size_t>(t % 3);
    for (const auto& r : {pgd_untargeted(m, x, y, cfg), attack_htrd(m, svm, x, y, cfg), attack_twofold(m, ae, x, y, cfg)})
      CHECK(l2_distance(r.x_adv, x) <= cfg.epsilon + 1e-6);
  }
}

TEST_CASE("attacks are deterministic") {
  Rng rng(6);
  auto m = mt::small_model(rng);
  const auto x = mt::random_vector(16, rng);
  auto cfg = AttackConfig::for_budget(1.0);
  cfg.random_start = true;
  cfg.seed = 3;
  const auto a = pgd_untargeted(m, x, 0, cfg), b = pgd_untargeted(m, x, 0, cfg);
  CHECK(a.x_adv == b.x_adv);
  CHECK(a.objective_trace == b.objective_trace);
}

TEST_CASE("htrd objective hand values and oracle") {
  CHECK(htrd_psi(std::vector<double>{1.0, -1.0}, 0).first == 2.0);
  CHECK(htrd_psi(std::vector<double>{0.5, 0.5}, 1).first == 0.0);
  Rng rng(7);
  auto m = mt::small_model(rng);
  const auto svm = random_svm(rng, 3, m.feature_size(), 6);
  for (int t = 0; t < 20; ++t) {
    const auto x = mt::random_vector(16, rng);
    const auto z = nn::forward(m, x).features;
    std::vector<double> s;
    for (const auto& mach : svm.machines) s.push_back(mt::brute_score(mach, svm.gamma, z));
    const double oracle = s[1] - std::max(s[0], s[2]);
    CHECK(std::abs(htrd_objective(m, svm, x, 1) - oracle) < 1e-10);
  }
}

TEST_CASE("svm_input_gradient hand values and finite differences") {
  SvmModel one;
  one.feature_dim = 3;
  one.gamma = 0.01;
  one.machines.push_back({{0.0f, 0.0f, 0.0f}, {1.0}, 0.0});
  const std::vector<double> at_sv = {0.0, 0.0, 0.0};
  for (double v : svm_input_gradient(one, 0, at_sv)) CHECK(v == 0.0);
  const std::vector<double> shifted = {1.0, 0.0, 0.0};
  CHECK(std::abs(svm_input_gradient(one, 0, shifted)[0] - (-2.0 * 0.01 * std::exp(-0.01))) < 1e-15);
  CHECK(svm_scores(one, at_sv)[0] == 1.0);

  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    const auto svm = random_svm(rng, 2, 4, 7, 0.2);
    const auto z = mt::random_vector(4, rng, 2.0);
    for (std::size_t k = 0; k < 2; ++k) {
      const auto g = svm_input_gradient(svm, k, z);
      const auto fd = mt::fd_gradient([&](std::span<const double> v) { return svm_scores(svm, v)[k]; }, z, 1e-5);
      for (std::size_t d = 0; d < 4; ++d) CHECK(std::abs(g[d] - fd[d]) < 1e-6);
    }
  }
}

TEST_CASE("htrd descent trace is non-increasing within tolerance") {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    auto m = mt::small_model(rng);
    auto svm = random_svm(rng, 3, m.feature_size(), 6, 0.05);
    svm.threshold = 5.0;  // never escapes: exercises the full descent
    const auto x = mt::random_vector(16, rng);
    const auto cfg = AttackConfig::for_budget(2.0, 0.1, 30, 1e-5);
    const auto r = attack_htrd(m, svm, x, 0, cfg);
    double prev = htrd_objective(m, svm, x, 0);
    for (double v : r.objective_trace) {
      CHECK(v <= prev + cfg.tol);
      prev = v;
    }
  }
}

TEST_CASE("twofold attack returns immediately when already successful") {
  Rng rng(10);
  auto m = mt::small_model(rng);
  const auto x = mt::random_vector(16, rng);
  const std::size_t wrong = (nn::predict(m, x) + 1) % 3;
  Autoencoder ae{nn::make_autoencoder(8), std::numeric_limits<double>::infinity()};
  Rng init(1);
  ae.net.init(init);
  const auto r = attack_twofold(m, ae, x, wrong, AttackConfig::for_budget(1.0));
  CHECK(r.success);
  CHECK(r.iters_used == 0);
  CHECK(r.x_adv == x);
}

TEST_CASE("twofold joint success is re-verified independently") {
  Rng rng(11);
  int successes = 0;
  for (int t = 0; t < 30; ++t) {
    auto m = mt::small_model(rng);
    Autoencoder ae{nn::make_autoencoder(8), 0.0};
    Rng init(static_cast<std::uint64_t>(t));
    ae.net.init(init);
    const auto x = mt::random_vector(16, rng);
    ae.mse_threshold = ae_mse(ae.net, x) * 1.05;
    const std::size_t y = nn::predict(m, x);
    const auto r = attack_twofold(m, ae, x, y, AttackConfig::for_budget(1.5, 0.1, 50));
    if (r.success) {
      ++successes;
      CHECK(nn::argmax(nn::forward(m, r.x_adv).logits) != y);
      CHECK(ae_mse(ae.net, r.x_adv) <= ae.mse_threshold);
    }
  }
  CHECK(successes > 0);
}

TEST_CASE("attack input validation") {
  Rng rng(12);
  auto m = mt::small_model(rng);
  const auto x = mt::random_vector(16, rng);
  AttackConfig bad;
  bad.epsilon = -1.0;
  CHECK_THROWS_AS(pgd_untargeted(m, x, 0, bad), InvalidArgument);
  CHECK_THROWS_AS(pgd_untargeted(m, x, 7, AttackConfig::for_budget(1.0)), InvalidArgument);
  CHECK_THROWS_AS(project_l2(x, std::vector<double>(3, 0.0), 1.0), ShapeError);
}
