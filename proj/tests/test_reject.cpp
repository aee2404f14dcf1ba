#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "modguard/autoencoder.hpp"
#include "modguard/svm.hpp"
#include "support.hpp"

using namespace modguard;
using Catch::Approx;
namespace mt = modguard::testing;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("modguard_test_" + name);
}

} // namespace

TEST_CASE("SMO solutions satisfy the KKT conditions") {
  Rng rng(1);
  for (double gamma : {0.01, 0.3}) {
    const auto b = mt::blobs(40, 3, 4, 2.0, rng);
    std::vector<std::vector<double>> alphas;
    SvmTrainOptions opt;
    opt.gamma = gamma;
    const auto svm = svm_train(b.x, b.y, 3, opt, &alphas);
    REQUIRE(svm.num_classes() == 3);
    const std::size_t n = b.y.size(), f = 4;
    for (std::size_t k = 0; k < 3; ++k) {
      double balance = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double yi = b.y[i] == k ? 1.0 : -1.0;
        const double a = alphas[k][i];
        REQUIRE(a >= 0.0);
        REQUIRE(a <= opt.c);
        balance += a * yi;
        std::vector<double> z(b.x.begin() + static_cast<long>(i * f), b.x.begin() + static_cast<long>((i + 1) * f));
        for (double& v : z) v = static_cast<float>(v);
        const double margin = yi * machine_score(svm.machines[k], gamma, z);
        if (a == 0.0)
          CHECK(margin >= 1.0 - 1e-3);
        else if (a == opt.c)
          CHECK(margin <= 1.0 + 1e-3);
        else
          CHECK(std::abs(margin - 1.0) <= 1e-3);
      }
      CHECK(std::abs(balance) < 1e-9);
      const auto nsv = static_cast<std::size_t>(std::count_if(alphas[k].begin(), alphas[k].end(), [](double a) { return a > 0; }));
      CHECK(svm.machines[k].num_support_vectors() == nsv);
    }
  }
}

TEST_CASE("SVM scores agree with a brute-force kernel sum") {
  Rng rng(2);
  const auto b = mt::blobs(30, 4, 5, 1.5, rng);
  const auto svm = svm_train(b.x, b.y, 4);
  CHECK(svm.gamma == 0.01);
  for (int t = 0; t < 50; ++t) {
    const auto z = mt::random_vector(5, rng, 3.0);
    const auto s = svm_scores(svm, z);
    for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(s[k] - mt::brute_score(svm.machines[k], svm.gamma, z)) < 1e-8);
  }
}

TEST_CASE("two mirrored points give mirrored machines") {
  const std::vector<double> x = {1.0, 0.0, -1.0, 0.0};
  const std::vector<std::size_t> y = {0, 1};
  SvmTrainOptions opt;
  opt.gamma = 0.5;
  const auto svm = svm_train(x, y, 2, opt);
  CHECK(std::abs(svm.machines[0].bias) < 1e-9);
  const std::vector<double> p = {1.0, 0.0}, q = {-1.0, 0.0};
  CHECK(svm_scores(svm, p)[0] == Approx(svm_scores(svm, q)[1]).margin(1e-12));
  CHECK(svm_scores(svm, p)[0] > 0.0);
  CHECK(svm_scores(svm, std::vector<double>{0.0, 3.0})[0] == Approx(0.0).margin(1e-9));
}

TEST_CASE("lone support vector scores one at itself") {
  SvmModel s;
  s.feature_dim = 2;
  s.machines.push_back({{0.5f, -1.0f}, {1.0}, 0.0});
  CHECK(svm_scores(s, std::vector<double>{0.5, -1.0})[0] == 1.0);
  CHECK(svm_scores(s, std::vector<double>{1.5, -1.0})[0] == Approx(std::exp(-0.01)));
  CHECK_THROWS_AS(svm_scores(s, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("SVM training errors") {
  const std::vector<double> x = {0.0, 1.0, 2.0};
  CHECK_THROWS_AS(svm_train(x, std::vector<std::size_t>{0, 0, 0}, 1), InvalidArgument);
  CHECK_THROWS_AS(svm_train(x, std::vector<std::size_t>{0, 0, 0}, 2), InvalidArgument);
  CHECK_THROWS_AS(svm_train(x, std::vector<std::size_t>{0, 1}, 2), ShapeError);
  SvmTrainOptions bad;
  bad.gamma = 0.0;
  CHECK_THROWS_AS(svm_train(x, std::vector<std::size_t>{0, 1, 0}, 2, bad), InvalidArgument);
}

TEST_CASE("reject decision rule") {
  CHECK(decide({0.2, 0.7, 0.1}, 0.5).label == 1u);
  CHECK(decide({0.2, 0.7, 0.1}, 0.7).rejected());
  CHECK(decide({0.4, 0.4}, -1.0).label == 0u);
  CHECK(decide({-5.0, -4.0}, -std::numeric_limits<double>::infinity()).label == 1u);
}

TEST_CASE("threshold calibration quantiles") {
  std::vector<double> s(10);
  std::iota(s.begin(), s.end(), 1.0);
  CHECK(reject_threshold(s, 0.1, 0) == 1.5);
  CHECK(reject_threshold(s, 0.0, 0) < 1.0);
  CHECK(reject_threshold(s, 0.5, 0) == 5.5);
  CHECK(flag_threshold(s, 0.1, 0) == 9.5);
  CHECK_THROWS_AS(reject_threshold(s, 0.1), InvalidArgument);  // fewer than 100 samples
  CHECK_THROWS_AS(reject_threshold(s, 1.0, 0), InvalidArgument);

  Rng rng(3);
  std::vector<double> v = mt::random_vector(1000, rng);
  const double t1 = reject_threshold(v, 0.1);
  CHECK(std::count_if(v.begin(), v.end(), [&](double x) { return x <= t1; }) == 100);
  // shifting every score shifts the threshold by the same amount
  auto shifted = v;
  for (double& x : shifted) x += 3.25;
  CHECK(reject_threshold(shifted, 0.1) == Approx(t1 + 3.25).epsilon(1e-14));
  // higher target rate never lowers the threshold
  double prev = -std::numeric_limits<double>::infinity();
  for (double r = 0.0; r < 0.95; r += 0.05) {
    const double t = reject_threshold(v, r);
    CHECK(t >= prev);
    prev = t;
  }
}

TEST_CASE("calibrate_threshold hits the target on its own sample") {
  Rng rng(4);
  const auto b = mt::blobs(60, 3, 4, 1.0, rng);
  auto svm = svm_train(b.x, b.y, 3);
  const double t = calibrate_threshold(svm, b.x, 0.1);
  CHECK(svm.threshold == t);
  std::size_t rejected = 0;
  for (std::size_t i = 0; i < b.y.size(); ++i)
    rejected += classify_with_rejection(svm, std::span<const double>(b.x).subspan(i * 4, 4)).rejected();
  CHECK(rejected == 18);
  CHECK_THROWS_AS(calibrate_threshold(svm, b.x, 0.0), InvalidArgument);
}

TEST_CASE("MGS1 round trip and errors") {
  Rng rng(5);
  const auto b = mt::blobs(20, 3, 3, 2.0, rng);
  auto svm = svm_train(b.x, b.y, 3);
  svm.threshold = 0.125;
  const auto path = temp_file("svm.mgs").string();
  save_svm(svm, path);
  CHECK(load_svm(path) == svm);

  auto bytes = encode_svm(svm).bytes();
  bytes[3] = '2';
  io::ByteReader wrong_version(bytes);
  CHECK_THROWS_AS(decode_svm(wrong_version), VersionMismatchError);
  bytes[0] = 'X';
  io::ByteReader wrong_magic(bytes);
  CHECK_THROWS_AS(decode_svm(wrong_magic), MalformedHeaderError);
  auto cut = encode_svm(svm).bytes();
  cut.resize(cut.size() - 9);
  io::ByteReader truncated(cut);
  CHECK_THROWS_AS(decode_svm(truncated), TruncatedPayloadError);
  CHECK_THROWS_AS(load_svm(temp_file("missing.mgs").string()), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("autoencoder reconstruction error") {
  // single dense layer set to the identity reconstructs perfectly
  nn::Model id({1, 2, 4}, {nn::LayerSpec::dense(8)}, 0);
  auto w = id.parameters()[0];
  for (std::size_t i = 0; i < 8; ++i) w[i * 8 + i] = 1.0;
  Rng rng(6);
  const auto x = mt::random_vector(8, rng);
  CHECK(ae_mse(id, x) == 0.0);
  id.parameters()[1][2] = 0.5;  // bias on one output
  CHECK(ae_mse(id, x) == Approx(0.25 / 8.0));

  auto net = nn::make_autoencoder(4);
  Rng init(7);
  net.init(init);
  for (int t = 0; t < 10; ++t) {
    const auto v = mt::random_vector(8, rng);
    const auto tr = nn::forward_trace(net, v);
    const auto out = tr.output();
    double s = 0.0;
    for (std::size_t i = 0; i < 8; ++i) s += (out[i] - v[i]) * (out[i] - v[i]);
    CHECK(ae_mse(net, v) == Approx(s / 8.0).epsilon(1e-14));
    const auto g = ae_mse_input_gradient(net, v);
    const auto fd = mt::fd_gradient([&](std::span<const double> p) { return ae_mse(net, p); }, v);
    CHECK(mt::rel_error(g, fd) < 1e-6);
  }
}

TEST_CASE("autoencoder calibration, detection and MGA1 round trip") {
  Rng rng(8);
  std::vector<std::vector<double>> benign;
  for (int i = 0; i < 200; ++i) benign.push_back(mt::random_vector(8, rng, 0.5));
  AeTrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 9;
  std::vector<double> losses;
  Autoencoder h{ae_fit(benign, 4, cfg, &losses), 0.0};
  CHECK(losses.size() == 5);
  CHECK(losses.back() < losses.front());
  ae_calibrate(h, benign, 0.1);
  std::size_t flagged = 0;
  for (const auto& x : benign) flagged += ae_detect(h, x).flagged;
  CHECK(flagged == 20);

  const auto path = temp_file("ae.mga").string();
  save_autoencoder(h, path);
  const auto back = load_autoencoder(path);
  CHECK(back.mse_threshold == h.mse_threshold);
  auto stored = h.net;
  stored.round_to_float();  // checkpoints hold float32 parameters
  CHECK(ae_mse(back.net, benign[0]) == ae_mse(stored, benign[0]));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(ae_calibrate(h, benign, 1.0), InvalidArgument);
  CHECK_THROWS_AS(ae_fit({}, 4, cfg), InvalidArgument);
}
