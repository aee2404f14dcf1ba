#pragma once

// Reconstruction-error detector for the two-fold baseline: a dense
// autoencoder trained on benign frames, flagging inputs whose mean squared
// reconstruction error exceeds a calibrated threshold.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "modguard/binary_io.hpp"
#include "modguard/checkpoint.hpp"
#include "modguard/nn.hpp"
#include "modguard/rng.hpp"
#include "modguard/svm.hpp"

namespace modguard {

struct Autoencoder {
  nn::Model net;
  double mse_threshold = std::numeric_limits<double>::infinity();
};

/// Mean over all 2N entries of (h(x) - x)^2.
inline double ae_mse(const nn::Model& net, std::span<const double> x) {
  const auto t = nn::forward_trace(net, x);
  const auto out = t.output();
  if (out.size() != x.size()) throw ShapeError("autoencoder output width differs from its input");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = out[i] - x[i];
    s += d * d;
  }
  return s / static_cast<double>(x.size());
}

struct AeDetection {
  double mse = 0.0;
  bool flagged = false;
};

inline AeDetection ae_detect(const Autoencoder& h, std::span<const double> x) {
  const double mse = ae_mse(h.net, x);
  return {mse, mse > h.mse_threshold};
}

/// Gradient of ae_mse with respect to the input (the input appears on both sides).
inline std::vector<double> ae_mse_input_gradient(const nn::Model& net, std::span<const double> x) {
  const auto t = nn::forward_trace(net, x);
  const auto out = t.output();
  const double scale = 2.0 / static_cast<double>(x.size());
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r[i] = scale * (out[i] - x[i]);
  std::vector<double> dx;
  nn::backward(net, t, net.layers().size(), r, nullptr, &dx);
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] -= r[i];
  return dx;
}

struct AeTrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

/// Fit the autoencoder on benign inputs (n rows of 2N values) by minibatch SGD on the MSE.
inline nn::Model ae_fit(std::span<const std::vector<double>> inputs, std::size_t frame_length,
                        const AeTrainConfig& cfg, std::vector<double>* loss_log = nullptr) {
  if (inputs.empty()) throw InvalidArgument("autoencoder needs training frames");
  auto net = nn::make_autoencoder(frame_length);
  Rng init_rng(substream_seed(cfg.seed, "ae-init"));
  net.init(init_rng);
  nn::Sgd opt(cfg.lr, cfg.momentum);
  Rng shuffle_rng(substream_seed(cfg.seed, "ae-shuffle"));
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      auto g = net.zero_grads();
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const auto& x = inputs[order[b]];
        const auto t = nn::forward_trace(net, x);
        const auto out = t.output();
        std::vector<double> r(x.size());
        double l = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double d = out[i] - x[i];
          l += d * d;
          r[i] = 2.0 * d / static_cast<double>(x.size()) * inv_b;
        }
        epoch_loss += l / static_cast<double>(x.size());
        nn::backward(net, t, net.layers().size(), std::move(r), &g, nullptr);
      }
      opt.step(net, g);
    }
    if (loss_log) loss_log->push_back(epoch_loss / static_cast<double>(inputs.size()));
  }
  return net;
}

/// Set the flag threshold so `rate` of the benign inputs are flagged.
inline double ae_calibrate(Autoencoder& h, std::span<const std::vector<double>> benign, double rate,
                           std::size_t min_samples = kMinCalibrationSamples) {
  if (!(rate > 0.0 && rate < 1.0)) throw InvalidArgument("target flag rate must lie in (0, 1)");
  std::vector<double> mse;
  mse.reserve(benign.size());
  for (const auto& x : benign) mse.push_back(ae_mse(h.net, x));
  h.mse_threshold = flag_threshold(std::move(mse), rate, min_samples);
  return h.mse_threshold;
}

// MGA1: magic, f64 threshold, then an embedded MGM1 model.
inline void save_autoencoder(const Autoencoder& h, const std::string& path) {
  io::ByteWriter w;
  w.put_bytes("MGA1");
  w.put(h.mse_threshold);
  encode_model(h.net, std::move(w)).write_file(path);
}

inline Autoencoder load_autoencoder(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  if (r.remaining() < 12) throw MalformedHeaderError("autoencoder file too short for a header");
  const auto magic = r.get_bytes(4);
  if (magic.substr(0, 3) != "MGA") throw MalformedHeaderError("not an MGA autoencoder file");
  if (magic[3] != '1') throw VersionMismatchError("unsupported autoencoder format version");
  Autoencoder h;
  h.mse_threshold = r.get<double>();
  h.net = decode_model(r);
  return h;
}

} // namespace modguard
