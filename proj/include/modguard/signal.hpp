#pragma once

// Synthetic labelled IQ frames and the l2 attack budget derived from PNR/SNR.
//
// Linear modulations are random symbols at 8 samples/symbol shaped with a
// root-raised-cosine pulse (rolloff 0.35). Frequency-shift keyed classes use
// continuous-phase modulation of random bits; analog classes modulate a random
// tone plus band-limited noise. Every clean frame is normalised to unit mean
// complex power before complex AWGN is added, so the nominal SNR tag is the
// ratio of clean power to injected noise power.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modguard/error.hpp"
#include "modguard/rng.hpp"

namespace modguard {

enum class Modulation : std::uint8_t {
  BPSK,
  QPSK,
  PSK8,
  QAM16,
  QAM64,
  CPFSK,
  GFSK,
  PAM4,
  WBFM,
  AM_SSB,
  AM_DSB,
};

inline constexpr std::array<std::string_view, 11> kModulationNames = {
    "BPSK", "QPSK", "8PSK", "QAM16", "QAM64", "CPFSK", "GFSK", "PAM4", "WBFM", "AM-SSB", "AM-DSB"};

inline std::string_view modulation_name(Modulation m) { return kModulationNames[static_cast<std::size_t>(m)]; }

inline Modulation parse_modulation(std::string_view name) {
  for (std::size_t i = 0; i < kModulationNames.size(); ++i) {
    if (kModulationNames[i] == name) return static_cast<Modulation>(i);
  }
  throw InvalidArgument("unsupported modulation '" + std::string(name) + "'");
}

inline std::vector<std::string> all_modulation_names() {
  return {kModulationNames.begin(), kModulationNames.end()};
}

/// One labelled 2xN frame. Row 0 holds in-phase samples, row 1 quadrature.
struct IQFrame {
  std::vector<float> samples;
  std::uint16_t label = 0;
  double snr_db = 0.0;

  std::size_t length() const { return samples.size() / 2; }
  std::span<const float> in_phase() const { return {samples.data(), length()}; }
  std::span<const float> quadrature() const { return {samples.data() + length(), length()}; }

  bool operator==(const IQFrame&) const = default;
};

enum class Split : std::uint8_t { Train = 0, Test = 1 };

/// Whether a dataset holds generated frames or attack outputs.
enum class Provenance : std::uint8_t { Clean = 0, Adversarial = 1 };

struct Dataset {
  std::vector<std::string> class_names;
  std::size_t frame_length = 0;
  std::vector<IQFrame> frames;
  std::vector<Split> splits;
  Provenance provenance = Provenance::Clean;

  std::size_t num_classes() const { return class_names.size(); }

  std::size_t num_snr_levels() const {
    std::vector<double> levels;
    for (const auto& f : frames) levels.push_back(f.snr_db);
    std::sort(levels.begin(), levels.end());
    return static_cast<std::size_t>(std::unique(levels.begin(), levels.end()) - levels.begin());
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

/// Sum of squares over all 2N entries.
inline double signal_power(std::span<const float> samples) {
  double acc = 0.0;
  for (float v : samples) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

inline double signal_power(std::span<const double> samples) {
  double acc = 0.0;
  for (double v : samples) acc += v * v;
  return acc;
}

inline double signal_power(const IQFrame& x) { return signal_power(std::span<const float>(x.samples)); }

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

struct PerturbationBudget {
  double pnr_db = 0.0;
  double snr_db = 0.0;
  double epsilon = 0.0;
};

/// l2 radius for a perturbation whose power is `pnr` times the noise power,
/// where the frame's total power splits as signal + noise = (SNR + 1) * noise.
inline PerturbationBudget epsilon_from_pnr(double power, double pnr_db, double snr_db) {
  const double pnr = db_to_linear(pnr_db);
  const double snr = db_to_linear(snr_db);
  return {pnr_db, snr_db, std::sqrt(pnr * power / (snr + 1.0))};
}

inline PerturbationBudget epsilon_from_pnr(const IQFrame& x, double pnr_db, double snr_db) {
  return epsilon_from_pnr(signal_power(x), pnr_db, snr_db);
}

namespace detail {

inline constexpr std::size_t kSamplesPerSymbol = 8;
inline constexpr std::size_t kRrcSpanSymbols = 4;
inline constexpr double kRrcRolloff = 0.35;

/// Unit-energy root-raised-cosine taps spanning +-span symbols.
inline std::vector<double> rrc_taps(std::size_t sps, std::size_t span, double beta) {
  const std::size_t n = 2 * span * sps + 1;
  std::vector<double> h(n);
  const double pi = std::numbers::pi;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = (static_cast<double>(k) - static_cast<double>(span * sps)) / static_cast<double>(sps);
    double v;
    if (std::abs(t) < 1e-12) {
      v = 1.0 - beta + 4.0 * beta / pi;
    } else if (std::abs(std::abs(4.0 * beta * t) - 1.0) < 1e-9) {
      v = beta / std::sqrt(2.0) *
          ((1.0 + 2.0 / pi) * std::sin(pi / (4.0 * beta)) + (1.0 - 2.0 / pi) * std::cos(pi / (4.0 * beta)));
    } else {
      v = (std::sin(pi * t * (1.0 - beta)) + 4.0 * beta * t * std::cos(pi * t * (1.0 + beta))) /
          (pi * t * (1.0 - (4.0 * beta * t) * (4.0 * beta * t)));
    }
    h[k] = v;
  }
  double energy = 0.0;
  for (double v : h) energy += v * v;
  for (double& v : h) v /= std::sqrt(energy);
  return h;
}

/// Gaussian frequency-pulse filter for GFSK, normalised to unit DC gain.
inline std::vector<double> gaussian_taps(std::size_t sps, double bt, std::size_t span) {
  const std::size_t n = 2 * span * sps + 1;
  std::vector<double> h(n);
  const double sigma = std::sqrt(std::log(2.0)) / (2.0 * std::numbers::pi * bt) * static_cast<double>(sps);
  double sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) - static_cast<double>(span * sps);
    h[k] = std::exp(-t * t / (2.0 * sigma * sigma));
    sum += h[k];
  }
  for (double& v : h) v /= sum;
  return h;
}

template <typename T>
std::vector<T> convolve_full(std::span<const T> x, std::span<const double> h) {
  std::vector<T> y(x.size() + h.size() - 1, T{});
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] == T{}) continue;
    for (std::size_t k = 0; k < h.size(); ++k) y[i + k] += x[i] * h[k];
  }
  return y;
}

/// Real band-limited message: a random tone plus low-pass filtered noise, unit RMS.
inline std::vector<double> analog_message(std::size_t len, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  // windowed-sinc low-pass, cutoff 0.03 cycles/sample
  constexpr std::size_t taps = 63;
  constexpr double fc = 0.03;
  std::vector<double> lp(taps);
  for (std::size_t k = 0; k < taps; ++k) {
    const double m = static_cast<double>(k) - (taps - 1) / 2.0;
    const double sinc = m == 0.0 ? 2.0 * fc : std::sin(2.0 * std::numbers::pi * fc * m) / (std::numbers::pi * m);
    const double w = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / (taps - 1));
    lp[k] = sinc * w;
  }
  std::vector<double> white(len + taps);
  for (double& v : white) v = gauss(rng);
  auto noise = convolve_full<double>(white, lp);
  double nrms = 0.0;
  for (std::size_t i = 0; i < len; ++i) nrms += noise[taps - 1 + i] * noise[taps - 1 + i];
  nrms = std::sqrt(nrms / static_cast<double>(len));

  const double f0 = 0.004 + 0.016 * uni(rng);
  const double phi = 2.0 * std::numbers::pi * uni(rng);
  std::vector<double> m(len);
  double rms = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    m[i] = std::cos(2.0 * std::numbers::pi * f0 * static_cast<double>(i) + phi) +
           0.7 * noise[taps - 1 + i] / std::max(nrms, 1e-12);
    rms += m[i] * m[i];
  }
  rms = std::sqrt(rms / static_cast<double>(len));
  for (double& v : m) v /= std::max(rms, 1e-12);
  return m;
}

/// Quadrature component of a real signal via a windowed FIR Hilbert transformer.
inline std::vector<double> hilbert(std::span<const double> x) {
  constexpr std::size_t taps = 63;
  constexpr std::size_t half = (taps - 1) / 2;
  std::vector<double> h(taps, 0.0);
  for (std::size_t k = 0; k < taps; ++k) {
    const auto m = static_cast<long>(k) - static_cast<long>(half);
    if (m % 2 != 0) {
      const double w = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / (taps - 1));
      h[k] = 2.0 / (std::numbers::pi * static_cast<double>(m)) * w;
    }
  }
  auto full = convolve_full<double>(x, h);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = full[i + half];
  return y;
}

inline std::vector<std::complex<double>> constellation(Modulation mod) {
  using C = std::complex<double>;
  std::vector<C> pts;
  switch (mod) {
    case Modulation::BPSK:
      pts = {C(-1, 0), C(1, 0)};
      break;
    case Modulation::QPSK:
      for (int k = 0; k < 4; ++k) pts.push_back(std::polar(1.0, std::numbers::pi / 4 + k * std::numbers::pi / 2));
      break;
    case Modulation::PSK8:
      for (int k = 0; k < 8; ++k) pts.push_back(std::polar(1.0, k * std::numbers::pi / 4));
      break;
    case Modulation::QAM16:
      for (int i = -3; i <= 3; i += 2)
        for (int q = -3; q <= 3; q += 2) pts.emplace_back(i, q);
      break;
    case Modulation::QAM64:
      for (int i = -7; i <= 7; i += 2)
        for (int q = -7; q <= 7; q += 2) pts.emplace_back(i, q);
      break;
    case Modulation::PAM4:
      pts = {C(-3, 0), C(-1, 0), C(1, 0), C(3, 0)};
      break;
    default:
      break;
  }
  return pts;
}

inline bool is_linear(Modulation m) {
  switch (m) {
    case Modulation::BPSK:
    case Modulation::QPSK:
    case Modulation::PSK8:
    case Modulation::QAM16:
    case Modulation::QAM64:
    case Modulation::PAM4:
      return true;
    default:
      return false;
  }
}

/// Noise-free baseband of length n, not yet power normalised.
inline std::vector<std::complex<double>> clean_baseband(Modulation mod, std::size_t n, Rng& rng) {
  using C = std::complex<double>;
  const std::size_t sps = kSamplesPerSymbol;
  std::uniform_int_distribution<std::size_t> offset_dist(0, sps - 1);
  std::vector<C> out(n);

  if (is_linear(mod)) {
    static const auto rrc = rrc_taps(sps, kRrcSpanSymbols, kRrcRolloff);
    const auto pts = constellation(mod);
    std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
    const std::size_t nsym = (rrc.size() - 1 + sps + n + sps - 1) / sps;
    std::vector<C> up(nsym * sps, C{});
    for (std::size_t s = 0; s < nsym; ++s) up[s * sps] = pts[pick(rng)];
    auto y = convolve_full<C>(up, rrc);
    const std::size_t start = rrc.size() - 1 + offset_dist(rng);
    std::copy(y.begin() + static_cast<long>(start), y.begin() + static_cast<long>(start + n), out.begin());
    return out;
  }

  if (mod == Modulation::CPFSK || mod == Modulation::GFSK) {
    // Continuous-phase FSK, modulation index 0.5; GFSK smooths the frequency pulse (BT 0.35).
    const double h_index = 0.5;
    const std::size_t guard = 4;
    const std::size_t nsym = n / sps + 2 * guard + 2;
    std::bernoulli_distribution bit(0.5);
    std::vector<double> freq(nsym * sps);
    for (std::size_t s = 0; s < nsym; ++s) {
      const double b = bit(rng) ? 1.0 : -1.0;
      for (std::size_t k = 0; k < sps; ++k) freq[s * sps + k] = b;
    }
    if (mod == Modulation::GFSK) {
      static const auto g = gaussian_taps(sps, 0.35, 2);
      auto smooth = convolve_full<double>(freq, g);
      const std::size_t delay = (g.size() - 1) / 2;
      for (std::size_t i = 0; i < freq.size(); ++i) freq[i] = smooth[i + delay];
    }
    std::vector<double> phase(freq.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < freq.size(); ++i) {
      acc += std::numbers::pi * h_index * freq[i] / static_cast<double>(sps);
      phase[i] = acc;
    }
    const std::size_t start = guard * sps + offset_dist(rng);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::polar(1.0, phase[start + i]);
    return out;
  }

  const auto msg = analog_message(n + 64, rng);
  switch (mod) {
    case Modulation::WBFM: {
      // peak deviation around 0.1 cycles/sample
      double acc = 0.0;
      std::vector<double> phase(msg.size());
      for (std::size_t i = 0; i < msg.size(); ++i) {
        acc += 2.0 * std::numbers::pi * 0.08 * msg[i];
        phase[i] = acc;
      }
      for (std::size_t i = 0; i < n; ++i) out[i] = std::polar(1.0, phase[32 + i]);
      break;
    }
    case Modulation::AM_DSB:
      for (std::size_t i = 0; i < n; ++i) out[i] = C(1.0 + 0.5 * msg[32 + i], 0.0);
      break;
    case Modulation::AM_SSB: {
      const auto q = hilbert(msg);
      for (std::size_t i = 0; i < n; ++i) out[i] = C(msg[32 + i], q[32 + i]);
      break;
    }
    default:
      throw InvalidArgument("unsupported modulation '" + std::string(modulation_name(mod)) + "'");
  }
  return out;
}

} // namespace detail

/// Clean and noise components of a frame before they are summed, in double precision.
struct FrameComponents {
  std::vector<double> clean;  // 2N, unit mean complex power
  std::vector<double> noise;  // 2N
};

inline FrameComponents synth_components(Modulation mod, double snr_db, std::size_t n, std::uint64_t seed) {
  if (n < 16) throw InvalidArgument("frame length must be at least 16 samples");
  Rng rng(seed);
  const auto base = detail::clean_baseband(mod, n, rng);
  double power = 0.0;
  for (const auto& v : base) power += std::norm(v);
  power /= static_cast<double>(n);
  const double scale = power > 0.0 ? 1.0 / std::sqrt(power) : 0.0;

  FrameComponents fc;
  fc.clean.resize(2 * n);
  fc.noise.assign(2 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    fc.clean[i] = base[i].real() * scale;
    fc.clean[n + i] = base[i].imag() * scale;
  }
  if (!(std::isinf(snr_db) && snr_db > 0)) {
    const double sigma = std::sqrt(db_to_linear(-snr_db) / 2.0);
    std::normal_distribution<double> gauss(0.0, sigma);
    for (double& v : fc.noise) v = gauss(rng);
  }
  return fc;
}

/// Generate one labelled frame. `snr_db = +inf` yields the noise-free signal.
inline IQFrame synth_frame(Modulation mod, double snr_db, std::size_t n, std::uint64_t seed, std::uint16_t label) {
  const auto fc = synth_components(mod, snr_db, n, seed);
  IQFrame f;
  f.label = label;
  f.snr_db = snr_db;
  f.samples.resize(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) f.samples[i] = static_cast<float>(fc.clean[i] + fc.noise[i]);
  return f;
}

inline IQFrame synth_frame(Modulation mod, double snr_db, std::size_t n, std::uint64_t seed) {
  return synth_frame(mod, snr_db, n, seed, static_cast<std::uint16_t>(mod));
}

struct DatasetConfig {
  std::vector<std::string> classes = all_modulation_names();
  std::vector<double> snr_grid = {10.0};
  std::size_t frames_per_cell = 200;
  std::size_t n = 128;
  double split_ratio = 0.5;  // fraction of each cell assigned to train
  std::uint64_t seed = 0;
};

/// Frames are laid out cell-major (class, then SNR, then repetition). Within a
/// cell the first round(ratio * frames_per_cell) frames are training frames,
/// clamped so both splits keep at least one frame per cell.
inline Dataset gen_dataset(const DatasetConfig& cfg) {
  if (cfg.classes.empty()) throw InvalidArgument("dataset needs at least one class");
  if (cfg.snr_grid.empty()) throw InvalidArgument("dataset needs at least one SNR level");
  if (cfg.frames_per_cell < 2) throw InvalidArgument("frames_per_cell must be at least 2");
  if (!(cfg.split_ratio > 0.0 && cfg.split_ratio < 1.0)) throw InvalidArgument("split_ratio must lie in (0, 1)");
  if (cfg.classes.size() > 0xFFFF) throw InvalidArgument("too many classes");

  std::vector<Modulation> mods;
  for (const auto& name : cfg.classes) mods.push_back(parse_modulation(name));
  {
    auto sorted = cfg.classes;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw InvalidArgument("duplicate class names");
  }

  auto train_per_cell = static_cast<std::size_t>(std::llround(cfg.split_ratio * static_cast<double>(cfg.frames_per_cell)));
  train_per_cell = std::clamp<std::size_t>(train_per_cell, 1, cfg.frames_per_cell - 1);

  Dataset d;
  d.class_names = cfg.classes;
  d.frame_length = cfg.n;
  const std::size_t total = mods.size() * cfg.snr_grid.size() * cfg.frames_per_cell;
  d.frames.reserve(total);
  d.splits.reserve(total);
  const std::uint64_t stream = substream_seed(cfg.seed, "data");
  std::uint64_t index = 0;
  for (std::size_t c = 0; c < mods.size(); ++c) {
    for (double snr : cfg.snr_grid) {
      const double snr_q = std::round(snr * 100.0) / 100.0;  // centi-dB, matches the file encoding
      for (std::size_t r = 0; r < cfg.frames_per_cell; ++r, ++index) {
        d.frames.push_back(synth_frame(mods[c], snr_q, cfg.n, indexed_seed(stream, index), static_cast<std::uint16_t>(c)));
        d.splits.push_back(r < train_per_cell ? Split::Train : Split::Test);
      }
    }
  }
  return d;
}

} // namespace modguard
