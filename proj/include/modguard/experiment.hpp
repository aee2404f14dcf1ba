#pragma once

// End-to-end experiment: generate data, train the four classifiers, fit and
// calibrate the rejection heads, then sweep every defense over a PNR grid.
// Shared by `modguard repro` and the acceptance suite.
//
// Split usage. The training half of every cell trains the networks, the SVMs
// and the autoencoder. The test half is halved again per class: the first
// half calibrates thresholds, the second is the evaluation split. Attacks
// run on a class-balanced prefix of the evaluation split.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "modguard/autoencoder.hpp"
#include "modguard/checkpoint.hpp"
#include "modguard/config.hpp"
#include "modguard/dataset_io.hpp"
#include "modguard/eval.hpp"
#include "modguard/svg.hpp"
#include "modguard/svm.hpp"
#include "modguard/train.hpp"

namespace modguard {

struct CatParams {
  // Relative defaults scale with the data: eps_max = fraction * median |x|,
  // eta = eps_max / levels, c = c_eps_max / eps_max. Absolute values win when set.
  double eps_max_fraction = 0.1;
  std::size_t levels = 20;
  double c_eps_max = 0.5;
  double eps_max = 0.0, eta = 0.0, c = 0.0;  // 0 = derive

  struct Resolved {
    double eps_max, eta, c;
  };

  Resolved resolve(double median_frame_norm) const {
    Resolved r{eps_max, eta, c};
    if (r.eps_max <= 0.0) r.eps_max = eps_max_fraction * median_frame_norm;
    if (r.eta <= 0.0) {
      if (levels == 0) throw InvalidArgument("CAT needs at least one radius level");
      r.eta = r.eps_max / static_cast<double>(levels);
    }
    if (r.c <= 0.0) r.c = r.eps_max > 0.0 ? c_eps_max / r.eps_max : 0.0;
    if (r.c * r.eps_max > 1.0 + 1e-12)
      throw InvalidArgument("CAT requires c * eps_max <= 1 (got " + std::to_string(r.c * r.eps_max) + ")");
    return r;
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetConfig data;
  TrainConfig train;
  CatParams cat;
  double lsgna_sigma_fraction = 0.05;  // of the clean-frame RMS
  double lsgna_alpha = 0.1;
  double at_pnr_db = -15.0;  // two-fold classifier re-trained at this budget for the median frame
  AeTrainConfig ae;
  SvmTrainOptions svm;
  double reject_rate = 0.10;
  EvalAttackParams attack;
  std::size_t attack_frames = 200;
  std::vector<double> pnr_grid = {-20, -15, -10, -5, 0};
  std::size_t pca_dims = 2;

  static ExperimentConfig from(const config::Config& c) {
    ExperimentConfig e;
    e.seed = c.seed("seed");
    e.data.classes = c.texts("data.classes", e.data.classes);
    e.data.snr_grid = c.numbers("data.snr_db", e.data.snr_grid);
    e.data.frames_per_cell = c.count("data.frames_per_cell", e.data.frames_per_cell);
    e.data.n = c.count("data.frame_length", e.data.n);
    e.data.split_ratio = c.number("data.split_ratio", e.data.split_ratio);
    e.data.seed = e.seed;
    e.train.epochs = c.count("train.epochs", e.train.epochs);
    e.train.batch_size = c.count("train.batch_size", e.train.batch_size);
    e.train.lr = c.number("train.lr", e.train.lr);
    e.train.momentum = c.number("train.momentum", e.train.momentum);
    e.train.inner_steps = c.count("train.inner_steps", e.train.inner_steps);
    e.train.inner_step_fraction = c.number("train.inner_step_fraction", e.train.inner_step_fraction);
    e.train.seed = substream_seed(e.seed, "train");
    e.cat.eps_max_fraction = c.number("cat.eps_max_fraction", e.cat.eps_max_fraction);
    e.cat.levels = c.count("cat.levels", e.cat.levels);
    e.cat.c_eps_max = c.number("cat.c_eps_max", e.cat.c_eps_max);
    e.cat.eps_max = c.number("cat.eps_max", 0.0);
    e.cat.eta = c.number("cat.eta", 0.0);
    e.cat.c = c.number("cat.c", 0.0);
    e.lsgna_sigma_fraction = c.number("lsgna.sigma_fraction", e.lsgna_sigma_fraction);
    e.lsgna_alpha = c.number("lsgna.alpha", e.lsgna_alpha);
    e.at_pnr_db = c.number("twofold.at_pnr_db", e.at_pnr_db);
    e.ae.epochs = c.count("twofold.ae_epochs", e.ae.epochs);
    e.ae.batch_size = e.train.batch_size;
    e.ae.lr = c.number("twofold.ae_lr", e.ae.lr);
    e.ae.momentum = e.train.momentum;
    e.ae.seed = substream_seed(e.seed, "ae");
    e.svm.gamma = c.number("svm.gamma", e.svm.gamma);
    e.svm.c = c.number("svm.c", e.svm.c);
    e.svm.tol = c.number("svm.tol", e.svm.tol);
    e.reject_rate = c.number("reject.rate", e.reject_rate);
    e.attack.iters = c.count("attack.iters", e.attack.iters);
    e.attack.step_fraction = c.number("attack.step_fraction", e.attack.step_fraction);
    e.attack.tol = c.number("attack.tol", e.attack.tol);
    e.attack_frames = c.count("attack.frames", e.attack_frames);
    e.pnr_grid = c.numbers("eval.pnr_db", e.pnr_grid);
    e.pca_dims = c.count("eval.pca_dims", e.pca_dims);
    e.validate();
    return e;
  }

  void validate() const {
    train.validate();
    if (data.snr_grid.size() != 1) throw InvalidArgument("the experiment evaluates a single SNR level");
    if (!(reject_rate > 0.0 && reject_rate < 1.0)) throw InvalidArgument("reject.rate must lie in (0, 1)");
    if (attack_frames == 0) throw InvalidArgument("attack.frames must be positive");
    if (pca_dims != 2 && pca_dims != 3) throw InvalidArgument("eval.pca_dims must be 2 or 3");
    for (std::size_t i = 1; i < pnr_grid.size(); ++i)
      if (!(pnr_grid[i] > pnr_grid[i - 1])) throw InvalidArgument("eval.pnr_db must be strictly increasing");
    if (cat.eps_max > 0.0 && cat.c > 0.0 && cat.c * cat.eps_max > 1.0)
      throw InvalidArgument("CAT requires c * eps_max <= 1");
  }

  /// Every resolved setting, one per line; hashed into artifact headers.
  std::string canonical() const {
    std::ostringstream os;
    auto num = [](double v) { return detail::format_double(v); };
    auto list = [&](const std::vector<double>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + num(v[i]);
      return s;
    };
    os << "seed=" << seed << '\n';
    os << "data.classes=";
    for (std::size_t i = 0; i < data.classes.size(); ++i) os << (i ? "," : "") << data.classes[i];
    os << "\ndata.snr_db=" << list(data.snr_grid) << "\ndata.frames_per_cell=" << data.frames_per_cell
       << "\ndata.frame_length=" << data.n << "\ndata.split_ratio=" << num(data.split_ratio) << '\n';
    os << "train.epochs=" << train.epochs << "\ntrain.batch_size=" << train.batch_size << "\ntrain.lr=" << num(train.lr)
       << "\ntrain.momentum=" << num(train.momentum) << "\ntrain.inner_steps=" << train.inner_steps
       << "\ntrain.inner_step_fraction=" << num(train.inner_step_fraction) << '\n';
    os << "cat.eps_max_fraction=" << num(cat.eps_max_fraction) << "\ncat.levels=" << cat.levels
       << "\ncat.c_eps_max=" << num(cat.c_eps_max) << "\ncat.eps_max=" << num(cat.eps_max) << "\ncat.eta=" << num(cat.eta)
       << "\ncat.c=" << num(cat.c) << '\n';
    os << "lsgna.sigma_fraction=" << num(lsgna_sigma_fraction) << "\nlsgna.alpha=" << num(lsgna_alpha) << '\n';
    os << "twofold.at_pnr_db=" << num(at_pnr_db) << "\ntwofold.ae_epochs=" << ae.epochs << "\ntwofold.ae_lr=" << num(ae.lr)
       << '\n';
    os << "svm.gamma=" << num(svm.gamma) << "\nsvm.c=" << num(svm.c) << "\nsvm.tol=" << num(svm.tol) << '\n';
    os << "reject.rate=" << num(reject_rate) << '\n';
    os << "attack.iters=" << attack.iters << "\nattack.step_fraction=" << num(attack.step_fraction)
       << "\nattack.tol=" << num(attack.tol) << "\nattack.frames=" << attack_frames << '\n';
    os << "eval.pnr_db=" << list(pnr_grid) << "\neval.pca_dims=" << pca_dims << '\n';
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a64(canonical()); }
};

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

/// Test split halved per class: calibration frames first, evaluation frames second.
struct HeldOutSplits {
  std::vector<std::size_t> calibration;
  std::vector<std::size_t> evaluation;
};

inline HeldOutSplits held_out_splits(const Dataset& d) {
  std::vector<std::vector<std::size_t>> per_class(d.num_classes());
  for (auto i : d.indices(Split::Test)) per_class.at(d.frames[i].label).push_back(i);
  HeldOutSplits s;
  for (const auto& idx : per_class) {
    const std::size_t half = idx.size() / 2;
    s.calibration.insert(s.calibration.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(half));
    s.evaluation.insert(s.evaluation.end(), idx.begin() + static_cast<std::ptrdiff_t>(half), idx.end());
  }
  return s;
}

/// Up to `count` indices taken round-robin over classes, preserving order within a class.
inline std::vector<std::size_t> balanced_prefix(const Dataset& d, std::span<const std::size_t> pool, std::size_t count) {
  std::vector<std::vector<std::size_t>> per_class(d.num_classes());
  for (auto i : pool) per_class.at(d.frames[i].label).push_back(i);
  std::vector<std::size_t> out;
  for (std::size_t round = 0; out.size() < count; ++round) {
    bool any = false;
    for (const auto& idx : per_class) {
      if (round < idx.size() && out.size() < count) {
        out.push_back(idx[round]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

/// One-vs-all SVM on the classifier's feature layer, calibrated to `rate` on `calib`.
inline SvmModel fit_rejector(const nn::Model& m, const LabeledSet& train, const LabeledSet& calib, double rate,
                             const SvmTrainOptions& opt) {
  const auto f_train = feature_matrix(m, train);
  auto svm = svm_train(f_train, train.y, train.num_classes, opt);
  calibrate_threshold(svm, feature_matrix(m, calib), rate, kMinCalibrationSamples);
  return svm;
}

/// Fraction of `set` the SVM head rejects.
inline double rejection_rate(const nn::Model& m, const SvmModel& svm, const LabeledSet& set) {
  std::size_t rejected = 0;
  for (const auto& x : set.x) rejected += classify_with_rejection(svm, nn::forward(m, x).features).rejected();
  return set.size() ? static_cast<double>(rejected) / static_cast<double>(set.size()) : 0.0;
}

inline double flag_rate(const Autoencoder& ae, const LabeledSet& set) {
  std::size_t flagged = 0;
  for (const auto& x : set.x) flagged += ae_detect(ae, x).flagged;
  return set.size() ? static_cast<double>(flagged) / static_cast<double>(set.size()) : 0.0;
}

/// Clean accuracy of one defense, reported without and with its rejection stage.
struct CleanReport {
  std::string variant;
  std::size_t n = 0;
  double accuracy_plain = 0.0;     // softmax (or SVM argmax) decision, nothing rejected
  double accuracy_rejecting = 0.0; // correct and not rejected
  double rejected = 0.0;           // fraction rejected or flagged
  double accuracy_accepted = 0.0;  // correct among the frames not rejected
};

inline CleanReport clean_report(const DefenseUnderTest& dut, const LabeledSet& set) {
  CleanReport r;
  r.variant = std::string(variant_name(dut.variant));
  r.n = set.size();
  std::size_t plain = 0, strict = 0, rejected = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto v = verdict(dut, set.x[i], set.y[i]);
    if (dut.uses_svm()) {
      const auto s = svm_scores(*dut.svm, nn::forward(*dut.model, set.x[i]).features);
      plain += decide(s, -std::numeric_limits<double>::infinity()).label == set.y[i];
    } else {
      plain += v.correct;
    }
    strict += v.correct && !v.rejected;
    rejected += v.rejected;
  }
  const double n = static_cast<double>(set.size());
  r.accuracy_plain = static_cast<double>(plain) / n;
  r.accuracy_rejecting = static_cast<double>(strict) / n;
  r.rejected = static_cast<double>(rejected) / n;
  r.accuracy_accepted = rejected < set.size() ? static_cast<double>(strict) / (n - static_cast<double>(rejected)) : 0.0;
  return r;
}

struct CalibrationReport {
  std::string detector;
  std::size_t n_calibration = 0;
  double threshold = 0.0;
  double rate_calibration = 0.0;  // recount on the calibration split
  double rate_evaluation = 0.0;   // held-out evaluation split
  std::size_t n_evaluation = 0;
};

struct ExperimentResult {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  double median_norm = 0.0;
  CatParams::Resolved cat{};
  double lsgna_sigma = 0.0;
  double at_eps = 0.0;
  std::vector<SecurityCurve> curves;
  std::vector<CleanReport> clean;
  std::vector<CalibrationReport> calibration;
  std::vector<std::pair<std::string, double>> separation;
  std::vector<std::pair<std::string, PcaResult>> pca;
  std::vector<std::size_t> pca_labels;
  std::vector<std::pair<std::string, double>> timings;  // seconds per stage
  std::vector<std::pair<std::string, std::shared_ptr<const nn::Model>>> models;
  std::vector<std::pair<std::string, std::shared_ptr<const SvmModel>>> svms;
  std::shared_ptr<const Autoencoder> autoencoder;

  const SecurityCurve& curve(std::string_view variant) const {
    for (const auto& c : curves)
      if (c.variant == variant) return c;
    throw InvalidArgument("no curve for variant " + std::string(variant));
  }
  double separation_of(std::string_view model) const {
    for (const auto& [k, v] : separation)
      if (k == model) return v;
    throw InvalidArgument("no separation score for " + std::string(model));
  }
  const CleanReport& clean_of(std::string_view variant) const {
    for (const auto& c : clean)
      if (c.variant == variant) return c;
    throw InvalidArgument("no clean report for " + std::string(variant));
  }
};

using ProgressFn = std::function<void(const std::string&)>;

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  using Clock = std::chrono::steady_clock;
  auto t0 = Clock::now();
  ExperimentResult res;
  res.config_hash = cfg.hash();
  res.seed = cfg.seed;
  auto stage = [&](const std::string& name) {
    const auto t1 = Clock::now();
    res.timings.emplace_back(name, std::chrono::duration<double>(t1 - t0).count());
    t0 = t1;
    if (progress) progress(name);
  };

  const auto data = gen_dataset(cfg.data);
  const double snr = cfg.data.snr_grid.front();
  const auto train = labeled_set(data, Split::Train);
  const auto held = held_out_splits(data);
  const auto calib = labeled_set(data, held.calibration);
  const auto evalset = labeled_set(data, held.evaluation);
  const auto attacked_idx = balanced_prefix(data, held.evaluation, cfg.attack_frames);
  const auto attacked = labeled_set(data, attacked_idx);
  stage("data");

  res.median_norm = median_norm(train);
  res.cat = cfg.cat.resolve(res.median_norm);
  res.lsgna_sigma = cfg.lsgna_sigma_fraction * entry_rms(train);
  res.at_eps = epsilon_from_pnr(res.median_norm * res.median_norm, cfg.at_pnr_db, snr).epsilon;

  auto seeded = [&](const char* name) {
    auto t = cfg.train;
    t.seed = substream_seed(cfg.train.seed, name);
    return t;
  };
  // Models are rounded to float32, the precision they are stored at, so a
  // saved run and an in-memory run evaluate identically.
  auto finish = [](nn::Model m) {
    m.round_to_float();
    return std::make_shared<const nn::Model>(std::move(m));
  };
  const auto undefended = finish(train_standard(train, seeded("undefended")));
  stage("train undefended");
  CatState state(train.size(), res.cat.eta, res.cat.c, res.cat.eps_max);
  const auto cat = finish(cat_train(train, seeded("cat"), state));
  stage("train cat");
  const auto lsgna = finish(ls_gna_train(train, seeded("lsgna"), res.lsgna_sigma, cfg.lsgna_alpha));
  stage("train lsgna");
  // The two-fold CNN is the undefended model re-trained on adversarial frames.
  const auto at = finish(train_adversarial(train, seeded("at"), res.at_eps, nullptr, undefended.get()));
  stage("train at");

  auto htrd_svm = std::make_shared<SvmModel>(fit_rejector(*cat, train, calib, cfg.reject_rate, cfg.svm));
  auto lsgna_svm = std::make_shared<SvmModel>(fit_rejector(*lsgna, train, calib, cfg.reject_rate, cfg.svm));
  stage("svm");
  auto ae = std::make_shared<Autoencoder>();
  ae->net = ae_fit(train.x, train.frame_length, cfg.ae);
  ae->net.round_to_float();
  ae_calibrate(*ae, calib.x, cfg.reject_rate, kMinCalibrationSamples);
  stage("autoencoder");

  res.models = {{"undefended", undefended}, {"cat", cat}, {"lsgna", lsgna}, {"at", at}};
  res.svms = {{"htrd", htrd_svm}, {"lsgna_nr", lsgna_svm}};
  res.autoencoder = ae;

  res.calibration.push_back({"htrd_svm", calib.size(), htrd_svm->threshold, rejection_rate(*cat, *htrd_svm, calib),
                             rejection_rate(*cat, *htrd_svm, evalset), evalset.size()});
  res.calibration.push_back({"lsgna_svm", calib.size(), lsgna_svm->threshold,
                             rejection_rate(*lsgna, *lsgna_svm, calib), rejection_rate(*lsgna, *lsgna_svm, evalset), evalset.size()});
  res.calibration.push_back(
      {"twofold_ae", calib.size(), ae->mse_threshold, flag_rate(*ae, calib), flag_rate(*ae, evalset), evalset.size()});

  const std::vector<DefenseUnderTest> duts = {
      {Variant::Undefended, undefended, nullptr, nullptr}, {Variant::CatDnn, cat, nullptr, nullptr},
      {Variant::LsgnaDnn, lsgna, nullptr, nullptr},        {Variant::Htrd, cat, htrd_svm, nullptr},
      {Variant::LsgnaNr, lsgna, lsgna_svm, nullptr},       {Variant::Twofold, at, nullptr, ae},
  };
  for (const auto& d : duts) res.clean.push_back(clean_report(d, evalset));

  std::vector<double> grid = {-std::numeric_limits<double>::infinity()};
  grid.insert(grid.end(), cfg.pnr_grid.begin(), cfg.pnr_grid.end());
  for (const auto& d : duts) {
    res.curves.push_back(security_curve(d, attacked, grid, snr, cfg.attack));
    stage("eval " + std::string(variant_name(d.variant)));
  }

  res.pca_labels = evalset.y;
  for (const auto& [name, model] : {std::pair{"undefended", undefended}, std::pair{"cat", cat},
                                    std::pair{"lsgna", lsgna}}) {
    const auto f = feature_matrix(*model, evalset);
    res.separation.emplace_back(name, separation_score(f, evalset.y));
    res.pca.emplace_back(name, pca_project(f, evalset.size(), cfg.pca_dims));
  }
  stage("features");
  return res;
}

/// Header lines carried by every text artifact.
inline std::vector<std::string> provenance_lines(std::uint64_t config_hash, std::uint64_t seed) {
  return {"modguard config_hash=" + hex64(config_hash) + " seed=" + std::to_string(seed)};
}

inline std::string clean_csv(const ExperimentResult& r) {
  std::ostringstream os;
  for (const auto& l : provenance_lines(r.config_hash, r.seed)) os << "# " << l << '\n';
  os << "variant,n,accuracy_plain,accuracy_rejecting,rejected,accuracy_accepted\n";
  for (const auto& c : r.clean)
    os << c.variant << ',' << c.n << ',' << detail::format_double(c.accuracy_plain) << ','
       << detail::format_double(c.accuracy_rejecting) << ',' << detail::format_double(c.rejected) << ','
       << detail::format_double(c.accuracy_accepted) << '\n';
  return os.str();
}

inline std::string calibration_csv(const ExperimentResult& r) {
  std::ostringstream os;
  for (const auto& l : provenance_lines(r.config_hash, r.seed)) os << "# " << l << '\n';
  os << "detector,n_calibration,threshold,rate_calibration,n_evaluation,rate_evaluation\n";
  for (const auto& c : r.calibration)
    os << c.detector << ',' << c.n_calibration << ',' << detail::format_double(c.threshold) << ','
       << detail::format_double(c.rate_calibration) << ',' << c.n_evaluation << ','
       << detail::format_double(c.rate_evaluation) << '\n';
  return os.str();
}

inline std::string separation_csv(const ExperimentResult& r) {
  std::ostringstream os;
  for (const auto& l : provenance_lines(r.config_hash, r.seed)) os << "# " << l << '\n';
  os << "model,separation_score\n";
  for (const auto& [k, v] : r.separation) os << k << ',' << detail::format_double(v) << '\n';
  return os.str();
}

/// JSON sidecar for binary artifacts, whose formats have no comment field.
inline std::string sidecar_json(std::uint64_t config_hash, std::uint64_t seed, const std::string& producer) {
  return "{\"config_hash\": \"" + hex64(config_hash) + "\", \"seed\": " + std::to_string(seed) +
         ", \"producer\": \"" + producer + "\"}\n";
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

/// Write every text artifact of a run into `dir`; returns the paths written.
inline std::vector<std::filesystem::path> write_experiment(const ExperimentResult& r,
                                                           const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto pre = provenance_lines(r.config_hash, r.seed);
  std::vector<std::filesystem::path> out;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    out.push_back(dir / name);
  };
  emit("curves.csv", curves_to_csv(r.curves, pre));
  emit("clean_accuracy.csv", clean_csv(r));
  emit("calibration.csv", calibration_csv(r));
  emit("separation.csv", separation_csv(r));
  for (const auto& [name, p] : r.pca) {
    emit("pca_" + name + ".csv", pca_to_csv(p, r.pca_labels, pre));
    emit("pca_" + name + ".svg", "<!-- " + pre.front() + " -->\n" + svg::pca_scatter(p, r.pca_labels, name));
  }
  emit("curves.svg", "<!-- " + pre.front() + " -->\n" + svg::curves_plot(r.curves));
  auto binary = [&](const std::string& name, auto&& save) {
    save((dir / name).string());
    out.push_back(dir / name);
    emit(name + ".meta.json", sidecar_json(r.config_hash, r.seed, "repro"));
  };
  for (const auto& [name, m] : r.models) binary(name + ".mgm", [&](const std::string& p) { save_model(*m, p); });
  for (const auto& [name, s] : r.svms) binary(name + ".mgs", [&](const std::string& p) { save_svm(*s, p); });
  if (r.autoencoder)
    binary("twofold_ae.mga", [&](const std::string& p) { save_autoencoder(*r.autoencoder, p); });
  return out;
}

} // namespace modguard
