#pragma once

// Security evaluation: accuracy of a defended classifier against white-box
// attacks over a grid of perturbation-to-noise ratios, plus feature-space
// diagnostics (PCA projection and a class separation score).
//
// Accuracy on clean frames counts frames that are classified correctly and
// not rejected. Under attack it counts frames that are either rejected or
// still classified correctly. Counts are kept as integers; the fraction is
// formed once at the end.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "modguard/attack.hpp"
#include "modguard/autoencoder.hpp"
#include "modguard/parallel.hpp"
#include "modguard/svm.hpp"
#include "modguard/train.hpp"

namespace modguard {

enum class Variant { Undefended, CatDnn, LsgnaDnn, Htrd, LsgnaNr, Twofold };

inline constexpr std::array<std::string_view, 6> kVariantNames = {"undefended", "cat_dnn", "lsgna_dnn",
                                                                   "htrd",       "lsgna_nr", "twofold"};

inline std::string_view variant_name(Variant v) { return kVariantNames[static_cast<std::size_t>(v)]; }

inline Variant parse_variant(std::string_view s) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i)
    if (kVariantNames[i] == s) return static_cast<Variant>(i);
  throw InvalidArgument("unknown defense variant '" + std::string(s) + "'");
}

struct DefenseUnderTest {
  Variant variant = Variant::Undefended;
  std::shared_ptr<const nn::Model> model;
  std::shared_ptr<const SvmModel> svm;
  std::shared_ptr<const Autoencoder> ae;

  bool uses_svm() const { return variant == Variant::Htrd || variant == Variant::LsgnaNr; }
  bool uses_ae() const { return variant == Variant::Twofold; }

  void validate() const {
    if (!model) throw InvalidArgument(std::string(variant_name(variant)) + " needs a classifier");
    if (uses_svm() != static_cast<bool>(svm))
      throw InvalidArgument(std::string(variant_name(variant)) + (uses_svm() ? " needs" : " takes no") + " SVM");
    if (uses_ae() != static_cast<bool>(ae))
      throw InvalidArgument(std::string(variant_name(variant)) + (uses_ae() ? " needs" : " takes no") +
                            " autoencoder");
  }
};

struct FrameVerdict {
  bool rejected = false;
  bool correct = false;
};

/// Deployed decision of a defense on one input.
inline FrameVerdict verdict(const DefenseUnderTest& dut, std::span<const double> x, std::size_t y) {
  if (dut.uses_svm()) {
    const auto d = classify_with_rejection(*dut.svm, nn::forward(*dut.model, x).features);
    return {d.rejected(), d.label && *d.label == y};
  }
  const bool correct = nn::predict(*dut.model, x) == y;
  if (dut.uses_ae()) return {ae_detect(*dut.ae, x).flagged, correct};
  return {false, correct};
}

struct EvalAttackParams {
  double step_fraction = 0.1;  // step = fraction * eps
  std::size_t iters = 50;
  double tol = 1e-5;
};

inline AttackResult run_attack(const DefenseUnderTest& dut, std::span<const double> x, std::size_t y,
                               const AttackConfig& cfg) {
  if (dut.uses_svm()) return attack_htrd(*dut.model, *dut.svm, x, y, cfg);
  if (dut.uses_ae()) return attack_twofold(*dut.model, *dut.ae, x, y, cfg);
  return pgd_untargeted(*dut.model, x, y, cfg);
}

struct CurvePoint {
  double pnr_db = -std::numeric_limits<double>::infinity();  // -inf = clean
  double accuracy = 0.0;
  std::size_t n_samples = 0;
  bool operator==(const CurvePoint&) const = default;
};

struct SecurityCurve {
  std::string variant;
  double snr_db = 0.0;
  std::vector<CurvePoint> points;
  bool operator==(const SecurityCurve&) const = default;
};

/// One point of a security curve. pnr_db = -inf evaluates the clean decision rule.
inline CurvePoint evaluate_point(const DefenseUnderTest& dut, const LabeledSet& test, double pnr_db, double snr_db,
                                 const EvalAttackParams& params = {}) {
  dut.validate();
  if (test.size() == 0) throw InvalidArgument("empty test set");
  const bool clean = std::isinf(pnr_db) && pnr_db < 0;
  std::vector<unsigned char> ok(test.size(), 0);
  parallel_for(test.size(), [&](std::size_t i) {
    const auto& x = test.x[i];
    const auto y = test.y[i];
    if (clean) {
      const auto v = verdict(dut, x, y);
      ok[i] = !v.rejected && v.correct;
      return;
    }
    const double eps = epsilon_from_pnr(signal_power(std::span<const double>(x)), pnr_db, snr_db).epsilon;
    const auto cfg = AttackConfig::for_budget(eps, params.step_fraction, params.iters, params.tol);
    const auto adv = run_attack(dut, x, y, cfg);
    const auto v = verdict(dut, adv.x_adv, y);
    ok[i] = v.rejected || v.correct;
  });
  const auto correct = static_cast<std::size_t>(std::count(ok.begin(), ok.end(), 1));
  return {pnr_db, static_cast<double>(correct) / static_cast<double>(test.size()), test.size()};
}

inline SecurityCurve security_curve(const DefenseUnderTest& dut, const LabeledSet& test,
                                    std::span<const double> pnr_grid, double snr_db,
                                    const EvalAttackParams& params = {}) {
  for (std::size_t i = 1; i < pnr_grid.size(); ++i)
    if (!(pnr_grid[i] > pnr_grid[i - 1])) throw InvalidArgument("PNR grid must be strictly increasing");
  SecurityCurve c;
  c.variant = std::string(variant_name(dut.variant));
  c.snr_db = snr_db;
  for (double p : pnr_grid) c.points.push_back(evaluate_point(dut, test, p, snr_db, params));
  return c;
}

namespace detail {

inline std::string format_double(double v) {
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw FormatError("cannot parse number '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

} // namespace detail

inline constexpr std::string_view kCurveCsvHeader = "variant,pnr_db,snr_db,n,accuracy";

/// CSV with the schema variant,pnr_db,snr_db,n,accuracy. `preamble` lines are
/// written as '#' comments before the header.
inline std::string curves_to_csv(std::span<const SecurityCurve> curves, std::span<const std::string> preamble = {}) {
  std::ostringstream os;
  for (const auto& p : preamble) os << "# " << p << '\n';
  os << kCurveCsvHeader << '\n';
  for (const auto& c : curves)
    for (const auto& p : c.points)
      os << c.variant << ',' << detail::format_double(p.pnr_db) << ',' << detail::format_double(c.snr_db) << ','
         << p.n_samples << ',' << detail::format_double(p.accuracy) << '\n';
  return os.str();
}

inline std::vector<SecurityCurve> curves_from_csv(std::string_view text) {
  std::vector<SecurityCurve> curves;
  bool header_seen = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    if (!header_seen) {
      if (line != kCurveCsvHeader) throw FormatError("unexpected curve CSV header");
      header_seen = true;
      continue;
    }
    const auto cols = detail::split_csv_line(line);
    if (cols.size() != 5) throw FormatError("curve CSV row needs 5 columns");
    const std::string variant(cols[0]);
    const double snr = detail::parse_double(cols[2]);
    if (curves.empty() || curves.back().variant != variant || curves.back().snr_db != snr)
      curves.push_back({variant, snr, {}});
    CurvePoint p;
    p.pnr_db = detail::parse_double(cols[1]);
    p.n_samples = static_cast<std::size_t>(detail::parse_double(cols[3]));
    p.accuracy = detail::parse_double(cols[4]);
    curves.back().points.push_back(p);
  }
  if (!header_seen) throw FormatError("curve CSV has no header");
  return curves;
}

struct PcaResult {
  std::size_t dims = 0;
  std::vector<double> coords;       // n x dims
  std::vector<double> explained;    // variance fraction per kept component, non-increasing
  std::vector<double> eigenvalues;  // all covariance eigenvalues, descending
  std::vector<double> components;   // dims x F principal axes (zero rows past the rank)
  std::vector<double> mean;         // F
};

/// Mean-centred projection onto the top principal axes of the sample covariance.
inline PcaResult pca_project(std::span<const double> features, std::size_t n, std::size_t dims) {
  if (dims == 0) throw InvalidArgument("PCA needs at least one output dimension");
  if (n <= dims) throw InvalidArgument("PCA needs more samples than output dimensions");
  if (features.size() % n != 0) throw ShapeError("feature matrix size is not a multiple of n");
  const std::size_t f = features.size() / n;
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> x(features.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Mat centred = x.rowwise() - mu;
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");

  PcaResult r;
  r.dims = dims;
  r.mean.assign(mu.data(), mu.data() + f);
  const auto& vals = eig.eigenvalues();  // ascending
  for (Eigen::Index i = vals.size(); i-- > 0;) r.eigenvalues.push_back(std::max(0.0, vals[i]));
  const double total = std::accumulate(r.eigenvalues.begin(), r.eigenvalues.end(), 0.0);
  r.components.assign(dims * f, 0.0);
  r.explained.assign(dims, 0.0);
  for (std::size_t d = 0; d < dims && d < f; ++d) {
    const auto col = static_cast<Eigen::Index>(f - 1 - d);
    if (r.eigenvalues[d] <= 0.0) continue;  // rank deficient: leave this axis zero
    for (std::size_t k = 0; k < f; ++k) r.components[d * f + k] = eig.eigenvectors()(static_cast<Eigen::Index>(k), col);
    r.explained[d] = total > 0.0 ? r.eigenvalues[d] / total : 0.0;
  }
  r.coords.assign(n * dims, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dims; ++d) {
      double s = 0.0;
      for (std::size_t k = 0; k < f; ++k) s += centred(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) *
                                               r.components[d * f + k];
      r.coords[i * dims + d] = s;
    }
  return r;
}

/// label,pc1,pc2[,pc3]
inline std::string pca_to_csv(const PcaResult& p, std::span<const std::size_t> labels,
                              std::span<const std::string> preamble = {}) {
  std::ostringstream os;
  for (const auto& l : preamble) os << "# " << l << '\n';
  os << "label";
  for (std::size_t d = 0; d < p.dims; ++d) os << ",pc" << d + 1;
  os << '\n';
  for (std::size_t i = 0; i < labels.size(); ++i) {
    os << labels[i];
    for (std::size_t d = 0; d < p.dims; ++d) os << ',' << detail::format_double(p.coords[i * p.dims + d]);
    os << '\n';
  }
  return os.str();
}

/// Mean pairwise distance between class centroids over the mean within-class
/// RMS spread (root of the mean squared distance to the class centroid).
inline double separation_score(std::span<const double> features, std::span<const std::size_t> labels) {
  const std::size_t n = labels.size();
  if (n == 0 || features.size() % n != 0) throw ShapeError("feature matrix does not match the label count");
  const std::size_t f = features.size() / n;
  std::vector<std::size_t> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw InvalidArgument("separation score needs at least two classes");

  std::vector<std::vector<double>> centroid(classes.size(), std::vector<double>(f, 0.0));
  std::vector<std::size_t> count(classes.size(), 0);
  auto slot = [&](std::size_t label) {
    return static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), label) - classes.begin());
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = slot(labels[i]);
    ++count[c];
    for (std::size_t k = 0; k < f; ++k) centroid[c][k] += features[i * f + k];
  }
  for (std::size_t c = 0; c < classes.size(); ++c)
    for (double& v : centroid[c]) v /= static_cast<double>(count[c]);

  std::vector<double> spread(classes.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = slot(labels[i]);
    for (std::size_t k = 0; k < f; ++k) {
      const double d = features[i * f + k] - centroid[c][k];
      spread[c] += d * d;
    }
  }
  double mean_spread = 0.0;
  for (std::size_t c = 0; c < classes.size(); ++c) mean_spread += std::sqrt(spread[c] / static_cast<double>(count[c]));
  mean_spread /= static_cast<double>(classes.size());

  double inter = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < classes.size(); ++a)
    for (std::size_t b = a + 1; b < classes.size(); ++b, ++pairs) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < f; ++k) d2 += (centroid[a][k] - centroid[b][k]) * (centroid[a][k] - centroid[b][k]);
      inter += std::sqrt(d2);
    }
  inter /= static_cast<double>(pairs);
  if (inter == 0.0) return 0.0;
  return mean_spread > 0.0 ? inter / mean_spread : std::numeric_limits<double>::infinity();
}

} // namespace modguard
