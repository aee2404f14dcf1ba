// modguard: generate data, train, calibrate, attack, evaluate and plot.
//
// Binary artifacts get a <file>.meta.json sidecar with the hash of the
// resolved options and the seed; text artifacts carry the same line as a
// leading comment.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "modguard/autoencoder.hpp"
#include "modguard/checkpoint.hpp"
#include "modguard/config.hpp"
#include "modguard/dataset_io.hpp"
#include "modguard/eval.hpp"
#include "modguard/experiment.hpp"
#include "modguard/parallel.hpp"
#include "modguard/svg.hpp"
#include "modguard/svm.hpp"
#include "modguard/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace modguard;

namespace {

struct Globals {
  unsigned threads = 0;
  bool json = false;
  bool quiet = false;
};

fs::path default_out_dir() {
  if (const char* env = std::getenv("MODGUARD_OUT"); env && *env) return env;
  return "modguard_out";
}

fs::path resolve_out(const std::string& given, const std::string& fallback_name) {
  if (!given.empty()) return given;
  return default_out_dir() / fallback_name;
}

// Hash of every option the subcommand resolved, in declaration order.
std::uint64_t options_hash(const CLI::App& sub) {
  std::string canon = sub.get_name() + "\n";
  for (const auto* opt : sub.get_options()) {
    if (opt->get_name() == "--help") continue;
    canon += opt->get_name() + "=";
    for (const auto& r : opt->results()) canon += r + ",";
    canon += "\n";
  }
  return fnv1a64(canon);
}

class Run {
public:
  Run(const Globals& g, const CLI::App& sub, std::uint64_t seed)
      : Run(g, sub, seed, options_hash(sub)) {}
  Run(const Globals& g, const CLI::App& sub, std::uint64_t seed, std::uint64_t hash)
      : g_(g), name_(sub.get_name()), hash_(hash), seed_(seed) {}

  std::uint64_t hash() const { return hash_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<std::string> preamble() const { return provenance_lines(hash_, seed_); }

  void declare(const fs::path& p) { declared_.push_back(p); }

  void binary(const fs::path& p) {
    declare(p);
    write_text(p.string() + ".meta.json", sidecar_json(hash_, seed_, "modguard " + name_));
  }

  void text(const fs::path& p, const std::string& body) {
    write_text(p, body);
    declare(p);
  }

  void note(const std::string& msg) const {
    if (!g_.quiet && !g_.json) std::cerr << msg << '\n';
  }

  json& summary() { return summary_; }

  int finish() {
    bool ok = true;
    json files = json::array();
    for (const auto& p : declared_) {
      const bool exists = fs::exists(p);
      ok = ok && exists;
      if (!exists) std::cerr << "error: artifact not produced: " << p.string() << '\n';
      files.push_back(p.string());
    }
    summary_["command"] = name_;
    summary_["config_hash"] = hex64(hash_);
    summary_["seed"] = seed_;
    summary_["artifacts"] = files;
    summary_["ok"] = ok;
    if (g_.json) std::cout << summary_.dump(2) << '\n';
    return ok ? 0 : 3;
  }

private:
  const Globals& g_;
  std::string name_;
  std::uint64_t hash_;
  std::uint64_t seed_;
  std::vector<fs::path> declared_;
  json summary_ = json::object();
};

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

double dataset_snr(const Dataset& d) {
  if (d.frames.empty()) throw InvalidArgument("dataset has no frames");
  if (d.num_snr_levels() != 1) throw InvalidArgument("dataset holds several SNR levels; pass --snr-db");
  return d.frames.front().snr_db;
}

LabeledSet evaluation_set(const Dataset& d, std::size_t frames) {
  const auto held = held_out_splits(d);
  if (frames == 0) return labeled_set(d, held.evaluation);
  return labeled_set(d, balanced_prefix(d, held.evaluation, frames));
}

// ---------------------------------------------------------------- gen-data

struct GenOpts {
  std::uint64_t seed = 0;
  std::vector<std::string> classes = all_modulation_names();
  std::vector<double> snr = {10.0};
  std::size_t fpc = 200, n = 128;
  double split = 0.5;
  std::string out, metadata;
};

int cmd_gen(const Globals& g, const CLI::App& sub, const GenOpts& o) {
  Run run(g, sub, o.seed);
  DatasetConfig cfg;
  cfg.classes = o.classes;
  cfg.snr_grid = o.snr;
  cfg.frames_per_cell = o.fpc;
  cfg.n = o.n;
  cfg.split_ratio = o.split;
  cfg.seed = o.seed;
  const auto d = gen_dataset(cfg);
  const auto out = resolve_out(o.out, "dataset.mgd");
  ensure_parent(out);
  save_dataset(d, out.string());
  run.binary(out);
  if (!o.metadata.empty()) {
    ensure_parent(o.metadata);
    std::string body;
    for (const auto& l : run.preamble()) body += "# " + l + "\n";
    run.text(o.metadata, body + dataset_metadata_csv(d));
  }
  run.summary()["frames"] = d.frames.size();
  run.summary()["train_frames"] = d.indices(Split::Train).size();
  run.note("wrote " + std::to_string(d.frames.size()) + " frames to " + out.string());
  return run.finish();
}

// ---------------------------------------------------------------- train

struct TrainOpts {
  std::string data, method = "standard", out, init;
  std::uint64_t seed = 0;
  TrainConfig cfg;
  double eps_max = 0, eta = 0, c = 0, eps_max_fraction = 0.1, c_eps_max = 0.5;
  std::size_t levels = 20;
  double at_pnr_db = -15.0;
  double lsgna_sigma = -1, lsgna_sigma_fraction = 0.05, lsgna_alpha = 0.1;
  std::size_t ae_epochs = 60;
};

// One JSON object per epoch next to the checkpoint.
void write_train_log(Run& run, const fs::path& model_path, const TrainLog& log) {
  fs::path p = model_path;
  p += ".log.jsonl";
  std::string body;
  for (const auto& e : log)
    body += json{{"epoch", e.epoch}, {"loss", e.loss}, {"mean_eps", e.mean_eps}}.dump() + "\n";
  write_text(p, body);
  run.binary(p);
  run.summary()["log"] = p.string();
}

int cmd_train(const Globals& g, const CLI::App& sub, TrainOpts o) {
  // Validate everything that can fail before any training starts.
  o.cfg.validate();
  if (!o.init.empty() && o.method != "at") throw InvalidArgument("--init only applies to --method at");
  Run run(g, sub, o.seed);
  const auto d = load_dataset(o.data);
  const auto train = labeled_set(d, Split::Train);
  if (train.size() == 0) throw InvalidArgument("dataset has no training frames");
  o.cfg.seed = substream_seed(substream_seed(o.seed, "train"), o.method == "standard" ? "undefended" : o.method);
  const auto out = resolve_out(o.out, o.method + (o.method == "ae" ? ".mga" : ".mgm"));
  ensure_parent(out);
  TrainLog log;
  json& s = run.summary();
  s["method"] = o.method;
  if (o.method == "ae") {
    AeTrainConfig ac;
    ac.epochs = o.ae_epochs;
    ac.batch_size = o.cfg.batch_size;
    ac.lr = o.cfg.lr;
    ac.momentum = o.cfg.momentum;
    ac.seed = substream_seed(o.seed, "ae");
    std::vector<double> losses;
    Autoencoder ae;
    ae.net = ae_fit(train.x, train.frame_length, ac, &losses);
    ae.net.round_to_float();
    save_autoencoder(ae, out.string());
    run.binary(out);
    TrainLog ae_log;
    for (std::size_t e = 0; e < losses.size(); ++e) ae_log.push_back({e, losses[e], 0.0});
    write_train_log(run, out, ae_log);
    s["final_loss"] = losses.empty() ? 0.0 : losses.back();
    return run.finish();
  }
  nn::Model m;
  const double mnorm = median_norm(train);
  if (o.method == "standard") {
    m = train_standard(train, o.cfg, &log);
  } else if (o.method == "at") {
    const double eps = epsilon_from_pnr(mnorm * mnorm, o.at_pnr_db, dataset_snr(d)).epsilon;
    s["eps"] = eps;
    std::optional<nn::Model> start;
    if (!o.init.empty()) start = load_model(o.init);
    m = train_adversarial(train, o.cfg, eps, &log, start ? &*start : nullptr);
  } else if (o.method == "cat") {
    CatParams p;
    p.eps_max = o.eps_max, p.eta = o.eta, p.c = o.c;
    p.eps_max_fraction = o.eps_max_fraction, p.levels = o.levels, p.c_eps_max = o.c_eps_max;
    const auto r = p.resolve(mnorm);
    CatState state(train.size(), r.eta, r.c, r.eps_max);
    s["eps_max"] = r.eps_max, s["eta"] = r.eta, s["c"] = r.c;
    m = cat_train(train, o.cfg, state, &log);
  } else if (o.method == "lsgna") {
    const double sigma = o.lsgna_sigma >= 0 ? o.lsgna_sigma : o.lsgna_sigma_fraction * entry_rms(train);
    s["sigma"] = sigma;
    m = ls_gna_train(train, o.cfg, sigma, o.lsgna_alpha, &log);
  }
  m.round_to_float();
  save_model(m, out.string());
  run.binary(out);
  write_train_log(run, out, log);
  s["final_loss"] = log.empty() ? 0.0 : log.back().loss;
  s["mean_eps"] = log.empty() ? 0.0 : log.back().mean_eps;
  s["train_accuracy"] = clean_accuracy(m, train);
  run.note("trained " + o.method + " model, final loss " + std::to_string(log.back().loss));
  return run.finish();
}

// ---------------------------------------------------------------- calibrate

struct CalibOpts {
  std::string data, model, ae, out;
  double rate = 0.10;
  SvmTrainOptions svm;
};

int cmd_calibrate(const Globals& g, const CLI::App& sub, const CalibOpts& o) {
  Run run(g, sub, 0);
  if (o.model.empty() == o.ae.empty()) throw InvalidArgument("pass exactly one of --model or --ae");
  const auto d = load_dataset(o.data);
  const auto held = held_out_splits(d);
  const auto calib = labeled_set(d, held.calibration);
  json& s = run.summary();
  s["n_calibration"] = calib.size();
  if (!o.ae.empty()) {
    auto ae = load_autoencoder(o.ae);
    s["threshold"] = ae_calibrate(ae, calib.x, o.rate);
    s["rate"] = flag_rate(ae, calib);
    const auto out = o.out.empty() ? fs::path(o.ae) : fs::path(o.out);
    ensure_parent(out);
    save_autoencoder(ae, out.string());
    run.binary(out);
    return run.finish();
  }
  const auto m = load_model(o.model);
  const auto train = labeled_set(d, Split::Train);
  const auto svm = fit_rejector(m, train, calib, o.rate, o.svm);
  s["threshold"] = svm.threshold;
  s["rate"] = rejection_rate(m, svm, calib);
  const auto out = resolve_out(o.out, "rejector.mgs");
  ensure_parent(out);
  save_svm(svm, out.string());
  run.binary(out);
  run.note("S0 = " + detail::format_double(svm.threshold));
  return run.finish();
}

// ---------------------------------------------------------------- attack / eval

struct DutOpts {
  std::string data, model, svm, ae;
  std::vector<double> pnr;
  double snr = std::numeric_limits<double>::quiet_NaN();
  EvalAttackParams params;
  std::size_t frames = 200;
  std::string out;
};

DefenseUnderTest load_dut(Variant v, const DutOpts& o) {
  DefenseUnderTest dut;
  dut.variant = v;
  dut.model = std::make_shared<const nn::Model>(load_model(o.model));
  if (dut.uses_svm()) {
    if (o.svm.empty()) throw InvalidArgument(std::string(variant_name(v)) + " needs --svm");
    dut.svm = std::make_shared<const SvmModel>(load_svm(o.svm));
  }
  if (dut.uses_ae()) {
    if (o.ae.empty()) throw InvalidArgument(std::string(variant_name(v)) + " needs --ae");
    dut.ae = std::make_shared<const Autoencoder>(load_autoencoder(o.ae));
  }
  dut.validate();
  return dut;
}

std::string pnr_tag(double p) {
  auto s = detail::format_double(p);
  for (auto& ch : s)
    if (ch == '.') ch = 'p';
  return s;
}

int cmd_attack(const Globals& g, const CLI::App& sub, const std::string& defense, const DutOpts& o) {
  Run run(g, sub, 0);
  static const std::map<std::string, Variant> kinds = {
      {"none", Variant::Undefended}, {"htrd", Variant::Htrd}, {"twofold", Variant::Twofold}};
  const auto dut = load_dut(kinds.at(defense), o);
  const auto d = load_dataset(o.data);
  const double snr = std::isnan(o.snr) ? dataset_snr(d) : o.snr;
  const auto held = held_out_splits(d);
  const auto idx = balanced_prefix(d, held.evaluation, o.frames);
  const auto set = labeled_set(d, idx);
  const fs::path dir = o.out.empty() ? default_out_dir() : fs::path(o.out);
  fs::create_directories(dir);
  json points = json::array();
  for (double pnr : o.pnr) {
    Dataset adv;
    adv.class_names = d.class_names;
    adv.frame_length = d.frame_length;
    adv.provenance = Provenance::Adversarial;
    std::vector<AttackResult> results(set.size());
    parallel_for(set.size(), [&](std::size_t i) {
      const double eps = epsilon_from_pnr(signal_power(std::span<const double>(set.x[i])), pnr, snr).epsilon;
      results[i] = run_attack(dut, set.x[i], set.y[i],
                              AttackConfig::for_budget(eps, o.params.step_fraction, o.params.iters, o.params.tol));
    });
    std::size_t robust = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      IQFrame f;
      f.label = static_cast<std::uint16_t>(set.y[i]);
      f.snr_db = d.frames[idx[i]].snr_db;
      f.samples.assign(results[i].x_adv.begin(), results[i].x_adv.end());
      adv.frames.push_back(std::move(f));
      adv.splits.push_back(Split::Test);
      const auto v = verdict(dut, results[i].x_adv, set.y[i]);
      robust += v.rejected || v.correct;
    }
    const auto path = dir / ("adv_" + defense + "_pnr" + pnr_tag(pnr) + ".mgd");
    save_dataset(adv, path.string());
    run.binary(path);
    const double acc = static_cast<double>(robust) / static_cast<double>(set.size());
    points.push_back({{"pnr_db", pnr}, {"accuracy", acc}, {"n", set.size()}, {"file", path.string()}});
    run.note("PNR " + detail::format_double(pnr) + " dB: accuracy " + detail::format_double(acc));
  }
  run.summary()["points"] = points;
  return run.finish();
}

int cmd_eval(const Globals& g, const CLI::App& sub, const std::string& variant, const DutOpts& o) {
  Run run(g, sub, 0);
  const auto dut = load_dut(parse_variant(variant), o);
  const auto d = load_dataset(o.data);
  const double snr = std::isnan(o.snr) ? dataset_snr(d) : o.snr;
  const auto set = evaluation_set(d, o.frames);
  std::vector<double> grid = {-std::numeric_limits<double>::infinity()};
  grid.insert(grid.end(), o.pnr.begin(), o.pnr.end());
  const std::vector<SecurityCurve> curves = {security_curve(dut, set, grid, snr, o.params)};
  const auto out = resolve_out(o.out, "curve_" + variant + ".csv");
  ensure_parent(out);
  run.text(out, curves_to_csv(curves, run.preamble()));
  json pts = json::array();
  for (const auto& p : curves[0].points)
    pts.push_back({{"pnr_db", detail::format_double(p.pnr_db)}, {"accuracy", p.accuracy}, {"n", p.n_samples}});
  run.summary()["points"] = pts;
  for (const auto& p : curves[0].points)
    run.note(detail::format_double(p.pnr_db) + " dB: " + detail::format_double(p.accuracy));
  return run.finish();
}

// ---------------------------------------------------------------- viz

struct VizOpts {
  std::string data, model, curves, out;
  std::size_t dims = 2;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cmd_viz(const Globals& g, const CLI::App& sub, const VizOpts& o) {
  Run run(g, sub, 0);
  const auto prefix = resolve_out(o.out, "viz");
  ensure_parent(prefix.string() + "_");
  const auto pre = run.preamble();
  if (!o.curves.empty()) {
    const auto curves = curves_from_csv(read_file(o.curves));
    run.text(prefix.string() + "_curves.svg", "<!-- " + pre.front() + " -->\n" + svg::curves_plot(curves));
  }
  if (!o.model.empty()) {
    if (o.data.empty()) throw InvalidArgument("--model needs --data");
    const auto d = load_dataset(o.data);
    const auto m = load_model(o.model);
    const auto set = evaluation_set(d, 0);
    const auto f = feature_matrix(m, set);
    const auto p = pca_project(f, set.size(), o.dims);
    run.text(prefix.string() + "_pca.csv", pca_to_csv(p, set.y, pre));
    run.text(prefix.string() + "_pca.svg",
             "<!-- " + pre.front() + " -->\n" + svg::pca_scatter(p, set.y, fs::path(o.model).stem().string()));
    run.summary()["separation_score"] = separation_score(f, set.y);
    run.summary()["explained"] = p.explained;
  }
  if (o.curves.empty() && o.model.empty()) throw InvalidArgument("nothing to plot: pass --curves or --model");
  return run.finish();
}

// ---------------------------------------------------------------- repro

int cmd_repro(const Globals& g, const CLI::App& sub, const std::string& config_path,
              const std::vector<std::string>& sets, const std::string& out) {
  auto cfg = config::Config::load(config_path);
  for (const auto& s : sets) cfg.override_with(s);
  const auto e = ExperimentConfig::from(cfg);
  if (const auto unused = cfg.unused_keys(); !unused.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unused) msg += " " + k;
    throw InvalidArgument(msg);
  }
  Run run(g, sub, e.seed, e.hash());
  const auto result = run_experiment(e, [&](const std::string& stage) { run.note("done: " + stage); });
  const fs::path dir = out.empty() ? default_out_dir() : fs::path(out);
  for (const auto& p : write_experiment(result, dir)) run.declare(p);
  json& s = run.summary();
  for (const auto& c : result.curves) {
    json pts = json::array();
    for (const auto& p : c.points) pts.push_back({detail::format_double(p.pnr_db), p.accuracy});
    s["curves"][c.variant] = pts;
  }
  for (const auto& c : result.clean)
    s["clean"][c.variant] = {{"plain", c.accuracy_plain}, {"rejecting", c.accuracy_rejecting}};
  for (const auto& [k, v] : result.separation) s["separation"][k] = v;
  for (const auto& [k, v] : result.timings) s["seconds"][k] = v;
  return run.finish();
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"modguard: adversarially robust modulation classification toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--threads", g.threads, "Cap on worker threads (0 = all cores)");
  app.add_flag("--json", g.json, "Print a machine-readable summary on stdout");
  app.add_flag("--quiet", g.quiet, "No progress output");

  GenOpts gen;
  auto* sgen = app.add_subcommand("gen-data", "Generate a synthetic IQ dataset (MGD1)");
  sgen->add_option("--seed", gen.seed, "Root seed")->required();
  sgen->add_option("--classes", gen.classes, "Modulation classes")->delimiter(',');
  sgen->add_option("--snr-db", gen.snr, "SNR grid in dB")->delimiter(',');
  sgen->add_option("--frames-per-cell", gen.fpc, "Frames per (class, SNR) cell")->capture_default_str();
  sgen->add_option("--frame-length", gen.n, "Complex samples per frame")->capture_default_str();
  sgen->add_option("--split-ratio", gen.split, "Training fraction of each cell")->capture_default_str();
  sgen->add_option("--out", gen.out, "Output MGD1 file");
  sgen->add_option("--metadata-csv", gen.metadata, "Also write per-frame metadata CSV");

  TrainOpts tr;
  auto* str = app.add_subcommand("train", "Train a classifier or the autoencoder");
  str->add_option("--data", tr.data, "MGD1 dataset")->required()->check(CLI::ExistingFile);
  str->add_option("--method", tr.method, "standard|at|cat|lsgna|ae")
      ->check(CLI::IsMember({"standard", "at", "cat", "lsgna", "ae"}))
      ->capture_default_str();
  str->add_option("--seed", tr.seed, "Root seed")->required();
  str->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  str->add_option("--batch-size", tr.cfg.batch_size)->capture_default_str();
  str->add_option("--lr", tr.cfg.lr)->capture_default_str();
  str->add_option("--momentum", tr.cfg.momentum)->capture_default_str();
  str->add_option("--inner-steps", tr.cfg.inner_steps, "PGD steps inside at/cat")->capture_default_str();
  str->add_option("--inner-step-fraction", tr.cfg.inner_step_fraction)->capture_default_str();
  str->add_option("--eps-max", tr.eps_max, "CAT radius cap (default: fraction of median frame norm)");
  str->add_option("--eps-max-fraction", tr.eps_max_fraction)->capture_default_str();
  str->add_option("--eta", tr.eta, "CAT radius increment (default: eps_max / levels)");
  str->add_option("--levels", tr.levels)->capture_default_str();
  str->add_option("--c", tr.c, "CAT smoothing slope (default: c-eps-max / eps_max)");
  str->add_option("--c-eps-max", tr.c_eps_max)->capture_default_str();
  str->add_option("--at-pnr-db", tr.at_pnr_db, "Adversarial training budget")->capture_default_str();
  str->add_option("--init", tr.init, "at: continue from this checkpoint instead of a fresh init")
      ->check(CLI::ExistingFile);
  str->add_option("--lsgna-sigma", tr.lsgna_sigma, "Noise std (default: fraction of entry RMS)");
  str->add_option("--lsgna-sigma-fraction", tr.lsgna_sigma_fraction)->capture_default_str();
  str->add_option("--lsgna-alpha", tr.lsgna_alpha)->capture_default_str();
  str->add_option("--ae-epochs", tr.ae_epochs)->capture_default_str();
  str->add_option("--out", tr.out, "Output checkpoint");

  CalibOpts cal;
  auto* scal = app.add_subcommand("calibrate", "Fit the SVM rejector or calibrate the autoencoder threshold");
  scal->add_option("--data", cal.data)->required()->check(CLI::ExistingFile);
  scal->add_option("--model", cal.model, "Classifier whose feature layer feeds the SVM")->check(CLI::ExistingFile);
  scal->add_option("--ae", cal.ae, "Autoencoder to calibrate")->check(CLI::ExistingFile);
  scal->add_option("--reject-rate", cal.rate, "Target benign rejection rate")->capture_default_str();
  scal->add_option("--gamma", cal.svm.gamma)->capture_default_str();
  scal->add_option("--svm-c", cal.svm.c)->capture_default_str();
  scal->add_option("--svm-tol", cal.svm.tol)->capture_default_str();
  scal->add_option("--out", cal.out, "Output file");

  auto add_dut = [](CLI::App* s, DutOpts& o) {
    s->add_option("--data", o.data)->required()->check(CLI::ExistingFile);
    s->add_option("--model", o.model, "Classifier checkpoint")->required()->check(CLI::ExistingFile);
    s->add_option("--svm", o.svm, "SVM rejector")->check(CLI::ExistingFile);
    s->add_option("--ae", o.ae, "Calibrated autoencoder")->check(CLI::ExistingFile);
    s->add_option("--pnr-db", o.pnr, "PNR values in dB")->delimiter(',')->required();
    s->add_option("--snr-db", o.snr, "Nominal SNR (default: the dataset's)");
    s->add_option("--iters", o.params.iters)->capture_default_str();
    s->add_option("--step", o.params.step_fraction, "Step as a fraction of epsilon")->capture_default_str();
    s->add_option("--tol", o.params.tol)->capture_default_str();
    s->add_option("--frames", o.frames, "Attacked frames (0 = whole evaluation split)")->capture_default_str();
  };
  DutOpts att;
  std::string defense = "none";
  auto* satt = app.add_subcommand("attack", "Attack a defense and export adversarial frames");
  add_dut(satt, att);
  satt->add_option("--defense", defense)->check(CLI::IsMember({"none", "htrd", "twofold"}))->capture_default_str();
  satt->add_option("--out", att.out, "Output directory");

  DutOpts ev;
  std::string variant = "undefended";
  auto* sev = app.add_subcommand("eval", "Security curve of one defense");
  add_dut(sev, ev);
  sev->add_option("--variant", variant)
      ->check(CLI::IsMember(std::vector<std::string>(kVariantNames.begin(), kVariantNames.end())))
      ->capture_default_str();
  sev->add_option("--out", ev.out, "Output CSV");

  VizOpts viz;
  auto* sviz = app.add_subcommand("viz", "PCA projection of the feature layer and curve plots");
  sviz->add_option("--data", viz.data)->check(CLI::ExistingFile);
  sviz->add_option("--model", viz.model)->check(CLI::ExistingFile);
  sviz->add_option("--curves", viz.curves, "Curve CSV to plot")->check(CLI::ExistingFile);
  sviz->add_option("--dims", viz.dims)->check(CLI::IsMember({2, 3}))->capture_default_str();
  sviz->add_option("--out", viz.out, "Output path prefix");

  std::string config_path, repro_out;
  std::vector<std::string> sets;
  auto* srep = app.add_subcommand("repro", "Run the full experiment from a config file");
  srep->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  srep->add_option("--set", sets, "Override, e.g. train.epochs=5");
  srep->add_option("--out", repro_out, "Output directory (default $MODGUARD_OUT or ./modguard_out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) std::cerr << app.help();
    return app.exit(e);
  }
  set_thread_limit(g.threads);

  try {
    if (*sgen) return cmd_gen(g, *sgen, gen);
    if (*str) return cmd_train(g, *str, tr);
    if (*scal) return cmd_calibrate(g, *scal, cal);
    if (*satt) return cmd_attack(g, *satt, defense, att);
    if (*sev) return cmd_eval(g, *sev, variant, ev);
    if (*sviz) return cmd_viz(g, *sviz, viz);
    if (*srep) return cmd_repro(g, *srep, config_path, sets, repro_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
