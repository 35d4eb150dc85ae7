// dctnn: simulate, fit, uq, select, coverage, inspect.
// Exit codes: 0 ok, 2 configuration, 3 data, 4 numerical.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "dctnn/dctnn.hpp"

namespace fs = std::filesystem;
using namespace dctnn;

namespace {

constexpr int kExitConfig = 2, kExitData = 3, kExitNumerical = 4;

struct Common {
  std::size_t threads = 1;
};

// Options shared by fit and coverage.
struct FitOptions {
  FitConfig cfg;
  std::string structure = "tucker";
  std::string link = "sigmoid";
  std::vector<std::size_t> widths, ranks{4, 4, 4}, refinement{3, 3, 3};
  std::string penalty = "proximal";
  bool no_layer_norm = false;
  double truncation = 0.0;  // 0: none

  void add(CLI::App* app) {
    app->add_option("--structure", structure, "tucker or cp")->check(CLI::IsMember({"tucker", "cp"}));
    app->add_option("--ranks", ranks, "over-specified Tucker ranks")->delimiter(',');
    app->add_option("--cp-rank", cfg.cp_rank, "over-specified CP rank");
    app->add_option("--refinement-shape", refinement, "refinement channel shape")->delimiter(',');
    app->add_option("--depth", cfg.depth, "network depth L");
    app->add_option("--widths", widths, "hidden core-channel shape (default: core shape)")->delimiter(',');
    app->add_option("--link", link, "output link")->check(CLI::IsMember({"sigmoid", "identity"}));
    app->add_flag("--no-layer-norm", no_layer_norm, "disable layer normalization");
    app->add_option("--truncation", truncation, "truncation level V (0: none)");
    app->add_option("--lambda", cfg.train.lambda, "clipped-L1 penalty level");
    app->add_option("--tau", cfg.train.tau, "clipped-L1 threshold");
    app->add_option("--penalty", penalty, "selector penalty step: proximal or subgradient")
        ->check(CLI::IsMember({"proximal", "subgradient"}));
    app->add_option("--lr", cfg.train.lr, "Adam learning rate");
    app->add_option("--weight-decay", cfg.train.weight_decay, "L2 weight decay");
    app->add_option("--weight-bound", cfg.train.weight_bound,
                    "max-abs bound on hidden-layer weights (default: none)");
    app->add_option("--batch-size", cfg.train.batch_size, "minibatch size");
    app->add_option("--epochs", cfg.train.epochs, "maximum epochs");
    app->add_option("--validation-fraction", cfg.validation_fraction,
                    "training share held out for early stopping (0: off)");
    app->add_option("--patience", cfg.patience, "early-stopping patience in epochs");
    app->add_option("--seed", cfg.train.seed, "initialization and shuffling seed");
  }

  FitConfig resolve() const {
    FitConfig c = cfg;
    c.structure = parse_structure(structure);
    c.tucker_ranks = ranks;
    c.refinement_shape = refinement;
    c.hidden_core = widths;
    c.link = parse_link(link);
    c.layer_norm = !no_layer_norm;
    c.train.proximal_penalty = penalty == "proximal";
    if (truncation > 0) c.truncation = truncation;
    else if (truncation < 0) throw ConfigError("truncation must be >= 0");
    c.validate();
    return c;
  }
};

struct ConformalOptions {
  ConformalConfig cfg;
  bool no_hull = false;
  void add(CLI::App* app) {
    app->add_option("--k-train", cfg.k_train, "K_tr neighbours for the smoother");
    app->add_option("--k-cal", cfg.k_cal, "K_ca local calibration neighbours");
    app->add_option("--omega", cfg.omega, "refinement weight in the latent distance");
    app->add_option("--alpha", cfg.alpha, "miscoverage level");
    app->add_option("--grid", cfg.grid, "threshold grid size G");
    app->add_flag("--inflate", cfg.inflate, "use the (n+1) split-conformal quantile");
    app->add_flag("--identity-smoother", cfg.smoother_is_identity, "set pi_tilde = pi_hat");
    app->add_flag("--no-hull", no_hull, "do not extend intervals to contain pi_hat");
  }
  ConformalConfig resolve() const {
    ConformalConfig c = cfg;
    c.contain_point = !no_hull;
    c.validate();
    return c;
  }
};

std::string ini_snapshot(const CLI::App* app) { return app->config_to_str(true, false); }

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("missing " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed " + p.string() + ": " + e.what());
  }
}

// Identifies a dataset by the hashes of its samples and tensors.
nlohmann::json dataset_fingerprint(const fs::path& data) {
  return {{"samples.csv", sha256_file(data / "samples.csv")}, {"x.bin", sha256_file(data / "x.bin")}};
}

class Run {
 public:
  Run(std::string name, const CLI::App* app, fs::path out, std::uint64_t seed)
      : out_(std::move(out)), start_(std::chrono::steady_clock::now()) {
    m_.subcommand = std::move(name);
    m_.seed = seed;
    m_.started_at = utc_now();
    m_.config = {{"ini", ini_snapshot(app)}};
    fs::create_directories(out_);
  }
  const fs::path& out() const { return out_; }
  void finish() {
    m_.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_manifest(out_, m_);
    std::cout << "wrote " << out_.string() << " (" << std::fixed << std::setprecision(1)
              << m_.wall_clock_seconds << " s)\n";
  }

 private:
  fs::path out_;
  std::chrono::steady_clock::time_point start_;
  RunManifest m_;
};

// --- simulate ----------------------------------------------------------------------

struct SimulateCmd {
  fs::path out;
  std::string regime = "tucker";
  std::size_t n = 2000;
  SimConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--out", out, "dataset directory")->required();
    app->add_option("--regime", regime, "tucker or cp")->check(CLI::IsMember({"tucker", "cp"}));
    app->add_option("--n", n, "total samples (even; classes balanced)");
    app->add_option("--dims", cfg.dims, "tensor dimensions")->delimiter(',');
    app->add_option("--noise", cfg.noise_sd, "nuisance noise sd");
    app->add_option("--logit-target", cfg.logit_target, "pilot mean |z| for the labeler");
    app->add_option("--seed", cfg.seed, "master seed");
  }

  void run(const CLI::App* app) {
    if (n < 2 || n % 2) throw ConfigError("--n must be even and at least 2");
    cfg.n_per_class = n / 2;
    cfg.regime = parse_structure(regime);
    cfg.validate();
    Run r("simulate", app, out, cfg.seed);
    const SimDataset ds = gen_dataset(cfg);
    save_dataset(out, ds);
    const ClassStats s = class_stats(ds);
    write_json(out / "stats.json", {{"candidates", ds.candidates},
                                    {"z_mean_y1", s.z_mean[1]}, {"z_mean_y0", s.z_mean[0]},
                                    {"pi_mean_y1", s.pi_mean[1]}, {"pi_mean_y0", s.pi_mean[0]},
                                    {"pi_sd_y1", s.pi_sd[1]}, {"pi_sd_y0", s.pi_sd[0]}});
    r.finish();
  }
};

// --- fit -----------------------------------------------------------------------------

struct FitCmd {
  fs::path data, out;
  FitOptions opt;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset directory")->required();
    app->add_option("--out", out, "output directory")->required();
    opt.add(app);
  }

  void run(const CLI::App* app) {
    const FitConfig cfg = opt.resolve();
    const SimDataset ds = load_dataset(data);
    Run r("fit", app, out, cfg.train.seed);
    const SplitData tr = gather(ds, Split::Train);
    const FittedModel m = fit(tr.x, tr.y, cfg);
    save_fitted(out / "model", m);

    nlohmann::json metrics{{"structure", to_string(cfg.structure)},
                           {"dataset", dataset_fingerprint(data)},
                           {"best_epoch", m.history.best_epoch},
                           {"epochs_run", m.history.epoch_loss.size()},
                           {"active_selector_entries", active_selector_entries(m.net, cfg.train.tau)}};
    std::ofstream csv(out / "predictions.csv");
    csv << "index,split,y,prob,residual,true_pi\n" << std::setprecision(10);
    for (Split s : {Split::Train, Split::Calibration, Split::Test}) {
      const auto idx = ds.indices(s);
      const SplitData d = gather(ds, s);
      if (d.x.empty()) continue;
      const auto prob = predict_all(m, d.x).prob;
      for (std::size_t i = 0; i < idx.size(); ++i)
        csv << idx[i] << ',' << to_string(s) << ',' << d.y[i] << ',' << prob[i] << ','
            << d.y[i] - prob[i] << ',' << d.true_pi[i] << '\n';
      metrics[to_string(s)] = to_json(evaluate(prob, d.y, d.true_pi));
    }
    csv.close();
    write_json(out / "metrics.json", metrics);
    std::cout << "test accuracy " << metrics["test"]["accuracy"] << ", mse " << metrics["test"]["mse"]
              << '\n';
    r.finish();
  }
};

// Latent points of a fitted model (directory from `fit`) on one split.
std::vector<LatentPoint> split_points(const FittedModel& m, const SimDataset& ds, Split s) {
  const SplitData d = gather(ds, s);
  if (d.x.empty()) throw DataError(std::string("empty ") + to_string(s) + " split");
  return latent_points(m, predict_all(m, d.x), d.y);
}

void check_same_dataset(const fs::path& model_dir, const fs::path& data) {
  const auto fp = read_json(model_dir / "metrics.json").at("dataset");
  if (fp != dataset_fingerprint(data))
    throw DataError("model " + model_dir.string() + " was fit on a different dataset than " +
                    data.string());
}

// --- uq ------------------------------------------------------------------------------

struct UqCmd {
  fs::path data, model, out;
  ConformalOptions opt;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset directory")->required();
    app->add_option("--model", model, "fit output directory")->required();
    app->add_option("--out", out, "output directory")->required();
    opt.add(app);
  }

  void run(const CLI::App* app) {
    const ConformalConfig cfg = opt.resolve();
    const SimDataset ds = load_dataset(data);
    check_same_dataset(model, data);
    const FittedModel m = load_fitted(model / "model");
    Run r("uq", app, out, m.config.train.seed);
    const auto train = split_points(m, ds, Split::Train);
    const auto cal = split_points(m, ds, Split::Calibration);
    const auto test = split_points(m, ds, Split::Test);
    const UqResult u = conformal_uq(train, cal, test, cfg);
    write_band_csv(out / "band.csv", u.band);
    write_json(out / "auc.json", {{"alpha", cfg.alpha},
                                  {"auc_sens", to_json(u.auc_sens)},
                                  {"auc_spec", to_json(u.auc_spec)}});
    std::ofstream csv(out / "intervals.csv");
    csv << "index,y,prob,lo,hi\n" << std::setprecision(10);
    const auto idx = ds.indices(Split::Test);
    for (std::size_t i = 0; i < test.size(); ++i)
      csv << idx[i] << ',' << test[i].label << ',' << test[i].prob << ',' << u.intervals[i].lo << ','
          << u.intervals[i].hi << '\n';
    csv.close();
    std::cout << "AUC " << u.auc_sens.point << " [" << u.auc_sens.lo << ", " << u.auc_sens.hi << "]\n";
    r.finish();
  }
};

// --- select --------------------------------------------------------------------------

struct SelectCmd {
  fs::path data, model_a, model_b, out;
  SelectorConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset directory")->required();
    app->add_option("--model-a", model_a, "fit output of the null model")->required();
    app->add_option("--model-b", model_b, "fit output of the alternative")->required();
    app->add_option("--out", out, "output directory")->required();
    app->add_option("--k", cfg.k, "class-conditional neighbours K");
    app->add_option("--omega", cfg.omega, "refinement weight in the latent distance");
    app->add_option("--alpha", cfg.alpha, "miscoverage level");
    app->add_option("--grid", cfg.grid, "threshold grid size G");
  }

  void run(const CLI::App* app) {
    cfg.validate();
    const SimDataset ds = load_dataset(data);
    check_same_dataset(model_a, data);
    check_same_dataset(model_b, data);
    const FittedModel a = load_fitted(model_a / "model"), b = load_fitted(model_b / "model");
    std::string na = to_string(a.config.structure), nb = to_string(b.config.structure);
    if (na == nb) na += "_a", nb += "_b";
    Run r("select", app, out, a.config.train.seed);
    const Selection s = select_structure(na, nb, split_points(a, ds, Split::Calibration),
                                         split_points(a, ds, Split::Test),
                                         split_points(b, ds, Split::Calibration),
                                         split_points(b, ds, Split::Test), cfg);
    write_json(out / "decision.json", to_json(s));
    for (const DirectionResult* d : {&s.forward, &s.reverse})
      write_band_csv(out / ("dband_" + d->model_a + "-" + d->model_b + ".csv"), d->diff.band, "d");
    std::cout << "decision: " << s.final << '\n';
    r.finish();
  }
};

// --- coverage ------------------------------------------------------------------------

struct CoverageCmd {
  fs::path out;
  std::string regime = "tucker";
  std::size_t n = 600, reps = 20;
  std::uint64_t seed = 0;
  bool no_selector = false;
  Shape dims{32, 32, 32};
  FitOptions fit;
  ConformalOptions conf;
  SelectorConfig sel;

  void add(CLI::App* app) {
    app->add_option("--out", out, "output directory")->required();
    app->add_option("--regime", regime, "tucker or cp")->check(CLI::IsMember({"tucker", "cp"}));
    app->add_option("--n", n, "samples per replication (even)");
    app->add_option("--reps", reps, "replications");
    app->add_option("--dims", dims, "tensor dimensions")->delimiter(',');
    app->add_option("--sim-seed", seed, "seed of the first replication");
    app->add_flag("--no-selector", no_selector, "skip the mismatched fit and selection");
    app->add_option("--selector-k", sel.k, "selector neighbours K");
    fit.add(app);
    conf.add(app);
  }

  void run(const CLI::App* app) {
    if (n < 2 || n % 2) throw ConfigError("--n must be even and at least 2");
    if (reps == 0) throw ConfigError("--reps must be positive");
    SimConfig sc;
    sc.regime = parse_structure(regime);
    sc.n_per_class = n / 2;
    sc.dims = dims;
    sc.seed = seed;
    sc.validate();
    const FitConfig fc = fit.resolve();
    const ConformalConfig cc = conf.resolve();
    sel.alpha = cc.alpha;
    sel.omega = cc.omega;
    Run r("coverage", app, out, seed);
    const CoverageReport rep = coverage_experiment(sc, fc, cc, reps, !no_selector, sel);
    const auto j = to_json(rep);
    write_json(out / "coverage.json", j);
    std::cout << "coverage sens " << j["sens"]["rate"] << ", spec " << j["spec"]["rate"] << ", auc "
              << j["auc_sens"]["rate"] << '\n';
    r.finish();
  }
};

// --- inspect -------------------------------------------------------------------------

struct InspectCmd {
  fs::path dir;
  bool verify = false;

  void add(CLI::App* app) {
    app->add_option("dir", dir, "output directory of any subcommand")->required();
    app->add_flag("--verify", verify, "recompute artifact hashes against the manifest");
  }

  int run() {
    const auto m = read_manifest(dir);
    std::cout << m.dump(2) << '\n';
    for (const char* f : {"stats.json", "metrics.json", "auc.json", "decision.json", "coverage.json"})
      if (fs::exists(dir / f)) std::cout << f << ":\n" << read_json(dir / f).dump(2) << '\n';
    if (!verify) return 0;
    const auto now = hash_tree(dir);
    const auto recorded = m.at("artifacts").get<std::map<std::string, std::string>>();
    if (now != recorded) {
      std::cerr << "artifact hashes differ from the manifest\n";
      return kExitData;
    }
    std::cout << "artifacts verified\n";
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-channel tensor networks: simulation, fitting, conformal UQ and structure selection"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_config("--config", "", "INI config; command-line flags take precedence");
  Common common;
  app.add_option("--threads", common.threads, "worker cap")->check(CLI::PositiveNumber);

  SimulateCmd sim;
  FitCmd fitc;
  UqCmd uq;
  SelectCmd sel;
  CoverageCmd cov;
  InspectCmd ins;
  auto* s_sim = app.add_subcommand("simulate", "generate a simulated dataset");
  auto* s_fit = app.add_subcommand("fit", "decompose and train a DC-TNN");
  auto* s_uq = app.add_subcommand("uq", "conformal ROC bands and AUC intervals");
  auto* s_sel = app.add_subcommand("select", "difference-ROC structure selection");
  auto* s_cov = app.add_subcommand("coverage", "Monte Carlo coverage of the conformal bands");
  auto* s_ins = app.add_subcommand("inspect", "print a run manifest and its metrics");
  sim.add(s_sim);
  fitc.add(s_fit);
  uq.add(s_uq);
  sel.add(s_sel);
  cov.add(s_cov);
  ins.add(s_ins);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    Eigen::setNbThreads(static_cast<int>(common.threads));
    if (s_sim->parsed()) sim.run(s_sim);
    else if (s_fit->parsed()) fitc.run(s_fit);
    else if (s_uq->parsed()) uq.run(s_uq);
    else if (s_sel->parsed()) sel.run(s_sel);
    else if (s_cov->parsed()) cov.run(s_cov);
    else if (s_ins->parsed()) return ins.run();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
