// Acceptance run: one PASS/FAIL line per criterion, detail lines indented.
//
//   dctnn_acceptance <dctnn binary> [criterion ...] [--json out.json]
//
// Exit status is 0 only if every requested criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cli_util.hpp"
#include "dctnn/dctnn.hpp"
#include "net_util.hpp"
#include "test_util.hpp"

using namespace dctnn;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string summary;
  json detail = json::object();
};

void note(const std::string& s) { std::cout << "    " << s << '\n' << std::flush; }

std::string fmt(double v, int prec = 3) {
  std::ostringstream o;
  o.precision(prec);
  o << std::fixed << v;
  return o.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

// --- 1. Numerical kernels ------------------------------------------------------------

// sum_{ii} w[io, ii] h[ii] by multi-index enumeration.
DenseTensor naive_contract(const DenseTensor& w, const DenseTensor& h, const Shape& out_shape) {
  DenseTensor out(out_shape);
  for (std::size_t o = 0; o < out.size(); ++o) {
    const auto io = testutil::unravel(o, out_shape);
    double s = 0;
    for (std::size_t f = 0; f < h.size(); ++f) {
      auto idx = io;
      const auto ii = testutil::unravel(f, h.shape());
      idx.insert(idx.end(), ii.begin(), ii.end());
      s += w[testutil::ravel(idx, w.shape())] * h[f];
    }
    out[o] = s;
  }
  return out;
}

Outcome kernels() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double err[5] = {0, 0, 0, 0, 0};  // fold, identity, definition, associativity, contraction
  std::uniform_int_distribution<std::size_t> nd(1, 6), no(1, 2);
  const int trials = 300;
  for (int trial = 0; trial < trials; ++trial) {
    const Shape shape = testutil::random_shape(rng, 4, 6);
    const DenseTensor t = testutil::random_tensor(shape, rng);
    for (std::size_t m = 0; m < shape.size(); ++m) {
      err[0] = std::max(err[0], testutil::max_abs_diff(fold(unfold(t, m), m, shape), t));
      err[1] = std::max(err[1],
                        testutil::max_abs_diff(mode_product(t, Matrix::identity(shape[m]), m), t));
      const Matrix a = testutil::random_matrix(nd(rng), shape[m], rng);
      const DenseTensor ta = mode_product(t, a, m);
      err[2] = std::max(err[2], testutil::max_abs_diff(ta, testutil::naive_mode_product(t, a, m)));
      err[2] = std::max(err[2], testutil::max_abs_diff(unfold(ta, m), a * unfold(t, m)));
      const Matrix b = testutil::random_matrix(nd(rng), a.rows(), rng);
      err[3] = std::max(err[3],
                        testutil::max_abs_diff(mode_product(ta, b, m), mode_product(t, b * a, m)));
      for (std::size_t n = 0; n < shape.size(); ++n) {
        if (n == m) continue;
        const Matrix c = testutil::random_matrix(nd(rng), shape[n], rng);
        err[3] = std::max(err[3], testutil::max_abs_diff(mode_product(ta, c, n),
                                                         mode_product(mode_product(t, c, n), a, m)));
      }
    }
    Shape out_shape(no(rng));
    for (auto& d : out_shape) d = nd(rng);
    Shape ws = out_shape;
    ws.insert(ws.end(), shape.begin(), shape.end());
    const DenseTensor w = testutil::random_tensor(ws, rng);
    err[4] = std::max(err[4], testutil::max_abs_diff(contract(w, t, shape.size()),
                                                     naive_contract(w, t, out_shape)));
  }
  const double worst = *std::max_element(err, err + 5);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst <= 1e-12 && secs < 5.0;
  o.summary = std::to_string(trials) + " random tensors, max-abs error " + sci(worst) + ", " +
              fmt(secs, 2) + " s";
  o.detail = {{"fold_unfold", err[0]},   {"identity", err[1]},     {"mode_product", err[2]},
              {"associativity", err[3]}, {"contraction", err[4]}, {"seconds", secs}};
  return o;
}

// --- 2. Decomposition recovery ------------------------------------------------------

Outcome decomposition() {
  const auto t0 = Clock::now();
  double sine_exact = 0, sine_over = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto p = testutil::planted_tucker({12, 10, 8}, {3, 3, 3}, 60, 0.0, 100 + seed);
    const auto exact = fit_tucker(p.samples, {3, 3, 3}, kDefaultHooiIters, 1e-10);
    const auto over = fit_tucker(p.samples, {4, 4, 4}, kDefaultHooiIters, 1e-10);
    for (std::size_t m = 0; m < 3; ++m) {
      sine_exact = std::max(sine_exact,
                            linalg::principal_angle_sines(p.loadings[m], exact.loadings[m]).back());
      sine_over = std::max(sine_over,
                           linalg::principal_angle_sines(p.loadings[m], over.loadings[m]).back());
    }
  }
  bool hooi_monotone = true;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto p = testutil::planted_tucker({10, 9, 8}, {3, 2, 3}, 40, 0.8, 200 + seed);
    const auto& h = fit_tucker(p.samples, {2, 3, 2}, 30, 0.0).objective_history;
    for (std::size_t k = 1; k < h.size(); ++k) hooi_monotone &= h[k] >= h[k - 1] * (1 - 1e-12);
  }
  const auto cp = testutil::planted_cp(16, 12, 0.1, 300, 0.0, 300);
  const auto model = fit_cp(cp.samples, 16, kDefaultAlsIters, 1e-10, 0);
  const double cp_err = testutil::cp_signal_error(model, cp);
  bool als_monotone = true;
  double total = 0;
  for (const auto& x : cp.samples) total += std::pow(frobenius_norm(x - model.train_mean), 2);
  const auto& r = model.residual_history;
  for (std::size_t k = 1; k < r.size(); ++k) als_monotone &= r[k] <= r[k - 1] + 1e-10 * total;
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = sine_exact < 1e-6 && sine_over < 1e-6 && cp_err < 0.05 && hooi_monotone &&
           als_monotone && secs < 60.0;
  o.summary = "max sin angle " + sci(std::max(sine_exact, sine_over)) +
              " (exact and over-specified), CP relative error " + sci(cp_err) +
              ", objectives monotone " + (hooi_monotone && als_monotone ? "yes" : "no") + ", " +
              fmt(secs, 1) + " s";
  o.detail = {{"tucker_sine_exact", sine_exact}, {"tucker_sine_over", sine_over},
              {"cp_relative_error", cp_err},     {"hooi_monotone", hooi_monotone},
              {"als_monotone", als_monotone},    {"als_iterations", r.size()},
              {"seconds", secs}};
  return o;
}

// --- 3. Gradients -------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::size_t checked = 0;
  bool every_seed = true;
  for (int seed = 0; seed < 20; ++seed) {
    const auto r = netutil::gradient_check(seed);
    worst = std::max(worst, r.max_rel);
    checked += r.checked;
    every_seed &= r.checked > 0;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst < 1e-4 && every_seed && secs < 30.0;
  o.summary = "20 seeds, " + std::to_string(checked) + " parameters, max relative error " +
              sci(worst) + ", " + fmt(secs, 2) + " s";
  o.detail = {{"max_relative_error", worst}, {"checked", checked}, {"seconds", secs}};
  return o;
}

// --- 4 and 7. Paired structure study --------------------------------------------------

struct PairedStudy {
  std::vector<PairedRecord> records;
  double seconds = 0;
};

PairedStudy paired_study(Structure regime) {
  PairedStudy s;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SimConfig sim;
    sim.regime = regime;
    sim.seed = seed;
    FitConfig fit;
    fit.train.seed = seed;
    s.records.push_back(paired_run(sim, fit, SelectorConfig{}));
    const auto& r = s.records.back();
    note(to_string(regime) + " seed " + std::to_string(seed) + ": acc tucker " +
         fmt(r.tucker.accuracy) + " cp " + fmt(r.cp.accuracy) + ", dAUC " +
         fmt(r.selection.forward.diff.auc_sens.point) + " [" +
         fmt(r.selection.forward.diff.auc_sens.lo) + ", " +
         fmt(r.selection.forward.diff.auc_sens.hi) + "], selected " + r.selection.final + " (" +
         fmt(seconds_since(t0), 0) + " s)");
  }
  s.seconds = seconds_since(t0);
  return s;
}

const Metrics& matched(const PairedRecord& r, Structure regime) {
  return regime == Structure::Tucker ? r.tucker : r.cp;
}
const Metrics& mismatched(const PairedRecord& r, Structure regime) {
  return regime == Structure::Tucker ? r.cp : r.tucker;
}

Outcome estimation(const PairedStudy& tucker, const PairedStudy& cp) {
  Outcome o;
  o.pass = true;
  for (const auto* st : {&tucker, &cp}) {
    const Structure regime = st == &tucker ? Structure::Tucker : Structure::CP;
    double acc = 0, acc_mis = 0, mse = 0, mse_mis = 0;
    std::size_t wins = 0, mse_wins = 0;
    for (const auto& r : st->records) {
      acc += matched(r, regime).accuracy / 20;
      acc_mis += mismatched(r, regime).accuracy / 20;
      mse += matched(r, regime).mse / 20;
      mse_mis += mismatched(r, regime).mse / 20;
      wins += matched(r, regime).accuracy > mismatched(r, regime).accuracy;
      mse_wins += matched(r, regime).mse < mismatched(r, regime).mse;
    }
    const bool ok = acc >= 0.80 && acc <= 0.90 && wins >= 15 && st->seconds < 900;
    o.pass &= ok;
    const std::string name = to_string(regime);
    o.summary += (o.summary.empty() ? "" : "; ") + name + " data: matched acc " + fmt(acc) +
                 " (mismatched " + fmt(acc_mis) + "), matched wins " + std::to_string(wins) +
                 "/20, " + fmt(st->seconds / 60, 1) + " min";
    o.detail[name] = {{"matched_accuracy", acc},     {"mismatched_accuracy", acc_mis},
                      {"matched_wins", wins},        {"matched_mse", mse},
                      {"mismatched_mse", mse_mis},   {"matched_mse_wins", mse_wins},
                      {"seconds", st->seconds},      {"pass", ok}};
  }
  return o;
}

Outcome selector_validity(const PairedStudy& tucker, const PairedStudy& cp) {
  std::size_t tucker_ok = 0, cp_ok = 0, cp_point_below = 0, wrong = 0;
  double point_t = 0, point_c = 0;
  for (const auto& r : tucker.records) {
    tucker_ok += r.selection.final == "tucker" || r.selection.final == "tie";
    wrong += r.selection.final == "cp";
    point_t += r.selection.forward.diff.auc_sens.point / 20;
  }
  for (const auto& r : cp.records) {
    const bool below = r.selection.forward.diff.auc_sens.point < 0.5;
    cp_point_below += below;
    cp_ok += below && r.selection.final == "cp";
    wrong += r.selection.final == "tucker";
    point_c += r.selection.forward.diff.auc_sens.point / 20;
  }
  const double wrong_rate = static_cast<double>(wrong) / 40.0;
  Outcome o;
  o.pass = tucker_ok >= 18 && cp_ok >= 18 && wrong_rate <= 0.3;
  o.summary = "tucker data: tucker-or-tie " + std::to_string(tucker_ok) +
              "/20 (mean dAUC " + fmt(point_t) + "); cp data: dAUC < 0.5 and cp " +
              std::to_string(cp_ok) + "/20 (dAUC < 0.5 in " + std::to_string(cp_point_below) +
              ", mean " + fmt(point_c) + "); wrong selections " + fmt(wrong_rate);
  json verdicts = {{"tucker", json::array()}, {"cp", json::array()}};
  for (const auto& r : tucker.records) verdicts["tucker"].push_back(r.selection.final);
  for (const auto& r : cp.records) verdicts["cp"].push_back(r.selection.final);
  o.detail = {{"tucker_or_tie", tucker_ok},      {"cp_selected_with_point_below", cp_ok},
              {"cp_point_below", cp_point_below}, {"mean_dauc_tucker_data", point_t},
              {"mean_dauc_cp_data", point_c},     {"wrong_rate", wrong_rate},
              {"verdicts", verdicts}};
  return o;
}

// --- 5. DGP fidelity ------------------------------------------------------------------

Outcome dgp_fidelity() {
  const auto t0 = Clock::now();
  Outcome o;
  o.pass = true;
  struct Target {
    Structure regime;
    double z, pi;
  };
  for (const Target& t : {Target{Structure::Tucker, 2.542, 0.825}, Target{Structure::CP, 3.048, 0.820}}) {
    double z = 0, pi = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      SimConfig sim;
      sim.regime = t.regime;
      sim.seed = seed;
      const ClassStats st = class_stats(gen_dataset(sim));
      z += st.z_mean[1] / 5;
      pi += st.pi_mean[1] / 5;
    }
    const bool ok = std::abs(z - t.z) <= 0.5 && std::abs(pi - t.pi) <= 0.08;
    o.pass &= ok;
    const std::string name = to_string(t.regime);
    o.summary += (o.summary.empty() ? "" : "; ") + name + " mean z|y=1 " + fmt(z) + " (target " +
                 fmt(t.z) + "), mean pi|y=1 " + fmt(pi) + " (target " + fmt(t.pi) + ")";
    o.detail[name] = {{"z_mean_y1", z}, {"pi_mean_y1", pi}, {"pass", ok}};
  }
  o.detail["seconds"] = seconds_since(t0);
  return o;
}

// --- 6. Conformal coverage --------------------------------------------------------------

Outcome coverage() {
  const auto t0 = Clock::now();
  SimConfig sim;
  sim.regime = Structure::Tucker;
  sim.n_per_class = 300;
  sim.seed = 1000;
  const CoverageReport rep = coverage_experiment(sim, FitConfig{}, ConformalConfig{}, 20, false);
  for (const auto& c : rep.reps)
    note("seed " + std::to_string(c.seed) + ": lambda " + fmt(c.lambda) + " sens " +
         (c.sens ? "in" : "out") + " spec " + (c.spec ? "in" : "out") + ", AUC0 " + fmt(c.auc0) +
         " in [" + fmt(c.auc_interval.lo) + ", " + fmt(c.auc_interval.hi) + "] " +
         (c.auc_sens ? "yes" : "no") + ", spec-form " + (c.auc_spec ? "yes" : "no"));
  const double secs = seconds_since(t0);
  auto rate = [&](bool CoverageRecord::*f) {
    return rep.rate([f](const CoverageRecord& c) { return c.*f; }).rate;
  };
  const double sens = rate(&CoverageRecord::sens), spec = rate(&CoverageRecord::spec);
  const double auc = rate(&CoverageRecord::auc_sens), auc_spec = rate(&CoverageRecord::auc_spec);
  const double nested = rate(&CoverageRecord::nested);
  Outcome o;
  o.pass = sens >= 0.70 && spec >= 0.70 && auc >= 0.70 && nested == 1.0 && secs < 1800;
  o.summary = "sens " + fmt(sens, 2) + ", spec " + fmt(spec, 2) + ", AUC " + fmt(auc, 2) +
              " (spec-form " + fmt(auc_spec, 2) + "), nested " + fmt(nested, 2) + ", " +
              fmt(secs / 60, 1) + " min";
  o.detail = to_json(rep);
  o.detail["seconds"] = secs;
  return o;
}

// --- 8. Degenerate and property suite -----------------------------------------------------

Outcome degenerate(const std::string& cli) {
  const auto t0 = Clock::now();
  json checks;

  SimConfig sim;
  sim.dims = {12, 12, 12};
  sim.n_per_class = 150;
  sim.seed = 77;
  const SimDataset ds = gen_dataset(sim);
  FitConfig fc;
  fc.train.epochs = 10;
  const ModelRun m = run_model(ds, fc);
  ConformalConfig cc;
  cc.smoother_is_identity = true;
  const UqResult uq = conformal_uq(m.train, m.cal, m.test, cc);
  bool collapse = std::all_of(uq.scores.begin(), uq.scores.end(), [](double s) { return s == 0.0; });
  collapse &= uq.band.sens_lo == uq.band.sens && uq.band.sens_hi == uq.band.sens &&
              uq.band.spec_lo == uq.band.spec && uq.band.spec_hi == uq.band.spec;
  collapse &= uq.auc_sens.lo == uq.auc_sens.point && uq.auc_sens.hi == uq.auc_sens.point &&
              uq.auc_spec.lo == uq.auc_spec.point && uq.auc_spec.hi == uq.auc_spec.point;
  checks["zero_score_collapse"] = collapse;

  const Selection same = select_structure("a", "b", m.cal, m.test, m.cal, m.test, SelectorConfig{});
  checks["identical_models_tie"] = same.final == "tie";

  bool bounded = true;
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const double v = 0.25;
    auto net = init_net(netutil::tiny_config(seed % 2, v), seed);
    netutil::jitter(net, rng, 2.0);
    const auto tr = forward_batch(net, netutil::random_rows(50, 4, rng, 10.0),
                                  netutil::random_rows(50, 6, rng, 10.0));
    for (Eigen::Index i = 0; i < tr.truncated.size(); ++i) bounded &= std::abs(tr.truncated[i]) <= v;
  }
  FitConfig ft = fc;
  ft.truncation = 0.5;
  const ModelRun mt = run_model(ds, ft);
  for (const auto& p : mt.test) bounded &= p.prob >= sigmoid(-0.5) && p.prob <= sigmoid(0.5);
  checks["truncation_bound"] = bounded;

  bool hand = clipped_l1(DenseTensor({3}), 0.1, 0.05) == 0.0;
  hand &= std::abs(clipped_l1(DenseTensor({4}, {0.0, 0.025, -0.05, 0.2}), 0.1, 0.05) - 0.25) < 1e-15;
  hand &= std::abs(clipped_l1(DenseTensor({2}, {0.01, -0.10}), 0.1, 0.05) - 0.12) < 1e-15;
  hand &= clipped_l1_prox(0.04, 1.0, 0.1, 0.05) == 0.0 && clipped_l1_prox(3.0, 1.0, 0.1, 0.05) == 3.0;
  hand &= std::abs(clipped_l1_prox(0.01, 1e-3, 0.1, 0.05) - 0.008) < 1e-15;
  hand &= std::abs(clipped_l1_prox(-0.049, 1e-3, 0.1, 0.05) + 0.047) < 1e-15;
  checks["clipped_l1_hand_values"] = hand;

  const auto tmp = std::filesystem::temp_directory_path();
  const auto a = cliutil::run_pipeline(cli, tmp / "dctnn_accept_a");
  const auto b = cliutil::run_pipeline(cli, tmp / "dctnn_accept_b");
  bool deterministic = a.inspect_verify == 0 && b.inspect_verify == 0;
  json steps;
  for (const auto& [step, code] : a.exit_codes) {
    const bool ok = code == 0 && b.exit_codes.at(step) == 0 && !a.artifacts.at(step).empty() &&
                    a.artifacts.at(step) == b.artifacts.at(step);
    steps[step] = ok;
    deterministic &= ok;
  }
  steps["inspect"] = a.inspect_verify == 0 && b.inspect_verify == 0;
  checks["determinism"] = deterministic;
  checks["determinism_steps"] = steps;
  std::filesystem::remove_all(tmp / "dctnn_accept_a");
  std::filesystem::remove_all(tmp / "dctnn_accept_b");

  Outcome o;
  o.pass = collapse && same.final == "tie" && bounded && hand && deterministic;
  for (const char* k : {"zero_score_collapse", "identical_models_tie", "truncation_bound",
                        "clipped_l1_hand_values", "determinism"})
    o.summary += std::string(o.summary.empty() ? "" : ", ") + k + " " +
                 (checks[k].get<bool>() ? "ok" : "FAILED");
  o.detail = checks;
  o.detail["seconds"] = seconds_since(t0);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: dctnn_acceptance <dctnn binary> [criterion ...] [--json out.json]\n";
    return 2;
  }
  const std::string cli = argv[1];
  std::set<int> wanted;
  std::string json_path = "acceptance.json";
  for (int i = 2; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--json" && i + 1 < argc) json_path = argv[++i];
    else wanted.insert(std::stoi(a));
  }
  if (wanted.empty()) wanted = {1, 2, 3, 4, 5, 6, 7, 8};

  const char* names[] = {"",
                         "numerical kernels",
                         "decomposition recovery",
                         "gradient correctness",
                         "estimation quality",
                         "DGP fidelity",
                         "conformal coverage",
                         "selector validity",
                         "degenerate and property suite"};
  json report;
  bool all = true;
  std::optional<PairedStudy> tucker, cp;
  auto studies = [&] {
    if (tucker) return;
    tucker = paired_study(Structure::Tucker);
    cp = paired_study(Structure::CP);
  };
  for (int k : wanted) {
    if (k < 1 || k > 8) continue;
    std::cout << "[" << k << "] " << names[k] << " ...\n" << std::flush;
    Outcome o;
    try {
      switch (k) {
        case 1: o = kernels(); break;
        case 2: o = decomposition(); break;
        case 3: o = gradients(); break;
        case 4: studies(); o = estimation(*tucker, *cp); break;
        case 5: o = dgp_fidelity(); break;
        case 6: o = coverage(); break;
        case 7: studies(); o = selector_validity(*tucker, *cp); break;
        case 8: o = degenerate(cli); break;
      }
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("error: ") + e.what();
    }
    all &= o.pass;
    std::cout << "[" << k << "] " << (o.pass ? "PASS" : "FAIL") << " " << names[k] << ": "
              << o.summary << '\n'
              << std::flush;
    report[std::to_string(k)] = {{"name", names[k]}, {"pass", o.pass}, {"summary", o.summary},
                                 {"detail", o.detail}};
  }
  if (tucker) {
    json recs = {{"tucker", json::array()}, {"cp", json::array()}};
    for (const auto& r : tucker->records) recs["tucker"].push_back(to_json(r));
    for (const auto& r : cp->records) recs["cp"].push_back(to_json(r));
    report["paired_records"] = recs;
  }
  std::ofstream(json_path) << report.dump(2) << '\n';
  return all ? 0 : 1;
}
