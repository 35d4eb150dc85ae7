#pragma once

// Structure selection from the difference score d = pi_A - pi_B: local
// conformal intervals for d, difference-ROC bands over (-1, 1], AUC sets and
// the sensitivity/specificity decision rules. Both test directions are run
// and reconciled.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dctnn/conformal.hpp"
#include "dctnn/error.hpp"

namespace dctnn {

// Difference points reuse LatentPoint: `prob` holds d, the latent part is the
// null model's representation.
inline std::vector<LatentPoint> difference_scores(std::span<const LatentPoint> a,
                                                  std::span<const LatentPoint> b) {
  if (a.size() != b.size()) throw DataError("difference_scores: models scored different splits");
  std::vector<LatentPoint> out(a.begin(), a.end());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].label != b[i].label) throw DataError("difference_scores: label mismatch at row " +
                                                  std::to_string(i));
    out[i].prob = a[i].prob - b[i].prob;
  }
  return out;
}

// lambda_g = -1 + 2g/G, g = 1..G.
inline std::vector<double> diff_grid(std::size_t g) {
  if (g < 2) throw ConfigError("threshold grid needs at least 2 points");
  std::vector<double> t(g);
  for (std::size_t i = 0; i < g; ++i)
    t[i] = -1.0 + 2.0 * static_cast<double>(i + 1) / static_cast<double>(g);
  return t;
}

struct SelectorConfig {
  std::size_t k = 8;
  double omega = 10.0;
  double alpha = 0.1;
  std::size_t grid = 200;

  void validate() const {
    if (k == 0) throw ConfigError("selector K must be positive");
    if (!(omega > 0)) throw ConfigError("omega must be positive");
    if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha must be in (0, 1)");
    if (grid < 2) throw ConfigError("grid must have at least 2 points");
  }
};

// [q_{alpha/2}, q_{1-alpha/2}] of d over the K nearest class-k calibration
// points.
inline Interval diff_interval(std::span<const LatentPoint> cal, const LatentPoint& query, int k,
                              const SelectorConfig& cfg) {
  std::vector<double> d;
  for (std::size_t i : nearest(cal, query, cfg.k, cfg.omega,
                               [k](const LatentPoint& p) { return p.label == k; }))
    d.push_back(cal[i].prob);
  if (d.empty()) throw DataError("insufficient calibration data: no class-" + std::to_string(k) +
                                 " calibration points");
  return {class_quantile(d, cfg.alpha / 2), class_quantile(d, 1 - cfg.alpha / 2)};
}

// Counts of the 2x2 table at threshold lambda: rows y = 1, 0; columns d > lambda, d <= lambda.
struct Contingency {
  double lambda = 0.0;
  std::size_t n11 = 0, n12 = 0, n21 = 0, n22 = 0;
};

inline Contingency contingency(std::span<const LatentPoint> test, double lambda) {
  Contingency c{lambda};
  for (const auto& p : test) {
    const bool above = p.prob > lambda;
    if (p.label == 1) (above ? c.n11 : c.n12) += 1;
    else (above ? c.n21 : c.n22) += 1;
  }
  return c;
}

struct DiffResult {
  std::vector<Interval> intervals;
  RocBand band;
  AucInterval auc_sens, auc_spec;
  Contingency table;  // at lambda = 0
};

inline DiffResult diff_roc(std::span<const LatentPoint> cal, std::span<const LatentPoint> test,
                           const SelectorConfig& cfg) {
  cfg.validate();
  DiffResult r;
  std::vector<double> d;
  std::vector<int> y;
  for (const auto& q : test) {
    if (q.label != 0 && q.label != 1) throw DataError("diff_roc: test labels must be 0/1");
    r.intervals.push_back(diff_interval(cal, q, q.label, cfg));
    d.push_back(q.prob);
    y.push_back(q.label);
  }
  r.band = roc_bands(d, y, r.intervals, diff_grid(cfg.grid), cfg.alpha);
  std::tie(r.auc_sens, r.auc_spec) = auc_intervals(r.band);
  r.table = contingency(test, 0.0);
  return r;
}

enum class Verdict { ModelA, ModelB, Tie, Conflict };

inline std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::ModelA: return "model_a";
    case Verdict::ModelB: return "model_b";
    case Verdict::Tie: return "tie";
    case Verdict::Conflict: return "conflict";
  }
  return "?";
}

inline Verdict decide(const AucInterval& a) {
  if (a.lo > 0.5) return Verdict::ModelA;
  if (a.hi < 0.5) return Verdict::ModelB;
  return Verdict::Tie;
}

// A selection plus a tie keeps the selection; opposite selections conflict.
inline Verdict combine(Verdict a, Verdict b) {
  if (a == Verdict::Conflict || b == Verdict::Conflict) return Verdict::Conflict;
  if (a == Verdict::Tie) return b;
  if (b == Verdict::Tie || a == b) return a;
  return Verdict::Conflict;
}

inline Verdict swap_roles(Verdict v) {
  if (v == Verdict::ModelA) return Verdict::ModelB;
  if (v == Verdict::ModelB) return Verdict::ModelA;
  return v;
}

struct DirectionResult {
  std::string model_a, model_b;  // d = pi_a - pi_b, latent space of model_a
  DiffResult diff;
  Verdict sens = Verdict::Tie, spec = Verdict::Tie, combined = Verdict::Tie;
  bool constant = false;  // all test d equal: no ROC, both rules tie
};

inline DirectionResult run_direction(std::string name_a, std::string name_b,
                                     std::span<const LatentPoint> cal_a,
                                     std::span<const LatentPoint> cal_b,
                                     std::span<const LatentPoint> test_a,
                                     std::span<const LatentPoint> test_b,
                                     const SelectorConfig& cfg) {
  DirectionResult r;
  r.model_a = std::move(name_a);
  r.model_b = std::move(name_b);
  const auto cal = difference_scores(cal_a, cal_b);
  const auto test = difference_scores(test_a, test_b);
  r.diff = diff_roc(cal, test, cfg);
  r.constant = std::all_of(test.begin(), test.end(),
                           [&](const LatentPoint& p) { return p.prob == test.front().prob; });
  if (!r.constant) {
    r.sens = decide(r.diff.auc_sens);
    r.spec = decide(r.diff.auc_spec);
  }
  r.combined = combine(r.sens, r.spec);
  return r;
}

// Selected model name, "tie" or "conflict".
inline std::string verdict_name(Verdict v, const std::string& a, const std::string& b) {
  if (v == Verdict::ModelA) return a;
  if (v == Verdict::ModelB) return b;
  return to_string(v);
}

struct Selection {
  DirectionResult forward;  // a vs b in a's latent space
  DirectionResult reverse;  // b vs a in b's latent space
  std::string final;
};

// Points of each model on the same calibration and test rows, in row order.
inline Selection select_structure(const std::string& name_a, const std::string& name_b,
                                  std::span<const LatentPoint> cal_a,
                                  std::span<const LatentPoint> test_a,
                                  std::span<const LatentPoint> cal_b,
                                  std::span<const LatentPoint> test_b,
                                  const SelectorConfig& cfg) {
  Selection s;
  s.forward = run_direction(name_a, name_b, cal_a, cal_b, test_a, test_b, cfg);
  s.reverse = run_direction(name_b, name_a, cal_b, cal_a, test_b, test_a, cfg);
  s.final = verdict_name(combine(s.forward.combined, swap_roles(s.reverse.combined)), name_a, name_b);
  return s;
}

// --- Output ----------------------------------------------------------------------

inline nlohmann::json to_json(const DirectionResult& r) {
  const auto& t = r.diff.table;
  return {{"direction", r.model_a + "-" + r.model_b},
          {"auc_sens", {r.diff.auc_sens.lo, r.diff.auc_sens.hi}},
          {"auc_spec", {r.diff.auc_spec.lo, r.diff.auc_spec.hi}},
          {"auc_sens_point", r.diff.auc_sens.point},
          {"auc_spec_point", r.diff.auc_spec.point},
          {"verdict_sens", verdict_name(r.sens, r.model_a, r.model_b)},
          {"verdict_spec", verdict_name(r.spec, r.model_a, r.model_b)},
          {"final", verdict_name(r.combined, r.model_a, r.model_b)},
          {"constant_difference", r.constant},
          {"contingency", {{"lambda", t.lambda}, {"n11", t.n11}, {"n12", t.n12},
                           {"n21", t.n21}, {"n22", t.n22}}}};
}

inline nlohmann::json to_json(const Selection& s) {
  return {{"directions", {to_json(s.forward), to_json(s.reverse)}}, {"final", s.final}};
}

}  // namespace dctnn
