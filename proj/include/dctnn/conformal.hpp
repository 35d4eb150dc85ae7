#pragma once

// Structure-aware conformal inference for a probabilistic classifier: KNN
// smoothing and local calibration in the core-refinement latent space,
// class-conditional probability intervals, pointwise ROC bands and AUC
// intervals.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dctnn/error.hpp"
#include "dctnn/tensor.hpp"

namespace dctnn {

struct LatentPoint {
  DenseTensor core;
  DenseTensor refinement;
  double prob = 0.5;
  int label = -1;  // -1: unknown
};

inline double cr_distance(const LatentPoint& a, const LatentPoint& b, double omega) {
  if (!(omega > 0)) throw ConfigError("cr_distance: omega must be positive");
  return frobenius_distance(a.core, b.core) + omega * frobenius_distance(a.refinement, b.refinement);
}

// Indices of the k nearest candidates (optionally restricted by a predicate),
// ordered by distance then index.
template <typename Pred>
std::vector<std::size_t> nearest(std::span<const LatentPoint> pool, const LatentPoint& query,
                                 std::size_t k, double omega, Pred keep) {
  std::vector<std::pair<double, std::size_t>> d;
  d.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (keep(pool[i])) d.emplace_back(cr_distance(pool[i], query, omega), i);
  k = std::min(k, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

inline std::vector<std::size_t> nearest(std::span<const LatentPoint> pool,
                                        const LatentPoint& query, std::size_t k, double omega) {
  return nearest(pool, query, k, omega, [](const LatentPoint&) { return true; });
}

inline double knn_smoother(std::span<const LatentPoint> train, const LatentPoint& query,
                           std::size_t k_train, double omega) {
  if (train.empty()) throw DataError("knn_smoother: empty training set");
  if (k_train == 0 || k_train > train.size())
    throw ConfigError("knn_smoother: K_tr must be in [1, " + std::to_string(train.size()) + "]");
  double s = 0.0;
  const auto idx = nearest(train, query, k_train, omega);
  for (std::size_t i : idx) s += train[i].prob;
  return s / static_cast<double>(idx.size());
}

// s_i = smoothed_i - prob_i.
inline std::vector<double> conformity_scores(std::span<const LatentPoint> cal,
                                             std::span<const double> smoothed) {
  if (cal.size() != smoothed.size()) throw ShapeError("conformity_scores: length mismatch");
  std::vector<double> s(cal.size());
  for (std::size_t i = 0; i < cal.size(); ++i) s[i] = smoothed[i] - cal[i].prob;
  return s;
}

// Empirical gamma-quantile: the ceil(gamma n)-th order statistic; gamma <= 0
// gives the minimum and gamma >= 1 the maximum. With `inflate`, the rank uses
// n + 1 in place of n (outward rounding on both tails), clamped to [1, n].
inline double class_quantile(std::vector<double> scores, double gamma, bool inflate = false) {
  if (scores.empty()) throw DataError("insufficient calibration data: empty score set");
  std::sort(scores.begin(), scores.end());
  const std::size_t n = scores.size();
  if (gamma <= 0) return scores.front();
  if (gamma >= 1) return scores.back();
  double rank;
  if (!inflate)
    rank = std::ceil(gamma * static_cast<double>(n) - 1e-9);
  else if (gamma < 0.5)
    rank = std::floor(gamma * static_cast<double>(n + 1) + 1e-9);
  else
    rank = std::ceil(gamma * static_cast<double>(n + 1) - 1e-9);
  const auto k = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(n)));
  return scores[k - 1];
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// [p + q_lo, p + q_hi] intersected with [0, 1]. With `contain_point`, the
// quantiles are first extended to include 0 so the interval contains p.
inline Interval prob_interval(double p, double q_lo, double q_hi, bool contain_point) {
  if (contain_point) {
    q_lo = std::min(q_lo, 0.0);
    q_hi = std::max(q_hi, 0.0);
  }
  Interval iv{std::clamp(p + q_lo, 0.0, 1.0), std::clamp(p + q_hi, 0.0, 1.0)};
  if (iv.lo > iv.hi) std::swap(iv.lo, iv.hi);
  return iv;
}

// --- ROC bands ---------------------------------------------------------------

struct RocBand {
  std::vector<double> thresholds;
  std::vector<double> sens, sens_lo, sens_hi;
  std::vector<double> spec, spec_lo, spec_hi;
  double alpha = 0.1;
};

struct AucInterval {
  std::string kind;  // "sens" or "spec"
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

inline std::vector<double> unit_grid(std::size_t g) {
  if (g < 2) throw ConfigError("threshold grid needs at least 2 points");
  std::vector<double> t(g);
  for (std::size_t i = 0; i < g; ++i) t[i] = static_cast<double>(i) / static_cast<double>(g - 1);
  return t;
}

namespace detail {

inline void check_both_classes(std::span<const int> labels) {
  bool has0 = false, has1 = false;
  for (int y : labels) {
    has0 |= y == 0;
    has1 |= y == 1;
  }
  if (!has0 || !has1) throw DataError("ROC band: test split must contain both classes");
}

}  // namespace detail

// Point curve from `score`; limits from the interval endpoints: positives
// count lo > t (lower Sens) and hi > t (upper Sens); negatives count
// hi <= t (lower Spec) and lo <= t (upper Spec).
inline RocBand roc_bands(std::span<const double> score, std::span<const int> labels,
                         std::span<const Interval> intervals, std::vector<double> thresholds,
                         double alpha) {
  if (score.size() != labels.size() || score.size() != intervals.size())
    throw ShapeError("roc_bands: length mismatch");
  detail::check_both_classes(labels);
  RocBand b;
  b.alpha = alpha;
  b.thresholds = std::move(thresholds);
  double n1 = 0, n0 = 0;
  for (int y : labels) (y == 1 ? n1 : n0) += 1;
  for (double t : b.thresholds) {
    double s = 0, sl = 0, sh = 0, p = 0, pl = 0, ph = 0;
    for (std::size_t j = 0; j < score.size(); ++j) {
      if (labels[j] == 1) {
        s += score[j] > t;
        sl += intervals[j].lo > t;
        sh += intervals[j].hi > t;
      } else {
        p += score[j] <= t;
        pl += intervals[j].hi <= t;
        ph += intervals[j].lo <= t;
      }
    }
    b.sens.push_back(s / n1);
    b.sens_lo.push_back(sl / n1);
    b.sens_hi.push_back(sh / n1);
    b.spec.push_back(p / n0);
    b.spec_lo.push_back(pl / n0);
    b.spec_hi.push_back(ph / n0);
  }
  return b;
}

// sum_{g>=2} sens(t_{g-1}) [spec(t_g) - spec(t_{g-1})]
inline double auc_sens_sum(std::span<const double> sens, std::span<const double> spec) {
  double a = 0.0;
  for (std::size_t g = 1; g < sens.size(); ++g) a += sens[g - 1] * (spec[g] - spec[g - 1]);
  return a;
}

// sum_{g>=2} spec(t_g) [sens(t_{g-1}) - sens(t_g)]
inline double auc_spec_sum(std::span<const double> sens, std::span<const double> spec) {
  double a = 0.0;
  for (std::size_t g = 1; g < sens.size(); ++g) a += spec[g] * (sens[g - 1] - sens[g]);
  return a;
}

inline std::pair<AucInterval, AucInterval> auc_intervals(const RocBand& b) {
  AucInterval s{"sens", auc_sens_sum(b.sens, b.spec), auc_sens_sum(b.sens_lo, b.spec),
                auc_sens_sum(b.sens_hi, b.spec)};
  AucInterval p{"spec", auc_spec_sum(b.sens, b.spec), auc_spec_sum(b.sens, b.spec_lo),
                auc_spec_sum(b.sens, b.spec_hi)};
  return {s, p};
}

// --- Procedure -----------------------------------------------------------------

struct ConformalConfig {
  std::size_t k_train = 50;
  std::size_t k_cal = 10;
  double omega = 10.0;
  double alpha = 0.1;
  std::size_t grid = 200;
  bool inflate = false;
  bool contain_point = true;
  bool smoother_is_identity = false;  // pi_tilde := pi_hat (degenerate check)

  void validate() const {
    if (k_train == 0 || k_cal == 0) throw ConfigError("K_tr and K_ca must be positive");
    if (!(omega > 0)) throw ConfigError("omega must be positive");
    if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha must be in (0, 1)");
    if (grid < 2) throw ConfigError("grid must have at least 2 points");
  }
};

struct UqResult {
  std::vector<double> smoothed_cal;  // pi_tilde on the calibration split
  std::vector<double> scores;        // conformity scores on the calibration split
  std::vector<Interval> intervals;   // per test point, for its own class
  RocBand band;
  AucInterval auc_sens, auc_spec;
};

// Class-k interval for one test point: the K_ca nearest calibration points
// (all classes) restricted to class k; if none, the K_ca nearest class-k
// points of the whole calibration split.
inline Interval local_interval(std::span<const LatentPoint> cal, std::span<const double> scores,
                               const LatentPoint& query, int k, const ConformalConfig& cfg,
                               double alpha) {
  std::vector<double> s;
  for (std::size_t i : nearest(cal, query, cfg.k_cal, cfg.omega))
    if (cal[i].label == k) s.push_back(scores[i]);
  if (s.empty()) {
    for (std::size_t i : nearest(cal, query, cfg.k_cal, cfg.omega,
                                 [k](const LatentPoint& p) { return p.label == k; }))
      s.push_back(scores[i]);
  }
  if (s.empty()) throw DataError("insufficient calibration data: no class-" + std::to_string(k) +
                                 " calibration points");
  return prob_interval(query.prob, class_quantile(s, alpha / 2, cfg.inflate),
                       class_quantile(s, 1 - alpha / 2, cfg.inflate), cfg.contain_point);
}

inline UqResult conformal_uq(std::span<const LatentPoint> train, std::span<const LatentPoint> cal,
                             std::span<const LatentPoint> test, const ConformalConfig& cfg,
                             std::optional<double> alpha_override = std::nullopt) {
  cfg.validate();
  if (cfg.k_train > train.size()) throw ConfigError("K_tr exceeds the training split size");
  const double alpha = alpha_override.value_or(cfg.alpha);
  UqResult r;
  for (const auto& p : cal)
    r.smoothed_cal.push_back(cfg.smoother_is_identity ? p.prob
                                                      : knn_smoother(train, p, cfg.k_train, cfg.omega));
  r.scores = conformity_scores(cal, r.smoothed_cal);
  std::vector<double> probs;
  std::vector<int> labels;
  for (const auto& q : test) {
    if (q.label != 0 && q.label != 1) throw DataError("conformal_uq: test labels must be 0/1");
    r.intervals.push_back(local_interval(cal, r.scores, q, q.label, cfg, alpha));
    probs.push_back(q.prob);
    labels.push_back(q.label);
  }
  r.band = roc_bands(probs, labels, r.intervals, unit_grid(cfg.grid), alpha);
  std::tie(r.auc_sens, r.auc_spec) = auc_intervals(r.band);
  return r;
}

// --- Oracle-side quantities for coverage checks ------------------------------

// Sens_0/Spec_0 of the oracle probability on the test split, on the band grid.
inline std::pair<std::vector<double>, std::vector<double>> oracle_curves(
    std::span<const double> oracle_pi, std::span<const int> labels,
    std::span<const double> thresholds) {
  std::vector<Interval> degenerate;
  for (double p : oracle_pi) degenerate.push_back({p, p});
  const auto b = roc_bands(oracle_pi, labels, degenerate,
                           std::vector<double>(thresholds.begin(), thresholds.end()), 0.0);
  return {b.sens, b.spec};
}

// --- Output ----------------------------------------------------------------------

inline nlohmann::json to_json(const AucInterval& a) {
  return {{"kind", a.kind}, {"point", a.point}, {"lower", a.lo}, {"upper", a.hi}};
}

// Columns lambda, sens, sens_lo, sens_hi, spec, spec_lo, spec_hi; `prefix` is
// prepended to every column but lambda.
inline void write_band_csv(const std::filesystem::path& path, const RocBand& b,
                           const std::string& prefix = "") {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "lambda";
  for (const char* c : {"sens", "sens_lo", "sens_hi", "spec", "spec_lo", "spec_hi"})
    out << ',' << prefix << c;
  out << '\n' << std::setprecision(10);
  for (std::size_t g = 0; g < b.thresholds.size(); ++g)
    out << b.thresholds[g] << ',' << b.sens[g] << ',' << b.sens_lo[g] << ',' << b.sens_hi[g] << ','
        << b.spec[g] << ',' << b.spec_lo[g] << ',' << b.spec_hi[g] << '\n';
}

}  // namespace dctnn
