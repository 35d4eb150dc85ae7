#pragma once

// Simulation studies on top of simgen: paired matched/mismatched fits with
// structure selection, and Monte Carlo coverage of the conformal bands.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dctnn/conformal.hpp"
#include "dctnn/pipeline.hpp"
#include "dctnn/selector.hpp"
#include "dctnn/simgen.hpp"

namespace dctnn {

struct SplitData {
  std::vector<DenseTensor> x;
  std::vector<int> y;
  std::vector<double> true_pi;
};

inline SplitData gather(const SimDataset& ds, Split s) {
  SplitData d;
  for (std::size_t i : ds.indices(s)) {
    d.x.push_back(ds.x[i]);
    d.y.push_back(ds.y[i]);
    d.true_pi.push_back(ds.true_pi[i]);
  }
  return d;
}

// A fitted model with its latent points on each split.
struct ModelRun {
  FittedModel model;
  std::vector<LatentPoint> train, cal, test;
  Metrics test_metrics;
};

inline ModelRun run_model(const SimDataset& ds, const FitConfig& cfg) {
  const SplitData tr = gather(ds, Split::Train), ca = gather(ds, Split::Calibration),
                  te = gather(ds, Split::Test);
  ModelRun r;
  r.model = fit(tr.x, tr.y, cfg);
  r.train = latent_points(r.model, predict_all(r.model, tr.x), tr.y);
  r.cal = latent_points(r.model, predict_all(r.model, ca.x), ca.y);
  const Predictions pt = predict_all(r.model, te.x);
  r.test = latent_points(r.model, pt, te.y);
  r.test_metrics = evaluate(pt.prob, te.y, te.true_pi);
  return r;
}

// --- Paired structure study -------------------------------------------------------

struct PairedRecord {
  std::uint64_t seed = 0;
  Metrics tucker, cp;
  Selection selection;  // tucker as model a
};

inline PairedRecord paired_run(SimConfig sim, const FitConfig& base, const SelectorConfig& sel) {
  const SimDataset ds = gen_dataset(sim);
  FitConfig ft = base, fc = base;
  ft.structure = Structure::Tucker;
  fc.structure = Structure::CP;
  const ModelRun t = run_model(ds, ft), c = run_model(ds, fc);
  PairedRecord rec;
  rec.seed = sim.seed;
  rec.tucker = t.test_metrics;
  rec.cp = c.test_metrics;
  rec.selection = select_structure("tucker", "cp", t.cal, t.test, c.cal, c.test, sel);
  return rec;
}

inline nlohmann::json to_json(const PairedRecord& r) {
  return {{"seed", r.seed},
          {"tucker", to_json(r.tucker)},
          {"cp", to_json(r.cp)},
          {"selection", to_json(r.selection)}};
}

// --- Coverage ----------------------------------------------------------------------

struct CoverageRecord {
  std::uint64_t seed = 0;
  double lambda = 0.0;
  bool sens = false, spec = false, auc_sens = false, auc_spec = false;
  bool nested = false;  // bands at alpha / 2 contain the bands at alpha
  double auc0 = 0.0, auc0_spec = 0.0;  // oracle AUC, sens and spec step forms
  AucInterval auc_interval, auc_spec_interval;
  std::string selection;  // final verdict, empty when the selector is off
  bool wrong = false;     // selected the mismatched structure
};

struct CoverageReport {
  double alpha = 0.1;
  std::vector<CoverageRecord> reps;

  struct Rate {
    double rate = 0.0, se = 0.0;
  };
  template <typename F>
  Rate rate(F f) const {
    double k = 0;
    for (const auto& r : reps) k += f(r);
    const double n = static_cast<double>(reps.size()), p = n > 0 ? k / n : 0.0;
    return {p, n > 0 ? std::sqrt(p * (1 - p) / n) : 0.0};
  }
};

inline bool band_contains(const RocBand& outer, const RocBand& inner) {
  for (std::size_t g = 0; g < outer.thresholds.size(); ++g)
    if (outer.sens_lo[g] > inner.sens_lo[g] || outer.sens_hi[g] < inner.sens_hi[g] ||
        outer.spec_lo[g] > inner.spec_lo[g] || outer.spec_hi[g] < inner.spec_hi[g])
      return false;
  return true;
}

// One replication per seed sim.seed + r: fit the matched structure, build the
// bands, check the oracle curves at a random grid point and the oracle AUC.
// With `selector`, the mismatched structure is fit too and the selection
// recorded (matched structure as the null model).
inline CoverageReport coverage_experiment(const SimConfig& sim, const FitConfig& base,
                                          const ConformalConfig& cc, std::size_t reps,
                                          bool selector, const SelectorConfig& sel = {}) {
  cc.validate();
  CoverageReport rep;
  rep.alpha = cc.alpha;
  for (std::size_t r = 0; r < reps; ++r) {
    SimConfig s = sim;
    s.seed = sim.seed + r;
    const SimDataset ds = gen_dataset(s);
    FitConfig f = base;
    f.structure = s.regime;
    f.train.seed = s.seed;
    const ModelRun m = run_model(ds, f);
    const UqResult uq = conformal_uq(m.train, m.cal, m.test, cc);
    const UqResult tight = conformal_uq(m.train, m.cal, m.test, cc, cc.alpha / 2);

    const SplitData te = gather(ds, Split::Test);
    const auto [sens0, spec0] = oracle_curves(te.true_pi, te.y, uq.band.thresholds);
    std::mt19937_64 rng(s.seed ^ 0xC0FFEEULL);
    const std::size_t g =
        std::uniform_int_distribution<std::size_t>(0, uq.band.thresholds.size() - 1)(rng);
    CoverageRecord c;
    c.seed = s.seed;
    c.lambda = uq.band.thresholds[g];
    c.sens = uq.band.sens_lo[g] <= sens0[g] && sens0[g] <= uq.band.sens_hi[g];
    c.spec = uq.band.spec_lo[g] <= spec0[g] && spec0[g] <= uq.band.spec_hi[g];
    c.auc0 = auc_sens_sum(sens0, spec0);
    c.auc0_spec = auc_spec_sum(sens0, spec0);
    c.auc_interval = uq.auc_sens;
    c.auc_spec_interval = uq.auc_spec;
    c.auc_sens = uq.auc_sens.lo <= c.auc0 && c.auc0 <= uq.auc_sens.hi;
    c.auc_spec = uq.auc_spec.lo <= c.auc0_spec && c.auc0_spec <= uq.auc_spec.hi;
    c.nested = band_contains(tight.band, uq.band);
    if (selector) {
      FitConfig o = f;
      o.structure = s.regime == Structure::Tucker ? Structure::CP : Structure::Tucker;
      const ModelRun alt = run_model(ds, o);
      c.selection = select_structure(to_string(f.structure), to_string(o.structure), m.cal, m.test,
                                     alt.cal, alt.test, sel)
                        .final;
      c.wrong = c.selection == to_string(o.structure);
    }
    rep.reps.push_back(c);
  }
  return rep;
}

inline nlohmann::json to_json(const CoverageReport& r) {
  auto rate = [](CoverageReport::Rate x) { return nlohmann::json{{"rate", x.rate}, {"se", x.se}}; };
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& c : r.reps)
    reps.push_back({{"seed", c.seed},
                    {"lambda", c.lambda},
                    {"sens_covered", c.sens},
                    {"spec_covered", c.spec},
                    {"auc_sens_covered", c.auc_sens},
                    {"auc_spec_covered", c.auc_spec},
                    {"nested", c.nested},
                    {"auc0", c.auc0},
                    {"auc0_spec", c.auc0_spec},
                    {"auc_sens", to_json(c.auc_interval)},
                    {"auc_spec", to_json(c.auc_spec_interval)},
                    {"selection", c.selection},
                    {"wrong_selection", c.wrong}});
  nlohmann::json j{{"alpha", r.alpha},
                   {"replications", r.reps.size()},
                   {"sens", rate(r.rate([](const CoverageRecord& c) { return c.sens; }))},
                   {"spec", rate(r.rate([](const CoverageRecord& c) { return c.spec; }))},
                   {"auc_sens", rate(r.rate([](const CoverageRecord& c) { return c.auc_sens; }))},
                   {"auc_spec", rate(r.rate([](const CoverageRecord& c) { return c.auc_spec; }))},
                   {"nested", rate(r.rate([](const CoverageRecord& c) { return c.nested; }))},
                   {"wrong_selection", rate(r.rate([](const CoverageRecord& c) { return c.wrong; }))},
                   {"reps", reps}};
  return j;
}

}  // namespace dctnn
