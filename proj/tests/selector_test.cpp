#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dctnn/selector.hpp"
#include "test_util.hpp"

using namespace dctnn;

namespace {

LatentPoint point(double d, int label, std::mt19937_64& rng) {
  LatentPoint p;
  p.core = testutil::random_tensor({2, 2}, rng);
  p.refinement = testutil::random_tensor({2}, rng);
  p.prob = d;
  p.label = label;
  return p;
}

// Brute-force left Riemann sum sum_g sens(l_{g-1}) [spec(l_g) - spec(l_{g-1})]
// straight from the point definitions.
double brute_auc(const std::vector<double>& d, const std::vector<int>& y, std::size_t g) {
  auto sens = [&](double l) {
    double a = 0, n = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (y[i] == 1) a += d[i] > l, n += 1;
    return a / n;
  };
  auto spec = [&](double l) {
    double a = 0, n = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (y[i] == 0) a += d[i] <= l, n += 1;
    return a / n;
  };
  double s = 0;
  for (std::size_t k = 2; k <= g; ++k) {
    const double l1 = -1 + 2.0 * double(k - 1) / double(g), l2 = -1 + 2.0 * double(k) / double(g);
    s += sens(l1) * (spec(l2) - spec(l1));
  }
  return s;
}

}  // namespace

TEST(DiffGrid, OpenLeftClosedRight) {
  const auto t = diff_grid(4);
  ASSERT_EQ(t.size(), 4u);
  EXPECT_DOUBLE_EQ(t[0], -0.5);
  EXPECT_DOUBLE_EQ(t[1], 0.0);
  EXPECT_DOUBLE_EQ(t[2], 0.5);
  EXPECT_DOUBLE_EQ(t[3], 1.0);
  EXPECT_EQ(diff_grid(200)[99], 0.0);
  EXPECT_THROW(diff_grid(1), ConfigError);
}

TEST(DifferenceScores, Subtraction) {
  std::mt19937_64 rng(1);
  std::vector<LatentPoint> a, b;
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 20; ++i) {
    a.push_back(point(u(rng), i % 2, rng));
    b.push_back(point(u(rng), i % 2, rng));
  }
  const auto d = difference_scores(a, b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_DOUBLE_EQ(d[i].prob, a[i].prob - b[i].prob);
    EXPECT_EQ(d[i].core, a[i].core);  // latent of the first model
  }
  for (const auto& p : difference_scores(a, a)) EXPECT_EQ(p.prob, 0.0);
}

TEST(DifferenceScores, ExtremeModels) {
  std::mt19937_64 rng(2);
  std::vector<LatentPoint> a, b;
  for (int i = 0; i < 6; ++i) {
    a.push_back(point(1.0, i % 2, rng));
    b.push_back(point(0.0, i % 2, rng));
  }
  for (const auto& p : difference_scores(a, b)) EXPECT_EQ(p.prob, 1.0);
}

TEST(DifferenceScores, MismatchedSplitsThrow) {
  std::mt19937_64 rng(3);
  std::vector<LatentPoint> a{point(0.1, 0, rng), point(0.2, 1, rng)};
  std::vector<LatentPoint> b{point(0.1, 0, rng)};
  EXPECT_THROW(difference_scores(a, b), DataError);
  b.push_back(point(0.3, 0, rng));
  EXPECT_THROW(difference_scores(a, b), DataError);
}

TEST(DiffInterval, HandOrderStatistics) {
  std::mt19937_64 rng(4);
  std::vector<LatentPoint> cal;
  for (double d : {0.4, -0.2, 0.2, 0.0}) cal.push_back(point(d, 1, rng));
  for (int i = 0; i < 3; ++i) cal.push_back(point(9.0, 0, rng));  // other class, ignored
  SelectorConfig cfg;
  cfg.k = 4;
  cfg.alpha = 0.5;
  const auto iv = diff_interval(cal, point(0.0, 1, rng), 1, cfg);
  EXPECT_DOUBLE_EQ(iv.lo, -0.2);
  EXPECT_DOUBLE_EQ(iv.hi, 0.2);

  cfg.alpha = 1e-9;
  const auto wide = diff_interval(cal, point(0.0, 1, rng), 1, cfg);
  EXPECT_DOUBLE_EQ(wide.lo, -0.2);
  EXPECT_DOUBLE_EQ(wide.hi, 0.4);
}

TEST(DiffInterval, ConstantNeighborsDegenerate) {
  std::mt19937_64 rng(5);
  std::vector<LatentPoint> cal;
  for (int i = 0; i < 10; ++i) cal.push_back(point(0.3, 0, rng));
  const auto iv = diff_interval(cal, point(0.0, 0, rng), 0, SelectorConfig{});
  EXPECT_DOUBLE_EQ(iv.lo, 0.3);
  EXPECT_DOUBLE_EQ(iv.hi, 0.3);
  EXPECT_THROW(diff_interval(cal, point(0.0, 1, rng), 1, SelectorConfig{}), DataError);
}

TEST(DiffInterval, UsesNearestSameClass) {
  std::mt19937_64 rng(6);
  std::vector<LatentPoint> cal;
  for (int i = 0; i < 4; ++i) {
    auto p = point(-0.5, 1, rng);
    p.core = DenseTensor({2, 2}, 100.0);  // far away
    cal.push_back(p);
  }
  auto q = point(0.0, 1, rng);
  for (int i = 0; i < 2; ++i) {
    auto p = q;
    p.prob = 0.25;
    cal.push_back(p);
  }
  SelectorConfig cfg;
  cfg.k = 2;
  const auto iv = diff_interval(cal, q, 1, cfg);
  EXPECT_DOUBLE_EQ(iv.lo, 0.25);
  EXPECT_DOUBLE_EQ(iv.hi, 0.25);
}

TEST(Decide, HandExamples) {
  EXPECT_EQ(decide({"sens", 0.785, 0.692, 0.831}), Verdict::ModelA);
  EXPECT_EQ(decide({"sens", 0.149, 0.040, 0.269}), Verdict::ModelB);
  EXPECT_EQ(decide({"sens", 0.5, 0.45, 0.55}), Verdict::Tie);
  EXPECT_EQ(decide({"spec", 0.6, 0.5, 0.7}), Verdict::Tie);
  EXPECT_EQ(decide({"spec", 0.4, 0.3, 0.5}), Verdict::Tie);
}

TEST(Decide, CombineRules) {
  using V = Verdict;
  EXPECT_EQ(combine(V::ModelA, V::Tie), V::ModelA);
  EXPECT_EQ(combine(V::Tie, V::ModelB), V::ModelB);
  EXPECT_EQ(combine(V::Tie, V::Tie), V::Tie);
  EXPECT_EQ(combine(V::ModelA, V::ModelA), V::ModelA);
  EXPECT_EQ(combine(V::ModelA, V::ModelB), V::Conflict);
  EXPECT_EQ(combine(V::Conflict, V::Tie), V::Conflict);
  EXPECT_EQ(swap_roles(V::ModelA), V::ModelB);
  EXPECT_EQ(swap_roles(V::Tie), V::Tie);
}

TEST(DiffRoc, ZeroDifferenceStepsAtZero) {
  std::mt19937_64 rng(7);
  std::vector<LatentPoint> cal, test;
  for (int i = 0; i < 20; ++i) {
    cal.push_back(point(0.0, i % 2, rng));
    test.push_back(point(0.0, i % 2, rng));
  }
  SelectorConfig cfg;
  const auto r = diff_roc(cal, test, cfg);
  const auto& b = r.band;
  for (std::size_t g = 0; g < b.thresholds.size(); ++g) {
    const double expect_sens = b.thresholds[g] < 0 ? 1.0 : 0.0;
    EXPECT_EQ(b.sens[g], expect_sens);
    EXPECT_EQ(b.spec[g], 1.0 - expect_sens);
    EXPECT_EQ(b.sens_lo[g], b.sens_hi[g]);
    EXPECT_EQ(b.spec_lo[g], b.spec_hi[g]);
  }
}

TEST(DiffRoc, PerfectSeparationDegenerateAtOne) {
  std::mt19937_64 rng(8);
  std::vector<LatentPoint> cal, test;
  for (int i = 0; i < 30; ++i) {
    const int y = i % 2;
    cal.push_back(point(y ? 0.6 : -0.6, y, rng));
    test.push_back(point(y ? 0.6 : -0.6, y, rng));
  }
  const auto r = diff_roc(cal, test, SelectorConfig{});
  for (const auto& a : {r.auc_sens, r.auc_spec}) {
    EXPECT_DOUBLE_EQ(a.point, 1.0);
    EXPECT_DOUBLE_EQ(a.lo, 1.0);
    EXPECT_DOUBLE_EQ(a.hi, 1.0);
  }
  EXPECT_EQ(r.table.n11, 15u);
  EXPECT_EQ(r.table.n22, 15u);
  EXPECT_EQ(r.table.n12 + r.table.n21, 0u);
}

TEST(DiffRoc, PointAucMatchesBruteForce) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 0.3);
  std::vector<LatentPoint> cal, test;
  std::vector<double> d;
  std::vector<int> y;
  for (int i = 0; i < 200; ++i) {
    const int lab = i % 2;
    const double v = std::clamp(nd(rng) + (lab ? 0.2 : -0.1), -0.99, 0.99);
    test.push_back(point(v, lab, rng));
    cal.push_back(point(std::clamp(nd(rng), -0.99, 0.99), lab, rng));
    d.push_back(v);
    y.push_back(lab);
  }
  SelectorConfig cfg;
  cfg.grid = 50;
  const auto r = diff_roc(cal, test, cfg);
  EXPECT_NEAR(r.auc_sens.point, brute_auc(d, y, cfg.grid), 1e-12);
  EXPECT_GT(r.auc_sens.point, 0.5);
}

TEST(DiffRoc, SignFlipMirrorsAuc) {
  // At most one test point per inner grid cell, so the left and right
  // Riemann sums agree and flipping d maps the AUC to 1 - AUC exactly.
  std::mt19937_64 rng(10);
  SelectorConfig cfg;
  cfg.grid = 40;
  std::vector<double> cells(cfg.grid - 2);
  std::iota(cells.begin(), cells.end(), 1.0);
  std::shuffle(cells.begin(), cells.end(), rng);
  std::vector<LatentPoint> cal, test, cal_f, test_f;
  for (std::size_t i = 0; i < 30; ++i) {
    const int lab = int(i % 2);
    const double v = -1.0 + 2.0 * (cells[i] + 0.5) / double(cfg.grid);
    test.push_back(point(v, lab, rng));
    cal.push_back(point(v * 0.9, lab, rng));
  }
  for (auto p : cal) p.prob = -p.prob, cal_f.push_back(p);
  for (auto p : test) p.prob = -p.prob, test_f.push_back(p);
  const auto r = diff_roc(cal, test, cfg), f = diff_roc(cal_f, test_f, cfg);
  EXPECT_NEAR(f.auc_sens.point, 1.0 - r.auc_sens.point, 1e-12);
  EXPECT_NEAR(f.auc_spec.point, 1.0 - r.auc_spec.point, 1e-12);
}

TEST(DiffRoc, SingleClassThrows) {
  std::mt19937_64 rng(11);
  std::vector<LatentPoint> cal{point(0.1, 1, rng), point(0.1, 0, rng)};
  std::vector<LatentPoint> test{point(0.2, 1, rng), point(0.3, 1, rng)};
  EXPECT_THROW(diff_roc(cal, test, SelectorConfig{}), DataError);
}

namespace {

// Model a tracks the label more closely than model b on both splits.
struct TwoModels {
  std::vector<LatentPoint> cal_a, cal_b, test_a, test_b;
};

TwoModels two_models(std::uint64_t seed, double edge) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.05);
  TwoModels m;
  auto add = [&](std::vector<LatentPoint>& va, std::vector<LatentPoint>& vb, int n) {
    for (int i = 0; i < n; ++i) {
      const int y = i % 2;
      const double base = std::clamp(0.5 + nd(rng), 0.05, 0.95);
      const double shift = (y ? edge : -edge) + nd(rng);
      va.push_back(point(std::clamp(base + shift / 2, 0.0, 1.0), y, rng));
      vb.push_back(point(std::clamp(base - shift / 2, 0.0, 1.0), y, rng));
    }
  };
  add(m.cal_a, m.cal_b, 200);
  add(m.test_a, m.test_b, 200);
  return m;
}

}  // namespace

TEST(SelectStructure, PicksDominantModel) {
  const auto m = two_models(12, 0.2);
  const auto s = select_structure("tucker", "cp", m.cal_a, m.test_a, m.cal_b, m.test_b,
                                  SelectorConfig{});
  EXPECT_EQ(s.forward.sens, Verdict::ModelA);
  EXPECT_EQ(s.forward.spec, Verdict::ModelA);
  EXPECT_EQ(s.reverse.combined, Verdict::ModelB);
  EXPECT_EQ(s.final, "tucker");
}

TEST(SelectStructure, SwappingRolesSwapsVerdict) {
  const auto m = two_models(13, 0.2);
  const SelectorConfig cfg;
  const auto ab = select_structure("tucker", "cp", m.cal_a, m.test_a, m.cal_b, m.test_b, cfg);
  const auto ba = select_structure("cp", "tucker", m.cal_b, m.test_b, m.cal_a, m.test_a, cfg);
  EXPECT_EQ(ab.forward.sens, ba.reverse.sens);
  EXPECT_EQ(ab.final, ba.final);

  // d -> -d in the same latent space
  auto cal = difference_scores(m.cal_a, m.cal_b), test = difference_scores(m.test_a, m.test_b);
  for (auto* v : {&cal, &test})
    for (auto& p : *v) p.prob = -p.prob;
  const auto flipped = diff_roc(cal, test, cfg);
  EXPECT_EQ(decide(flipped.auc_sens), swap_roles(ab.forward.sens));
  EXPECT_EQ(decide(flipped.auc_spec), swap_roles(ab.forward.spec));
  EXPECT_EQ(ab.forward.sens, Verdict::ModelA);
}

TEST(SelectStructure, IdenticalModelsTie) {
  const auto m = two_models(14, 0.2);
  const auto s = select_structure("tucker", "cp", m.cal_a, m.test_a, m.cal_a, m.test_a,
                                  SelectorConfig{});
  EXPECT_TRUE(s.forward.constant);
  EXPECT_EQ(s.final, "tie");
}

TEST(SelectStructure, NoEdgeMostlyTies) {
  int wrong = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = two_models(100 + seed, 0.0);
    const auto s = select_structure("tucker", "cp", m.cal_a, m.test_a, m.cal_b, m.test_b,
                                    SelectorConfig{});
    wrong += s.final == "cp";
  }
  EXPECT_LE(wrong, 6);
}

TEST(SelectStructure, JsonSchema) {
  const auto m = two_models(15, 0.2);
  const auto j = to_json(select_structure("tucker", "cp", m.cal_a, m.test_a, m.cal_b, m.test_b,
                                          SelectorConfig{}));
  ASSERT_EQ(j.at("directions").size(), 2u);
  const auto& f = j.at("directions")[0];
  for (const char* k : {"direction", "auc_sens", "auc_spec", "verdict_sens", "verdict_spec", "final"})
    EXPECT_TRUE(f.contains(k)) << k;
  EXPECT_EQ(f.at("direction"), "tucker-cp");
  EXPECT_EQ(f.at("auc_sens").size(), 2u);
  EXPECT_EQ(j.at("final"), "tucker");
}
