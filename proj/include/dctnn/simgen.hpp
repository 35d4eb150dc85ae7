#pragma once

// Synthetic core-refinement data: Tucker or CP signal, a sparse refinement
// tied to the signal on a fixed support, Gaussian nuisance noise, and labels
// drawn from a fixed random dual-channel labeler with class-balanced
// acceptance sampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dctnn/decomp.hpp"
#include "dctnn/error.hpp"
#include "dctnn/linalg.hpp"
#include "dctnn/network.hpp"
#include "dctnn/tensor.hpp"

namespace dctnn {

enum class Split { Train = 0, Calibration = 1, Test = 2 };

struct SimConfig {
  Shape dims{32, 32, 32};
  std::size_t n_per_class = 1000;
  Structure regime = Structure::Tucker;
  // Tucker regime
  Shape tucker_ranks{3, 3, 3};
  double smooth_bandwidth = 1.0;
  std::size_t smooth_radius = 2;
  double core_norm = 5.0;
  double loading_range = 5.0;
  // CP regime
  std::size_t cp_rank = 12;
  double collinearity = 0.1;
  double ar_coef = 0.7;
  double coef_norm = 8.0;
  // refinement and noise
  std::size_t support_size = 18;
  double refinement_lo = 5.0;
  double refinement_hi = 8.0;
  Shape refinement_shape{2, 3, 3};
  double noise_sd = 0.1;
  // labeler
  std::size_t labeler_depth = 2;
  double bias_lo = 0.5;
  double bias_hi = 1.5;
  double logit_target = std::numeric_limits<double>::quiet_NaN();  // NaN: regime default
  std::size_t pilot_size = 2000;
  // sampling
  std::array<double, 3> split_fractions{0.6, 0.2, 0.2};
  std::size_t candidate_budget = 1'000'000;
  std::uint64_t seed = 0;

  // Target for the pilot mean |z|.
  double resolved_logit_target() const {
    if (!std::isnan(logit_target)) return logit_target;
    return regime == Structure::Tucker ? 2.8 : 3.2;
  }

  void validate() const {
    if (dims.size() != 3) throw ConfigError("simgen: dims must have three modes");
    if (n_per_class == 0) throw ConfigError("simgen: n_per_class must be positive");
    if (num_elements(refinement_shape) != support_size)
      throw ConfigError("simgen: refinement shape " + shape_str(refinement_shape) +
                        " does not hold |J| = " + std::to_string(support_size));
    if (support_size > num_elements(dims)) throw ConfigError("simgen: |J| exceeds tensor size");
    const double s = split_fractions[0] + split_fractions[1] + split_fractions[2];
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("simgen: split fractions must sum to 1");
    for (double f : split_fractions)
      if (f < 0) throw ConfigError("simgen: split fractions must be nonnegative");
    if (regime == Structure::Tucker) {
      if (tucker_ranks.size() != 3) throw ConfigError("simgen: Tucker ranks need three modes");
      for (std::size_t m = 0; m < 3; ++m)
        if (tucker_ranks[m] == 0 || tucker_ranks[m] > dims[m])
          throw ConfigError("simgen: Tucker rank out of range");
    } else {
      if (cp_rank == 0) throw ConfigError("simgen: CP rank must be positive");
      for (std::size_t d : dims)
        if (cp_rank > d) throw ConfigError("simgen: CP rank exceeds a mode dimension");
      if (!(collinearity > 0)) throw ConfigError("simgen: collinearity must be positive");
      if (!(std::abs(ar_coef) < 1)) throw ConfigError("simgen: |rho| must be below 1");
    }
    if (!(refinement_lo <= refinement_hi)) throw ConfigError("simgen: refinement scale range");
    if (!(noise_sd >= 0)) throw ConfigError("simgen: noise sd must be nonnegative");
    if (labeler_depth == 0) throw ConfigError("simgen: labeler depth must be positive");
    if (pilot_size < 2) throw ConfigError("simgen: pilot size must be at least 2");
  }
};

// Independent random streams derived from one master seed.
enum class Stream : std::uint64_t {
  Loadings = 1, Cores, Refinement, Labeler, Acceptance, Noise, Splits
};

inline std::mt19937_64 make_stream(std::uint64_t seed, Stream s) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s)};
  return std::mt19937_64(seq);
}

// Per-dataset draws shared by all samples.
struct SimTruth {
  Structure regime = Structure::Tucker;
  std::vector<Matrix> factors;           // Tucker loadings or CP factor matrices
  std::vector<std::size_t> support;      // flat indices of J, in draw order
  std::vector<double> sign, scale;       // xi_i and a_i
  DualChannelNet labeler;
  double logit_scale = 1.0;
  double logit_shift = 0.0;              // z = scale * (raw - shift)
};

struct SimDataset {
  SimConfig config;
  SimTruth truth;
  std::vector<DenseTensor> x;
  std::vector<int> y;
  std::vector<double> true_pi, z;
  std::vector<DenseTensor> cores;        // true C (Tucker core, or CP coefficients)
  std::vector<DenseTensor> refinements;  // U_D
  std::vector<Split> split;
  std::size_t candidates = 0;

  std::size_t size() const { return y.size(); }
  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
};

// --- Signal components ----------------------------------------------------------

namespace detail {

inline std::size_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return static_cast<std::size_t>(i);
}

}  // namespace detail

// Separable Gaussian smoothing with a truncated kernel and reflective
// boundaries (d c b a | a b c d | d c b a).
inline DenseTensor gaussian_smooth(const DenseTensor& t, double bandwidth, std::size_t radius) {
  if (!(bandwidth > 0)) throw ConfigError("gaussian_smooth: bandwidth must be positive");
  const auto r = static_cast<std::ptrdiff_t>(radius);
  std::vector<double> k;
  for (std::ptrdiff_t o = -r; o <= r; ++o)
    k.push_back(std::exp(-0.5 * static_cast<double>(o * o) / (bandwidth * bandwidth)));
  const double ks = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= ks;

  DenseTensor cur = t;
  for (std::size_t mode = 0; mode < t.order(); ++mode) {
    const auto s = detail::split_at(t.shape(), mode);
    DenseTensor next(t.shape());
    for (std::size_t p = 0; p < s.pre; ++p)
      for (std::size_t i = 0; i < s.dim; ++i)
        for (std::size_t q = 0; q < s.post; ++q) {
          double acc = 0.0;
          for (std::ptrdiff_t o = -r; o <= r; ++o) {
            const std::size_t j = detail::reflect_index(static_cast<std::ptrdiff_t>(i) + o,
                                                        static_cast<std::ptrdiff_t>(s.dim));
            acc += k[static_cast<std::size_t>(o + r)] * cur[(p * s.dim + j) * s.post + q];
          }
          next[(p * s.dim + i) * s.post + q] = acc;
        }
    cur = std::move(next);
  }
  return cur;
}

inline Matrix uniform_qr_loading(std::size_t d, std::size_t r, double range, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-range, range);
  Matrix m(d, r);
  for (double& v : m.data()) v = u(rng);
  return linalg::thin_q(m);
}

// Column 0 is q_0; column r >= 1 is (q_0 + eta_r q_r)/|.| with
// eta_r = (theta^(-2/3) - 1)^(1/2), theta = delta / r (r counted from 0).
inline Matrix collinear_cp_factor(std::size_t d, std::size_t rank, double delta,
                                  std::mt19937_64& rng) {
  const Matrix q = uniform_qr_loading(d, rank, 1.0, rng);
  Matrix a = q;
  for (std::size_t r = 1; r < rank; ++r) {
    const double theta = delta / static_cast<double>(r);
    const double eta = std::sqrt(std::pow(theta, -2.0 / 3.0) - 1.0);
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      a(i, r) = q(i, 0) + eta * q(i, r);
      n += a(i, r) * a(i, r);
    }
    n = std::sqrt(n);
    for (std::size_t i = 0; i < d; ++i) a(i, r) /= n;
  }
  return a;
}

inline DenseTensor draw_tucker_core(const SimConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  DenseTensor c(cfg.tucker_ranks);
  for (double& v : c.data()) v = z(rng);
  c = gaussian_smooth(c, cfg.smooth_bandwidth, cfg.smooth_radius);
  c *= cfg.core_norm / frobenius_norm(c);
  return c;
}

// c_1 ~ N(0,1), c_r = rho c_{r-1} + sqrt(1 - rho^2) eps_r, before rescaling.
inline std::vector<double> ar1_coefficients(std::size_t rank, double rho, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  std::vector<double> c(rank);
  c[0] = z(rng);
  for (std::size_t r = 1; r < rank; ++r) c[r] = rho * c[r - 1] + std::sqrt(1 - rho * rho) * z(rng);
  return c;
}

inline DenseTensor draw_cp_core(const SimConfig& cfg, std::mt19937_64& rng) {
  DenseTensor c({cfg.cp_rank}, ar1_coefficients(cfg.cp_rank, cfg.ar_coef, rng));
  c *= cfg.coef_norm / frobenius_norm(c);
  return c;
}

inline DenseTensor draw_core(const SimConfig& cfg, std::mt19937_64& rng) {
  return cfg.regime == Structure::Tucker ? draw_tucker_core(cfg, rng) : draw_cp_core(cfg, rng);
}

// S(C) at a single flat index.
inline double signal_at(const SimTruth& t, const Shape& dims, const DenseTensor& core,
                        std::size_t flat) {
  const std::size_t i = flat / (dims[1] * dims[2]);
  const std::size_t j = (flat / dims[2]) % dims[1];
  const std::size_t k = flat % dims[2];
  const auto& f = t.factors;
  double s = 0.0;
  if (t.regime == Structure::Tucker) {
    const Shape& r = core.shape();
    for (std::size_t a = 0; a < r[0]; ++a)
      for (std::size_t b = 0; b < r[1]; ++b) {
        const double ab = f[0](i, a) * f[1](j, b);
        for (std::size_t c = 0; c < r[2]; ++c) s += core[(a * r[1] + b) * r[2] + c] * ab * f[2](k, c);
      }
  } else {
    for (std::size_t r = 0; r < core.size(); ++r) s += core[r] * f[0](i, r) * f[1](j, r) * f[2](k, r);
  }
  return s;
}

inline DenseTensor full_signal(const SimTruth& t, const Shape& dims, const DenseTensor& core) {
  if (t.regime == Structure::Tucker) return multi_mode_product(core, t.factors, false);
  const std::size_t rank = core.size();
  std::vector<Matrix> scaled = t.factors;
  for (std::size_t r = 0; r < rank; ++r)
    for (std::size_t i = 0; i < dims[0]; ++i) scaled[0](i, r) *= core[r];
  // sum_r c_r a_1r o a_2r o a_3r as mode products of the superdiagonal identity
  return multi_mode_product(embed_superdiag(std::vector<double>(rank, 1.0), 3), scaled, false);
}

// U_D(i) = xi_i a_i |S(j_i)|, reshaped to the refinement shape.
inline DenseTensor dense_refinement(const SimTruth& t, const SimConfig& cfg,
                                    const DenseTensor& core) {
  DenseTensor u(cfg.refinement_shape);
  for (std::size_t i = 0; i < t.support.size(); ++i)
    u[i] = t.sign[i] * t.scale[i] * std::abs(signal_at(t, cfg.dims, core, t.support[i]));
  return u;
}

inline double labeler_logit(const SimTruth& t, const DenseTensor& core, const DenseTensor& ud) {
  return forward(t.labeler, core, ud).output;
}

// --- Labeler ---------------------------------------------------------------------

// Dual-channel ReLU network with hidden widths equal to the input shapes,
// weights uniform in +-1/sqrt(fan), fan = |C| + |U_D|, hidden biases uniform
// in [bias_lo, bias_hi]. The output layer is scaled and shifted afterwards.
inline DualChannelNet draw_labeler(const SimConfig& cfg, const Shape& core_shape,
                                   std::mt19937_64& rng) {
  NetConfig nc;
  nc.core_shape = core_shape;
  nc.refinement_shape = cfg.refinement_shape;
  nc.depth = cfg.labeler_depth;
  nc.link = Link::Identity;
  nc.layer_norm = false;
  DualChannelNet net = zero_net(nc);
  const double s =
      1.0 / std::sqrt(static_cast<double>(num_elements(core_shape) + cfg.support_size));
  std::uniform_real_distribution<double> w(-s, s), b(cfg.bias_lo, cfg.bias_hi);
  for (auto& l : net.layers) {
    for (DenseTensor* t : {&l.w_cc, &l.w_cu, &l.w_uc, &l.w_uu})
      for (double& v : t->data()) v = w(rng);
    for (DenseTensor* t : {&l.b_c, &l.b_u})
      for (double& v : t->data()) v = b(rng);
  }
  for (double& v : net.out_wc.data()) v = w(rng);
  for (double& v : net.out_wu.data()) v = w(rng);
  return net;
}

// Sets the output layer so that z = scale (raw - median) with the pilot mean
// |z| equal to `target`. z is affine in the scale, so the root of the
// calibration equation is closed-form.
inline void calibrate_labeler(SimTruth& t, std::span<const double> raw, double target) {
  std::vector<double> sorted(raw.begin(), raw.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  double mad = 0.0;
  for (double r : raw) mad += std::abs(r - median);
  mad /= static_cast<double>(n);
  if (!(mad > 0))
    throw NumericalError("labeler calibration: pilot logits are constant; cannot scale");
  t.logit_scale = target / mad;
  t.logit_shift = median;
  t.labeler.out_wc *= t.logit_scale;
  t.labeler.out_wu *= t.logit_scale;
  t.labeler.out_b[0] = -t.logit_scale * median;
}

inline SimTruth draw_truth(const SimConfig& cfg) {
  cfg.validate();
  SimTruth t;
  t.regime = cfg.regime;
  auto load_rng = make_stream(cfg.seed, Stream::Loadings);
  for (std::size_t m = 0; m < 3; ++m)
    t.factors.push_back(cfg.regime == Structure::Tucker
                            ? uniform_qr_loading(cfg.dims[m], cfg.tucker_ranks[m],
                                                 cfg.loading_range, load_rng)
                            : collinear_cp_factor(cfg.dims[m], cfg.cp_rank, cfg.collinearity,
                                                  load_rng));

  auto ref_rng = make_stream(cfg.seed, Stream::Refinement);
  std::vector<std::size_t> all(num_elements(cfg.dims));
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::sample(all.begin(), all.end(), std::back_inserter(t.support), cfg.support_size, ref_rng);
  std::shuffle(t.support.begin(), t.support.end(), ref_rng);
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> scale(cfg.refinement_lo, cfg.refinement_hi);
  for (std::size_t i = 0; i < cfg.support_size; ++i) {
    t.sign.push_back(coin(ref_rng) ? 1.0 : -1.0);
    t.scale.push_back(scale(ref_rng));
  }

  auto lab_rng = make_stream(cfg.seed, Stream::Labeler);
  const Shape core_shape =
      cfg.regime == Structure::Tucker ? cfg.tucker_ranks : Shape{cfg.cp_rank};
  t.labeler = draw_labeler(cfg, core_shape, lab_rng);
  std::vector<double> raw;
  for (std::size_t i = 0; i < cfg.pilot_size; ++i) {
    const DenseTensor c = draw_core(cfg, lab_rng);
    raw.push_back(labeler_logit(t, c, dense_refinement(t, cfg, c)));
  }
  calibrate_labeler(t, raw, cfg.resolved_logit_target());
  return t;
}

// Stratified per-class split: shuffle each class, then assign the leading
// fractions to train and calibration and the rest to test.
inline std::vector<Split> stratified_split(std::span<const int> y,
                                           const std::array<double, 3>& fractions,
                                           std::mt19937_64& rng) {
  std::vector<Split> out(y.size(), Split::Test);
  for (int cls : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_tr = static_cast<std::size_t>(std::llround(fractions[0] * n));
    const auto n_ca = static_cast<std::size_t>(std::llround(fractions[1] * n));
    for (std::size_t k = 0; k < idx.size(); ++k)
      out[idx[k]] = k < n_tr ? Split::Train : (k < n_tr + n_ca ? Split::Calibration : Split::Test);
  }
  return out;
}

inline SimDataset gen_dataset(const SimConfig& cfg) {
  SimDataset ds;
  ds.config = cfg;
  ds.truth = draw_truth(cfg);
  auto core_rng = make_stream(cfg.seed, Stream::Cores);
  auto acc_rng = make_stream(cfg.seed, Stream::Acceptance);
  auto noise_rng = make_stream(cfg.seed, Stream::Noise);
  std::uniform_real_distribution<double> u01;
  std::normal_distribution<double> noise(0.0, cfg.noise_sd);
  std::size_t filled[2] = {0, 0};
  while (filled[0] < cfg.n_per_class || filled[1] < cfg.n_per_class) {
    if (ds.candidates >= cfg.candidate_budget) {
      std::ostringstream os;
      os << "simgen: candidate budget " << cfg.candidate_budget << " exhausted with "
         << filled[0] << " class-0 and " << filled[1] << " class-1 samples accepted";
      throw DataError(os.str());
    }
    ++ds.candidates;
    DenseTensor c = draw_core(cfg, core_rng);
    DenseTensor ud = dense_refinement(ds.truth, cfg, c);
    const double z = labeler_logit(ds.truth, c, ud);
    const double pi = sigmoid(z);
    const int y = u01(acc_rng) < pi ? 1 : 0;
    if (filled[y] >= cfg.n_per_class) continue;
    ++filled[y];
    DenseTensor x = full_signal(ds.truth, cfg.dims, c);
    for (std::size_t i = 0; i < ds.truth.support.size(); ++i) x[ds.truth.support[i]] += ud[i];
    if (cfg.noise_sd > 0)
      for (double& v : x.data()) v += noise(noise_rng);
    ds.x.push_back(std::move(x));
    ds.y.push_back(y);
    ds.true_pi.push_back(pi);
    ds.z.push_back(z);
    ds.cores.push_back(std::move(c));
    ds.refinements.push_back(std::move(ud));
  }
  auto split_rng = make_stream(cfg.seed, Stream::Splits);
  ds.split = stratified_split(ds.y, cfg.split_fractions, split_rng);
  return ds;
}

// --- Summary ---------------------------------------------------------------------

struct ClassStats {
  double z_mean[2] = {0, 0}, z_sd[2] = {0, 0};
  double pi_mean[2] = {0, 0}, pi_sd[2] = {0, 0};
};

inline ClassStats class_stats(const SimDataset& ds) {
  ClassStats s;
  for (int k : {0, 1}) {
    double n = 0, z1 = 0, z2 = 0, p1 = 0, p2 = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.y[i] != k) continue;
      n += 1;
      z1 += ds.z[i];
      z2 += ds.z[i] * ds.z[i];
      p1 += ds.true_pi[i];
      p2 += ds.true_pi[i] * ds.true_pi[i];
    }
    if (n < 2) continue;
    s.z_mean[k] = z1 / n;
    s.pi_mean[k] = p1 / n;
    s.z_sd[k] = std::sqrt(std::max(0.0, (z2 - n * s.z_mean[k] * s.z_mean[k]) / (n - 1)));
    s.pi_sd[k] = std::sqrt(std::max(0.0, (p2 - n * s.pi_mean[k] * s.pi_mean[k]) / (n - 1)));
  }
  return s;
}

// --- Persistence ------------------------------------------------------------------

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Calibration: return "cal";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "cal") return Split::Calibration;
  if (s == "test") return Split::Test;
  throw DataError("unknown split label '" + s + "'");
}

inline nlohmann::json sim_config_to_json(const SimConfig& c) {
  return {{"dims", c.dims},
          {"n_per_class", c.n_per_class},
          {"regime", to_string(c.regime)},
          {"tucker_ranks", c.tucker_ranks},
          {"smooth_bandwidth", c.smooth_bandwidth},
          {"smooth_radius", c.smooth_radius},
          {"core_norm", c.core_norm},
          {"loading_range", c.loading_range},
          {"cp_rank", c.cp_rank},
          {"collinearity", c.collinearity},
          {"ar_coef", c.ar_coef},
          {"coef_norm", c.coef_norm},
          {"support_size", c.support_size},
          {"refinement_lo", c.refinement_lo},
          {"refinement_hi", c.refinement_hi},
          {"refinement_shape", c.refinement_shape},
          {"noise_sd", c.noise_sd},
          {"labeler_depth", c.labeler_depth},
          {"bias_lo", c.bias_lo},
          {"bias_hi", c.bias_hi},
          {"logit_target", c.resolved_logit_target()},
          {"pilot_size", c.pilot_size},
          {"split_fractions", c.split_fractions},
          {"candidate_budget", c.candidate_budget},
          {"seed", c.seed}};
}

inline SimConfig sim_config_from_json(const nlohmann::json& j) {
  SimConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("dims", c.dims);
  get("n_per_class", c.n_per_class);
  if (j.contains("regime")) c.regime = parse_structure(j.at("regime").get<std::string>());
  get("tucker_ranks", c.tucker_ranks);
  get("smooth_bandwidth", c.smooth_bandwidth);
  get("smooth_radius", c.smooth_radius);
  get("core_norm", c.core_norm);
  get("loading_range", c.loading_range);
  get("cp_rank", c.cp_rank);
  get("collinearity", c.collinearity);
  get("ar_coef", c.ar_coef);
  get("coef_norm", c.coef_norm);
  get("support_size", c.support_size);
  get("refinement_lo", c.refinement_lo);
  get("refinement_hi", c.refinement_hi);
  get("refinement_shape", c.refinement_shape);
  get("noise_sd", c.noise_sd);
  get("labeler_depth", c.labeler_depth);
  get("bias_lo", c.bias_lo);
  get("bias_hi", c.bias_hi);
  get("logit_target", c.logit_target);
  get("pilot_size", c.pilot_size);
  get("split_fractions", c.split_fractions);
  get("candidate_budget", c.candidate_budget);
  get("seed", c.seed);
  c.validate();
  return c;
}

namespace detail {

inline DenseTensor stack(std::span<const DenseTensor> ts) {
  if (ts.empty()) throw DataError("cannot stack an empty tensor list");
  Shape s{ts.size()};
  s.insert(s.end(), ts[0].shape().begin(), ts[0].shape().end());
  std::vector<double> data;
  data.reserve(num_elements(s));
  for (const auto& t : ts) {
    if (t.shape() != ts[0].shape()) throw ShapeError("stack: ragged tensor list");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return DenseTensor(std::move(s), std::move(data));
}

inline std::vector<DenseTensor> unstack(const DenseTensor& t) {
  const Shape inner(t.shape().begin() + 1, t.shape().end());
  if (inner.empty()) throw ShapeError("unstack: need at least two modes");
  const std::size_t n = t.dim(0), sz = num_elements(inner);
  std::vector<DenseTensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.emplace_back(inner, std::vector<double>(t.data().begin() + i * sz,
                                                t.data().begin() + (i + 1) * sz));
  return out;
}

}  // namespace detail

// Layout: config.json, truth.json (support, signs, scales, loadings, labeler
// calibration), labeler.{json,bin}, x.bin / cores.bin / refinements.bin
// (stacked along a leading sample mode), oracle.bin (true_pi, z per row),
// samples.csv (index, y, split, true_pi, z).
inline void save_dataset(const std::filesystem::path& dir, const SimDataset& ds) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "config.json");
    f << sim_config_to_json(ds.config).dump(2) << '\n';
  }
  nlohmann::json truth{{"regime", to_string(ds.truth.regime)},
                       {"support", ds.truth.support},
                       {"sign", ds.truth.sign},
                       {"scale", ds.truth.scale},
                       {"logit_scale", ds.truth.logit_scale},
                       {"logit_shift", ds.truth.logit_shift},
                       {"candidates", ds.candidates}};
  for (const auto& f : ds.truth.factors) truth["factors"].push_back(matrix_to_json(f));
  {
    std::ofstream f(dir / "truth.json");
    f << std::setprecision(17) << truth.dump(2) << '\n';
  }
  save_net(dir, "labeler", ds.truth.labeler);
  save_tensor((dir / "x.bin").string(), detail::stack(ds.x));
  save_tensor((dir / "cores.bin").string(), detail::stack(ds.cores));
  save_tensor((dir / "refinements.bin").string(), detail::stack(ds.refinements));
  // exact oracle values; the CSV copy is rounded
  DenseTensor oracle({ds.size(), 2});
  for (std::size_t i = 0; i < ds.size(); ++i) {
    oracle[2 * i] = ds.true_pi[i];
    oracle[2 * i + 1] = ds.z[i];
  }
  save_tensor((dir / "oracle.bin").string(), oracle);
  std::ofstream csv(dir / "samples.csv");
  csv << "index,y,split,true_pi,z\n" << std::setprecision(10);
  for (std::size_t i = 0; i < ds.size(); ++i)
    csv << i << ',' << ds.y[i] << ',' << to_string(ds.split[i]) << ',' << ds.true_pi[i] << ','
        << ds.z[i] << '\n';
}

inline SimDataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw DataError("dataset directory " + dir.string() + " does not exist");
  SimDataset ds;
  auto read_json = [&](const char* name) {
    std::ifstream f(dir / name);
    if (!f) throw DataError("dataset: missing " + std::string(name));
    try {
      return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("dataset: malformed " + std::string(name) + ": " + e.what());
    }
  };
  ds.config = sim_config_from_json(read_json("config.json"));
  const auto truth = read_json("truth.json");
  ds.truth.regime = parse_structure(truth.at("regime").get<std::string>());
  truth.at("support").get_to(ds.truth.support);
  truth.at("sign").get_to(ds.truth.sign);
  truth.at("scale").get_to(ds.truth.scale);
  truth.at("logit_scale").get_to(ds.truth.logit_scale);
  truth.at("logit_shift").get_to(ds.truth.logit_shift);
  truth.at("candidates").get_to(ds.candidates);
  for (const auto& f : truth.at("factors")) ds.truth.factors.push_back(matrix_from_json(f));
  ds.truth.labeler = load_net(dir, "labeler");
  ds.x = detail::unstack(load_tensor((dir / "x.bin").string()));
  ds.cores = detail::unstack(load_tensor((dir / "cores.bin").string()));
  ds.refinements = detail::unstack(load_tensor((dir / "refinements.bin").string()));

  std::ifstream csv(dir / "samples.csv");
  if (!csv) throw DataError("dataset: missing samples.csv");
  std::string line;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string idx, y, split, pi, z;
    if (!std::getline(ss, idx, ',') || !std::getline(ss, y, ',') || !std::getline(ss, split, ',') ||
        !std::getline(ss, pi, ',') || !std::getline(ss, z))
      throw DataError("dataset: malformed samples.csv row '" + line + "'");
    ds.y.push_back(std::stoi(y));
    ds.split.push_back(parse_split(split));
  }
  const DenseTensor oracle = load_tensor((dir / "oracle.bin").string());
  if (ds.y.size() != ds.x.size() || ds.cores.size() != ds.x.size() ||
      oracle.shape() != Shape{ds.y.size(), 2})
    throw DataError("dataset: sample count mismatch between samples.csv and tensors");
  for (std::size_t i = 0; i < ds.y.size(); ++i) {
    ds.true_pi.push_back(oracle[2 * i]);
    ds.z.push_back(oracle[2 * i + 1]);
  }
  return ds;
}

}  // namespace dctnn
