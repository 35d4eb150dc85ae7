#pragma once

// Dual-channel ReLU tensor network.
//
// A layer maps the pair (H_c, H_u) to
//   H_c' = relu(LN(W_cc . H_c + W_cu . H_u + B_c))
//   H_u' = relu(LN(W_uc . H_c + W_uu . H_u + B_u))
// where "." contracts all input modes. The refinement input H_u^(0) is
// U = W_sel . x_centered (or is supplied directly when the net has no
// selector). The output is link(T_V(w_c . H_c + w_u . H_u + b)).
//
// Internally every tensor is flattened and a batch is a row-major matrix with
// one sample per row, so each contraction is a GEMM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dctnn/error.hpp"
#include "dctnn/tensor.hpp"

namespace dctnn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Link { Sigmoid, Identity };
enum class LossKind { BinaryCrossEntropy, Squared };

inline std::string to_string(Link l) { return l == Link::Sigmoid ? "sigmoid" : "identity"; }
inline Link parse_link(const std::string& s) {
  if (s == "sigmoid") return Link::Sigmoid;
  if (s == "identity") return Link::Identity;
  throw ConfigError("unknown link '" + s + "' (expected sigmoid|identity)");
}

struct NetConfig {
  Shape core_shape;
  Shape refinement_shape;
  Shape ambient_shape;  // empty: no selector, the refinement is an input
  Shape hidden_core;    // empty: same as core_shape
  Shape hidden_refinement;
  std::size_t depth = 3;
  Link link = Link::Sigmoid;
  bool layer_norm = true;
  double truncation = std::numeric_limits<double>::infinity();
};

struct LayerWeights {
  DenseTensor w_cc, w_cu, w_uc, w_uu, b_c, b_u;
  DenseTensor ln_gain_c, ln_bias_c, ln_gain_u, ln_bias_u;
};

struct DualChannelNet {
  NetConfig config;
  std::vector<LayerWeights> layers;
  DenseTensor out_wc, out_wu, out_b;
  DenseTensor selector;  // refinement_shape ++ ambient_shape

  bool has_selector() const { return !config.ambient_shape.empty(); }
  Shape hidden_core() const {
    return config.hidden_core.empty() ? config.core_shape : config.hidden_core;
  }
  Shape hidden_refinement() const {
    return config.hidden_refinement.empty() ? config.refinement_shape : config.hidden_refinement;
  }
};

namespace detail {

inline Shape concat(const Shape& a, const Shape& b) {
  Shape s = a;
  s.insert(s.end(), b.begin(), b.end());
  return s;
}

inline Matrix::ConstEigenMap as_matrix(const DenseTensor& t, std::size_t rows) {
  return {t.data().data(), Eigen::Index(rows), Eigen::Index(t.size() / rows)};
}
inline Matrix::EigenMap as_matrix(DenseTensor& t, std::size_t rows) {
  return {t.data().data(), Eigen::Index(rows), Eigen::Index(t.size() / rows)};
}
inline Eigen::Map<const Eigen::RowVectorXd> as_row(const DenseTensor& t) {
  return {t.data().data(), Eigen::Index(t.size())};
}
inline Eigen::Map<Eigen::RowVectorXd> as_row(DenseTensor& t) {
  return {t.data().data(), Eigen::Index(t.size())};
}

}  // namespace detail

// Visits (name, tensor) for every trainable parameter in a fixed order.
// Layer-norm parameters are skipped when layer norm is off, the selector when
// absent.
template <typename Net, typename F>
void for_each_parameter(Net& net, F&& f) {
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    auto& w = net.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    f(p + "w_cc", w.w_cc);
    f(p + "w_cu", w.w_cu);
    f(p + "w_uc", w.w_uc);
    f(p + "w_uu", w.w_uu);
    f(p + "b_c", w.b_c);
    f(p + "b_u", w.b_u);
    if (net.config.layer_norm) {
      f(p + "ln_gain_c", w.ln_gain_c);
      f(p + "ln_bias_c", w.ln_bias_c);
      f(p + "ln_gain_u", w.ln_gain_u);
      f(p + "ln_bias_u", w.ln_bias_u);
    }
  }
  f(std::string("out.w_c"), net.out_wc);
  f(std::string("out.w_u"), net.out_wu);
  f(std::string("out.b"), net.out_b);
  if (net.has_selector()) f(std::string("selector"), net.selector);
}

// Zero-valued net with all shapes set; also the gradient container.
inline DualChannelNet zero_net(const NetConfig& cfg) {
  if (cfg.core_shape.empty() || cfg.refinement_shape.empty())
    throw ConfigError("network: core and refinement shapes are required");
  if (!(cfg.truncation > 0)) throw ConfigError("network: truncation level must be positive");
  DualChannelNet net;
  net.config = cfg;
  const Shape hc = net.hidden_core(), hu = net.hidden_refinement();
  Shape in_c = cfg.core_shape, in_u = cfg.refinement_shape;
  using detail::concat;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    LayerWeights w;
    w.w_cc = DenseTensor(concat(hc, in_c));
    w.w_cu = DenseTensor(concat(hc, in_u));
    w.w_uc = DenseTensor(concat(hu, in_c));
    w.w_uu = DenseTensor(concat(hu, in_u));
    w.b_c = DenseTensor(hc);
    w.b_u = DenseTensor(hu);
    w.ln_gain_c = DenseTensor(hc);
    w.ln_bias_c = DenseTensor(hc);
    w.ln_gain_u = DenseTensor(hu);
    w.ln_bias_u = DenseTensor(hu);
    net.layers.push_back(std::move(w));
    in_c = hc;
    in_u = hu;
  }
  net.out_wc = DenseTensor(concat({1}, in_c));
  net.out_wu = DenseTensor(concat({1}, in_u));
  net.out_b = DenseTensor({1});
  if (net.has_selector()) net.selector = DenseTensor(concat(cfg.refinement_shape, cfg.ambient_shape));
  return net;
}

// Weights uniform in [-s, s], s = fan_in^{-1/2} per block; biases 0; layer-norm
// gains 1 and shifts 0.
inline DualChannelNet init_net(const NetConfig& cfg, std::uint64_t seed) {
  DualChannelNet net = zero_net(cfg);
  std::mt19937_64 rng(seed);
  auto fill = [&](DenseTensor& w, std::size_t fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-s, s);
    for (double& v : w.data()) v = u(rng);
  };
  Shape in_c = cfg.core_shape, in_u = cfg.refinement_shape;
  for (auto& w : net.layers) {
    fill(w.w_cc, num_elements(in_c));
    fill(w.w_cu, num_elements(in_u));
    fill(w.w_uc, num_elements(in_c));
    fill(w.w_uu, num_elements(in_u));
    for (double& v : w.ln_gain_c.data()) v = 1.0;
    for (double& v : w.ln_gain_u.data()) v = 1.0;
    in_c = net.hidden_core();
    in_u = net.hidden_refinement();
  }
  fill(net.out_wc, num_elements(in_c));
  fill(net.out_wu, num_elements(in_u));
  if (net.has_selector()) fill(net.selector, num_elements(cfg.ambient_shape));
  return net;
}

// --- Forward -----------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

struct LayerTrace {
  RowMatrix pre_c, pre_u;      // affine pre-activations
  RowMatrix norm_c, norm_u;    // normalized pre-activations (layer norm only)
  Eigen::VectorXd inv_std_c, inv_std_u;
  RowMatrix act_c, act_u;      // relu outputs
};

struct ForwardTrace {
  RowMatrix in_c, in_u;  // H^(0); in_u is U
  std::vector<LayerTrace> layers;
  Eigen::VectorXd pre_out;    // before truncation
  Eigen::VectorXd truncated;  // T_V(pre_out), the pre-link output
  Eigen::VectorXd output;     // link(truncated)
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double truncate(double z, double v) { return std::copysign(std::min(std::abs(z), v), z); }

namespace detail {

inline void layer_norm(const RowMatrix& a, RowMatrix& norm, Eigen::VectorXd& inv_std) {
  const Eigen::Index n = a.cols();
  norm.resize(a.rows(), n);
  inv_std.resize(a.rows());
  for (Eigen::Index b = 0; b < a.rows(); ++b) {
    const double mu = a.row(b).mean();
    const double var = (a.row(b).array() - mu).square().sum() / static_cast<double>(n);
    inv_std[b] = 1.0 / std::sqrt(var + kLayerNormEps);
    norm.row(b) = (a.row(b).array() - mu) * inv_std[b];
  }
}

inline void check_input_width(const RowMatrix& m, std::size_t expected, const char* what) {
  if (static_cast<std::size_t>(m.cols()) != expected)
    throw ShapeError(std::string("network: ") + what + " width " + std::to_string(m.cols()) +
                     " != expected " + std::to_string(expected));
}

}  // namespace detail

// Selector output U = W_sel . x for every row of x (n x prod(ambient)).
inline RowMatrix selector_output(const DualChannelNet& net, const RowMatrix& x) {
  const std::size_t k = num_elements(net.config.refinement_shape);
  detail::check_input_width(x, num_elements(net.config.ambient_shape), "ambient input");
  return x * detail::as_matrix(net.selector, k).transpose();
}

// cores: n x prod(core_shape). second: centered ambient inputs (n x prod(D))
// when the net has a selector, otherwise the refinement itself
// (n x prod(refinement_shape)).
inline ForwardTrace forward_batch(const DualChannelNet& net, const RowMatrix& cores,
                                  const RowMatrix& second) {
  const auto& cfg = net.config;
  detail::check_input_width(cores, num_elements(cfg.core_shape), "core input");
  if (cores.rows() != second.rows()) throw ShapeError("network: batch size mismatch");
  ForwardTrace tr;
  tr.in_c = cores;
  if (net.has_selector()) {
    tr.in_u = selector_output(net, second);
  } else {
    detail::check_input_width(second, num_elements(cfg.refinement_shape), "refinement input");
    tr.in_u = second;
  }
  const RowMatrix* hc = &tr.in_c;
  const RowMatrix* hu = &tr.in_u;
  tr.layers.resize(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& w = net.layers[l];
    auto& lt = tr.layers[l];
    const std::size_t oc = w.b_c.size(), ou = w.b_u.size();
    lt.pre_c = (*hc) * detail::as_matrix(w.w_cc, oc).transpose() +
               (*hu) * detail::as_matrix(w.w_cu, oc).transpose();
    lt.pre_c.rowwise() += detail::as_row(w.b_c);
    lt.pre_u = (*hc) * detail::as_matrix(w.w_uc, ou).transpose() +
               (*hu) * detail::as_matrix(w.w_uu, ou).transpose();
    lt.pre_u.rowwise() += detail::as_row(w.b_u);
    if (cfg.layer_norm) {
      detail::layer_norm(lt.pre_c, lt.norm_c, lt.inv_std_c);
      detail::layer_norm(lt.pre_u, lt.norm_u, lt.inv_std_u);
      RowMatrix zc = lt.norm_c.array().rowwise() * detail::as_row(w.ln_gain_c).array();
      zc.rowwise() += detail::as_row(w.ln_bias_c);
      RowMatrix zu = lt.norm_u.array().rowwise() * detail::as_row(w.ln_gain_u).array();
      zu.rowwise() += detail::as_row(w.ln_bias_u);
      lt.act_c = zc.cwiseMax(0.0);
      lt.act_u = zu.cwiseMax(0.0);
    } else {
      lt.act_c = lt.pre_c.cwiseMax(0.0);
      lt.act_u = lt.pre_u.cwiseMax(0.0);
    }
    hc = &lt.act_c;
    hu = &lt.act_u;
  }
  tr.pre_out = (*hc) * detail::as_row(net.out_wc).transpose() +
               (*hu) * detail::as_row(net.out_wu).transpose();
  tr.pre_out.array() += net.out_b[0];
  tr.truncated = tr.pre_out.unaryExpr([&](double z) { return truncate(z, cfg.truncation); });
  if (cfg.link == Link::Sigmoid)
    tr.output = tr.truncated.unaryExpr([](double z) { return sigmoid(z); });
  else
    tr.output = tr.truncated;
  return tr;
}

struct ForwardResult {
  double output = 0.0;
  DenseTensor refinement;  // U, shaped as the refinement
  ForwardTrace trace;
};

inline RowMatrix as_batch_row(const DenseTensor& t) {
  RowMatrix m(1, Eigen::Index(t.size()));
  std::copy(t.data().begin(), t.data().end(), m.data());
  return m;
}

// Single-sample forward; `second` is x_centered for nets with a selector and
// the refinement tensor otherwise.
inline ForwardResult forward(const DualChannelNet& net, const DenseTensor& core,
                             const DenseTensor& second) {
  ForwardResult r;
  r.trace = forward_batch(net, as_batch_row(core), as_batch_row(second));
  r.output = r.trace.output[0];
  r.refinement = DenseTensor(net.config.refinement_shape,
                             std::vector<double>(r.trace.in_u.data(),
                                                 r.trace.in_u.data() + r.trace.in_u.size()));
  return r;
}

inline Eigen::VectorXd predict(const DualChannelNet& net, const RowMatrix& cores,
                               const RowMatrix& second) {
  return forward_batch(net, cores, second).output;
}

// --- Objective -----------------------------------------------------------------

inline double clipped_l1(const DenseTensor& w, double lambda, double tau) {
  if (!(tau > 0)) throw ConfigError("clipped_l1: tau must be positive");
  double s = 0.0;
  for (double v : w.data()) s += std::min(std::abs(v) / tau, 1.0);
  return lambda * s;
}

// Subgradient: sign(w) lambda / tau strictly inside (0, tau), else 0.
inline double clipped_l1_subgradient(double w, double lambda, double tau) {
  const double a = std::abs(w);
  if (a == 0.0 || a >= tau) return 0.0;
  return (w > 0 ? 1.0 : -1.0) * lambda / tau;
}

// Exact proximal map of step * lambda * min(|v| / tau, 1): the better of the
// soft-threshold inside the kink and the identity outside it.
inline double clipped_l1_prox(double w, double step, double lambda, double tau) {
  const double a = std::abs(w), sgn = w < 0 ? -1.0 : 1.0;
  const double inner = std::min(std::max(a - step * lambda / tau, 0.0), tau);
  const double outer = std::max(a, tau);
  auto objective = [&](double v) {
    return 0.5 * (v - a) * (v - a) + step * lambda * std::min(v / tau, 1.0);
  };
  return sgn * (objective(inner) <= objective(outer) ? inner : outer);
}

inline constexpr double kBceEps = 1e-12;

struct TrainConfig {
  double lambda = 0.1;
  double tau = 0.05;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::BinaryCrossEntropy;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Proximal: the selector penalty is applied by its proximal map after each
  // optimizer step (exact zeros). Subgradient: it enters the gradient.
  bool proximal_penalty = true;
  // Max-abs bound on the hidden-layer weights and biases, enforced by
  // clamping after every step; infinite leaves them unconstrained.
  double weight_bound = std::numeric_limits<double>::infinity();

  void validate() const {
    if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
    if (!(tau > 0)) throw ConfigError("tau must be > 0");
    if (!(lr > 0)) throw ConfigError("learning rate must be > 0");
    if (!(weight_decay >= 0)) throw ConfigError("weight decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(weight_bound > 0)) throw ConfigError("weight bound must be > 0");
  }
};

// Largest |entry| over the hidden-layer weight tensors and biases.
inline double layer_max_abs(const DualChannelNet& net) {
  double m = 0.0;
  for (const auto& w : net.layers)
    for (const DenseTensor* t : {&w.w_cc, &w.w_cu, &w.w_uc, &w.w_uu, &w.b_c, &w.b_u})
      for (double v : t->data()) m = std::max(m, std::abs(v));
  return m;
}

inline void project_layer_weights(DualChannelNet& net, double bound) {
  if (std::isinf(bound)) return;
  for (auto& w : net.layers)
    for (DenseTensor* t : {&w.w_cc, &w.w_cu, &w.w_uc, &w.w_uu, &w.b_c, &w.b_u})
      for (double& v : t->data()) v = std::clamp(v, -bound, bound);
}

inline double sample_loss(double out, double y, LossKind kind) {
  if (kind == LossKind::Squared) return (y - out) * (y - out);
  const double p = std::clamp(out, kBceEps, 1.0 - kBceEps);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

// d loss / d output.
inline double sample_loss_grad(double out, double y, LossKind kind) {
  if (kind == LossKind::Squared) return 2.0 * (out - y);
  if (out < kBceEps || out > 1.0 - kBceEps) return 0.0;
  return -y / out + (1.0 - y) / (1.0 - out);
}

struct LossValue {
  double total = 0.0;
  double data = 0.0;
  double penalty = 0.0;
  std::vector<double> residuals;  // prediction - label
};

inline LossValue loss(const DualChannelNet& net, const RowMatrix& cores, const RowMatrix& second,
                      std::span<const double> labels, const TrainConfig& cfg) {
  if (labels.empty()) throw DataError("loss: empty batch");
  if (labels.size() != static_cast<std::size_t>(cores.rows()))
    throw ShapeError("loss: label count mismatch");
  const auto out = predict(net, cores, second);
  LossValue v;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    v.data += sample_loss(out[Eigen::Index(i)], labels[i], cfg.loss);
    v.residuals.push_back(out[Eigen::Index(i)] - labels[i]);
  }
  v.data /= static_cast<double>(labels.size());
  if (net.has_selector()) v.penalty = clipped_l1(net.selector, cfg.lambda, cfg.tau);
  v.total = v.data + v.penalty;
  return v;
}

// --- Backward ----------------------------------------------------------------

namespace detail {

inline RowMatrix layer_norm_backward(const RowMatrix& d_norm, const RowMatrix& norm,
                                     const Eigen::VectorXd& inv_std) {
  RowMatrix da(d_norm.rows(), d_norm.cols());
  const double n = static_cast<double>(d_norm.cols());
  for (Eigen::Index b = 0; b < d_norm.rows(); ++b) {
    const double m1 = d_norm.row(b).sum() / n;
    const double m2 = d_norm.row(b).dot(norm.row(b)) / n;
    da.row(b) = inv_std[b] * (d_norm.row(b).array() - m1 - norm.row(b).array() * m2);
  }
  return da;
}

inline void add_to(DenseTensor& t, const RowMatrix& m) {
  Eigen::Map<RowMatrix> dst(t.data().data(), m.rows(), m.cols());
  dst += m;
}

}  // namespace detail

// Gradient of the mean data loss (plus the clipped-L1 subgradient on the
// selector) with respect to every parameter; returned in a net-shaped
// container.
inline DualChannelNet backward(const DualChannelNet& net, const ForwardTrace& tr,
                               const RowMatrix& second, std::span<const double> labels,
                               const TrainConfig& cfg) {
  const Eigen::Index bsz = tr.output.size();
  if (static_cast<std::size_t>(bsz) != labels.size()) throw ShapeError("backward: label count");
  DualChannelNet g = zero_net(net.config);

  Eigen::VectorXd d_pre(bsz);
  for (Eigen::Index b = 0; b < bsz; ++b) {
    double d = sample_loss_grad(tr.output[b], labels[std::size_t(b)], cfg.loss) /
               static_cast<double>(bsz);
    if (net.config.link == Link::Sigmoid) d *= tr.output[b] * (1.0 - tr.output[b]);
    if (!(std::abs(tr.pre_out[b]) < net.config.truncation)) d = 0.0;
    d_pre[b] = d;
  }
  const std::size_t depth = net.layers.size();
  const RowMatrix& last_c = depth ? tr.layers.back().act_c : tr.in_c;
  const RowMatrix& last_u = depth ? tr.layers.back().act_u : tr.in_u;
  detail::as_row(g.out_wc) = d_pre.transpose() * last_c;
  detail::as_row(g.out_wu) = d_pre.transpose() * last_u;
  g.out_b[0] = d_pre.sum();
  RowMatrix dh_c = d_pre * detail::as_row(net.out_wc);
  RowMatrix dh_u = d_pre * detail::as_row(net.out_wu);

  for (std::size_t l = depth; l-- > 0;) {
    const auto& w = net.layers[l];
    const auto& lt = tr.layers[l];
    auto& gw = g.layers[l];
    const RowMatrix& in_c = l ? tr.layers[l - 1].act_c : tr.in_c;
    const RowMatrix& in_u = l ? tr.layers[l - 1].act_u : tr.in_u;
    RowMatrix dz_c = (lt.act_c.array() > 0.0).select(dh_c, 0.0);
    RowMatrix dz_u = (lt.act_u.array() > 0.0).select(dh_u, 0.0);
    RowMatrix da_c, da_u;
    if (net.config.layer_norm) {
      detail::as_row(gw.ln_gain_c) = (dz_c.array() * lt.norm_c.array()).colwise().sum();
      detail::as_row(gw.ln_bias_c) = dz_c.colwise().sum();
      detail::as_row(gw.ln_gain_u) = (dz_u.array() * lt.norm_u.array()).colwise().sum();
      detail::as_row(gw.ln_bias_u) = dz_u.colwise().sum();
      const RowMatrix dn_c = dz_c.array().rowwise() * detail::as_row(w.ln_gain_c).array();
      const RowMatrix dn_u = dz_u.array().rowwise() * detail::as_row(w.ln_gain_u).array();
      da_c = detail::layer_norm_backward(dn_c, lt.norm_c, lt.inv_std_c);
      da_u = detail::layer_norm_backward(dn_u, lt.norm_u, lt.inv_std_u);
    } else {
      da_c = std::move(dz_c);
      da_u = std::move(dz_u);
    }
    const std::size_t oc = w.b_c.size(), ou = w.b_u.size();
    detail::as_matrix(gw.w_cc, oc).noalias() = da_c.transpose() * in_c;
    detail::as_matrix(gw.w_cu, oc).noalias() = da_c.transpose() * in_u;
    detail::as_matrix(gw.w_uc, ou).noalias() = da_u.transpose() * in_c;
    detail::as_matrix(gw.w_uu, ou).noalias() = da_u.transpose() * in_u;
    detail::as_row(gw.b_c) = da_c.colwise().sum();
    detail::as_row(gw.b_u) = da_u.colwise().sum();
    dh_c = da_c * detail::as_matrix(w.w_cc, oc) + da_u * detail::as_matrix(w.w_uc, ou);
    dh_u = da_c * detail::as_matrix(w.w_cu, oc) + da_u * detail::as_matrix(w.w_uu, ou);
  }

  if (net.has_selector()) {
    const std::size_t k = num_elements(net.config.refinement_shape);
    detail::as_matrix(g.selector, k).noalias() = dh_u.transpose() * second;
    auto gs = g.selector.data();
    const auto ws = net.selector.data();
    for (std::size_t i = 0; i < gs.size(); ++i)
      gs[i] += clipped_l1_subgradient(ws[i], cfg.lambda, cfg.tau);
  }
  return g;
}

inline DualChannelNet backward(const DualChannelNet& net, const RowMatrix& cores,
                               const RowMatrix& second, std::span<const double> labels,
                               const TrainConfig& cfg) {
  return backward(net, forward_batch(net, cores, second), second, labels, cfg);
}

// --- Training ----------------------------------------------------------------

struct TrainHistory {
  std::vector<double> epoch_loss;  // mean data loss over the epoch's batches + penalty
  std::vector<double> val_loss;    // mean data loss on the validation set, if any
  std::size_t best_epoch = 0;      // epoch whose weights were kept
};

// Held-out rows for early stopping: after `patience` epochs without a lower
// validation loss, training stops and the best weights are restored.
struct Validation {
  const RowMatrix& cores;
  const RowMatrix& second;
  std::span<const double> labels;
  std::size_t patience = 5;
};

class Adam {
 public:
  Adam(const DualChannelNet& net, const TrainConfig& cfg) : cfg_(cfg) {
    auto zeros = zero_net(net.config);
    m_ = zeros;
    v_ = std::move(zeros);
  }

  void step(DualChannelNet& net, DualChannelNet& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    std::vector<DenseTensor*> ps, gs, ms, vs;
    for_each_parameter(net, [&](const std::string&, DenseTensor& t) { ps.push_back(&t); });
    for_each_parameter(grad, [&](const std::string&, DenseTensor& t) { gs.push_back(&t); });
    for_each_parameter(m_, [&](const std::string&, DenseTensor& t) { ms.push_back(&t); });
    for_each_parameter(v_, [&](const std::string&, DenseTensor& t) { vs.push_back(&t); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto p = ps[k]->data();
      const auto g = gs[k]->data();
      auto m = ms[k]->data();
      auto v = vs[k]->data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] + cfg_.weight_decay * p[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
      }
    }
  }

 private:
  TrainConfig cfg_;
  DualChannelNet m_, v_;
  std::uint64_t t_ = 0;
};

// Mini-batch Adam on the penalized objective. Shuffling uses its own stream
// seeded from cfg.seed, so equal inputs and seed give bit-identical weights.
inline TrainHistory train(DualChannelNet& net, const RowMatrix& cores, const RowMatrix& second,
                          std::span<const double> labels, const TrainConfig& cfg,
                          const std::function<void(std::size_t, const DualChannelNet&)>& on_epoch = {},
                          const Validation* val = nullptr) {
  cfg.validate();
  const std::size_t n = labels.size();
  if (n == 0) throw DataError("train: no samples");
  if (static_cast<std::size_t>(cores.rows()) != n || static_cast<std::size_t>(second.rows()) != n)
    throw ShapeError("train: inconsistent sample counts");
  Adam opt(net, cfg);
  TrainConfig grad_cfg = cfg;
  if (cfg.proximal_penalty) grad_cfg.lambda = 0.0;
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (val && (val->labels.empty() || std::size_t(val->cores.rows()) != val->labels.size() ||
              std::size_t(val->second.rows()) != val->labels.size()))
    throw ShapeError("train: inconsistent validation set");
  project_layer_weights(net, cfg.weight_bound);
  TrainHistory hist;
  DualChannelNet best;
  double best_val = std::numeric_limits<double>::infinity();
  RowMatrix bc, bs;
  std::vector<double> by;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_data = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      bc.resize(Eigen::Index(len), cores.cols());
      bs.resize(Eigen::Index(len), second.cols());
      by.resize(len);
      for (std::size_t i = 0; i < len; ++i) {
        const auto src = Eigen::Index(order[start + i]);
        bc.row(Eigen::Index(i)) = cores.row(src);
        bs.row(Eigen::Index(i)) = second.row(src);
        by[i] = labels[std::size_t(src)];
      }
      const auto tr = forward_batch(net, bc, bs);
      double data = 0.0;
      for (std::size_t i = 0; i < len; ++i) data += sample_loss(tr.output[Eigen::Index(i)], by[i], cfg.loss);
      data /= static_cast<double>(len);
      if (!std::isfinite(data))
        throw NumericalError("training loss became non-finite at epoch " + std::to_string(epoch) +
                             "; lower the learning rate");
      epoch_data += data;
      ++batches;
      auto g = backward(net, tr, bs, by, grad_cfg);
      opt.step(net, g);
      if (cfg.proximal_penalty && net.has_selector())
        for (double& w : net.selector.data()) w = clipped_l1_prox(w, cfg.lr, cfg.lambda, cfg.tau);
      project_layer_weights(net, cfg.weight_bound);
    }
    const double pen = net.has_selector() ? clipped_l1(net.selector, cfg.lambda, cfg.tau) : 0.0;
    hist.epoch_loss.push_back(epoch_data / static_cast<double>(batches) + pen);
    if (on_epoch) on_epoch(epoch, net);
    if (!val) {
      hist.best_epoch = epoch;
      continue;
    }
    const auto out = forward_batch(net, val->cores, val->second).output;
    double vl = 0.0;
    for (std::size_t i = 0; i < val->labels.size(); ++i)
      vl += sample_loss(out[Eigen::Index(i)], val->labels[i], cfg.loss);
    hist.val_loss.push_back(vl / static_cast<double>(val->labels.size()));
    if (hist.val_loss.back() < best_val) {
      best_val = hist.val_loss.back();
      best = net;
      hist.best_epoch = epoch;
    } else if (epoch - hist.best_epoch >= val->patience) {
      break;
    }
  }
  if (val && std::isfinite(best_val)) net = std::move(best);
  return hist;
}

// --- Serialization -----------------------------------------------------------

inline nlohmann::json net_config_to_json(const NetConfig& c) {
  return {{"core_shape", c.core_shape},
          {"refinement_shape", c.refinement_shape},
          {"ambient_shape", c.ambient_shape},
          {"hidden_core", c.hidden_core},
          {"hidden_refinement", c.hidden_refinement},
          {"depth", c.depth},
          {"link", to_string(c.link)},
          {"layer_norm", c.layer_norm},
          {"truncation", std::isinf(c.truncation) ? nlohmann::json("inf") : nlohmann::json(c.truncation)}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig c;
  c.core_shape = j.at("core_shape").get<Shape>();
  c.refinement_shape = j.at("refinement_shape").get<Shape>();
  c.ambient_shape = j.at("ambient_shape").get<Shape>();
  c.hidden_core = j.at("hidden_core").get<Shape>();
  c.hidden_refinement = j.at("hidden_refinement").get<Shape>();
  c.depth = j.at("depth").get<std::size_t>();
  c.link = parse_link(j.at("link").get<std::string>());
  c.layer_norm = j.at("layer_norm").get<bool>();
  const auto& t = j.at("truncation");
  c.truncation = t.is_string() ? std::numeric_limits<double>::infinity() : t.get<double>();
  return c;
}

// <stem>.json (config + parameter names) and <stem>.bin (all parameters in
// for_each_parameter order, one tensor container each).
inline void save_net(const std::filesystem::path& dir, const std::string& stem,
                     const DualChannelNet& net, const nlohmann::json& extra = {}) {
  nlohmann::json j;
  j["config"] = net_config_to_json(net.config);
  j["parameters"] = nlohmann::json::array();
  std::ofstream bin(dir / (stem + ".bin"), std::ios::binary);
  if (!bin) throw DataError("cannot write " + (dir / (stem + ".bin")).string());
  for_each_parameter(net, [&](const std::string& name, const DenseTensor& t) {
    j["parameters"].push_back({{"name", name}, {"shape", t.shape()}});
    write_tensor(bin, t);
  });
  if (!extra.is_null()) j["extra"] = extra;
  std::ofstream os(dir / (stem + ".json"));
  os << j.dump(1) << '\n';
}

inline DualChannelNet load_net(const std::filesystem::path& dir, const std::string& stem) {
  std::ifstream is(dir / (stem + ".json"));
  if (!is) throw DataError("missing checkpoint " + (dir / (stem + ".json")).string());
  const auto j = nlohmann::json::parse(is);
  DualChannelNet net = zero_net(net_config_from_json(j.at("config")));
  std::ifstream bin(dir / (stem + ".bin"), std::ios::binary);
  if (!bin) throw DataError("missing checkpoint " + (dir / (stem + ".bin")).string());
  for_each_parameter(net, [&](const std::string& name, DenseTensor& t) {
    DenseTensor v = read_tensor(bin);
    if (v.shape() != t.shape()) throw DataError("checkpoint parameter " + name + " has wrong shape");
    t = std::move(v);
  });
  return net;
}

}  // namespace dctnn
