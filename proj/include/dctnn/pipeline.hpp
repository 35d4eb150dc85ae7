#pragma once

// Two-stage estimation: decomposition on the training tensors, then the
// dual-channel network with a learned refinement selector on (core, x - mean).
// Also the glue from a fitted model to latent points for conformal inference.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dctnn/conformal.hpp"
#include "dctnn/decomp.hpp"
#include "dctnn/error.hpp"
#include "dctnn/network.hpp"
#include "dctnn/tensor.hpp"

namespace dctnn {

struct FitConfig {
  Structure structure = Structure::Tucker;
  Shape tucker_ranks{4, 4, 4};
  std::size_t cp_rank = 16;
  Shape refinement_shape{3, 3, 3};
  std::size_t depth = 3;
  Shape hidden_core;         // empty: same as the core shape
  Shape hidden_refinement;   // empty: same as the refinement shape
  Link link = Link::Sigmoid;
  bool layer_norm = true;
  double truncation = std::numeric_limits<double>::infinity();
  std::size_t decomp_iters = 0;  // 0: per-method default
  double decomp_tol = 1e-6;
  // Share of the training rows held out (stratified) for early stopping; 0
  // trains on all rows for train.epochs.
  double validation_fraction = 0.2;
  std::size_t patience = 5;
  TrainConfig train;

  void validate() const {
    if (depth == 0) throw ConfigError("depth must be positive");
    if (refinement_shape.empty() || num_elements(refinement_shape) == 0)
      throw ConfigError("refinement shape must be nonempty");
    if (structure == Structure::CP && cp_rank == 0) throw ConfigError("CP rank must be positive");
    if (!(validation_fraction >= 0 && validation_fraction < 1))
      throw ConfigError("validation fraction must be in [0, 1)");
    train.validate();
  }
};

struct FittedModel {
  FitConfig config;
  DecompositionModel decomposition;
  DualChannelNet net;
  TrainHistory history;
};

// Network inputs for a set of samples: one core per row and x - train mean
// per row.
struct NetInputs {
  RowMatrix cores;
  RowMatrix centered;
};

inline NetInputs make_inputs(const DecompositionModel& model, std::span<const DenseTensor> xs) {
  if (xs.empty()) throw DataError("no samples");
  const DenseTensor& mean = train_mean(model);
  const std::size_t p = mean.size();
  const std::size_t k = num_elements(core_shape(model));
  NetInputs in{RowMatrix(Eigen::Index(xs.size()), Eigen::Index(k)),
               RowMatrix(Eigen::Index(xs.size()), Eigen::Index(p))};
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].shape() != mean.shape())
      throw ShapeError("sample shape " + shape_str(xs[i].shape()) + " != model shape " +
                       shape_str(mean.shape()));
    const DenseTensor c = project(model, xs[i]);
    for (std::size_t j = 0; j < k; ++j) in.cores(Eigen::Index(i), Eigen::Index(j)) = c[j];
    for (std::size_t j = 0; j < p; ++j)
      in.centered(Eigen::Index(i), Eigen::Index(j)) = xs[i][j] - mean[j];
  }
  return in;
}

inline DecompositionModel fit_decomposition(std::span<const DenseTensor> xs, const FitConfig& cfg) {
  if (cfg.structure == Structure::Tucker)
    return fit_tucker(xs, cfg.tucker_ranks, cfg.decomp_iters ? cfg.decomp_iters : kDefaultHooiIters,
                      cfg.decomp_tol);
  return fit_cp(xs, cfg.cp_rank, cfg.decomp_iters ? cfg.decomp_iters : kDefaultAlsIters,
                cfg.decomp_tol, cfg.train.seed);
}

inline NetConfig net_config_for(const DecompositionModel& model, const FitConfig& cfg) {
  NetConfig nc;
  nc.core_shape = core_shape(model);
  nc.refinement_shape = cfg.refinement_shape;
  nc.ambient_shape = train_mean(model).shape();
  nc.hidden_core = cfg.hidden_core;
  nc.hidden_refinement = cfg.hidden_refinement;
  nc.depth = cfg.depth;
  nc.link = cfg.link;
  nc.layer_norm = cfg.layer_norm;
  nc.truncation = cfg.truncation;
  return nc;
}

// Stratified hold-out of round(fraction * n_k) rows per class, drawn from `seed`.
inline std::vector<bool> validation_mask(std::span<const int> y, double fraction, std::uint64_t seed) {
  std::vector<bool> mask(y.size(), false);
  if (fraction <= 0) return mask;
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  for (int k : {0, 1}) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == k) rows.push_back(i);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto m = static_cast<std::size_t>(std::lround(fraction * double(rows.size())));
    for (std::size_t i = 0; i < m && i + 1 < rows.size(); ++i) mask[rows[i]] = true;
  }
  return mask;
}

inline RowMatrix select_rows(const RowMatrix& a, const std::vector<bool>& mask, bool keep) {
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] == keep) idx.push_back(Eigen::Index(i));
  RowMatrix out(Eigen::Index(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(Eigen::Index(i)) = a.row(idx[i]);
  return out;
}

inline FittedModel fit(std::span<const DenseTensor> xs, std::span<const int> y, const FitConfig& cfg,
                       const std::function<void(std::size_t, const DualChannelNet&)>& on_epoch = {}) {
  cfg.validate();
  if (xs.size() != y.size()) throw DataError("fit: sample and label counts differ");
  if (xs.empty()) throw DataError("fit: empty training set");
  for (int v : y)
    if (v != 0 && v != 1) throw DataError("fit: labels must be 0/1");
  FittedModel m;
  m.config = cfg;
  m.decomposition = fit_decomposition(xs, cfg);
  const NetInputs in = make_inputs(m.decomposition, xs);
  m.net = init_net(net_config_for(m.decomposition, cfg), cfg.train.seed);
  const auto mask = validation_mask(y, cfg.validation_fraction, cfg.train.seed);
  std::vector<double> fit_y, val_y;
  for (std::size_t i = 0; i < y.size(); ++i) (mask[i] ? val_y : fit_y).push_back(y[i]);
  if (val_y.empty()) {
    m.history = train(m.net, in.cores, in.centered, fit_y, cfg.train, on_epoch);
    return m;
  }
  const RowMatrix vc = select_rows(in.cores, mask, true), vs = select_rows(in.centered, mask, true);
  const Validation val{vc, vs, val_y, cfg.patience};
  m.history = train(m.net, select_rows(in.cores, mask, false), select_rows(in.centered, mask, false),
                    fit_y, cfg.train, on_epoch, &val);
  return m;
}

struct Predictions {
  std::vector<double> prob;
  RowMatrix cores;        // C_hat, one row per sample
  RowMatrix refinements;  // U_hat = W_u . (x - mean), one row per sample
};

inline Predictions predict_all(const FittedModel& m, std::span<const DenseTensor> xs) {
  const NetInputs in = make_inputs(m.decomposition, xs);
  const ForwardTrace tr = forward_batch(m.net, in.cores, in.centered);
  Predictions p;
  p.prob.assign(tr.output.data(), tr.output.data() + tr.output.size());
  p.cores = in.cores;
  p.refinements = tr.in_u;
  return p;
}

inline std::vector<LatentPoint> latent_points(const FittedModel& m, const Predictions& p,
                                              std::span<const int> y) {
  const Shape cs = m.net.config.core_shape, rs = m.net.config.refinement_shape;
  std::vector<LatentPoint> out(p.prob.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto ci = p.cores.row(Eigen::Index(i));
    const auto ri = p.refinements.row(Eigen::Index(i));
    out[i].core = DenseTensor(cs, std::vector<double>(ci.begin(), ci.end()));
    out[i].refinement = DenseTensor(rs, std::vector<double>(ri.begin(), ri.end()));
    out[i].prob = p.prob[i];
    out[i].label = y.empty() ? -1 : y[i];
  }
  return out;
}

// --- Metrics -------------------------------------------------------------------

struct Metrics {
  double accuracy = 0.0;
  double brier = 0.0;                                   // mean (prob - y)^2
  double mse = std::numeric_limits<double>::quiet_NaN();  // mean (prob - pi)^2, needs the true pi
  double mean_prob[2] = {0.0, 0.0};
};

inline Metrics evaluate(std::span<const double> prob, std::span<const int> y,
                        std::span<const double> true_pi = {}) {
  if (prob.size() != y.size() || y.empty()) throw DataError("evaluate: bad sizes");
  if (!true_pi.empty() && true_pi.size() != y.size()) throw DataError("evaluate: bad oracle size");
  Metrics m;
  if (!true_pi.empty()) {
    m.mse = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) m.mse += (prob[i] - true_pi[i]) * (prob[i] - true_pi[i]);
    m.mse /= double(y.size());
  }
  double n[2] = {0, 0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    m.accuracy += (prob[i] > 0.5) == (y[i] == 1);
    m.brier += (prob[i] - y[i]) * (prob[i] - y[i]);
    m.mean_prob[y[i]] += prob[i];
    n[y[i]] += 1;
  }
  m.accuracy /= double(y.size());
  m.brier /= double(y.size());
  for (int k : {0, 1}) m.mean_prob[k] = n[k] > 0 ? m.mean_prob[k] / n[k] : std::nan("");
  return m;
}

inline nlohmann::json to_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"brier", m.brier},
          {"mse", std::isnan(m.mse) ? nlohmann::json(nullptr) : nlohmann::json(m.mse)},
          {"mean_prob_y1", m.mean_prob[1]},
          {"mean_prob_y0", m.mean_prob[0]}};
}

// Selected refinement coordinates: entries of W_u with |w| >= tau.
inline std::size_t active_selector_entries(const DualChannelNet& net, double tau) {
  std::size_t k = 0;
  for (double w : net.selector.data()) k += std::abs(w) >= tau;
  return k;
}

// --- Persistence -----------------------------------------------------------------

inline nlohmann::json fit_config_to_json(const FitConfig& c) {
  return {{"structure", to_string(c.structure)},
          {"tucker_ranks", c.tucker_ranks},
          {"cp_rank", c.cp_rank},
          {"refinement_shape", c.refinement_shape},
          {"depth", c.depth},
          {"hidden_core", c.hidden_core},
          {"hidden_refinement", c.hidden_refinement},
          {"link", to_string(c.link)},
          {"layer_norm", c.layer_norm},
          {"truncation", std::isinf(c.truncation) ? nlohmann::json("inf") : nlohmann::json(c.truncation)},
          {"decomp_iters", c.decomp_iters},
          {"decomp_tol", c.decomp_tol},
          {"validation_fraction", c.validation_fraction},
          {"patience", c.patience},
          {"lambda", c.train.lambda},
          {"tau", c.train.tau},
          {"penalty", c.train.proximal_penalty ? "proximal" : "subgradient"},
          {"lr", c.train.lr},
          {"weight_decay", c.train.weight_decay},
          {"weight_bound", std::isinf(c.train.weight_bound) ? nlohmann::json("inf")
                                                             : nlohmann::json(c.train.weight_bound)},
          {"batch_size", c.train.batch_size},
          {"epochs", c.train.epochs},
          {"seed", c.train.seed}};
}

inline FitConfig fit_config_from_json(const nlohmann::json& j) {
  FitConfig c;
  c.structure = parse_structure(j.at("structure").get<std::string>());
  j.at("tucker_ranks").get_to(c.tucker_ranks);
  j.at("cp_rank").get_to(c.cp_rank);
  j.at("refinement_shape").get_to(c.refinement_shape);
  j.at("depth").get_to(c.depth);
  j.at("hidden_core").get_to(c.hidden_core);
  j.at("hidden_refinement").get_to(c.hidden_refinement);
  c.link = parse_link(j.at("link").get<std::string>());
  j.at("layer_norm").get_to(c.layer_norm);
  const auto& v = j.at("truncation");
  c.truncation = v.is_string() ? std::numeric_limits<double>::infinity() : v.get<double>();
  j.at("decomp_iters").get_to(c.decomp_iters);
  j.at("decomp_tol").get_to(c.decomp_tol);
  j.at("validation_fraction").get_to(c.validation_fraction);
  j.at("patience").get_to(c.patience);
  j.at("lambda").get_to(c.train.lambda);
  j.at("tau").get_to(c.train.tau);
  c.train.proximal_penalty = j.value("penalty", std::string("proximal")) == "proximal";
  j.at("lr").get_to(c.train.lr);
  j.at("weight_decay").get_to(c.train.weight_decay);
  if (const auto& b = j.value("weight_bound", nlohmann::json("inf")); !b.is_string())
    c.train.weight_bound = b.get<double>();
  j.at("batch_size").get_to(c.train.batch_size);
  j.at("epochs").get_to(c.train.epochs);
  j.at("seed").get_to(c.train.seed);
  return c;
}

// model/decomposition.{json,_mean.bin}, model/network.{json,bin}; the
// network JSON carries the fit config and training curve.
inline void save_fitted(const std::filesystem::path& dir, const FittedModel& m) {
  std::filesystem::create_directories(dir);
  save_model(dir, "decomposition", m.decomposition);
  save_net(dir, "network", m.net,
           {{"fit_config", fit_config_to_json(m.config)},
            {"epoch_loss", m.history.epoch_loss},
            {"val_loss", m.history.val_loss},
            {"best_epoch", m.history.best_epoch}});
}

inline FittedModel load_fitted(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw DataError("model directory " + dir.string() + " does not exist");
  FittedModel m;
  m.decomposition = load_model(dir, "decomposition");
  m.net = load_net(dir, "network");
  std::ifstream is(dir / "network.json");
  const auto j = nlohmann::json::parse(is);
  m.config = fit_config_from_json(j.at("extra").at("fit_config"));
  j.at("extra").at("epoch_loss").get_to(m.history.epoch_loss);
  j.at("extra").at("val_loss").get_to(m.history.val_loss);
  j.at("extra").at("best_epoch").get_to(m.history.best_epoch);
  return m;
}

}  // namespace dctnn
