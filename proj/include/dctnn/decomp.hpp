#pragma once

// Shared low-rank structure across a sample of tensors and the per-sample core
// extraction that inverts the signal map.
//
//   Tucker: HOSVD on the mode-m sample covariances, refined by HOOI.
//   CP:     covariance-PCA initialization, ALS on the sample-stacked tensor,
//           coefficients c = G^{-1} m with G the Hadamard product of the
//           factor Gram matrices.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dctnn/error.hpp"
#include "dctnn/linalg.hpp"
#include "dctnn/tensor.hpp"

namespace dctnn {

enum class Structure { Tucker, CP };

inline std::string to_string(Structure s) { return s == Structure::Tucker ? "tucker" : "cp"; }

inline Structure parse_structure(const std::string& s) {
  if (s == "tucker" || s == "Tucker") return Structure::Tucker;
  if (s == "cp" || s == "CP") return Structure::CP;
  throw ConfigError("unknown structure '" + s + "' (expected tucker|cp)");
}

struct TuckerModel {
  std::vector<Matrix> loadings;  // D_m x R_m, orthonormal columns
  std::vector<std::size_t> ranks;
  DenseTensor train_mean;
  // Explained energy sum_i ||project(x_i)||_F^2 after HOSVD and after each
  // HOOI iteration.
  std::vector<double> objective_history;
  int iterations = 0;
  std::vector<std::string> warnings;
};

struct CpModel {
  std::vector<Matrix> factors;  // D_m x R, unit-norm columns
  std::size_t rank = 0;
  Matrix gram;  // Hadamard product of A_m^T A_m
  DenseTensor train_mean;
  // Stacked-tensor residual ||Y - model||_F^2 after each ALS sweep.
  std::vector<double> residual_history;
  int iterations = 0;
  std::vector<std::string> warnings;
  linalg::Cholesky gram_factor;
};

struct FitOptions {
  std::size_t max_iters = 0;  // 0 selects the per-method default
  double tol = 1e-8;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kDefaultHooiIters = 50;
inline constexpr std::size_t kDefaultAlsIters = 200;
inline constexpr double kDeadComponent = 1e-10;  // relative ALS column norm

namespace detail {

inline void check_samples(std::span<const DenseTensor> samples, const char* who) {
  if (samples.size() < 2) throw DataError(std::string(who) + ": need at least 2 samples");
  for (const auto& s : samples)
    if (s.shape() != samples[0].shape())
      throw ShapeError(std::string(who) + ": samples have inconsistent shapes");
}

// Accumulates the mode-`mode` Gram of t into cov: cov += unfold(t) unfold(t)^T.
inline void accumulate_mode_gram(const DenseTensor& t, std::size_t mode, Matrix& cov) {
  const auto [pre, dim, post] = split_at(t.shape(), mode);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto C = cov.eigen();
  for (std::size_t p = 0; p < pre; ++p) {
    Eigen::Map<const RowMat> slab(t.data().data() + p * dim * post, Eigen::Index(dim),
                                  Eigen::Index(post));
    C.noalias() += slab * slab.transpose();
  }
}

inline std::vector<double> rank1_vectors_inner(const DenseTensor& x,
                                               std::span<const std::vector<double>> vecs) {
  // <x, v_1 o ... o v_M>, contracting the last mode first.
  std::vector<double> cur(x.data().begin(), x.data().end());
  std::size_t len = cur.size();
  for (std::size_t m = x.order(); m-- > 0;) {
    const std::size_t d = x.dim(m);
    const std::size_t rows = len / d;
    std::vector<double> next(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      const double* row = cur.data() + r * d;
      for (std::size_t k = 0; k < d; ++k) s += row[k] * vecs[m][k];
      next[r] = s;
    }
    cur = std::move(next);
    len = rows;
  }
  return cur;
}

inline Matrix top_eigenvectors(const Matrix& cov, std::size_t k, std::size_t mode,
                               std::vector<std::string>& warnings) {
  const auto eig = linalg::sym_eigen(cov);
  const double top = std::max(eig.values.front(), 0.0);
  if (k > 0 && !(eig.values[k - 1] > 1e-12 * top)) {
    warnings.push_back("mode " + std::to_string(mode) +
                       ": sample covariance has rank below the requested rank " +
                       std::to_string(k) + "; using trailing eigenvectors");
  }
  Matrix v = linalg::leading_columns(eig.vectors, k);
  linalg::fix_column_signs(v);
  return v;
}

inline double subspace_change(const Matrix& a, const Matrix& b) {
  // sin of the largest principal angle between two orthonormal bases.
  const auto s = linalg::principal_angle_sines(a, b);
  return s.empty() ? 0.0 : s.back();
}

}  // namespace detail

inline DenseTensor sample_mean(std::span<const DenseTensor> samples) {
  if (samples.empty()) throw DataError("sample_mean: no samples");
  DenseTensor mean(samples[0].shape());
  for (const auto& s : samples) mean += s;
  mean *= 1.0 / static_cast<double>(samples.size());
  return mean;
}

// Sum_i unfold(x_i - mean, m) unfold(x_i - mean, m)^T / n for every mode m.
inline std::vector<Matrix> mode_covariances(std::span<const DenseTensor> samples,
                                            const DenseTensor& mean) {
  const auto& shape = mean.shape();
  std::vector<Matrix> covs;
  for (std::size_t d : shape) covs.emplace_back(d, d);
  for (const auto& s : samples) {
    const DenseTensor c = s - mean;
    for (std::size_t m = 0; m < shape.size(); ++m) detail::accumulate_mode_gram(c, m, covs[m]);
  }
  for (auto& c : covs) c.eigen() /= static_cast<double>(samples.size());
  return covs;
}

// --- Tucker ------------------------------------------------------------------

inline DenseTensor project_tucker(const TuckerModel& model, const DenseTensor& x) {
  if (x.shape() != model.train_mean.shape())
    throw ShapeError("project_tucker: input shape " + shape_str(x.shape()) + " != model shape " +
                     shape_str(model.train_mean.shape()));
  return multi_mode_product(x - model.train_mean, model.loadings, /*transpose=*/true);
}

// core x_1 A_1 ... x_M A_M (without the mean).
inline DenseTensor reconstruct_tucker(const TuckerModel& model, const DenseTensor& core) {
  return multi_mode_product(core, model.loadings, /*transpose=*/false);
}

inline TuckerModel fit_tucker(std::span<const DenseTensor> samples,
                              const std::vector<std::size_t>& ranks, std::size_t hooi_iters,
                              double tol) {
  detail::check_samples(samples, "fit_tucker");
  const Shape& shape = samples[0].shape();
  if (ranks.size() != shape.size())
    throw ConfigError("fit_tucker: need one rank per mode (" + std::to_string(shape.size()) + ")");
  for (std::size_t m = 0; m < shape.size(); ++m)
    if (ranks[m] < 1 || ranks[m] > shape[m])
      throw ConfigError("fit_tucker: rank " + std::to_string(ranks[m]) + " invalid for mode " +
                        std::to_string(m) + " of dimension " + std::to_string(shape[m]));

  TuckerModel model;
  model.ranks = ranks;
  model.train_mean = sample_mean(samples);
  const auto covs = mode_covariances(samples, model.train_mean);
  for (std::size_t m = 0; m < shape.size(); ++m)
    model.loadings.push_back(detail::top_eigenvectors(covs[m], ranks[m], m, model.warnings));

  auto energy = [&] {
    double e = 0.0;
    for (const auto& s : samples) {
      const double f = frobenius_norm(project_tucker(model, s));
      e += f * f;
    }
    return e;
  };
  model.objective_history.push_back(energy());
  if (shape.size() == 1) return model;  // single mode: HOSVD is already PCA

  for (std::size_t it = 0; it < hooi_iters; ++it) {
    double change = 0.0;
    double last_energy = 0.0;
    for (std::size_t m = 0; m < shape.size(); ++m) {
      Matrix cov(shape[m], shape[m]);
      for (const auto& s : samples) {
        const DenseTensor y =
            multi_mode_product(s - model.train_mean, model.loadings, /*transpose=*/true, m);
        detail::accumulate_mode_gram(y, m, cov);
      }
      const auto eig = linalg::sym_eigen(cov);
      Matrix next = linalg::leading_columns(eig.vectors, ranks[m]);
      linalg::fix_column_signs(next);
      last_energy = 0.0;
      for (std::size_t k = 0; k < ranks[m]; ++k) last_energy += eig.values[k];
      change = std::max(change, detail::subspace_change(next, model.loadings[m]));
      model.loadings[m] = std::move(next);
    }
    const double gain = last_energy - model.objective_history.back();
    model.objective_history.push_back(last_energy);
    model.iterations = static_cast<int>(it + 1);
    if (change < tol || gain <= tol * last_energy) break;
  }
  return model;
}

// sigma_min(A_hat_m^T A_m) per mode, when the true loadings are known.
inline std::vector<double> loading_alignment(const std::vector<Matrix>& estimated,
                                             const std::vector<Matrix>& truth) {
  if (estimated.size() != truth.size()) throw ShapeError("loading_alignment: mode count mismatch");
  std::vector<double> out;
  for (std::size_t m = 0; m < truth.size(); ++m) {
    const auto s = linalg::singular_values(estimated[m].transpose() * truth[m]);
    out.push_back(s.empty() ? 0.0 : *std::min_element(s.begin(), s.end()));
  }
  return out;
}

// --- CP ------------------------------------------------------------------------

inline constexpr double kMaxGramCondition = 1e12;

// Validates the factor matrices, computes G and its Cholesky factor.
inline CpModel make_cp_model(std::vector<Matrix> factors, DenseTensor train_mean) {
  if (factors.empty()) throw ShapeError("make_cp_model: no factors");
  CpModel model;
  model.rank = factors[0].cols();
  for (std::size_t m = 0; m < factors.size(); ++m) {
    if (factors[m].cols() != model.rank) throw ShapeError("make_cp_model: rank mismatch");
    if (factors[m].rows() != train_mean.dim(m)) throw ShapeError("make_cp_model: dimension mismatch");
  }
  Matrix g(model.rank, model.rank, 1.0);
  for (const auto& a : factors) g = linalg::hadamard(g, linalg::gram(a));
  const auto eig = linalg::sym_eigen(g);
  const double lmax = eig.values.front(), lmin = eig.values.back();
  if (!(lmin > 0.0) || lmax / lmin > kMaxGramCondition)
    throw NumericalError("CP factor Gram matrix is singular or ill-conditioned (condition " +
                         std::to_string(lmin > 0 ? lmax / lmin : INFINITY) +
                         "); reduce the CP rank");
  model.gram = g;
  model.gram_factor = linalg::Cholesky(g);
  model.factors = std::move(factors);
  model.train_mean = std::move(train_mean);
  return model;
}

// m(r) = <x - mean, a_1r o ... o a_Mr>.
inline std::vector<double> cp_moments(const CpModel& model, const DenseTensor& x) {
  if (x.shape() != model.train_mean.shape())
    throw ShapeError("project_cp: input shape " + shape_str(x.shape()) + " != model shape " +
                     shape_str(model.train_mean.shape()));
  const DenseTensor c = x - model.train_mean;
  std::vector<double> m(model.rank);
  std::vector<std::vector<double>> vecs(model.factors.size());
  for (std::size_t r = 0; r < model.rank; ++r) {
    for (std::size_t k = 0; k < model.factors.size(); ++k) vecs[k] = model.factors[k].col(r);
    m[r] = detail::rank1_vectors_inner(c, vecs)[0];
  }
  return m;
}

// Coefficients c solving G c = m; returned as a shape-(R) tensor.
inline DenseTensor project_cp(const CpModel& model, const DenseTensor& x) {
  const auto m = cp_moments(model, x);
  auto c = model.gram_factor.solve(m);
  for (double v : c)
    if (!std::isfinite(v)) throw NumericalError("project_cp: non-finite coefficient");
  return DenseTensor({model.rank}, std::move(c));
}

// sum_r c_r a_1r o ... o a_Mr (without the mean).
inline DenseTensor reconstruct_cp(const CpModel& model, std::span<const double> coeffs) {
  DenseTensor out(model.train_mean.shape());
  std::vector<std::vector<double>> vecs(model.factors.size());
  for (std::size_t r = 0; r < model.rank; ++r) {
    for (std::size_t k = 0; k < model.factors.size(); ++k) vecs[k] = model.factors[k].col(r);
    out += outer_rank1(vecs) * coeffs[r];
  }
  return out;
}

inline DenseTensor embed_superdiag(std::span<const double> c, std::size_t modes) {
  if (c.empty() || modes == 0) throw ShapeError("embed_superdiag: empty coefficients or modes");
  DenseTensor out(Shape(modes, c.size()));
  std::vector<std::size_t> idx(modes);
  for (std::size_t r = 0; r < c.size(); ++r) {
    std::fill(idx.begin(), idx.end(), r);
    out.at(idx) = c[r];
  }
  return out;
}

namespace detail {

// Khatri-Rao product in the tensor layout: row (i_1,...,i_M), last fastest.
inline Matrix khatri_rao(const std::vector<Matrix>& mats) {
  const std::size_t rank = mats[0].cols();
  Matrix out(1, rank, 1.0);
  for (const auto& m : mats) {
    Matrix next(out.rows() * m.rows(), rank);
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < m.rows(); ++j)
        for (std::size_t r = 0; r < rank; ++r)
          next(i * m.rows() + j, r) = out(i, r) * m(j, r);
    out = std::move(next);
  }
  return out;
}

// M(a, r) = sum over all other modes of T[r, idx] * prod_{k != mode} B_k(idx_k, r)
inline Matrix mttkrp_from_slices(const Matrix& t, const std::vector<Matrix>& factors,
                                 const Shape& comp_shape, std::size_t mode) {
  const std::size_t rank = t.rows();
  Matrix out(comp_shape[mode], rank);
  std::vector<double> cur, next;
  for (std::size_t r = 0; r < rank; ++r) {
    cur.assign(t.data().begin() + static_cast<std::ptrdiff_t>(r * t.cols()),
               t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * t.cols()));
    // Contract the modes after `mode` (last first), then the ones before.
    std::size_t pre = 1;
    for (std::size_t k = 0; k < mode; ++k) pre *= comp_shape[k];
    std::size_t len = cur.size();
    for (std::size_t k = comp_shape.size(); k-- > mode + 1;) {
      const std::size_t d = comp_shape[k];
      next.assign(len / d, 0.0);
      for (std::size_t i = 0; i < len / d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += cur[i * d + j] * factors[k](j, r);
        next[i] = s;
      }
      cur.swap(next);
      len /= d;
    }
    // cur is now (pre x D_mode); contract the leading modes.
    std::vector<double> lead(pre, 1.0);
    {
      std::size_t stride = pre;
      for (std::size_t k = 0; k < mode; ++k) {
        stride /= comp_shape[k];
        for (std::size_t p = 0; p < pre; ++p) lead[p] *= factors[k]((p / stride) % comp_shape[k], r);
      }
    }
    const std::size_t d = comp_shape[mode];
    for (std::size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (std::size_t p = 0; p < pre; ++p) s += lead[p] * cur[p * d + a];
      out(a, r) = s;
    }
  }
  return out;
}

}  // namespace detail

// ALS runs on the stacked tensor compressed along every data mode onto the
// leading min(D_m, R) covariance eigenvectors (the initialization subspace);
// the factors stay inside that subspace, so the full residual equals the
// compressed residual plus a constant and every ALS step remains an exact
// least-squares update of the full problem restricted to the subspace.
inline CpModel fit_cp(std::span<const DenseTensor> samples, std::size_t rank,
                      std::size_t als_iters, double tol, std::uint64_t seed) {
  detail::check_samples(samples, "fit_cp");
  if (rank < 1) throw ConfigError("fit_cp: rank must be positive");
  const Shape& shape = samples[0].shape();
  const std::size_t modes = shape.size();
  std::vector<std::string> warnings;

  DenseTensor mean = sample_mean(samples);
  const auto covs = mode_covariances(samples, mean);
  std::vector<Matrix> bases;
  Shape comp_shape;
  for (std::size_t m = 0; m < modes; ++m) {
    const std::size_t k = std::min(shape[m], rank);
    bases.push_back(detail::top_eigenvectors(covs[m], k, m, warnings));
    comp_shape.push_back(k);
  }
  const std::size_t comp_size = num_elements(comp_shape);
  const std::size_t n = samples.size();

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat z{Eigen::Index(n), Eigen::Index(comp_size)};
  double total_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const DenseTensor c = samples[i] - mean;
    const double f = frobenius_norm(c);
    total_sq += f * f;
    const DenseTensor zc = multi_mode_product(c, bases, /*transpose=*/true);
    std::copy(zc.data().begin(), zc.data().end(), z.row(Eigen::Index(i)).data());
  }
  const double comp_sq = z.squaredNorm();
  const double outside = std::max(total_sq - comp_sq, 0.0);

  // Initial factors in compressed coordinates: identity columns (the
  // covariance eigenvectors), padded with seeded random unit vectors when the
  // rank exceeds a mode dimension.
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Matrix> b;
  for (std::size_t m = 0; m < modes; ++m) {
    Matrix f(comp_shape[m], rank);
    for (std::size_t r = 0; r < rank; ++r) {
      if (r < comp_shape[m]) {
        f(r, r) = 1.0;
      } else {
        double norm = 0.0;
        for (std::size_t a = 0; a < comp_shape[m]; ++a) {
          f(a, r) = normal(rng);
          norm += f(a, r) * f(a, r);
        }
        norm = std::sqrt(norm);
        for (std::size_t a = 0; a < comp_shape[m]; ++a) f(a, r) /= norm;
      }
    }
    b.push_back(std::move(f));
  }

  CpModel result;
  RowMat coeff{Eigen::Index(n), Eigen::Index(rank)};
  double prev_resid = std::numeric_limits<double>::infinity();
  for (std::size_t sweep = 0; sweep < als_iters; ++sweep) {
    // Sample mode.
    {
      const Matrix kr = detail::khatri_rao(b);
      Matrix h(rank, rank, 1.0);
      for (const auto& f : b) h = linalg::hadamard(h, linalg::gram(f));
      const Matrix hinv = linalg::sym_pinv(h);
      coeff.noalias() = (z * kr.eigen()) * hinv.eigen();
    }
    RowMat t = coeff.transpose() * z;  // rank x comp_size
    Matrix t_mat(rank, comp_size);
    std::copy(t.data(), t.data() + t.size(), t_mat.data().data());
    Matrix ctc(rank, rank);
    ctc.eigen().noalias() = coeff.transpose() * coeff;

    for (std::size_t m = 0; m < modes; ++m) {
      const Matrix mk = detail::mttkrp_from_slices(t_mat, b, comp_shape, m);
      Matrix h = ctc;
      for (std::size_t k = 0; k < modes; ++k)
        if (k != m) h = linalg::hadamard(h, linalg::gram(b[k]));
      b[m] = mk * linalg::sym_pinv(h);
      // Unit-norm columns; the scale moves into the sample-mode coefficients.
      // A column negligible next to the largest one is a dead component
      // (over-specified rank on exactly low-rank data) and is parked.
      std::vector<double> norms(rank, 0.0);
      for (std::size_t r = 0; r < rank; ++r) {
        for (std::size_t a = 0; a < comp_shape[m]; ++a) norms[r] += b[m](a, r) * b[m](a, r);
        norms[r] = std::sqrt(norms[r]);
      }
      const double dead = kDeadComponent * *std::max_element(norms.begin(), norms.end());
      for (std::size_t r = 0; r < rank; ++r) {
        const double norm = norms[r];
        if (!(norm > dead) || norm < 1e-300) {
          for (std::size_t a = 0; a < comp_shape[m]; ++a) b[m](a, r) = 0.0;
          b[m](r % comp_shape[m], r) = 1.0;
          coeff.col(Eigen::Index(r)).setZero();
          for (std::size_t c = 0; c < comp_size; ++c) t_mat(r, c) = 0.0;
          continue;
        }
        for (std::size_t a = 0; a < comp_shape[m]; ++a) b[m](a, r) /= norm;
        coeff.col(Eigen::Index(r)) *= norm;
        for (std::size_t c = 0; c < comp_size; ++c) t_mat(r, c) *= norm;
      }
      ctc.eigen().noalias() = coeff.transpose() * coeff;
    }

    // ||Z - model||^2 = ||Z||^2 - 2 <Z, model> + ||model||^2
    const Matrix kr = detail::khatri_rao(b);
    double cross = 0.0;
    for (std::size_t r = 0; r < rank; ++r)
      for (std::size_t c = 0; c < comp_size; ++c) cross += t_mat(r, c) * kr(c, r);
    Matrix h = ctc;
    for (const auto& f : b) h = linalg::hadamard(h, linalg::gram(f));
    double model_sq = 0.0;
    for (double v : h.data()) model_sq += v;
    const double resid = outside + std::max(comp_sq - 2.0 * cross + model_sq, 0.0);
    result.residual_history.push_back(resid);
    result.iterations = static_cast<int>(sweep + 1);
    const double scale = total_sq > 0 ? total_sq : 1.0;
    if (std::abs(prev_resid - resid) / scale < tol) break;
    prev_resid = resid;
  }

  std::vector<Matrix> factors;
  for (std::size_t m = 0; m < modes; ++m) {
    Matrix a = bases[m] * b[m];
    for (std::size_t r = 0; r < rank; ++r) {
      double norm = 0.0;
      for (std::size_t i = 0; i < a.rows(); ++i) norm += a(i, r) * a(i, r);
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < a.rows(); ++i) a(i, r) /= norm;
    }
    linalg::fix_column_signs(a);
    factors.push_back(std::move(a));
  }
  CpModel model = make_cp_model(std::move(factors), std::move(mean));
  model.residual_history = std::move(result.residual_history);
  model.iterations = result.iterations;
  model.warnings = std::move(warnings);
  return model;
}

// --- Structure-agnostic view -------------------------------------------------

using DecompositionModel = std::variant<TuckerModel, CpModel>;

inline Structure structure_of(const DecompositionModel& m) {
  return std::holds_alternative<TuckerModel>(m) ? Structure::Tucker : Structure::CP;
}

inline const DenseTensor& train_mean(const DecompositionModel& m) {
  return std::visit([](const auto& x) -> const DenseTensor& { return x.train_mean; }, m);
}

// Tucker: the R_1 x ... x R_M core. CP: the coefficient vector of shape (R),
// equivalent to the super-diagonal core for every contraction the network
// performs (only the diagonal is ever nonzero).
inline DenseTensor project(const DecompositionModel& model, const DenseTensor& x) {
  if (const auto* t = std::get_if<TuckerModel>(&model)) return project_tucker(*t, x);
  return project_cp(std::get<CpModel>(model), x);
}

inline Shape core_shape(const DecompositionModel& model) {
  if (const auto* t = std::get_if<TuckerModel>(&model)) return t->ranks;
  return {std::get<CpModel>(model).rank};
}

struct CoreBatch {
  Structure structure = Structure::Tucker;
  std::vector<DenseTensor> cores;
};

inline CoreBatch project_all(const DecompositionModel& model, std::span<const DenseTensor> xs) {
  CoreBatch batch{structure_of(model), {}};
  batch.cores.reserve(xs.size());
  for (const auto& x : xs) batch.cores.push_back(project(model, x));
  return batch;
}

// --- Serialization -----------------------------------------------------------

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()},
          {"data", std::vector<double>(m.data().begin(), m.data().end())}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

// Writes <stem>.json plus <stem>_mean.bin in dir.
inline void save_model(const std::filesystem::path& dir, const std::string& stem,
                       const DecompositionModel& model) {
  nlohmann::json j;
  j["structure"] = to_string(structure_of(model));
  j["shape"] = train_mean(model).shape();
  j["mean"] = stem + "_mean.bin";
  nlohmann::json mats = nlohmann::json::array();
  if (const auto* t = std::get_if<TuckerModel>(&model)) {
    j["ranks"] = t->ranks;
    for (const auto& a : t->loadings) mats.push_back(matrix_to_json(a));
    j["objective_history"] = t->objective_history;
    j["iterations"] = t->iterations;
    j["warnings"] = t->warnings;
  } else {
    const auto& c = std::get<CpModel>(model);
    j["rank"] = c.rank;
    for (const auto& a : c.factors) mats.push_back(matrix_to_json(a));
    j["residual_history"] = c.residual_history;
    j["iterations"] = c.iterations;
    j["warnings"] = c.warnings;
  }
  j["matrices"] = mats;
  save_tensor((dir / (stem + "_mean.bin")).string(), train_mean(model));
  std::ofstream os(dir / (stem + ".json"));
  if (!os) throw DataError("cannot write model to " + (dir / (stem + ".json")).string());
  os << j.dump(1) << '\n';
}

inline DecompositionModel load_model(const std::filesystem::path& dir, const std::string& stem) {
  std::ifstream is(dir / (stem + ".json"));
  if (!is) throw DataError("missing model file " + (dir / (stem + ".json")).string());
  const auto j = nlohmann::json::parse(is);
  DenseTensor mean = load_tensor((dir / j.at("mean").get<std::string>()).string());
  std::vector<Matrix> mats;
  for (const auto& mj : j.at("matrices")) mats.push_back(matrix_from_json(mj));
  if (parse_structure(j.at("structure")) == Structure::Tucker) {
    TuckerModel t;
    t.loadings = std::move(mats);
    t.ranks = j.at("ranks").get<std::vector<std::size_t>>();
    t.train_mean = std::move(mean);
    t.objective_history = j.value("objective_history", std::vector<double>{});
    t.iterations = j.value("iterations", 0);
    return t;
  }
  CpModel c = make_cp_model(std::move(mats), std::move(mean));
  c.residual_history = j.value("residual_history", std::vector<double>{});
  c.iterations = j.value("iterations", 0);
  return c;
}

}  // namespace dctnn
