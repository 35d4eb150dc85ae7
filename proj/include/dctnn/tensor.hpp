#pragma once

// Dense N-mode tensors and the handful of multilinear operations the rest of
// the library is built on.
//
// Layout: last mode fastest (row-major generalized). The mode-m unfolding puts
// D_m on the rows and orders columns by the remaining modes in increasing mode
// order under the same convention, so that unfold(t, m)(a, p * post + q) ==
// t[p, a, q] when t is viewed as (prod(D_<m), D_m, prod(D_>m)).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dctnn/error.hpp"

namespace dctnn {

using Shape = std::vector<std::size_t>;

// Aligned so Eigen's vectorized reductions peel the same way on every allocation.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::size_t num_elements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// Row-major dense matrix. Houses loadings, unfoldings and weight blocks.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, const std::vector<double>& data)
      : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
    if (data_.size() != rows_ * cols_)
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::vector<double> col(std::size_t c) const {
    std::vector<double> v(rows_);
    for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
    return v;
  }
  void set_col(std::size_t c, std::span<const double> v) {
    for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  bool operator==(const Matrix&) const = default;

  using EigenMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstEigenMap =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  EigenMap eigen() { return {data_.data(), Eigen::Index(rows_), Eigen::Index(cols_)}; }
  ConstEigenMap eigen() const { return {data_.data(), Eigen::Index(rows_), Eigen::Index(cols_)}; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Storage data_;
};

inline Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()));
  Matrix out(a.rows(), b.cols());
  out.eigen().noalias() = a.eigen() * b.eigen();
  return out;
}

class DenseTensor {
 public:
  // A default tensor is the 1-element zero tensor of shape (1).
  DenseTensor() : shape_{1}, data_(1, 0.0) {}

  explicit DenseTensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(num_elements(shape_), fill);
  }

  DenseTensor(Shape shape, const std::vector<double>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    validate_shape();
    if (data_.size() != num_elements(shape_))
      throw ShapeError("DenseTensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t order() const { return shape_.size(); }
  std::size_t dim(std::size_t mode) const { return shape_.at(mode); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const& { return data_; }
  std::span<double> data() & { return data_; }
  void data() && = delete;  // a span into a temporary would dangle
  std::vector<double> values() const { return {data_.begin(), data_.end()}; }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  std::size_t flat_index(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size())
      throw ShapeError("DenseTensor: index arity " + std::to_string(index.size()) +
                       " != order " + std::to_string(shape_.size()));
    std::size_t flat = 0;
    for (std::size_t m = 0; m < shape_.size(); ++m) {
      if (index[m] >= shape_[m]) throw ShapeError("DenseTensor: index out of range");
      flat = flat * shape_[m] + index[m];
    }
    return flat;
  }
  double& at(std::initializer_list<std::size_t> index) {
    return data_[flat_index({index.begin(), index.size()})];
  }
  double at(std::initializer_list<std::size_t> index) const {
    return data_[flat_index({index.begin(), index.size()})];
  }
  double& at(std::span<const std::size_t> index) { return data_[flat_index(index)]; }
  double at(std::span<const std::size_t> index) const { return data_[flat_index(index)]; }

  DenseTensor reshaped(Shape shape) const {
    DenseTensor out(std::move(shape));
    if (out.size() != size())
      throw ShapeError("DenseTensor: cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(out.shape_));
    out.data_ = data_;
    return out;
  }

  DenseTensor& operator+=(const DenseTensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  DenseTensor& operator-=(const DenseTensor& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  DenseTensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  friend DenseTensor operator+(DenseTensor a, const DenseTensor& b) { return a += b; }
  friend DenseTensor operator-(DenseTensor a, const DenseTensor& b) { return a -= b; }
  friend DenseTensor operator*(DenseTensor a, double s) { return a *= s; }
  friend DenseTensor operator*(double s, DenseTensor a) { return a *= s; }

  bool operator==(const DenseTensor&) const = default;

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("DenseTensor: shape must have at least one mode");
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("DenseTensor: zero-length mode in " + shape_str(shape_));
  }
  void require_same_shape(const DenseTensor& o, const char* op) const {
    if (o.shape_ != shape_)
      throw ShapeError(std::string("DenseTensor ") + op + ": shape " + shape_str(shape_) +
                       " vs " + shape_str(o.shape_));
  }

  Shape shape_;
  Storage data_;
};

namespace detail {

struct ModeSplit {
  std::size_t pre = 1;
  std::size_t dim = 1;
  std::size_t post = 1;
};

inline ModeSplit split_at(const Shape& shape, std::size_t mode) {
  ModeSplit s;
  for (std::size_t m = 0; m < mode; ++m) s.pre *= shape[m];
  s.dim = shape[mode];
  for (std::size_t m = mode + 1; m < shape.size(); ++m) s.post *= shape[m];
  return s;
}

inline void check_mode(const DenseTensor& t, std::size_t mode, const char* op) {
  if (mode >= t.order())
    throw ShapeError(std::string(op) + ": mode " + std::to_string(mode) +
                     " out of range for order " + std::to_string(t.order()));
}

}  // namespace detail

inline Matrix unfold(const DenseTensor& t, std::size_t mode) {
  detail::check_mode(t, mode, "unfold");
  const auto [pre, dim, post] = detail::split_at(t.shape(), mode);
  Matrix out(dim, pre * post);
  const auto src = t.data();
  for (std::size_t p = 0; p < pre; ++p)
    for (std::size_t a = 0; a < dim; ++a)
      std::copy_n(src.data() + (p * dim + a) * post, post,
                  out.data().data() + a * pre * post + p * post);
  return out;
}

inline DenseTensor fold(const Matrix& m, std::size_t mode, const Shape& shape) {
  if (mode >= shape.size()) throw ShapeError("fold: mode out of range");
  const auto [pre, dim, post] = detail::split_at(shape, mode);
  if (m.rows() != dim || m.cols() != pre * post)
    throw ShapeError("fold: matrix " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()) + " incompatible with shape " + shape_str(shape));
  DenseTensor out(shape);
  auto dst = out.data();
  for (std::size_t p = 0; p < pre; ++p)
    for (std::size_t a = 0; a < dim; ++a)
      std::copy_n(m.data().data() + a * pre * post + p * post, post,
                  dst.data() + (p * dim + a) * post);
  return out;
}

// t x_mode a: replaces D_mode by a.rows().
inline DenseTensor mode_product(const DenseTensor& t, const Matrix& a, std::size_t mode) {
  detail::check_mode(t, mode, "mode_product");
  if (a.cols() != t.dim(mode))
    throw ShapeError("mode_product: matrix has " + std::to_string(a.cols()) +
                     " columns, tensor mode " + std::to_string(mode) + " has " +
                     std::to_string(t.dim(mode)));
  const auto [pre, dim, post] = detail::split_at(t.shape(), mode);
  Shape out_shape = t.shape();
  out_shape[mode] = a.rows();
  DenseTensor out(out_shape);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto A = a.eigen();
  if (post == 1) {
    Eigen::Map<const RowMat> src(t.data().data(), Eigen::Index(pre), Eigen::Index(dim));
    Eigen::Map<RowMat> dst(out.data().data(), Eigen::Index(pre), Eigen::Index(a.rows()));
    dst.noalias() = src * A.transpose();
  } else {
    for (std::size_t p = 0; p < pre; ++p) {
      Eigen::Map<const RowMat> src(t.data().data() + p * dim * post, Eigen::Index(dim),
                                   Eigen::Index(post));
      Eigen::Map<RowMat> dst(out.data().data() + p * a.rows() * post, Eigen::Index(a.rows()),
                             Eigen::Index(post));
      dst.noalias() = A * src;
    }
  }
  return out;
}

// Applies mats[m] (or its transpose) along every mode m; skip_mode is left
// untouched when set.
inline DenseTensor multi_mode_product(DenseTensor t, std::span<const Matrix> mats, bool transpose,
                                      std::size_t skip_mode = static_cast<std::size_t>(-1)) {
  if (mats.size() != t.order())
    throw ShapeError("multi_mode_product: need one matrix per mode");
  // Shrinking modes first keeps intermediates small; go from the last mode.
  for (std::size_t k = t.order(); k-- > 0;) {
    if (k == skip_mode) continue;
    t = mode_product(t, transpose ? mats[k].transpose() : mats[k], k);
  }
  return t;
}

// Generalized contraction: sums the trailing n_in_modes modes of w against h.
// A w with no leading modes yields a shape-(1) tensor.
inline DenseTensor contract(const DenseTensor& w, const DenseTensor& h, std::size_t n_in_modes) {
  if (n_in_modes > w.order() || h.order() != n_in_modes)
    throw ShapeError("contract: h must have exactly n_in_modes modes");
  const std::size_t n_out = w.order() - n_in_modes;
  for (std::size_t m = 0; m < n_in_modes; ++m)
    if (w.dim(n_out + m) != h.dim(m))
      throw ShapeError("contract: trailing modes of w " + shape_str(w.shape()) +
                       " do not match h " + shape_str(h.shape()));
  Shape out_shape(w.shape().begin(), w.shape().begin() + static_cast<std::ptrdiff_t>(n_out));
  if (out_shape.empty()) out_shape = {1};
  const std::size_t rows = num_elements(out_shape);
  const std::size_t cols = h.size();
  DenseTensor out(out_shape);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> W(w.data().data(), Eigen::Index(rows), Eigen::Index(cols));
  Eigen::Map<const Eigen::VectorXd> x(h.data().data(), Eigen::Index(cols));
  Eigen::Map<Eigen::VectorXd> y(out.data().data(), Eigen::Index(rows));
  y.noalias() = W * x;
  return out;
}

inline double inner_product(const DenseTensor& a, const DenseTensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("inner_product: shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double frobenius_norm(const DenseTensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

inline double frobenius_distance(const DenseTensor& a, const DenseTensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("frobenius_distance: shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline DenseTensor outer_rank1(std::span<const std::vector<double>> vectors) {
  if (vectors.empty()) throw ShapeError("outer_rank1: need at least one vector");
  Shape shape;
  for (const auto& v : vectors) {
    if (v.empty()) throw ShapeError("outer_rank1: empty factor vector");
    shape.push_back(v.size());
  }
  std::vector<double> data(vectors[0]);
  for (std::size_t m = 1; m < vectors.size(); ++m) {
    std::vector<double> next;
    next.reserve(data.size() * vectors[m].size());
    for (double a : data)
      for (double b : vectors[m]) next.push_back(a * b);
    data = std::move(next);
  }
  return DenseTensor(std::move(shape), std::move(data));
}

inline DenseTensor outer_rank1(std::initializer_list<std::vector<double>> vectors) {
  return outer_rank1(std::span<const std::vector<double>>(vectors.begin(), vectors.size()));
}

// --- Serialization -----------------------------------------------------------
//
// Binary container: "DCTN" magic, u32 version, u32 mode count, u64 per mode,
// then the values as little-endian IEEE-754 doubles.

inline constexpr char kTensorMagic[4] = {'D', 'C', 'T', 'N'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T)))
    throw DataError("tensor container: unexpected end of stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const DenseTensor& t) {
  os.write(kTensorMagic, 4);
  detail::write_le<std::uint32_t>(os, kTensorVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.order()));
  for (std::size_t d : t.shape()) detail::write_le<std::uint64_t>(os, d);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    for (double v : t.data()) detail::write_le<double>(os, v);
  }
}

inline DenseTensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0)
    throw DataError("tensor container: bad magic");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kTensorVersion)
    throw DataError("tensor container: unsupported version " + std::to_string(version));
  const auto order = detail::read_le<std::uint32_t>(is);
  if (order == 0 || order > 64) throw DataError("tensor container: bad mode count");
  Shape shape(order);
  for (auto& d : shape) d = detail::read_le<std::uint64_t>(is);
  std::vector<double> data(num_elements(shape));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(double))))
      throw DataError("tensor container: truncated payload");
  } else {
    for (double& v : data) v = detail::read_le<double>(is);
  }
  return DenseTensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const DenseTensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

inline DenseTensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_tensor(is);
}

// Nested-array JSON for small debug dumps.
inline nlohmann::json tensor_to_json(const DenseTensor& t) {
  std::function<nlohmann::json(std::size_t, std::size_t)> rec = [&](std::size_t mode,
                                                                   std::size_t offset) {
    nlohmann::json arr = nlohmann::json::array();
    std::size_t stride = 1;
    for (std::size_t m = mode + 1; m < t.order(); ++m) stride *= t.dim(m);
    for (std::size_t i = 0; i < t.dim(mode); ++i) {
      if (mode + 1 == t.order())
        arr.push_back(t[offset + i]);
      else
        arr.push_back(rec(mode + 1, offset + i * stride));
    }
    return arr;
  };
  return rec(0, 0);
}

inline DenseTensor tensor_from_json(const nlohmann::json& j) {
  Shape shape;
  const nlohmann::json* cur = &j;
  while (cur->is_array()) {
    if (cur->empty()) throw DataError("tensor json: empty array");
    shape.push_back(cur->size());
    cur = &(*cur)[0];
  }
  if (shape.empty()) throw DataError("tensor json: expected nested arrays");
  std::vector<double> data;
  data.reserve(num_elements(shape));
  std::function<void(const nlohmann::json&, std::size_t)> rec = [&](const nlohmann::json& node,
                                                                    std::size_t mode) {
    if (!node.is_array() || node.size() != shape[mode])
      throw DataError("tensor json: ragged nested arrays");
    for (const auto& child : node) {
      if (mode + 1 == shape.size())
        data.push_back(child.get<double>());
      else
        rec(child, mode + 1);
    }
  };
  rec(j, 0);
  return DenseTensor(std::move(shape), std::move(data));
}

}  // namespace dctnn
