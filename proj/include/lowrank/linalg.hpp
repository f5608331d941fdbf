#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "lowrank/error.hpp"

namespace lowrank {

class Rng;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> values);
  /// Entries uniform in [lo, hi).
  static Matrix random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0,
                               double hi = 1.0);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  Matrix transpose() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  /// this += alpha * other
  void axpy(double alpha, const Matrix& other);

  bool all_finite() const noexcept;
  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);
Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without forming the transpose.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
std::vector<double> matvec(const Matrix& a, std::span<const double> x);
/// Outer product a b^T.
Matrix outer(std::span<const double> a, std::span<const double> b);

double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

struct Shape3 {
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const noexcept { return c * h * w; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// c x h x w tensor. Flat layout is channel-major, then row-major, which is
/// exactly vec(x) = (vec(x_1) || ... || vec(x_c)).
class Tensor3 {
 public:
  Tensor3() = default;
  explicit Tensor3(Shape3 shape, double fill = 0.0)
      : shape_(shape), data_(shape.size(), fill) {}
  Tensor3(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : Tensor3(Shape3{c, h, w}, fill) {}
  Tensor3(Shape3 shape, std::vector<double> data);

  /// Column tensor d x 1 x 1.
  static Tensor3 from_vector(std::vector<double> v);

  const Shape3& shape() const noexcept { return shape_; }
  std::size_t channels() const noexcept { return shape_.c; }
  std::size_t height() const noexcept { return shape_.h; }
  std::size_t width() const noexcept { return shape_.w; }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t index(std::size_t c, std::size_t t, std::size_t l) const noexcept {
    return (c * shape_.h + t) * shape_.w + l;
  }
  double& operator()(std::size_t c, std::size_t t, std::size_t l) { return data_[index(c, t, l)]; }
  double operator()(std::size_t c, std::size_t t, std::size_t l) const {
    return data_[index(c, t, l)];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  /// Same data, new shape with equal element count.
  Tensor3 reshaped(Shape3 shape) const;

  friend bool operator==(const Tensor3&, const Tensor3&) = default;

 private:
  Shape3 shape_;
  std::vector<double> data_;
};

struct SvdResult {
  std::vector<double> singular_values;  // non-increasing, >= 0
  std::optional<Matrix> left_vectors;   // rows x r, orthonormal columns
  std::optional<Matrix> right_vectors;  // cols x r, orthonormal columns
  int sweeps = 0;

  /// U diag(s) V^T; requires vectors.
  Matrix reconstruct() const;
};

inline constexpr int kJacobiMaxSweeps = 60;
inline constexpr double kJacobiTolerance = 1e-12;

/// One-sided Jacobi SVD on the shorter dimension.
/// Throws NonFiniteInput, NoConvergence.
SvdResult svd(const Matrix& m, bool want_vectors = false);
std::vector<double> singular_values(const Matrix& m);

double spectral_norm(const Matrix& m);
/// Eckart-Young distances from m to the nearest matrix of rank <= r.
double spectral_distance_to_rank(const Matrix& m, std::size_t r);
double frobenius_distance_to_rank(const Matrix& m, std::size_t r);
/// Same, from a precomputed spectrum.
double spectral_tail(std::span<const double> sigma, std::size_t r);
double frobenius_tail(std::span<const double> sigma, std::size_t r);
enum class MatrixNorm { Frobenius, Spectral };
std::string_view to_string(MatrixNorm norm);
double matrix_norm(const Matrix& m, MatrixNorm norm);
/// Eckart-Young distance to rank r measured in `norm`.
double distance_to_rank(const Matrix& m, std::size_t r, MatrixNorm norm);

/// Best rank-r approximation (truncated SVD).
Matrix truncated(const Matrix& m, std::size_t r);
/// Count of singular values above rel_tol * sigma_max.
std::size_t numerical_rank(const Matrix& m, double rel_tol);

Tensor3 pad(const Tensor3& x, std::size_t p);
Tensor3 crop(const Tensor3& x, std::size_t p);

/// Output extent of a sliding window; nullopt when the geometry is empty.
std::optional<std::size_t> window_output_dim(std::size_t in, std::size_t k, std::size_t s,
                                             std::size_t p);

/// Patch matrix: row t*w'+l is vec of the c x k1 x k2 patch of Pad_p(x) at
/// output position (t, l). Throws BadGeometry.
Matrix vec_patches(const Tensor3& x, std::size_t k1, std::size_t k2, std::size_t s,
                   std::size_t p);

}  // namespace lowrank
