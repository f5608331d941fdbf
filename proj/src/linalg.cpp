#include "lowrank/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lowrank/rng.hpp"

namespace lowrank {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::RankOutOfRange: return "RankOutOfRange";
    case ErrorCode::BadGeometry: return "BadGeometry";
    case ErrorCode::BadPermutation: return "BadPermutation";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidGraph: return "InvalidGraph";
    case ErrorCode::NotApplicable: return "NotApplicable";
    case ErrorCode::TraceMismatch: return "TraceMismatch";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::MultiOutputUnsupported: return "MultiOutputUnsupported";
    case ErrorCode::NotFullyConnected: return "NotFullyConnected";
    case ErrorCode::BadParams: return "BadParams";
    case ErrorCode::InsufficientHistory: return "InsufficientHistory";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::GraphMismatch: return "GraphMismatch";
    case ErrorCode::LambdaZero: return "LambdaZero";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::BadShape: return "BadShape";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

// ---------------------------------------------------------------- Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::ShapeMismatch, "matrix data length does not match rows*cols");
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw Error(ErrorCode::ShapeMismatch, "ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
  Matrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

Matrix Matrix::random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi) {
  Matrix m(rows, cols);
  for (double& v : m.data_) v = rng.uniform(lo, hi);
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  axpy(1.0, other);
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  axpy(-1.0, other);
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

void Matrix::axpy(double alpha, const Matrix& other) {
  if (!same_shape(other)) throw Error(ErrorCode::ShapeMismatch, "axpy shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * other.data_[i];
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw Error(ErrorCode::ShapeMismatch, "matmul inner dimension");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw Error(ErrorCode::ShapeMismatch, "matmul_transposed inner dim");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      out(i, j) = s;
    }
  }
  return out;
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw Error(ErrorCode::ShapeMismatch, "matvec dimension");
  std::vector<double> y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) s += arow[k] * x[k];
    y[i] = s;
  }
  return y;
}

Matrix outer(std::span<const double> a, std::span<const double> b) {
  Matrix m(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = a[i] * b[j];
  return m;
}

double frobenius_norm(const Matrix& m) {
  // Scaled accumulation avoids overflow for large entries.
  double scale = 0.0;
  double ssq = 1.0;
  for (double v : m.data()) {
    if (v == 0.0) continue;
    const double a = std::fabs(v);
    if (scale < a) {
      ssq = 1.0 + ssq * (scale / a) * (scale / a);
      scale = a;
    } else {
      ssq += (a / scale) * (a / scale);
    }
  }
  return scale * std::sqrt(ssq);
}

double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double v : m.data()) best = std::max(best, std::fabs(v));
  return best;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "max_abs_diff shape mismatch");
  double best = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    best = std::max(best, std::fabs(a.data()[i] - b.data()[i]));
  return best;
}

// ---------------------------------------------------------------- Tensor3

Tensor3::Tensor3(Shape3 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw Error(ErrorCode::ShapeMismatch, "tensor data length does not match c*h*w");
  }
}

Tensor3 Tensor3::from_vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor3(Shape3{n, 1, 1}, std::move(v));
}

Tensor3 Tensor3::reshaped(Shape3 shape) const {
  if (shape.size() != size()) throw Error(ErrorCode::ShapeMismatch, "reshape changes size");
  return Tensor3(shape, data_);
}

// ---------------------------------------------------------------- SVD

namespace {

// Orthogonalizes the columns of `a` (m x n, m >= n) in place, accumulating the
// rotations into v (n x n). Returns the number of sweeps used.
constexpr double kNegligibleColumn = 64 * 2.220446049250313e-16;

int jacobi_orthogonalize(Matrix& a, Matrix* v) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Column-major copy keeps the inner loops contiguous.
  std::vector<double> cols(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cols[j * m + i] = a(i, j);
  std::vector<double> vcols;
  if (v) {
    vcols.assign(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) vcols[j * n + j] = 1.0;
  }
  constexpr double eps = 2.220446049250313e-16;
  double total = 0.0;
  for (double x : cols) total += x * x;
  // Columns at rounding-noise level relative to the whole matrix carry no
  // direction worth orthogonalizing against.
  const double negligible = kNegligibleColumn * kNegligibleColumn * total;

  int sweep = 0;
  bool converged = n < 2;
  while (!converged) {
    if (sweep == kJacobiMaxSweeps) {
      throw Error(ErrorCode::NoConvergence,
                  "one-sided Jacobi did not converge within " + std::to_string(kJacobiMaxSweeps) +
                      " sweeps");
    }
    ++sweep;
    double worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      double* ap = cols.data() + p * m;
      for (std::size_t q = p + 1; q < n; ++q) {
        double* aq = cols.data() + q * m;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += ap[i] * ap[i];
          beta += aq[i] * aq[i];
          gamma += ap[i] * aq[i];
        }
        if (alpha <= negligible || beta <= negligible) continue;
        const double off = std::fabs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, off);
        if (off <= eps) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = ap[i];
          const double y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        if (v) {
          double* vp = vcols.data() + p * n;
          double* vq = vcols.data() + q * n;
          for (std::size_t i = 0; i < n; ++i) {
            const double x = vp[i];
            const double y = vq[i];
            vp[i] = c * x - s * y;
            vq[i] = s * x + c * y;
          }
        }
      }
    }
    converged = worst <= kJacobiTolerance;
  }

  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = cols[j * m + i];
  if (v) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) (*v)(i, j) = vcols[j * n + i];
  }
  return sweep;
}

// Replaces columns flagged in `missing` with unit vectors orthogonal to every
// other column (modified Gram-Schmidt against the standard basis).
void complete_orthonormal(Matrix& u, const std::vector<bool>& missing) {
  const std::size_t m = u.rows();
  const std::size_t r = u.cols();
  std::size_t candidate = 0;
  for (std::size_t j = 0; j < r; ++j) {
    if (!missing[j]) continue;
    while (candidate < m) {
      std::vector<double> e(m, 0.0);
      e[candidate++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < r; ++k) {
          if (k == j || (missing[k] && k > j)) continue;
          double dot = 0.0;
          for (std::size_t i = 0; i < m; ++i) dot += u(i, k) * e[i];
          for (std::size_t i = 0; i < m; ++i) e[i] -= dot * u(i, k);
        }
      }
      double nrm = 0.0;
      for (double x : e) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > 1e-8) {
        for (std::size_t i = 0; i < m; ++i) u(i, j) = e[i] / nrm;
        break;
      }
    }
  }
}

SvdResult svd_tall(const Matrix& m, bool want_vectors) {
  Matrix a = m;
  const std::size_t n = a.cols();
  Matrix v(n, n);
  SvdResult out;
  out.sweeps = jacobi_orthogonalize(a, want_vectors ? &v : nullptr);

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, j) * a(i, j);
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  out.singular_values.resize(n);
  for (std::size_t k = 0; k < n; ++k) out.singular_values[k] = sigma[order[k]];

  if (want_vectors) {
    Matrix u(a.rows(), n);
    Matrix vs(n, n);
    std::vector<bool> missing(n, false);
    double total = 0.0;
    for (double s : sigma) total += s * s;
    const double floor = kNegligibleColumn * std::sqrt(total);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t j = order[k];
      const double s = sigma[j];
      if (s > 0.0 && s > floor) {
        for (std::size_t i = 0; i < a.rows(); ++i) u(i, k) = a(i, j) / s;
      } else {
        missing[k] = true;
      }
      for (std::size_t i = 0; i < n; ++i) vs(i, k) = v(i, j);
    }
    complete_orthonormal(u, missing);
    out.left_vectors = std::move(u);
    out.right_vectors = std::move(vs);
  }
  return out;
}

}  // namespace

SvdResult svd(const Matrix& m, bool want_vectors) {
  if (m.rows() == 0 || m.cols() == 0) {
    throw Error(ErrorCode::ShapeMismatch, "svd requires min(rows, cols) >= 1");
  }
  if (!m.all_finite()) throw Error(ErrorCode::NonFiniteInput, "svd input has NaN/Inf entries");
  if (m.rows() >= m.cols()) return svd_tall(m, want_vectors);
  SvdResult t = svd_tall(m.transpose(), want_vectors);
  std::swap(t.left_vectors, t.right_vectors);
  return t;
}

std::vector<double> singular_values(const Matrix& m) { return svd(m, false).singular_values; }

Matrix SvdResult::reconstruct() const {
  if (!left_vectors || !right_vectors) {
    throw Error(ErrorCode::BadParams, "reconstruct requires singular vectors");
  }
  Matrix us = *left_vectors;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= singular_values[k];
  return matmul_transposed(us, *right_vectors);
}

double spectral_norm(const Matrix& m) { return singular_values(m).front(); }

double spectral_tail(std::span<const double> sigma, std::size_t r) {
  if (r > sigma.size()) throw Error(ErrorCode::RankOutOfRange, "rank exceeds min(rows, cols)");
  return r < sigma.size() ? sigma[r] : 0.0;
}

double frobenius_tail(std::span<const double> sigma, std::size_t r) {
  if (r > sigma.size()) throw Error(ErrorCode::RankOutOfRange, "rank exceeds min(rows, cols)");
  double s = 0.0;
  // Smallest first for accuracy.
  for (std::size_t i = sigma.size(); i > r; --i) s += sigma[i - 1] * sigma[i - 1];
  return std::sqrt(s);
}

double spectral_distance_to_rank(const Matrix& m, std::size_t r) {
  if (r > std::min(m.rows(), m.cols())) {
    throw Error(ErrorCode::RankOutOfRange, "rank exceeds min(rows, cols)");
  }
  return spectral_tail(singular_values(m), r);
}

double frobenius_distance_to_rank(const Matrix& m, std::size_t r) {
  if (r > std::min(m.rows(), m.cols())) {
    throw Error(ErrorCode::RankOutOfRange, "rank exceeds min(rows, cols)");
  }
  return frobenius_tail(singular_values(m), r);
}

std::string_view to_string(MatrixNorm norm) {
  return norm == MatrixNorm::Frobenius ? "frobenius" : "spectral";
}

double matrix_norm(const Matrix& m, MatrixNorm norm) {
  return norm == MatrixNorm::Frobenius ? frobenius_norm(m) : spectral_norm(m);
}

double distance_to_rank(const Matrix& m, std::size_t r, MatrixNorm norm) {
  return norm == MatrixNorm::Frobenius ? frobenius_distance_to_rank(m, r)
                                       : spectral_distance_to_rank(m, r);
}

Matrix truncated(const Matrix& m, std::size_t r) {
  SvdResult s = svd(m, true);
  if (r > s.singular_values.size()) {
    throw Error(ErrorCode::RankOutOfRange, "rank exceeds min(rows, cols)");
  }
  for (std::size_t k = r; k < s.singular_values.size(); ++k) s.singular_values[k] = 0.0;
  return s.reconstruct();
}

std::size_t numerical_rank(const Matrix& m, double rel_tol) {
  const auto sigma = singular_values(m);
  if (sigma.front() == 0.0) return 0;
  const double cut = rel_tol * sigma.front();
  return static_cast<std::size_t>(
      std::count_if(sigma.begin(), sigma.end(), [cut](double s) { return s > cut; }));
}

// ---------------------------------------------------------------- patches

Tensor3 pad(const Tensor3& x, std::size_t p) {
  if (p == 0) return x;
  const Shape3 s = x.shape();
  Tensor3 out(s.c, s.h + 2 * p, s.w + 2 * p);
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t t = 0; t < s.h; ++t)
      for (std::size_t l = 0; l < s.w; ++l) out(c, t + p, l + p) = x(c, t, l);
  return out;
}

Tensor3 crop(const Tensor3& x, std::size_t p) {
  if (p == 0) return x;
  const Shape3 s = x.shape();
  if (s.h < 2 * p || s.w < 2 * p) throw Error(ErrorCode::BadGeometry, "crop larger than tensor");
  Tensor3 out(s.c, s.h - 2 * p, s.w - 2 * p);
  for (std::size_t c = 0; c < out.channels(); ++c)
    for (std::size_t t = 0; t < out.height(); ++t)
      for (std::size_t l = 0; l < out.width(); ++l) out(c, t, l) = x(c, t + p, l + p);
  return out;
}

std::optional<std::size_t> window_output_dim(std::size_t in, std::size_t k, std::size_t s,
                                             std::size_t p) {
  if (s == 0 || k == 0) return std::nullopt;
  if (in + 2 * p < k) return std::nullopt;
  return (in + 2 * p - k) / s + 1;
}

Matrix vec_patches(const Tensor3& x, std::size_t k1, std::size_t k2, std::size_t s,
                   std::size_t p) {
  const auto ho = window_output_dim(x.height(), k1, s, p);
  const auto wo = window_output_dim(x.width(), k2, s, p);
  if (!ho || !wo) throw Error(ErrorCode::BadGeometry, "window does not fit the padded input");
  const std::size_t c = x.channels();
  const long H = static_cast<long>(x.height());
  const long W = static_cast<long>(x.width());
  const long P = static_cast<long>(p);
  Matrix out(*ho * *wo, c * k1 * k2);
  for (std::size_t t = 0; t < *ho; ++t) {
    for (std::size_t l = 0; l < *wo; ++l) {
      auto row = out.row(t * *wo + l);
      std::size_t col = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t a = 0; a < k1; ++a) {
          const long r = static_cast<long>(t * s + a) - P;
          for (std::size_t b = 0; b < k2; ++b, ++col) {
            const long q = static_cast<long>(l * s + b) - P;
            row[col] = (r >= 0 && r < H && q >= 0 && q < W)
                           ? x(ch, static_cast<std::size_t>(r), static_cast<std::size_t>(q))
                           : 0.0;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace lowrank
