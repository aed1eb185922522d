#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "kgemos/parallel.hpp"

namespace kgemos {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_)
      throw DimensionError("Matrix: value count " + std::to_string(values_.size()) +
                           " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      values_.insert(values_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return values_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return values_[i * cols_ + j]; }
  double& operator[](std::size_t k) noexcept { return values_[k]; }
  double operator[](std::size_t k) const noexcept { return values_[k]; }

  std::span<double> row(std::size_t i) noexcept { return {values_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {values_.data() + i * cols_, cols_};
  }

  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// C = A·B, or A·Bᵀ when transpose_b. Each output row is accumulated in
/// a fixed order, so results do not depend on the thread count.
inline Matrix matmul(const Matrix& a, const Matrix& b, bool transpose_b = false) {
  const std::size_t inner_b = transpose_b ? b.cols() : b.rows();
  if (a.cols() != inner_b)
    throw DimensionError("matmul: " + shape_str(a) + " times " + shape_str(b) +
                         (transpose_b ? "^T" : ""));
  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  const std::size_t m = transpose_b ? b.rows() : b.cols();
  Matrix c(n, m);
  const std::size_t work_per_row = std::max<std::size_t>(1, k * m);
  parallel_for(n, std::max<std::size_t>(1, (1u << 16) / work_per_row), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const double* ai = a.data() + i * k;
      double* ci = c.data() + i * m;
      if (transpose_b) {
        for (std::size_t j = 0; j < m; ++j) {
          const double* bj = b.data() + j * k;
          double acc = 0.0;
          for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
          ci[j] = acc;
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = ai[p];
          const double* bp = b.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
        }
      }
    }
  });
  return c;
}

/// Aᵀ·B without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows())
    throw DimensionError("matmul_tn: " + shape_str(a) + "^T times " + shape_str(b));
  Matrix c(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto ar = a.row(r);
    const auto br = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double v = ar[i];
      if (v == 0.0) continue;
      double* ci = c.data() + i * c.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += v * br[j];
    }
  }
  return c;
}

inline double logsumexp(std::span<const double> xs) {
  if (xs.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// Column vector (rows x 1) of per-row log-sum-exp.
inline Matrix row_logsumexp(const Matrix& m) {
  Matrix out(m.rows(), 1);
  for (std::size_t i = 0; i < m.rows(); ++i) out(i, 0) = logsumexp(m.row(i));
  return out;
}

inline Matrix row_log_softmax(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double lse = logsumexp(m.row(i));
    auto src = m.row(i);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) dst[j] = src[j] - lse;
  }
  return out;
}

/// Max-shifted softmax per row.
inline Matrix row_softmax(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto src = m.row(i);
    auto dst = out.row(i);
    if (src.empty()) continue;
    const double mx = *std::max_element(src.begin(), src.end());
    double s = 0.0;
    for (std::size_t j = 0; j < src.size(); ++j) {
      dst[j] = std::exp(src[j] - mx);
      s += dst[j];
    }
    for (double& v : dst) v /= s;
  }
  return out;
}

inline Matrix exp(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v = std::exp(v);
  return out;
}

inline constexpr double kDefaultRankTolerance = 1e-8;

/// Rank by Gaussian elimination with complete pivoting: counts pivots whose
/// magnitude exceeds rel_tol times the first (largest) pivot.
inline std::size_t numerical_rank(Matrix m, double rel_tol = kDefaultRankTolerance) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw std::invalid_argument("numerical_rank: rel_tol must be in (0,1)");
  const std::size_t rows = m.rows();
  const std::size_t cols = m.cols();
  const std::size_t steps = std::min(rows, cols);
  std::vector<std::size_t> col_perm(cols);
  for (std::size_t j = 0; j < cols; ++j) col_perm[j] = j;
  double first_pivot = 0.0;
  std::size_t rank = 0;
  for (std::size_t k = 0; k < steps; ++k) {
    std::size_t pr = k, pc = k;
    double best = 0.0;
    for (std::size_t i = k; i < rows; ++i)
      for (std::size_t j = k; j < cols; ++j) {
        const double v = std::abs(m(i, j));
        if (v > best) {
          best = v;
          pr = i;
          pc = j;
        }
      }
    if (k == 0) first_pivot = best;
    if (best == 0.0 || best <= rel_tol * first_pivot) break;
    if (pr != k)
      for (std::size_t j = 0; j < cols; ++j) std::swap(m(k, j), m(pr, j));
    if (pc != k)
      for (std::size_t i = 0; i < rows; ++i) std::swap(m(i, k), m(i, pc));
    ++rank;
    const double pivot = m(k, k);
    for (std::size_t i = k + 1; i < rows; ++i) {
      const double f = m(i, k) / pivot;
      if (f == 0.0) continue;
      for (std::size_t j = k; j < cols; ++j) m(i, j) -= f * m(k, j);
    }
  }
  return rank;
}

using BigInt = boost::multiprecision::cpp_int;
using Rational = boost::multiprecision::cpp_rational;

/// Largest rows*cols accepted by the exact rank routines.
inline constexpr std::size_t kExactRankCellCap = 4096;

/// Exact rank of an integer matrix by fraction-free (Bareiss) elimination.
/// Every intermediate is an exact integer, equivalent to elimination over Q.
inline std::size_t exact_rank(std::vector<std::vector<BigInt>> a) {
  const std::size_t rows = a.size();
  if (rows == 0) return 0;
  const std::size_t cols = a.front().size();
  BigInt prev = 1;
  std::size_t rank = 0;
  for (std::size_t c = 0; c < cols && rank < rows; ++c) {
    std::size_t piv = rank;
    while (piv < rows && a[piv][c] == 0) ++piv;
    if (piv == rows) continue;
    std::swap(a[piv], a[rank]);
    for (std::size_t i = rank + 1; i < rows; ++i) {
      for (std::size_t j = c + 1; j < cols; ++j)
        a[i][j] = (a[i][j] * a[rank][c] - a[i][c] * a[rank][j]) / prev;
      a[i][c] = 0;
    }
    prev = a[rank][c];
    ++rank;
  }
  return rank;
}

/// Exact rank over Q of a rational matrix (rows are cleared of
/// denominators first, which preserves rank).
inline std::size_t exact_rank(const std::vector<std::vector<Rational>>& a) {
  std::vector<std::vector<BigInt>> ints;
  ints.reserve(a.size());
  for (const auto& row : a) {
    BigInt lcm = 1;
    for (const auto& v : row) lcm = boost::multiprecision::lcm(lcm, boost::multiprecision::denominator(v));
    std::vector<BigInt> r;
    r.reserve(row.size());
    for (const auto& v : row) r.push_back(boost::multiprecision::numerator(v) * (lcm / boost::multiprecision::denominator(v)));
    ints.push_back(std::move(r));
  }
  return exact_rank(std::move(ints));
}

/// Exact rank of a 0/1 matrix.
inline std::size_t exact_rank_binary(const Matrix& m) {
  if (m.size() > kExactRankCellCap)
    throw std::invalid_argument("exact_rank_binary: " + shape_str(m) + " exceeds the " +
                                std::to_string(kExactRankCellCap) + "-cell cap");
  std::vector<std::vector<BigInt>> a(m.rows(), std::vector<BigInt>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      if (v != 0.0 && v != 1.0)
        throw std::invalid_argument("exact_rank_binary: entry (" + std::to_string(i) + "," +
                                    std::to_string(j) + ") is not 0/1");
      a[i][j] = v == 1.0 ? 1 : 0;
    }
  return exact_rank(std::move(a));
}

}  // namespace kgemos
