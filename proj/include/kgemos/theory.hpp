#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kgemos/graph.hpp"
#include "kgemos/kge_model.hpp"
#include "kgemos/linalg.hpp"
#include "kgemos/parallel.hpp"
#include "kgemos/random.hpp"

namespace kgemos {

// ---------------------------------------------------------------------------
// Sign decomposition through polynomials evaluated at integer nodes.

namespace detail {

inline void require_binary(const Matrix& a, const char* where) {
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (a(i, j) != 0.0 && a(i, j) != 1.0)
        throw std::invalid_argument(std::string(where) + ": entry (" + std::to_string(i) + "," + std::to_string(j) +
                                    ") is not 0/1");
}

/// The exact value of a finite double.
inline Rational exact_rational(double x) {
  if (!std::isfinite(x)) throw std::invalid_argument("exact_rational: non-finite value");
  if (x == 0.0) return Rational(0);
  int exponent = 0;
  const double mantissa = std::frexp(x, &exponent);
  const auto scaled = static_cast<std::int64_t>(std::ldexp(mantissa, 53));
  exponent -= 53;
  Rational r{BigInt(scaled)};
  if (exponent > 0) r *= Rational(BigInt(1) << exponent);
  if (exponent < 0) r /= Rational(BigInt(1) << -exponent);
  return r;
}

}  // namespace detail

inline std::size_t max_row_sum(const Matrix& a) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::size_t s = 0;
    for (double v : a.row(i)) s += v != 0.0;
    c = std::max(c, s);
  }
  return c;
}

/// p(t) = sign · ∏_blocks (t − (a − ε))(t − (b + ε)) over 1-based inclusive
/// node runs [a, b]. With no blocks p is the constant `sign`.
struct RowPolynomial {
  int sign = -1;
  std::vector<std::pair<std::size_t, std::size_t>> blocks;

  std::size_t degree() const noexcept { return 2 * blocks.size(); }

  std::vector<double> roots(double eps) const {
    std::vector<double> r;
    for (auto [a, b] : blocks) {
      r.push_back(static_cast<double>(a) - eps);
      r.push_back(static_cast<double>(b) + eps);
    }
    return r;
  }

  /// Factored-form evaluation. At integer t, t − a is exact, so the sign
  /// of every factor is exact.
  double evaluate(std::size_t t, double eps) const {
    double p = sign;
    for (auto [a, b] : blocks) {
      const double lo = (static_cast<double>(t) - static_cast<double>(a)) + eps;
      const double hi = (static_cast<double>(t) - static_cast<double>(b)) - eps;
      p *= lo * hi;
    }
    return p;
  }

  /// Monomial coefficients x_0..x_{width-1} of p, exactly.
  std::vector<Rational> exact_coefficients(const Rational& eps, std::size_t width) const {
    if (degree() + 1 > width) throw std::invalid_argument("exact_coefficients: width below degree + 1");
    std::vector<Rational> c(width);
    c[0] = sign;
    std::size_t deg = 0;
    auto multiply = [&](const Rational& root) {
      for (std::size_t j = deg + 2; j-- > 0;) {
        const Rational shifted = j > 0 ? c[j - 1] : Rational(0);
        c[j] = shifted - root * c[j];
      }
      ++deg;
    };
    for (auto [a, b] : blocks) {
      multiply(Rational(static_cast<long long>(a)) - eps);
      multiply(Rational(static_cast<long long>(b)) + eps);
    }
    return c;
  }
};

struct SignDecomposition {
  std::size_t num_rows = 0;      // N
  std::size_t num_nodes = 0;     // M
  std::size_t max_row_sum = 0;   // c
  double epsilon = 0.5;
  bool merged = true;
  std::vector<RowPolynomial> rows;
  Matrix vandermonde;   // M x (2c+1), v_{t,j} = t^j for t = 1..M
  Matrix coefficients;  // N x (2c+1), rounded from the exact expansion

  std::size_t width() const noexcept { return 2 * max_row_sum + 1; }
};

/// Builds Y = sign(V·Xᵀ)ᵀ for a 0/1 matrix A (N x M). Rows with positives
/// get roots ε outside each run of ones; consecutive ones share a run when
/// `merge` is set, otherwise every positive is its own run. All-zero rows
/// map to −1 and all-one rows to +1.
inline SignDecomposition sign_decompose(const Matrix& a, double epsilon = 0.5, bool merge = true) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("sign_decompose: epsilon must lie in (0,1)");
  detail::require_binary(a, "sign_decompose");
  SignDecomposition dec;
  dec.num_rows = a.rows();
  dec.num_nodes = a.cols();
  dec.max_row_sum = max_row_sum(a);
  dec.epsilon = epsilon;
  dec.merged = merge;
  const std::size_t m = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    RowPolynomial p;
    std::size_t ones = 0;
    for (double v : a.row(i)) ones += v != 0.0;
    if (ones > 0 && ones == m) {
      p.sign = 1;
    } else if (ones > 0) {
      for (std::size_t t = 1; t <= m; ++t) {
        if (a(i, t - 1) == 0.0) continue;
        if (merge && !p.blocks.empty() && p.blocks.back().second + 1 == t)
          p.blocks.back().second = t;
        else
          p.blocks.emplace_back(t, t);
      }
    }
    dec.rows.push_back(std::move(p));
  }

  const std::size_t w = dec.width();
  dec.vandermonde = Matrix(m, w);
  for (std::size_t t = 1; t <= m; ++t) {
    double power = 1.0;
    for (std::size_t j = 0; j < w; ++j) {
      dec.vandermonde(t - 1, j) = power;
      power *= static_cast<double>(t);
    }
  }
  const Rational eps = detail::exact_rational(epsilon);
  dec.coefficients = Matrix(a.rows(), w);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto c = dec.rows[i].exact_coefficients(eps, w);
    for (std::size_t j = 0; j < w; ++j) dec.coefficients(i, j) = c[j].convert_to<double>();
  }
  return dec;
}

/// Largest N and M for which verification also evaluates V·Xᵀ exactly.
inline constexpr std::size_t kExactSignCheckMax = 16;

struct SignVerification {
  bool ok = true;
  double min_margin = std::numeric_limits<double>::infinity();
  std::vector<std::pair<std::size_t, std::size_t>> mismatches;  // (row, node), 0-based
  bool exact_checked = false;
  std::vector<std::pair<std::size_t, std::size_t>> exact_mismatches;
};

inline SignVerification verify_sign_decomposition(const Matrix& a, const SignDecomposition& dec) {
  if (a.rows() != dec.num_rows || a.cols() != dec.num_nodes || dec.rows.size() != dec.num_rows)
    throw DimensionError("verify_sign_decomposition: decomposition is for " + std::to_string(dec.num_rows) + "x" +
                         std::to_string(dec.num_nodes) + ", matrix is " + shape_str(a));
  detail::require_binary(a, "verify_sign_decomposition");
  SignVerification out;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    if (dec.rows[i].degree() > 2 * dec.max_row_sum) out.mismatches.emplace_back(i, a.cols());
    for (std::size_t t = 1; t <= a.cols(); ++t) {
      const double p = dec.rows[i].evaluate(t, dec.epsilon);
      const double want = a(i, t - 1) != 0.0 ? 1.0 : -1.0;
      if (!(p * want > 0.0)) out.mismatches.emplace_back(i, t - 1);
      out.min_margin = std::min(out.min_margin, std::abs(p));
    }
  }
  if (a.rows() <= kExactSignCheckMax && a.cols() <= kExactSignCheckMax) {
    out.exact_checked = true;
    const Rational eps = detail::exact_rational(dec.epsilon);
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const auto c = dec.rows[i].exact_coefficients(eps, dec.width());
      for (std::size_t t = 1; t <= a.cols(); ++t) {
        Rational v = 0;
        for (std::size_t j = c.size(); j-- > 0;) v = v * static_cast<long long>(t) + c[j];
        const bool positive = v > 0;
        if (v == 0 || positive != (a(i, t - 1) != 0.0)) out.exact_mismatches.emplace_back(i, t - 1);
      }
    }
  }
  out.ok = out.mismatches.empty() && out.exact_mismatches.empty();
  return out;
}

inline nlohmann::ordered_json to_json(const SignDecomposition& dec, bool include_matrices = true) {
  nlohmann::ordered_json j;
  j["rows"] = dec.num_rows;
  j["nodes"] = dec.num_nodes;
  j["max_row_sum"] = dec.max_row_sum;
  j["width"] = dec.width();
  j["epsilon"] = dec.epsilon;
  j["merged"] = dec.merged;
  auto polys = nlohmann::ordered_json::array();
  for (const auto& p : dec.rows) {
    nlohmann::ordered_json r;
    r["sign"] = p.sign;
    r["degree"] = p.degree();
    r["blocks"] = p.blocks;
    r["roots"] = p.roots(dec.epsilon);
    polys.push_back(std::move(r));
  }
  j["polynomials"] = std::move(polys);
  if (include_matrices) {
    auto rows_of = [](const Matrix& m) {
      auto arr = nlohmann::ordered_json::array();
      for (std::size_t i = 0; i < m.rows(); ++i) arr.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
      return arr;
    };
    j["X"] = rows_of(dec.coefficients);
    j["V"] = rows_of(dec.vandermonde);
  }
  return j;
}

inline nlohmann::ordered_json to_json(const SignVerification& v) {
  nlohmann::ordered_json j;
  j["ok"] = v.ok;
  if (std::isfinite(v.min_margin))
    j["min_margin"] = v.min_margin;
  else
    j["min_margin"] = nullptr;
  j["mismatches"] = v.mismatches;
  j["exact_checked"] = v.exact_checked;
  j["exact_mismatches"] = v.exact_mismatches;
  return j;
}

// ---------------------------------------------------------------------------
// Feasible sign patterns and rankings of E·h.

/// 2·Σ_{i=0}^{d-1} C(N−1, i), or 2^N when d ≥ N.
inline BigInt feasible_sign_bound(std::size_t n, std::size_t d) {
  if (d == 0) throw std::invalid_argument("feasible_sign_bound: d must be >= 1");
  if (d >= n) return BigInt(1) << n;
  BigInt sum = 0, binom = 1;  // C(n-1, 0)
  for (std::size_t i = 0; i < d; ++i) {
    sum += binom;
    binom = binom * (n - 1 - i) / (i + 1);
  }
  return 2 * sum;
}

inline constexpr std::size_t kSignEnumMaxN = 12;
inline constexpr std::size_t kRankingEnumMaxN = 7;
inline constexpr std::size_t kEnumMaxD = 3;
inline constexpr double kGeneralPositionTol = 1e-9;

namespace detail {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Vec unit(Vec a) {
  const double n = norm(a);
  if (n > 0.0)
    for (double& v : a) v /= n;
  return a;
}

inline Vec row_vec(const Matrix& m, std::size_t i) { return Vec(m.row(i).begin(), m.row(i).end()); }

inline Vec diff(const Vec& a, const Vec& b) {
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

/// Determinant by partial pivoting.
inline double det(std::vector<Vec> m) {
  const std::size_t n = m.size();
  double d = 1.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(m[i][k]) > std::abs(m[p][k])) p = i;
    if (m[p][k] == 0.0) return 0.0;
    if (p != k) {
      std::swap(m[p], m[k]);
      d = -d;
    }
    d *= m[k][k];
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = m[i][k] / m[k][k];
      for (std::size_t j = k; j < n; ++j) m[i][j] -= f * m[k][j];
    }
  }
  return d;
}

/// k-dimensional volume spanned by k vectors: sqrt(det Gram). Equals the
/// absolute determinant when k matches the ambient dimension.
inline double volume(const std::vector<Vec>& vs) {
  std::vector<Vec> gram(vs.size(), Vec(vs.size()));
  for (std::size_t i = 0; i < vs.size(); ++i)
    for (std::size_t j = 0; j < vs.size(); ++j) gram[i][j] = dot(vs[i], vs[j]);
  return std::sqrt(std::max(0.0, det(std::move(gram))));
}

/// Calls f(indices) for every k-subset of {0..n-1} in lexicographic order.
template <typename F>
void for_each_combination(std::size_t n, std::size_t k, F&& f) {
  if (k > n) return;
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  while (true) {
    f(std::as_const(idx));
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == n - k + i - 1) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

inline std::string index_list(const std::vector<std::size_t>& idx) {
  std::string s;
  for (std::size_t i : idx) s += (s.empty() ? "" : ",") + std::to_string(i);
  return "{" + s + "}";
}

/// Rejects zero vectors and any k-subset spanning less than k dimensions.
inline void require_independent_subsets(const std::vector<Vec>& vs, std::size_t k, const std::string& what) {
  for (std::size_t i = 0; i < vs.size(); ++i)
    if (norm(vs[i]) < kGeneralPositionTol) throw std::invalid_argument(what + ": vector " + std::to_string(i) + " is zero");
  for_each_combination(vs.size(), k, [&](const std::vector<std::size_t>& idx) {
    std::vector<Vec> sub;
    for (std::size_t i : idx) sub.push_back(vs[i]);
    if (volume(sub) < kGeneralPositionTol)
      throw std::invalid_argument(what + ": vectors " + index_list(idx) + " are not in general position");
  });
}

/// Unit vector spanning the null space of the dim x k matrix with columns
/// `cols`, when that null space is exactly one-dimensional.
inline std::optional<Vec> unique_null_vector(const std::vector<Vec>& cols, std::size_t dim, double tol = 1e-10) {
  const std::size_t k = cols.size();
  std::vector<Vec> m(dim, Vec(k));
  double scale = 0.0;
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t r = 0; r < dim; ++r) {
      m[r][c] = cols[c][r];
      scale = std::max(scale, std::abs(m[r][c]));
    }
  if (scale == 0.0) return std::nullopt;
  std::vector<std::size_t> pivot_cols;
  std::size_t row = 0;
  for (std::size_t c = 0; c < k && row < dim; ++c) {
    std::size_t p = row;
    for (std::size_t r = row + 1; r < dim; ++r)
      if (std::abs(m[r][c]) > std::abs(m[p][c])) p = r;
    if (std::abs(m[p][c]) <= tol * scale) continue;
    std::swap(m[p], m[row]);
    const double piv = m[row][c];
    for (double& v : m[row]) v /= piv;
    for (std::size_t r = 0; r < dim; ++r) {
      if (r == row || m[r][c] == 0.0) continue;
      const double f = m[r][c];
      for (std::size_t j = 0; j < k; ++j) m[r][j] -= f * m[row][j];
    }
    pivot_cols.push_back(c);
    ++row;
  }
  if (k - pivot_cols.size() != 1) return std::nullopt;
  std::size_t free_col = 0;
  while (std::find(pivot_cols.begin(), pivot_cols.end(), free_col) != pivot_cols.end()) ++free_col;
  Vec mu(k, 0.0);
  mu[free_col] = 1.0;
  for (std::size_t r = 0; r < pivot_cols.size(); ++r) mu[pivot_cols[r]] = -m[r][free_col];
  return unit(std::move(mu));
}

/// Orthonormal basis of span(vs) by modified Gram-Schmidt.
inline std::vector<Vec> span_basis(const std::vector<Vec>& vs, double tol = 1e-9) {
  std::vector<Vec> basis;
  for (const Vec& v : vs) {
    Vec w = unit(v);
    for (int pass = 0; pass < 2; ++pass)
      for (const Vec& q : basis) {
        const double c = dot(w, q);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= c * q[i];
      }
    if (norm(w) > tol) basis.push_back(unit(std::move(w)));
  }
  return basis;
}

inline std::vector<signed char> sign_vector(const std::vector<Vec>& normals, const Vec& x) {
  std::vector<signed char> s(normals.size());
  for (std::size_t i = 0; i < normals.size(); ++i) {
    const double v = dot(normals[i], x);
    s[i] = v > 0.0 ? 1 : (v < 0.0 ? -1 : 0);
  }
  return s;
}

/// At least one interior point of every cell of the central arrangement
/// {x : n·x = 0}, in the input coordinates (dimension `dim`).
///
/// Within the span of the normals every cell is a pointed cone with an
/// extreme ray u cut out by r−1 of the hyperplanes. Cells touching u are
/// the cells of the hyperplanes through u, so each is reached by u + δw
/// with w a cell point of that smaller arrangement and δ small enough to
/// keep every other hyperplane on u's side.
inline std::vector<Vec> arrangement_probes(const std::vector<Vec>& normals, std::size_t dim) {
  const auto basis = span_basis(normals);
  const std::size_t r = basis.size();
  if (r == 0) return {Vec(dim, 0.0)};
  auto lift = [&](const Vec& c) {
    Vec x(dim, 0.0);
    for (std::size_t k = 0; k < r; ++k)
      for (std::size_t i = 0; i < dim; ++i) x[i] += c[k] * basis[k][i];
    return x;
  };
  if (r == 1) {
    Vec neg(1, -1.0);
    return {lift(Vec(1, 1.0)), lift(neg)};
  }
  std::vector<Vec> coords;
  for (const Vec& n : normals) {
    Vec c(r);
    for (std::size_t k = 0; k < r; ++k) c[k] = dot(n, basis[k]);
    if (norm(c) > 1e-12) coords.push_back(unit(std::move(c)));
  }

  std::set<std::vector<signed char>> seen;
  std::vector<Vec> probes;
  for_each_combination(coords.size(), r - 1, [&](const std::vector<std::size_t>& idx) {
    std::vector<Vec> rows;
    for (std::size_t i : idx) rows.push_back(coords[i]);
    // u spans the null space of the (r−1) x r matrix: treat rows as columns of its transpose.
    std::vector<Vec> cols(r, Vec(rows.size()));
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = 0; b < r; ++b) cols[b][a] = rows[a][b];
    const auto u = unique_null_vector(cols, rows.size());
    if (!u) return;
    std::vector<Vec> through, others;
    for (const Vec& c : coords) (std::abs(dot(c, *u)) <= 1e-9 ? through : others).push_back(c);
    const auto local = arrangement_probes(through, r);
    for (double side : {1.0, -1.0}) {
      Vec us = *u;
      for (double& v : us) v *= side;
      for (const Vec& w : local) {
        double min_u = std::numeric_limits<double>::infinity(), max_w = 0.0;
        for (const Vec& c : others) {
          min_u = std::min(min_u, std::abs(dot(c, us)));
          max_w = std::max(max_w, std::abs(dot(c, w)));
        }
        const double delta = others.empty() || max_w == 0.0 ? 1.0 : 0.5 * min_u / max_w;
        Vec p = us;
        for (std::size_t i = 0; i < r; ++i) p[i] += delta * w[i];
        auto s = sign_vector(coords, p);
        if (std::find(s.begin(), s.end(), 0) != s.end()) continue;
        if (seen.insert(std::move(s)).second) probes.push_back(lift(p));
      }
    }
  });
  return probes;
}

}  // namespace detail

/// Outcome of testing {h : a_i·h > 0 for all i}.
struct ConeFeasibility {
  bool feasible = false;
  std::vector<double> witness;             // h with min_i â_i·h > 0 when feasible
  double margin = 0.0;                     // min_i â_i·h / |h| for the witness
  std::vector<std::size_t> support;        // Gordan certificate when infeasible:
  std::vector<double> weights;             // Σ weights_j a_{support_j} = 0, weights > 0
};

/// Decides whether the open cone is nonempty. Infeasibility is certified by
/// a strictly positive dependency among at most dim+1 of the vectors
/// (minimal such dependencies have one-dimensional null spaces, so they are
/// found by subset search). Otherwise a normalized perceptron produces a
/// witness with positive margin. If neither certificate is found within
/// 10⁴·m·dim perceptron updates, the instance is reported as undecided by
/// throwing.
inline ConeFeasibility open_cone_feasibility(const std::vector<std::vector<double>>& a, std::size_t dim) {
  using detail::Vec;
  ConeFeasibility out;
  std::vector<Vec> unit_a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != dim) throw DimensionError("open_cone_feasibility: vector length differs from dim");
    if (detail::norm(a[i]) == 0.0) {
      out.support = {i};
      out.weights = {1.0};
      return out;
    }
    unit_a.push_back(detail::unit(a[i]));
  }
  if (a.empty()) {
    out.feasible = true;
    out.witness = Vec(dim, 0.0);
    if (dim > 0) out.witness[0] = 1.0;
    out.margin = std::numeric_limits<double>::infinity();
    return out;
  }
  for (std::size_t k = 2; k <= std::min(a.size(), dim + 1); ++k) {
    bool found = false;
    detail::for_each_combination(a.size(), k, [&](const std::vector<std::size_t>& idx) {
      if (found) return;
      std::vector<Vec> cols;
      for (std::size_t i : idx) cols.push_back(unit_a[i]);
      auto mu = detail::unique_null_vector(cols, dim);
      if (!mu) return;
      const bool pos = std::all_of(mu->begin(), mu->end(), [](double v) { return v > 1e-9; });
      const bool neg = std::all_of(mu->begin(), mu->end(), [](double v) { return v < -1e-9; });
      if (!pos && !neg) return;
      found = true;
      out.support = idx;
      out.weights.clear();
      for (std::size_t j = 0; j < idx.size(); ++j)
        out.weights.push_back(std::abs((*mu)[j]) / detail::norm(a[idx[j]]));
    });
    if (found) return out;
  }

  const std::size_t cap = 10000 * a.size() * std::max<std::size_t>(dim, 1);
  Vec h(dim, 0.0);
  for (std::size_t step = 0; step <= cap; ++step) {
    std::size_t worst = 0;
    double worst_v = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < unit_a.size(); ++i) {
      const double v = detail::dot(unit_a[i], h);
      if (v < worst_v) {
        worst_v = v;
        worst = i;
      }
    }
    const double hn = detail::norm(h);
    if (hn > 0.0 && worst_v > 1e-12 * hn) {
      out.feasible = true;
      out.margin = worst_v / hn;
      out.witness = detail::unit(h);
      return out;
    }
    for (std::size_t j = 0; j < dim; ++j) h[j] += unit_a[worst][j];
  }
  throw std::runtime_error("open_cone_feasibility: undecided after " + std::to_string(cap) +
                           " perceptron updates (no infeasibility certificate either)");
}

using SignPattern = std::vector<int>;   // ±1 per row of E
using Ranking = std::vector<int>;       // row indices of E, highest score first

namespace detail {

inline void check_enum_caps(const Matrix& e, std::size_t max_n, const char* where) {
  if (e.rows() == 0 || e.cols() == 0) throw std::invalid_argument(std::string(where) + ": E must be nonempty");
  if (e.rows() > max_n || e.cols() > kEnumMaxD)
    throw std::invalid_argument(std::string(where) + ": instance " + shape_str(e) + " exceeds the caps N <= " +
                                std::to_string(max_n) + ", d <= " + std::to_string(kEnumMaxD));
}

inline void check_biases(const Matrix& e, const std::optional<std::vector<double>>& biases) {
  if (biases && biases->size() != e.rows()) throw DimensionError("biases: one per row of E required");
}

/// Rows of E, extended with their bias when present.
inline std::vector<Vec> score_rows(const Matrix& e, const std::optional<std::vector<double>>& biases) {
  std::vector<Vec> rows;
  for (std::size_t i = 0; i < e.rows(); ++i) {
    Vec r = row_vec(e, i);
    if (biases) r.push_back((*biases)[i]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Vec t_axis(std::size_t dim) {
  Vec t(dim, 0.0);
  t.back() = 1.0;
  return t;
}

/// Any min(d, N) rows independent, in the linear and (with biases) the
/// augmented space.
inline void require_sign_general_position(const Matrix& e, const std::optional<std::vector<double>>& biases) {
  std::vector<Vec> rows;
  for (std::size_t i = 0; i < e.rows(); ++i) rows.push_back(row_vec(e, i));
  require_independent_subsets(rows, std::min(e.cols(), e.rows()), "E");
  if (biases) require_independent_subsets(score_rows(e, biases), std::min(e.cols() + 1, e.rows()), "[E b]");
}

inline std::vector<Vec> pairwise_differences(const std::vector<Vec>& rows) {
  std::vector<Vec> out;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) out.push_back(diff(rows[i], rows[j]));
  return out;
}

/// Affine general position of the score rows, and (in two or more
/// dimensions) no two difference hyperplanes coincide.
inline void require_ranking_general_position(const Matrix& e, const std::optional<std::vector<double>>& biases) {
  const auto rows = score_rows(e, biases);
  const std::size_t dim = rows.front().size();
  const std::size_t k = std::min(dim, rows.size() - 1);
  for_each_combination(rows.size(), k + 1, [&](const std::vector<std::size_t>& idx) {
    std::vector<Vec> d;
    for (std::size_t j = 1; j < idx.size(); ++j) d.push_back(diff(rows[idx[j]], rows[idx[0]]));
    if (volume(d) < kGeneralPositionTol)
      throw std::invalid_argument("E: rows " + index_list(idx) + " are not in affine general position");
  });
  if (dim < 2) return;
  auto diffs = pairwise_differences(rows);
  if (biases) diffs.push_back(t_axis(dim));
  for (std::size_t a = 0; a < diffs.size(); ++a)
    for (std::size_t b = a + 1; b < diffs.size(); ++b)
      if (volume({diffs[a], diffs[b]}) < kGeneralPositionTol)
        throw std::invalid_argument("E: two score-difference hyperplanes coincide");
}

inline Ranking argsort_desc(const std::vector<double>& scores) {
  Ranking idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return idx;
}

/// Probes of the arrangement mapped to score vectors; with biases only
/// probes with t > 0 are kept and scaled to t = 1.
inline std::vector<std::vector<double>> probe_scores(const std::vector<Vec>& rows, const std::vector<Vec>& probes,
                                                     bool affine) {
  std::vector<std::vector<double>> out;
  for (const Vec& p : probes) {
    if (affine && !(p.back() > 0.0)) continue;
    std::vector<double> s;
    for (const Vec& r : rows) s.push_back(dot(r, p));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

struct FeasibilityOptions {
  std::optional<std::vector<double>> biases;  // per-row bias: scores e_o·h + b_o
};

/// Dual test of every one of the 2^N patterns.
inline std::vector<SignPattern> feasible_signs_dual(const Matrix& e, const FeasibilityOptions& opts = {}) {
  detail::check_enum_caps(e, kSignEnumMaxN, "feasible_signs");
  detail::check_biases(e, opts.biases);
  detail::require_sign_general_position(e, opts.biases);
  const std::size_t n = e.rows();
  const auto rows = detail::score_rows(e, opts.biases);
  const std::size_t dim = rows.front().size();
  const std::size_t total = std::size_t{1} << n;
  std::vector<char> ok(total, 0);
  parallel_for(total, 16, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t mask = lo; mask < hi; ++mask) {
      std::vector<detail::Vec> a;
      for (std::size_t o = 0; o < n; ++o) {
        detail::Vec v = rows[o];
        if (!((mask >> o) & 1)) for (double& x : v) x = -x;
        a.push_back(std::move(v));
      }
      if (opts.biases) a.push_back(detail::t_axis(dim));
      ok[mask] = open_cone_feasibility(a, dim).feasible;
    }
  });
  std::vector<SignPattern> out;
  for (std::size_t mask = 0; mask < total; ++mask) {
    if (!ok[mask]) continue;
    SignPattern p(n);
    for (std::size_t o = 0; o < n; ++o) p[o] = ((mask >> o) & 1) ? 1 : -1;
    out.push_back(std::move(p));
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Sign patterns read off one probe per cell of the arrangement {e_o·h = 0}.
inline std::vector<SignPattern> feasible_signs_arrangement(const Matrix& e, const FeasibilityOptions& opts = {}) {
  detail::check_enum_caps(e, kSignEnumMaxN, "feasible_signs");
  detail::check_biases(e, opts.biases);
  detail::require_sign_general_position(e, opts.biases);
  const auto rows = detail::score_rows(e, opts.biases);
  const std::size_t dim = rows.front().size();
  auto normals = rows;
  if (opts.biases) normals.push_back(detail::t_axis(dim));
  std::set<SignPattern> found;
  for (const auto& s : detail::probe_scores(rows, detail::arrangement_probes(normals, dim), opts.biases.has_value())) {
    SignPattern p;
    for (double v : s) p.push_back(v > 0.0 ? 1 : -1);
    found.insert(std::move(p));
  }
  return {found.begin(), found.end()};
}

/// Dual test of every permutation via its chain of score differences.
inline std::vector<Ranking> feasible_rankings_dual(const Matrix& e, const FeasibilityOptions& opts = {}) {
  detail::check_enum_caps(e, kRankingEnumMaxN, "feasible_rankings");
  detail::check_biases(e, opts.biases);
  detail::require_ranking_general_position(e, opts.biases);
  const auto rows = detail::score_rows(e, opts.biases);
  const std::size_t dim = rows.front().size();
  std::vector<Ranking> perms;
  Ranking p(e.rows());
  std::iota(p.begin(), p.end(), 0);
  do perms.push_back(p);
  while (std::next_permutation(p.begin(), p.end()));
  std::vector<char> ok(perms.size(), 0);
  parallel_for(perms.size(), 16, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k) {
      std::vector<detail::Vec> a;
      for (std::size_t i = 0; i + 1 < perms[k].size(); ++i) a.push_back(detail::diff(rows[perms[k][i]], rows[perms[k][i + 1]]));
      if (opts.biases) a.push_back(detail::t_axis(dim));
      ok[k] = open_cone_feasibility(a, dim).feasible;
    }
  });
  std::vector<Ranking> out;
  for (std::size_t k = 0; k < perms.size(); ++k)
    if (ok[k]) out.push_back(perms[k]);
  return out;
}

/// Rankings read off one probe per cell of the arrangement of all pairwise
/// difference hyperplanes.
inline std::vector<Ranking> feasible_rankings_arrangement(const Matrix& e, const FeasibilityOptions& opts = {}) {
  detail::check_enum_caps(e, kRankingEnumMaxN, "feasible_rankings");
  detail::check_biases(e, opts.biases);
  detail::require_ranking_general_position(e, opts.biases);
  const auto rows = detail::score_rows(e, opts.biases);
  const std::size_t dim = rows.front().size();
  auto normals = detail::pairwise_differences(rows);
  if (opts.biases) normals.push_back(detail::t_axis(dim));
  if (normals.empty()) return {Ranking{0}};
  std::set<Ranking> found;
  for (const auto& s : detail::probe_scores(rows, detail::arrangement_probes(normals, dim), opts.biases.has_value()))
    found.insert(detail::argsort_desc(s));
  return {found.begin(), found.end()};
}

struct FeasibilityReport {
  std::string kind;  // "signs" or "rankings"
  std::size_t n = 0;
  std::size_t d = 0;
  bool affine = false;
  std::size_t feasible_count = 0;
  std::optional<BigInt> bound;
  std::string bound_formula;
  std::vector<std::vector<int>> patterns;
};

/// Both methods are run and must return the same set.
inline FeasibilityReport enumerate_feasible_signs(const Matrix& e, const FeasibilityOptions& opts = {}) {
  auto dual = feasible_signs_dual(e, opts);
  auto cells = feasible_signs_arrangement(e, opts);
  if (dual != cells)
    throw std::logic_error("enumerate_feasible_signs: dual test found " + std::to_string(dual.size()) +
                           " patterns, arrangement cells " + std::to_string(cells.size()));
  FeasibilityReport r;
  r.kind = "signs";
  r.n = e.rows();
  r.d = e.cols();
  r.affine = opts.biases.has_value();
  r.feasible_count = dual.size();
  if (!r.affine) {
    r.bound = feasible_sign_bound(r.n, r.d);
    r.bound_formula = "2*sum_{i=0}^{d-1} C(N-1,i); 2^N when d >= N";
  } else {
    r.bound_formula = "none asserted for per-object biases";
  }
  r.patterns = std::move(dual);
  return r;
}

inline FeasibilityReport enumerate_feasible_rankings(const Matrix& e, const FeasibilityOptions& opts = {}) {
  auto dual = feasible_rankings_dual(e, opts);
  auto cells = feasible_rankings_arrangement(e, opts);
  if (dual != cells)
    throw std::logic_error("enumerate_feasible_rankings: dual test found " + std::to_string(dual.size()) +
                           " rankings, arrangement cells " + std::to_string(cells.size()));
  FeasibilityReport r;
  r.kind = "rankings";
  r.n = e.rows();
  r.d = e.cols();
  r.affine = opts.biases.has_value();
  r.feasible_count = dual.size();
  BigInt fact = 1;
  for (std::size_t i = 2; i <= r.n; ++i) fact *= i;
  r.bound = fact;
  r.bound_formula = "N! (all permutations)";
  r.patterns = std::move(dual);
  return r;
}

inline nlohmann::ordered_json to_json(const FeasibilityReport& r) {
  nlohmann::ordered_json j;
  j["kind"] = r.kind;
  j["N"] = r.n;
  j["d"] = r.d;
  j["affine"] = r.affine;
  j["feasible_count"] = r.feasible_count;
  if (r.bound)
    j["bound"] = r.bound->str();
  else
    j["bound"] = nullptr;
  j["bound_formula"] = r.bound_formula;
  j["patterns"] = r.patterns;
  return j;
}

/// N x d matrix with i.i.d. standard normal entries.
inline Matrix random_gaussian(std::size_t n, std::size_t d, Rng& rng) {
  Matrix m(n, d);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

/// N x M 0/1 matrix whose row sums are drawn uniformly from [0, max_c].
inline Matrix random_adjacency(std::size_t n, std::size_t m, std::size_t max_c, Rng& rng) {
  Matrix a(n, m);
  std::vector<std::size_t> cols(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(cols));
    const std::size_t k = std::min<std::size_t>(m, rng.below(max_c + 1));
    for (std::size_t j = 0; j < k; ++j) a(i, cols[j]) = 1.0;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Distributional reconstruction and softmax-manifold diagnostics.

/// Target scores for true (τ₊) and false (τ₋) triples.
struct DrTarget {
  double tau_plus = 1.0;
  double tau_minus = 0.0;

  void validate() const {
    if (!(tau_minus < tau_plus)) throw std::invalid_argument("DrTarget: tau_minus must be below tau_plus");
    if (tau_plus == 0.0) throw std::invalid_argument("DrTarget: tau_plus must be nonzero");
  }
};

struct DrVerdict {
  std::size_t rank = 0;
  std::size_t d = 0;
  bool infeasible = false;  // otherwise "not excluded"

  std::string verdict() const { return infeasible ? "infeasible" : "not excluded"; }
};

/// Z = τ₊·Y + τ₋·1 with rank(Z) ≤ d forces rank(Y) ≤ d + 1, so an exact
/// rank above d + 1 rules the target out.
inline DrVerdict dr_obstruction_check(const Matrix& y, std::size_t d, const DrTarget& target = {}) {
  target.validate();
  DrVerdict v;
  v.rank = exact_rank_binary(y);
  v.d = d;
  v.infeasible = v.rank > d + 1;
  return v;
}

inline nlohmann::ordered_json to_json(const DrVerdict& v) {
  return {{"rank", v.rank}, {"d", v.d}, {"limit", v.d + 1}, {"verdict", v.verdict()}};
}

/// Output-layer log-probabilities for arbitrary hidden states (inference mode).
inline Matrix output_log_prob(KgeModel& model, const Matrix& hidden) {
  if (hidden.cols() != model.config.encoder.dim)
    throw DimensionError("output_log_prob: hidden width " + std::to_string(hidden.cols()) + " vs model dim " +
                         std::to_string(model.config.encoder.dim));
  if (hidden.rows() == 0) return Matrix(0, model.num_entities());
  Tape tape;
  const Var h = tape.constant(hidden);
  const Var e = tape.param(model.encoder.entity);
  if (!model.mos) return tape.value(plain_log_prob(tape, h, e));
  return tape.value(mixture_log_prob(tape, *model.mos, h, e, {}).log_prob);
}

/// Numerical rank of the log-probability matrix A, a_ij = log P(O = j | query i).
inline std::size_t logprob_rank_probe(KgeModel& model, std::span<const Query> queries,
                                      double rel_tol = kDefaultRankTolerance) {
  const std::set<Query> distinct(queries.begin(), queries.end());
  if (distinct.size() < model.config.encoder.dim + 3)
    throw std::invalid_argument("logprob_rank_probe: need at least d+3 = " + std::to_string(model.config.encoder.dim + 3) +
                                " distinct queries, got " + std::to_string(distinct.size()));
  return numerical_rank(model.log_prob(Batch::from_queries(queries)), rel_tol);
}

/// ln(p_ij / p_i,ref) for j ≠ ref.
inline Matrix alr_transform(const Matrix& p, std::size_t ref) {
  if (ref >= p.cols()) throw std::out_of_range("alr_transform: reference column " + std::to_string(ref) + " out of range");
  Matrix out(p.rows(), p.cols() - 1);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    for (std::size_t j = 0; j < p.cols(); ++j)
      if (!(p(i, j) > 0.0))
        throw std::invalid_argument("alr_transform: probability at (" + std::to_string(i) + "," + std::to_string(j) +
                                    ") is not positive");
    const double base = std::log(p(i, ref));
    for (std::size_t j = 0, k = 0; j < p.cols(); ++j)
      if (j != ref) out(i, k++) = std::log(p(i, j)) - base;
  }
  return out;
}

/// Numerical rank after subtracting column means (the dimension of the
/// affine hull of the rows).
inline std::size_t centered_rank(Matrix m, double rel_tol = kDefaultRankTolerance) {
  if (m.rows() == 0) return 0;
  for (std::size_t j = 0; j < m.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) mean += m(i, j);
    mean /= static_cast<double>(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) m(i, j) -= mean;
  }
  return numerical_rank(std::move(m), rel_tol);
}

struct ManifoldSample {
  Matrix hidden;         // n x d, standard normal
  Matrix probabilities;  // n x |E|
};

/// Pushes n random hidden states through the model's fixed output layer.
inline ManifoldSample sample_output_manifold(KgeModel& model, std::size_t n, std::uint64_t seed) {
  ManifoldSample s;
  s.hidden = Matrix(n, model.config.encoder.dim);
  Rng rng{seed, 0x6d616e69ULL};
  for (double& v : s.hidden.values()) v = rng.normal();
  s.probabilities = exp(output_log_prob(model, s.hidden));
  return s;
}

}  // namespace kgemos
