// Shared fixtures and independent reference implementations for the tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "itlumm/matrix.hpp"
#include "itlumm/partition.hpp"
#include "itlumm/rng.hpp"

namespace oracle {

using itlumm::Matrix;
using itlumm::Rng;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

inline Matrix triple_loop(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

/// Gauss-Jordan elimination with partial pivoting: s·X = rhs.
inline Matrix gauss_solve(Matrix s, Matrix rhs) {
  const std::size_t n = s.rows();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(s(r, col)) > std::abs(s(piv, col))) piv = r;
    for (std::size_t j = 0; j < n; ++j) std::swap(s(col, j), s(piv, j));
    for (std::size_t j = 0; j < rhs.cols(); ++j) std::swap(rhs(col, j), rhs(piv, j));
    const double d = s(col, col);
    for (std::size_t j = 0; j < n; ++j) s(col, j) /= d;
    for (std::size_t j = 0; j < rhs.cols(); ++j) rhs(col, j) /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = s(r, col);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) s(r, j) -= f * s(col, j);
      for (std::size_t j = 0; j < rhs.cols(); ++j) rhs(r, j) -= f * rhs(col, j);
    }
  }
  return rhs;
}

/// (GᵀG + λI)⁻¹(GᵀY + λP₀) assembled element by element.
inline Matrix normal_equations(const Matrix& g, const Matrix& y, double lambda, const Matrix& p0) {
  const std::size_t k = g.cols();
  Matrix s(k, k), rhs(k, y.cols());
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double v = 0.0;
      for (std::size_t r = 0; r < g.rows(); ++r) v += g(r, i) * g(r, j);
      s(i, j) = v + (i == j ? lambda : 0.0);
    }
    for (std::size_t j = 0; j < y.cols(); ++j) {
      double v = 0.0;
      for (std::size_t r = 0; r < g.rows(); ++r) v += g(r, i) * y(r, j);
      rhs(i, j) = v + lambda * p0(i, j);
    }
  }
  return gauss_solve(s, rhs);
}

/// Orthogonal projection of y onto the column space of g (modified Gram-Schmidt).
inline Matrix project_onto_columns(const Matrix& g, const Matrix& y) {
  std::vector<std::vector<double>> basis;
  for (std::size_t j = 0; j < g.cols(); ++j) {
    std::vector<double> v(g.rows());
    for (std::size_t r = 0; r < g.rows(); ++r) v[r] = g(r, j);
    const double norm0 = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm0 == 0.0) continue;
    for (const auto& q : basis) {
      const double d = std::inner_product(v.begin(), v.end(), q.begin(), 0.0);
      for (std::size_t r = 0; r < v.size(); ++r) v[r] -= d * q[r];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm <= 1e-10 * norm0) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  Matrix out(y.rows(), y.cols());
  for (std::size_t m = 0; m < y.cols(); ++m)
    for (const auto& q : basis) {
      double d = 0.0;
      for (std::size_t r = 0; r < y.rows(); ++r) d += q[r] * y(r, m);
      for (std::size_t r = 0; r < y.rows(); ++r) out(r, m) += d * q[r];
    }
  return out;
}

/// Best assignment value over all n! permutations.
inline double brute_force_assignment(const Matrix& w) {
  std::vector<std::size_t> p(w.rows());
  std::iota(p.begin(), p.end(), std::size_t{0});
  double best = -INFINITY;
  do {
    double v = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) v += w(i, p[i]);
    best = std::max(best, v);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

/// Every leaf order reachable by flipping children of the dendrogram.
inline std::vector<std::vector<std::size_t>> all_flips(const itlumm::Dendrogram& dg) {
  std::function<std::vector<std::vector<std::size_t>>(std::size_t)> rec = [&](std::size_t id) {
    if (id < dg.leaves) return std::vector<std::vector<std::size_t>>{{id}};
    const auto& m = dg.merges[id - dg.leaves];
    auto ls = rec(m.left), rs = rec(m.right);
    std::vector<std::vector<std::size_t>> out;
    for (const auto& l : ls)
      for (const auto& r : rs) {
        auto a = l;
        a.insert(a.end(), r.begin(), r.end());
        out.push_back(a);
        auto b = r;
        b.insert(b.end(), l.begin(), l.end());
        out.push_back(b);
      }
    return out;
  };
  return rec(dg.leaves + dg.merges.size() - 1);
}

/// Average linkage recomputed from the leaf sets at every step.
inline itlumm::Dendrogram average_linkage(const Matrix& dist) {
  const std::size_t d = dist.rows();
  std::vector<std::vector<std::size_t>> members(d);
  std::vector<std::size_t> active(d);
  for (std::size_t i = 0; i < d; ++i) {
    members[i] = {i};
    active[i] = i;
  }
  itlumm::Dendrogram dg;
  dg.leaves = d;
  for (std::size_t step = 0; step + 1 < d; ++step) {
    double best = INFINITY;
    std::size_t bi = 0, bj = 0;
    for (std::size_t x = 0; x < active.size(); ++x)
      for (std::size_t y = x + 1; y < active.size(); ++y) {
        const auto& mx = members[active[x]];
        const auto& my = members[active[y]];
        double s = 0.0;
        for (std::size_t p : mx)
          for (std::size_t q : my) s += dist(p, q);
        s /= static_cast<double>(mx.size() * my.size());
        const std::size_t lo = std::min(active[x], active[y]), hi = std::max(active[x], active[y]);
        if (s < best - 1e-12 ||
            (std::abs(s - best) <= 1e-12 && std::pair(lo, hi) < std::pair(std::min(bi, bj), std::max(bi, bj)))) {
          best = s;
          bi = active[x];
          bj = active[y];
        }
      }
    const std::size_t lo = std::min(bi, bj), hi = std::max(bi, bj);
    std::vector<std::size_t> merged = members[lo];
    merged.insert(merged.end(), members[hi].begin(), members[hi].end());
    members.push_back(merged);
    dg.merges.push_back({lo, hi, best, merged.size()});
    std::erase(active, lo);
    std::erase(active, hi);
    active.push_back(d + step);
  }
  return dg;
}

inline std::size_t nearest_row(const Matrix& protos, std::span<const double> x) {
  std::size_t best = 0;
  double bd = INFINITY;
  for (std::size_t k = 0; k < protos.rows(); ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) s += (x[j] - protos(k, j)) * (x[j] - protos(k, j));
    if (s < bd) {
      bd = s;
      best = k;
    }
  }
  return best;
}

/// Central differences of f at every entry of t.
inline Matrix finite_difference(const std::function<double(const Matrix&)>& f, Matrix t, double h = 1e-6) {
  Matrix g(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double x = t.data()[i];
    t.data()[i] = x + h;
    const double up = f(t);
    t.data()[i] = x - h;
    const double down = f(t);
    t.data()[i] = x;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace oracle
