#include "itlumm/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "itlumm/errors.hpp"

namespace itlumm {

namespace {

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + shape(a) + " times " + shape(b) + ")");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    auto arow = a.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: row counts differ (" + shape(a) + ", " + shape(b) + ")");
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto arow = a.row(r);
    auto brow = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ai = arow[i];
      if (ai == 0.0) continue;
      auto dst = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += ai * brow[j];
    }
  }
  return out;
}

Matrix cholesky_solve(const Matrix& s, const Matrix& rhs) {
  const std::size_t n = s.rows();
  if (s.cols() != n || rhs.rows() != n) {
    throw ShapeError("cholesky_solve: system " + shape(s) + " with right-hand side " + shape(rhs));
  }
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(s(i, i)));
  const double pivot_floor = 1e-13 * std::max(max_diag, std::numeric_limits<double>::min());

  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = s(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > pivot_floor)) {
      throw SingularSystemError("system matrix is singular or not positive definite (pivot " +
                                std::to_string(j) + ")");
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / ljj;
    }
  }

  Matrix x = rhs;
  const std::size_t m = rhs.cols();
  // forward: L z = rhs
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      const double lik = l(i, k);
      for (std::size_t c = 0; c < m; ++c) x(i, c) -= lik * x(k, c);
    }
    for (std::size_t c = 0; c < m; ++c) x(i, c) /= l(i, i);
  }
  // backward: Lᵀ x = z
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double lki = l(k, ii);
      for (std::size_t c = 0; c < m; ++c) x(ii, c) -= lki * x(k, c);
    }
    for (std::size_t c = 0; c < m; ++c) x(ii, c) /= l(ii, ii);
  }
  return x;
}

Matrix ridge_solve(const Matrix& g, const Matrix& y, double lambda, const Matrix& p0) {
  if (g.rows() != y.rows()) {
    throw ShapeError("ridge_solve: G is " + shape(g) + " but Y is " + shape(y));
  }
  if (p0.rows() != g.cols() || p0.cols() != y.cols()) {
    throw ShapeError("ridge_solve: P0 is " + shape(p0) + ", expected " + std::to_string(g.cols()) +
                     "x" + std::to_string(y.cols()));
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ArgumentError("ridge_solve: lambda must be finite and non-negative");
  }
  Matrix s = matmul_tn(g, g);
  Matrix rhs = matmul_tn(g, y);
  for (std::size_t i = 0; i < s.rows(); ++i) s(i, i) += lambda;
  if (lambda != 0.0) {
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs.data()[i] += lambda * p0.data()[i];
  }
  try {
    return cholesky_solve(s, rhs);
  } catch (const SingularSystemError&) {
    throw SingularSystemError(lambda == 0.0
                                  ? "ridge_solve: GᵀG is singular; use lambda > 0"
                                  : "ridge_solve: regularized system is singular");
  }
}

Matrix lstsq_min_norm(const Matrix& g, const Matrix& y, double rcond) {
  if (g.rows() != y.rows()) throw ShapeError("lstsq_min_norm: G is " + shape(g) + " but Y is " + shape(y));
  Matrix s = matmul_tn(g, g);
  Matrix rhs = matmul_tn(g, y);
  Svd svd = svd_square(s);
  const std::size_t n = s.rows();
  const double cutoff = svd.s.empty() ? 0.0 : rcond * svd.s.front();
  // x = V Σ⁺ Uᵀ rhs
  Matrix tmp(n, rhs.cols());
  for (std::size_t k = 0; k < n; ++k) {
    if (!(svd.s[k] > cutoff)) continue;
    const double inv = 1.0 / svd.s[k];
    for (std::size_t i = 0; i < n; ++i) {
      const double uik = svd.u(i, k) * inv;
      if (uik == 0.0) continue;
      for (std::size_t c = 0; c < rhs.cols(); ++c) tmp(k, c) += uik * rhs(i, c);
    }
  }
  return matmul_tn(svd.vt, tmp);
}

double kmeans_objective(const Matrix& x, const Matrix& centroids,
                        const std::vector<std::size_t>& assignments) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) total += squared_distance(x.row(i), centroids.row(assignments[i]));
  return total;
}

namespace {

// nearest centroid, ties to the lowest index; returns the squared distance
double assign_nearest(const Matrix& x, const Matrix& centroids, std::vector<std::size_t>& assign) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
      double d = squared_distance(x.row(i), centroids.row(c));
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    assign[i] = arg;
    total += best;
  }
  return total;
}

KMeansResult lloyd(const Matrix& x, Matrix centroids, std::size_t iters) {
  const std::size_t n = x.rows();
  const std::size_t k = centroids.rows();
  const std::size_t dim = x.cols();
  KMeansResult res;
  res.assignments.assign(n, 0);
  res.objective_history.push_back(assign_nearest(x, centroids, res.assignments));

  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < iters; ++it) {
    std::fill(centroids.data().begin(), centroids.data().end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = centroids.row(res.assignments[i]);
      auto src = x.row(i);
      for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
      ++counts[res.assignments[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (double& v : centroids.row(c)) v /= static_cast<double>(counts[c]);
    }

    // empty clusters take over the point farthest from its own centroid
    std::vector<char> taken(n, 0);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      double far = -1.0;
      std::size_t arg = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        double d = squared_distance(x.row(i), centroids.row(res.assignments[i]));
        if (d > far) {
          far = d;
          arg = i;
        }
      }
      taken[arg] = 1;
      std::copy(x.row(arg).begin(), x.row(arg).end(), centroids.row(c).begin());
      res.assignments[arg] = c;
    }

    std::vector<std::size_t> prev = res.assignments;
    res.objective_history.push_back(assign_nearest(x, centroids, res.assignments));
    if (prev == res.assignments) break;
  }
  res.centroids = std::move(centroids);
  return res;
}

}  // namespace

KMeansResult kmeans(const Matrix& x, std::size_t k, Rng& rng, std::size_t iters) {
  const std::size_t n = x.rows();
  if (n == 0 || x.cols() == 0) throw ArgumentError("kmeans: empty input");
  if (k == 0) throw ArgumentError("kmeans: k must be positive");
  if (k > n) {
    throw ArgumentError("kmeans: k = " + std::to_string(k) + " exceeds the number of points " +
                        std::to_string(n));
  }
  if (iters == 0) throw ArgumentError("kmeans: iters must be at least 1");

  // k-means++ seeding
  Matrix centroids(k, x.cols());
  std::vector<char> chosen(n, 0);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t pick = first;
    if (c > 0) {
      double total = 0.0;
      for (double v : d2) total += v;
      if (total > 0.0) {
        double r = rng.uniform() * total;
        pick = n;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (d2[i] <= 0.0) continue;
          acc += d2[i];
          pick = i;
          if (acc > r) break;
        }
      } else {
        // fewer distinct points than k: take the next unused index
        pick = 0;
        while (chosen[pick]) ++pick;
      }
    }
    chosen[pick] = 1;
    std::copy(x.row(pick).begin(), x.row(pick).end(), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(x.row(i), centroids.row(c)));
  }
  return lloyd(x, std::move(centroids), iters);
}

KMeansResult kmeans_from(const Matrix& x, Matrix init, std::size_t iters) {
  if (x.rows() == 0) throw ArgumentError("kmeans: empty input");
  if (init.cols() != x.cols()) throw ShapeError("kmeans_from: centroid width differs from data");
  if (init.rows() > x.rows()) throw ArgumentError("kmeans: k exceeds the number of points");
  return lloyd(x, std::move(init), iters);
}

Svd svd_square(const Matrix& m) {
  const std::size_t n = m.rows();
  if (m.cols() != n) throw ShapeError("svd_square: matrix is " + shape(m) + ", expected square");
  if (!m.all_finite()) throw ArgumentError("svd_square: non-finite input");

  // Work on rows: w row p is column p of m, v row p is column p of V.
  Matrix w = m.transpose();
  Matrix v = Matrix::identity(n);
  constexpr double tol = 1e-10;
  constexpr int max_sweeps = 100;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto wp = w.row(p);
        auto wq = w.row(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double a = wp[i], b = wq[i];
          wp[i] = c * a - s * b;
          wq[i] = s * a + c * b;
        }
        auto vp = v.row(p);
        auto vq = v.row(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double a = vp[i], b = vq[i];
          vp[i] = c * a - s * b;
          vq[i] = s * a + c * b;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t p = 0; p < n; ++p) {
    double norm = 0.0;
    for (double x : w.row(p)) norm += x * x;
    sigma[p] = std::sqrt(norm);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  Svd out{Matrix(n, n), std::vector<double>(n), Matrix(n, n)};
  const double small = (n == 0 ? 0.0 : sigma[order[0]]) * 1e-14;
  std::vector<std::vector<double>> ucols;
  std::vector<std::size_t> missing;
  ucols.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t p = order[r];
    out.s[r] = sigma[p];
    std::copy(v.row(p).begin(), v.row(p).end(), out.vt.row(r).begin());
    std::vector<double> col(n, 0.0);
    if (sigma[p] > small && sigma[p] > 0.0) {
      for (std::size_t i = 0; i < n; ++i) col[i] = w(p, i) / sigma[p];
    } else {
      missing.push_back(r);
    }
    ucols.push_back(std::move(col));
  }
  // complete U for (numerically) zero singular values with Gram-Schmidt on e_j
  std::vector<char> done(n, 1);
  for (std::size_t r : missing) done[r] = 0;
  std::size_t next_basis = 0;
  for (std::size_t r : missing) {
    while (next_basis < n) {
      std::vector<double> cand(n, 0.0);
      cand[next_basis++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < n; ++o) {
          if (!done[o]) continue;
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += cand[i] * ucols[o][i];
          for (std::size_t i = 0; i < n; ++i) cand[i] -= dot * ucols[o][i];
        }
      }
      double norm = 0.0;
      for (double x : cand) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (double& x : cand) x /= norm;
        ucols[r] = std::move(cand);
        done[r] = 1;
        break;
      }
    }
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < n; ++i) out.u(i, r) = ucols[r][i];
  return out;
}

double assignment_value(const Matrix& w, const std::vector<std::size_t>& perm) {
  double total = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) total += w(i, perm[i]);
  return total;
}

std::vector<std::size_t> hungarian_max(const Matrix& w) {
  const std::size_t n = w.rows();
  if (w.cols() != n) throw ShapeError("hungarian_max: weight matrix is " + shape(w) + ", expected square");
  if (!w.all_finite()) throw ArgumentError("hungarian_max: non-finite weights");
  if (n == 0) return {};

  // Shortest augmenting path (Kuhn-Munkres) on cost = -w, 1-based with a
  // virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> col_owner(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    col_owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = col_owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -w(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[col_owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (col_owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      col_owner[j0] = col_owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> row_match(n), col_match(n);
  for (std::size_t j = 1; j <= n; ++j) {
    row_match[col_owner[j] - 1] = j - 1;
    col_match[j - 1] = col_owner[j] - 1;
  }

  // Every optimal assignment is a perfect matching on the tight edges of the
  // optimal dual. Walk rows in order and pin each to its smallest tight
  // column that still admits a perfect matching of the remaining rows.
  double scale = 0.0;
  for (double x : w.data()) scale = std::max(scale, std::abs(x));
  const double tight_tol = 1e-10 * std::max(scale, 1.0) * static_cast<double>(n);
  auto tight = [&](std::size_t i, std::size_t j) {
    return -w(i, j) - u[i + 1] - v[j + 1] <= tight_tol;
  };

  std::vector<char> row_fixed(n, 0), col_fixed(n, 0);
  std::vector<std::size_t> parent_col(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (col_fixed[j] || !tight(i, j)) continue;
      if (row_match[i] == j) break;
      // Re-route: the row currently holding j must reach column row_match[i]
      // through an alternating path over free rows/columns.
      const std::size_t start = col_match[j];
      const std::size_t target = row_match[i];
      std::vector<char> seen_col(n, 0);
      std::vector<std::size_t> parent_row_of_col(n, n);
      std::vector<std::size_t> queue{start};
      seen_col[j] = 1;
      bool found = false;
      for (std::size_t qi = 0; qi < queue.size() && !found; ++qi) {
        const std::size_t r = queue[qi];
        for (std::size_t c = 0; c < n; ++c) {
          if (seen_col[c] || col_fixed[c] || !tight(r, c)) continue;
          seen_col[c] = 1;
          parent_row_of_col[c] = r;
          if (c == target) {
            found = true;
            break;
          }
          const std::size_t next = col_match[c];
          if (next != i && !row_fixed[next]) queue.push_back(next);
        }
      }
      if (!found) continue;
      // augment back from target
      std::size_t c = target;
      while (true) {
        const std::size_t r = parent_row_of_col[c];
        const std::size_t prev_c = row_match[r];
        row_match[r] = c;
        col_match[c] = r;
        if (r == start) break;
        c = prev_c;
      }
      row_match[i] = j;
      col_match[j] = i;
      break;
    }
    row_fixed[i] = 1;
    col_fixed[row_match[i]] = 1;
  }
  return row_match;
}

}  // namespace itlumm
