#pragma once

#include <cstddef>
#include <vector>

#include "itlumm/matrix.hpp"
#include "itlumm/rng.hpp"

namespace itlumm {

/// Exact product a·b with 64-bit accumulation.
Matrix matmul(const Matrix& a, const Matrix& b);

/// aᵀ·b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// Solves min_P ‖Y − GP‖² + λ‖P − P₀‖² through the normal equations
/// (GᵀG + λI)P = GᵀY + λP₀ using a Cholesky factorization.
///
/// Throws SingularSystemError when the system matrix is not positive definite
/// (in practice: λ = 0 and G rank deficient).
Matrix ridge_solve(const Matrix& g, const Matrix& y, double lambda, const Matrix& p0);

/// Solves the symmetric positive definite system s·X = rhs. Throws
/// SingularSystemError if the Cholesky factorization breaks down.
Matrix cholesky_solve(const Matrix& s, const Matrix& rhs);

/// Minimum-norm least squares solution of g·X ≈ y (pseudo-inverse via SVD of
/// gᵀg). Singular values below `rcond`·σ_max are treated as zero.
Matrix lstsq_min_norm(const Matrix& g, const Matrix& y, double rcond = 1e-10);

struct KMeansResult {
  Matrix centroids;                 // k × cols
  std::vector<std::size_t> assignments;
  /// Objective after seeding, then after every Lloyd iteration.
  std::vector<double> objective_history;

  double objective() const { return objective_history.back(); }
};

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded to
/// the point farthest from its current centroid.
KMeansResult kmeans(const Matrix& x, std::size_t k, Rng& rng, std::size_t iters);

/// Lloyd's algorithm warm-started from `init` (k × cols).
KMeansResult kmeans_from(const Matrix& x, Matrix init, std::size_t iters);

/// Sum of squared distances of each row to its assigned centroid.
double kmeans_objective(const Matrix& x, const Matrix& centroids,
                        const std::vector<std::size_t>& assignments);

struct Svd {
  Matrix u;
  std::vector<double> s;  // non-negative, descending
  Matrix vt;
};

/// SVD of a square matrix by one-sided Jacobi rotations.
Svd svd_square(const Matrix& m);

/// Permutation π (row i → column π[i]) maximizing Σᵢ w[i][π[i]]. Among
/// optimal assignments the lexicographically smallest π is returned.
std::vector<std::size_t> hungarian_max(const Matrix& w);

/// Σᵢ w[i][π[i]].
double assignment_value(const Matrix& w, const std::vector<std::size_t>& perm);

}  // namespace itlumm
