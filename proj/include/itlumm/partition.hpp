#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "itlumm/matrix.hpp"
#include "itlumm/rng.hpp"

namespace itlumm {

/// Assignment of D input dimensions to C contiguous chunks after permutation.
///
/// `perm[p]` is the original dimension placed at position p; chunk c covers
/// positions [boundaries[c], boundaries[c+1]).
struct PartitionSpec {
  std::vector<std::size_t> perm;
  std::vector<std::size_t> boundaries;

  std::size_t dims() const { return perm.size(); }
  std::size_t chunks() const { return boundaries.empty() ? 0 : boundaries.size() - 1; }
  std::size_t chunk_size(std::size_t c) const { return boundaries[c + 1] - boundaries[c]; }
  /// Original dimension indices belonging to chunk c, in position order.
  std::span<const std::size_t> chunk_dims(std::size_t c) const {
    return {perm.data() + boundaries[c], chunk_size(c)};
  }
  /// Inverse permutation: position of each original dimension.
  std::vector<std::size_t> positions() const;

  /// Throws ArgumentError unless perm is a bijection on [0, D) and the chunk
  /// sizes are contiguous, cover [0, D) and differ by at most one.
  void validate() const;

  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

enum class PartitionKind { naive, opq, r2 };

std::string_view to_string(PartitionKind kind);
PartitionKind parse_partition_kind(std::string_view name);

/// Chunk boundaries for d dims in c chunks; the first d mod c chunks are one larger.
std::vector<std::size_t> chunk_boundaries(std::size_t d, std::size_t c);

/// Identity permutation with contiguous chunks.
PartitionSpec naive_partition(std::size_t d, std::size_t c);

struct OpqResult {
  Matrix rotation;  // D × D orthogonal
  /// PQ reconstruction error ‖A·R − Â‖² at R = I, then after every alternation.
  std::vector<double> error_history;
};

/// Non-parametric OPQ: alternates per-chunk k-means on A·R with the orthogonal
/// Procrustes update R = UVᵀ from the SVD of Aᵀ·Â.
OpqResult opq_fit_detailed(const Matrix& a, std::size_t c, std::size_t k, std::size_t iters, Rng& rng);
Matrix opq_fit(const Matrix& a, std::size_t c, std::size_t k, std::size_t iters, Rng& rng);

/// Squared PQ reconstruction error of `x` with per-chunk k-means (naive chunks).
double pq_reconstruction_error(const Matrix& x, std::size_t c, std::size_t k, Rng& rng,
                               std::size_t kmeans_iters = 25);

/// Matching π (original dim i → rotated dim π[i]) maximizing Σᵢ R[i][π[i]].
std::vector<std::size_t> permutation_from_rotation(const Matrix& r);

PartitionSpec opq_partition(const Matrix& a, std::size_t c, std::size_t k, std::size_t iters, Rng& rng);

/// Squared Pearson correlation between all column pairs. Columns with zero
/// variance get R² = 0 against every other column (diagonal stays 1).
Matrix corr_squared(const Matrix& a);

/// One agglomeration step: clusters `left` and `right` merged at `height`.
/// Leaves are 0..D-1; the cluster created by merge s has id D + s.
struct Merge {
  std::size_t left;
  std::size_t right;
  double height;
  std::size_t size;
};

struct Dendrogram {
  std::size_t leaves = 0;
  std::vector<Merge> merges;  // leaves - 1 entries
};

/// Average-linkage agglomerative clustering of a distance matrix. Ties are
/// broken towards the lexicographically smallest (left id, right id) pair.
Dendrogram agglomerate(const Matrix& dist);

/// Leaf ordering consistent with the dendrogram that minimizes the summed
/// distance between consecutive leaves (exact dynamic program).
std::vector<std::size_t> leaf_order(const Dendrogram& dg, const Matrix& dist);

/// Σ dist(order[i], order[i+1]).
double ordering_cost(const std::vector<std::size_t>& order, const Matrix& dist);

/// Leaf order of the dendrogram with no flips (left subtree first).
std::vector<std::size_t> dendrogram_leaves(const Dendrogram& dg);

PartitionSpec r2_partition(const Matrix& a, std::size_t c);

/// Dispatch on kind. `k`, `opq_iters` and `rng` are only used by OPQ.
PartitionSpec make_partition(PartitionKind kind, const Matrix& a, std::size_t c, Rng& rng,
                             std::size_t k = 16, std::size_t opq_iters = 10);

}  // namespace itlumm
