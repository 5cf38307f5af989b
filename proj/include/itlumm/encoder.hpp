#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "itlumm/matrix.hpp"
#include "itlumm/partition.hpp"
#include "itlumm/rng.hpp"

namespace itlumm {

/// Buckets (prototypes) per codebook.
inline constexpr std::size_t kBuckets = 16;
/// Comparisons per encoded subvector (log2 of kBuckets).
inline constexpr std::size_t kTreeLevels = 4;

/// Balanced binary regression tree with one split dimension per level.
///
/// Level t holds 2^t thresholds, one per node; a row goes right at node n of
/// level t when row[split_dim[t]] > thresholds[t][n]. The leaf reached after
/// four levels is the bucket index.
struct HashTree {
  std::array<std::size_t, kTreeLevels> split_dim{};
  std::array<std::vector<double>, kTreeLevels> thresholds;

  friend bool operator==(const HashTree&, const HashTree&) = default;
};

/// A tree with every threshold set to `value` (mostly useful for tests).
HashTree uniform_tree(double value, std::size_t split_dim = 0);

struct HashTreeFit {
  HashTree tree;
  Matrix bucket_means;  // kBuckets × d_c
  /// Total within-bucket SSE: root, then after each level (5 entries).
  std::vector<double> level_sse;
  std::vector<std::size_t> bucket_sizes;
};

/// Greedy level-by-level tree learning. For each level every candidate split
/// dimension is scored by the summed optimal two-sided SSE over all current
/// buckets; the best dimension is kept and each bucket gets its own threshold.
/// Requires N ≥ 16 rows.
HashTreeFit learn_hash_tree(const Matrix& x_sub);

/// Four comparisons. If `comparisons` is non-null it is incremented per compare.
std::size_t encode_tree(const HashTree& tree, std::span<const double> row, std::size_t* comparisons = nullptr);

/// Exact nearest-prototype PQ encoder.
struct PqEncoder {
  Matrix prototypes;  // kBuckets × d_c

  friend bool operator==(const PqEncoder&, const PqEncoder&) = default;
};

/// 16 k-means centroids of x_sub. Requires N ≥ 16 rows.
PqEncoder learn_pq(const Matrix& x_sub, Rng& rng, std::size_t iters = 25);

/// argmin_k ‖row − prototype_k‖², ties to the smallest k.
std::size_t encode_pq(const PqEncoder& enc, std::span<const double> row);

using CodebookEncoder = std::variant<HashTree, PqEncoder>;

enum class EncoderKind { hash_tree, pq };

/// Codes of N rows for C codebooks, row-major N × C, every entry < 16.
struct Encoding {
  std::size_t rows = 0;
  std::size_t codebooks = 0;
  std::vector<std::uint8_t> codes;

  std::uint8_t operator()(std::size_t r, std::size_t c) const { return codes[r * codebooks + c]; }
  /// One-hot expansion: N × 16C.
  Matrix one_hot() const;
  /// One-hot of codebook c only: N × 16.
  Matrix one_hot(std::size_t c) const;

  friend bool operator==(const Encoding&, const Encoding&) = default;
};

std::size_t encode_row(const CodebookEncoder& enc, std::span<const double> row);

/// Encodes every row of `a` chunk by chunk according to `spec`.
Encoding encode_all(std::span<const CodebookEncoder> encoders, const Matrix& a, const PartitionSpec& spec);

}  // namespace itlumm
