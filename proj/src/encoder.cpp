#include "itlumm/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "itlumm/errors.hpp"
#include "itlumm/linalg.hpp"

namespace itlumm {

HashTree uniform_tree(double value, std::size_t split_dim) {
  HashTree t;
  for (std::size_t lvl = 0; lvl < kTreeLevels; ++lvl) {
    t.split_dim[lvl] = split_dim;
    t.thresholds[lvl].assign(std::size_t{1} << lvl, value);
  }
  return t;
}

std::size_t encode_tree(const HashTree& tree, std::span<const double> row, std::size_t* comparisons) {
  std::size_t node = 0;
  for (std::size_t lvl = 0; lvl < kTreeLevels; ++lvl) {
    const bool right = row[tree.split_dim[lvl]] > tree.thresholds[lvl][node];
    if (comparisons) ++*comparisons;
    node = 2 * node + (right ? 1 : 0);
  }
  return node;
}

namespace {

struct SplitChoice {
  double threshold = 0.0;
  double sse = 0.0;  // two-sided SSE after the split
};

// Best threshold on column `dim` for one bucket, scored by the SSE over all
// columns. `centered` holds the bucket's rows minus the bucket mean.
SplitChoice best_split(const Matrix& x, std::span<const std::size_t> rows, std::size_t dim,
                       const Matrix& centered, double bucket_sse, std::vector<std::size_t>& order,
                       std::vector<double>& prefix) {
  const std::size_t n = rows.size();
  const std::size_t d = x.cols();
  order.resize(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x(rows[a], dim) < x(rows[b], dim); });

  SplitChoice best{x(rows[order[n - 1]], dim), bucket_sse};
  double best_gain = 0.0;
  std::size_t best_i = 0;
  prefix.assign(d, 0.0);
  for (std::size_t i = 1; i < n; ++i) {
    auto r = centered.row(order[i - 1]);
    for (std::size_t j = 0; j < d; ++j) prefix[j] += r[j];
    const double lo = x(rows[order[i - 1]], dim);
    const double hi = x(rows[order[i]], dim);
    if (!(lo < hi)) continue;
    // centered sums: right side sum = -left sum
    double sq = 0.0;
    for (double v : prefix) sq += v * v;
    const double gain = sq * (1.0 / static_cast<double>(i) + 1.0 / static_cast<double>(n - i));
    if (gain > best_gain) {
      best_gain = gain;
      best_i = i;
    }
  }
  if (best_i != 0) {
    const double lo = x(rows[order[best_i - 1]], dim);
    const double hi = x(rows[order[best_i]], dim);
    double thr = lo + 0.5 * (hi - lo);
    if (!(thr < hi)) thr = lo;
    best.threshold = thr;
    best.sse = std::max(0.0, bucket_sse - best_gain);
  }
  return best;
}

std::vector<double> mean_of(const Matrix& x, std::span<const std::size_t> rows) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t r : rows)
    for (std::size_t j = 0; j < x.cols(); ++j) m[j] += x(r, j);
  for (double& v : m) v /= static_cast<double>(rows.size());
  return m;
}

}  // namespace

HashTreeFit learn_hash_tree(const Matrix& x) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n < kBuckets) {
    throw ArgumentError("learn_hash_tree: need at least 16 rows, got " + std::to_string(n));
  }
  if (d == 0) throw ArgumentError("learn_hash_tree: empty subspace");
  if (!x.all_finite()) throw ArgumentError("learn_hash_tree: non-finite input");

  HashTreeFit fit;
  std::vector<std::vector<std::size_t>> buckets(1);
  buckets[0].resize(n);
  std::iota(buckets[0].begin(), buckets[0].end(), 0);
  std::vector<std::vector<double>> means{mean_of(x, buckets[0])};
  std::vector<double> parent_thresholds;

  std::vector<std::size_t> order;
  std::vector<double> prefix;

  auto centered_and_sse = [&](const std::vector<std::size_t>& rows, const std::vector<double>& mu,
                              Matrix& centered) {
    centered = Matrix(rows.size(), d);
    double sse = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = x.row(rows[i]);
      auto dst = centered.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        dst[j] = src[j] - mu[j];
        sse += dst[j] * dst[j];
      }
    }
    return sse;
  };

  {
    Matrix c;
    fit.level_sse.push_back(centered_and_sse(buckets[0], means[0], c));
  }

  for (std::size_t lvl = 0; lvl < kTreeLevels; ++lvl) {
    const std::size_t nb = buckets.size();
    std::vector<Matrix> centered(nb);
    std::vector<double> sse(nb, 0.0);
    for (std::size_t b = 0; b < nb; ++b) {
      if (!buckets[b].empty()) sse[b] = centered_and_sse(buckets[b], means[b], centered[b]);
    }

    double best_total = std::numeric_limits<double>::infinity();
    std::size_t best_dim = 0;
    std::vector<double> best_thresholds(nb);
    std::vector<double> thresholds(nb);
    for (std::size_t dim = 0; dim < d; ++dim) {
      double total = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        if (buckets[b].empty()) {
          thresholds[b] = parent_thresholds[b / 2];
          continue;
        }
        SplitChoice s = best_split(x, buckets[b], dim, centered[b], sse[b], order, prefix);
        thresholds[b] = s.threshold;
        total += s.sse;
      }
      if (total < best_total) {
        best_total = total;
        best_dim = dim;
        best_thresholds = thresholds;
      }
    }

    fit.tree.split_dim[lvl] = best_dim;
    fit.tree.thresholds[lvl] = best_thresholds;

    std::vector<std::vector<std::size_t>> next(2 * nb);
    std::vector<std::vector<double>> next_means(2 * nb);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t r : buckets[b]) next[2 * b + (x(r, best_dim) > best_thresholds[b] ? 1 : 0)].push_back(r);
      for (std::size_t side = 0; side < 2; ++side) {
        auto& child = next[2 * b + side];
        // empty children inherit the parent's mean
        next_means[2 * b + side] = child.empty() ? means[b] : mean_of(x, child);
      }
    }
    buckets = std::move(next);
    means = std::move(next_means);
    parent_thresholds = std::move(best_thresholds);

    double level_sse = 0.0;
    for (std::size_t b = 0; b < buckets.size(); ++b) {
      if (buckets[b].empty()) continue;
      Matrix c;
      level_sse += centered_and_sse(buckets[b], means[b], c);
    }
    fit.level_sse.push_back(level_sse);
  }

  fit.bucket_means = Matrix(kBuckets, d);
  fit.bucket_sizes.resize(kBuckets);
  for (std::size_t k = 0; k < kBuckets; ++k) {
    std::copy(means[k].begin(), means[k].end(), fit.bucket_means.row(k).begin());
    fit.bucket_sizes[k] = buckets[k].size();
  }
  return fit;
}

PqEncoder learn_pq(const Matrix& x_sub, Rng& rng, std::size_t iters) {
  if (x_sub.rows() < kBuckets) {
    throw ArgumentError("learn_pq: need at least 16 rows, got " + std::to_string(x_sub.rows()));
  }
  return PqEncoder{kmeans(x_sub, kBuckets, rng, iters).centroids};
}

std::size_t encode_pq(const PqEncoder& enc, std::span<const double> row) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (std::size_t k = 0; k < enc.prototypes.rows(); ++k) {
    auto p = enc.prototypes.row(k);
    double dist = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double diff = row[j] - p[j];
      dist += diff * diff;
    }
    if (dist < best) {
      best = dist;
      arg = k;
    }
  }
  return arg;
}

std::size_t encode_row(const CodebookEncoder& enc, std::span<const double> row) {
  return std::visit(
      [&](const auto& e) -> std::size_t {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, HashTree>) {
          return encode_tree(e, row);
        } else {
          return encode_pq(e, row);
        }
      },
      enc);
}

Matrix Encoding::one_hot() const {
  Matrix g(rows, kBuckets * codebooks);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < codebooks; ++c) g(r, c * kBuckets + (*this)(r, c)) = 1.0;
  return g;
}

Matrix Encoding::one_hot(std::size_t c) const {
  Matrix g(rows, kBuckets);
  for (std::size_t r = 0; r < rows; ++r) g(r, (*this)(r, c)) = 1.0;
  return g;
}

Encoding encode_all(std::span<const CodebookEncoder> encoders, const Matrix& a, const PartitionSpec& spec) {
  if (a.cols() != spec.dims()) {
    throw ShapeError("encode_all: input has " + std::to_string(a.cols()) + " columns, partition covers " +
                     std::to_string(spec.dims()));
  }
  if (encoders.size() != spec.chunks()) {
    throw ShapeError("encode_all: " + std::to_string(encoders.size()) + " encoders for " +
                     std::to_string(spec.chunks()) + " chunks");
  }
  Encoding enc;
  enc.rows = a.rows();
  enc.codebooks = spec.chunks();
  enc.codes.resize(enc.rows * enc.codebooks);
  std::vector<double> buf;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    for (std::size_t c = 0; c < enc.codebooks; ++c) {
      auto dims = spec.chunk_dims(c);
      buf.resize(dims.size());
      for (std::size_t j = 0; j < dims.size(); ++j) buf[j] = row[dims[j]];
      enc.codes[r * enc.codebooks + c] = static_cast<std::uint8_t>(encode_row(encoders[c], buf));
    }
  }
  return enc;
}

}  // namespace itlumm
