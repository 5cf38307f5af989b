#include "itlumm/partition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "itlumm/errors.hpp"
#include "itlumm/linalg.hpp"

namespace itlumm {

std::vector<std::size_t> PartitionSpec::positions() const {
  std::vector<std::size_t> pos(perm.size());
  for (std::size_t p = 0; p < perm.size(); ++p) pos[perm[p]] = p;
  return pos;
}

void PartitionSpec::validate() const {
  const std::size_t d = perm.size();
  std::vector<char> seen(d, 0);
  for (std::size_t v : perm) {
    if (v >= d || seen[v]) throw ArgumentError("partition: perm is not a permutation of [0, D)");
    seen[v] = 1;
  }
  if (boundaries.size() < 2 || boundaries.front() != 0 || boundaries.back() != d) {
    throw ArgumentError("partition: boundaries must start at 0 and end at D");
  }
  std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
  for (std::size_t c = 0; c + 1 < boundaries.size(); ++c) {
    if (boundaries[c + 1] <= boundaries[c]) throw ArgumentError("partition: empty or descending chunk");
    lo = std::min(lo, chunk_size(c));
    hi = std::max(hi, chunk_size(c));
  }
  if (hi - lo > 1) throw ArgumentError("partition: chunk sizes differ by more than one");
}

std::string_view to_string(PartitionKind kind) {
  switch (kind) {
    case PartitionKind::naive: return "naive";
    case PartitionKind::opq: return "opq";
    case PartitionKind::r2: return "r2";
  }
  return "?";
}

PartitionKind parse_partition_kind(std::string_view name) {
  if (name == "naive" || name == "pq") return PartitionKind::naive;
  if (name == "opq") return PartitionKind::opq;
  if (name == "r2") return PartitionKind::r2;
  throw ArgumentError("unknown partition strategy '" + std::string(name) + "' (naive, opq, r2)");
}

std::vector<std::size_t> chunk_boundaries(std::size_t d, std::size_t c) {
  if (c == 0 || c > d) {
    throw ArgumentError("cannot split " + std::to_string(d) + " dims into " + std::to_string(c) + " chunks");
  }
  std::vector<std::size_t> b(c + 1, 0);
  const std::size_t base = d / c, extra = d % c;
  for (std::size_t i = 0; i < c; ++i) b[i + 1] = b[i] + base + (i < extra ? 1 : 0);
  return b;
}

PartitionSpec naive_partition(std::size_t d, std::size_t c) {
  PartitionSpec spec;
  spec.boundaries = chunk_boundaries(d, c);
  spec.perm.resize(d);
  std::iota(spec.perm.begin(), spec.perm.end(), 0);
  return spec;
}

namespace {

constexpr std::size_t kOpqKmeansIters = 25;

std::vector<std::size_t> range_indices(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> idx(hi - lo);
  std::iota(idx.begin(), idx.end(), lo);
  return idx;
}

// Writes the chunk's centroid rows into `recon` (same column range as chunk).
void scatter_reconstruction(Matrix& recon, const KMeansResult& km, std::size_t lo) {
  for (std::size_t i = 0; i < recon.rows(); ++i) {
    auto cen = km.centroids.row(km.assignments[i]);
    std::copy(cen.begin(), cen.end(), recon.row(i).begin() + static_cast<std::ptrdiff_t>(lo));
  }
}

bool has_variance(const Matrix& a) {
  for (std::size_t j = 0; j < a.cols(); ++j) {
    const double first = a(0, j);
    for (std::size_t i = 1; i < a.rows(); ++i)
      if (a(i, j) != first) return true;
  }
  return false;
}

}  // namespace

OpqResult opq_fit_detailed(const Matrix& a, std::size_t c, std::size_t k, std::size_t iters, Rng& rng) {
  const std::size_t d = a.cols();
  if (a.rows() == 0 || d == 0) throw ArgumentError("opq_fit: empty input");
  if (k == 0 || k > a.rows()) {
    throw ArgumentError("opq_fit: k = " + std::to_string(k) + " invalid for " + std::to_string(a.rows()) + " rows");
  }
  if (!has_variance(a)) throw ArgumentError("opq_fit: input has zero variance");
  const auto bounds = chunk_boundaries(d, c);

  OpqResult res{Matrix::identity(d), {}};
  Matrix rotated = a;
  Matrix recon(a.rows(), d);
  std::vector<Matrix> centroids(c);
  double err = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    auto cols = range_indices(bounds[ch], bounds[ch + 1]);
    auto km = kmeans(rotated.gather_cols(cols), k, rng, kOpqKmeansIters);
    err += km.objective();
    scatter_reconstruction(recon, km, bounds[ch]);
    centroids[ch] = std::move(km.centroids);
  }
  res.error_history.push_back(err);

  for (std::size_t it = 0; it < iters; ++it) {
    // orthogonal Procrustes: argmin_R ‖A R − Â‖ over orthogonal R
    Svd svd = svd_square(matmul_tn(a, recon));
    res.rotation = matmul(svd.u, svd.vt);
    rotated = matmul(a, res.rotation);
    err = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      auto cols = range_indices(bounds[ch], bounds[ch + 1]);
      auto km = kmeans_from(rotated.gather_cols(cols), centroids[ch], kOpqKmeansIters);
      err += km.objective();
      scatter_reconstruction(recon, km, bounds[ch]);
      centroids[ch] = std::move(km.centroids);
    }
    res.error_history.push_back(err);
  }
  return res;
}

Matrix opq_fit(const Matrix& a, std::size_t c, std::size_t k, std::size_t iters, Rng& rng) {
  return opq_fit_detailed(a, c, k, iters, rng).rotation;
}

double pq_reconstruction_error(const Matrix& x, std::size_t c, std::size_t k, Rng& rng,
                               std::size_t kmeans_iters) {
  const auto bounds = chunk_boundaries(x.cols(), c);
  double err = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    auto cols = range_indices(bounds[ch], bounds[ch + 1]);
    err += kmeans(x.gather_cols(cols), k, rng, kmeans_iters).objective();
  }
  return err;
}

std::vector<std::size_t> permutation_from_rotation(const Matrix& r) { return hungarian_max(r); }

PartitionSpec opq_partition(const Matrix& a, std::size_t c, std::size_t k, std::size_t iters, Rng& rng) {
  const Matrix rot = opq_fit(a, c, k, iters, rng);
  const auto match = permutation_from_rotation(rot);
  PartitionSpec spec;
  spec.boundaries = chunk_boundaries(a.cols(), c);
  spec.perm.resize(match.size());
  // original dim i lands where its matched rotated dim sits
  for (std::size_t i = 0; i < match.size(); ++i) spec.perm[match[i]] = i;
  return spec;
}

Matrix corr_squared(const Matrix& a) {
  const std::size_t n = a.rows(), d = a.cols();
  if (n < 2) throw ArgumentError("corr_squared: need at least 2 rows");
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += a(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  Matrix centered(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered(i, j) = a(i, j) - mean[j];
  Matrix cov = matmul_tn(centered, centered);

  double max_var = 0.0;
  for (std::size_t j = 0; j < d; ++j) max_var = std::max(max_var, cov(j, j));
  const double dead = 1e-12 * max_var;
  Matrix r2(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    r2(i, i) = 1.0;
    for (std::size_t j = i + 1; j < d; ++j) {
      double v = 0.0;
      if (cov(i, i) > dead && cov(j, j) > dead) {
        v = cov(i, j) * cov(i, j) / (cov(i, i) * cov(j, j));
        v = std::clamp(v, 0.0, 1.0);
      }
      r2(i, j) = r2(j, i) = v;
    }
  }
  return r2;
}

namespace {

void check_distance_matrix(const Matrix& dist) {
  const std::size_t d = dist.rows();
  if (dist.cols() != d) throw ShapeError("distance matrix must be square");
  if (!dist.all_finite()) throw ArgumentError("distance matrix has non-finite entries");
  double scale = 0.0;
  for (double v : dist.data()) scale = std::max(scale, std::abs(v));
  const double tol = 1e-12 * std::max(scale, 1.0);
  for (std::size_t i = 0; i < d; ++i) {
    if (std::abs(dist(i, i)) > tol) throw ArgumentError("distance matrix diagonal must be zero");
    for (std::size_t j = 0; j < d; ++j) {
      if (dist(i, j) < 0.0) throw ArgumentError("distance matrix has negative entries");
      if (std::abs(dist(i, j) - dist(j, i)) > tol) throw ArgumentError("distance matrix is not symmetric");
    }
  }
}

}  // namespace

Dendrogram agglomerate(const Matrix& dist) {
  check_distance_matrix(dist);
  const std::size_t d = dist.rows();
  Dendrogram dg;
  dg.leaves = d;
  if (d < 2) return dg;

  Matrix work = dist;  // indexed by slot
  std::vector<std::size_t> id(d), size(d, 1);
  std::iota(id.begin(), id.end(), 0);
  std::vector<char> active(d, 1);

  for (std::size_t step = 0; step + 1 < d; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t sa = 0, sb = 0;
    std::pair<std::size_t, std::size_t> best_ids{std::numeric_limits<std::size_t>::max(), 0};
    for (std::size_t i = 0; i < d; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < d; ++j) {
        if (!active[j]) continue;
        const double v = work(i, j);
        const std::pair<std::size_t, std::size_t> ids{std::min(id[i], id[j]), std::max(id[i], id[j])};
        // Lance-Williams updates leave rounding residue on equal linkages
        const double tol = 1e-12 * std::max(1.0, std::abs(v));
        if (v < best - tol || (std::abs(v - best) <= tol && ids < best_ids)) {
          best = v;
          best_ids = ids;
          sa = i;
          sb = j;
        }
      }
    }
    const std::size_t na = size[sa], nb = size[sb];
    dg.merges.push_back({best_ids.first, best_ids.second, best, na + nb});
    // Lance-Williams update for average linkage; the merged cluster takes slot sa
    for (std::size_t k = 0; k < d; ++k) {
      if (!active[k] || k == sa || k == sb) continue;
      const double v = (static_cast<double>(na) * work(sa, k) + static_cast<double>(nb) * work(sb, k)) /
                       static_cast<double>(na + nb);
      work(sa, k) = work(k, sa) = v;
    }
    active[sb] = 0;
    id[sa] = d + step;
    size[sa] = na + nb;
  }
  return dg;
}

std::vector<std::size_t> dendrogram_leaves(const Dendrogram& dg) {
  const std::size_t d = dg.leaves;
  if (d == 0) return {};
  if (dg.merges.size() + 1 != d) throw ArgumentError("dendrogram must have exactly D-1 merges");
  std::vector<std::size_t> out;
  out.reserve(d);
  std::vector<std::size_t> stack{d == 1 ? 0 : 2 * d - 2};
  while (!stack.empty()) {
    const std::size_t node = stack.back();
    stack.pop_back();
    if (node < d) {
      out.push_back(node);
    } else {
      const Merge& m = dg.merges[node - d];
      stack.push_back(m.right);
      stack.push_back(m.left);
    }
  }
  return out;
}

double ordering_cost(const std::vector<std::size_t>& order, const Matrix& dist) {
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < order.size(); ++i) total += dist(order[i], order[i + 1]);
  return total;
}

namespace {

// Optimal leaf ordering DP. best(a, b) is stored at the lowest common
// ancestor of leaves a and b: the cheapest ordering of that subtree which
// starts at a and ends at b.
class LeafOrderer {
 public:
  LeafOrderer(const Dendrogram& dg, const Matrix& dist)
      : dg_(dg), dist_(dist), d_(dg.leaves), canon_(dendrogram_leaves(dg)),
        pos_(d_), lo_(2 * d_ - 1), hi_(2 * d_ - 1),
        cost_(d_, d_, std::numeric_limits<double>::infinity()),
        via_left_(d_ * d_, 0), via_right_(d_ * d_, 0) {
    for (std::size_t p = 0; p < d_; ++p) pos_[canon_[p]] = p;
    for (std::size_t leaf = 0; leaf < d_; ++leaf) {
      lo_[leaf] = pos_[leaf];
      hi_[leaf] = pos_[leaf] + 1;
      cost_(leaf, leaf) = 0.0;
    }
    for (std::size_t s = 0; s < dg_.merges.size(); ++s) {
      const Merge& m = dg_.merges[s];
      lo_[d_ + s] = std::min(lo_[m.left], lo_[m.right]);
      hi_[d_ + s] = std::max(hi_[m.left], hi_[m.right]);
    }
  }

  std::vector<std::size_t> solve() {
    for (std::size_t s = 0; s < dg_.merges.size(); ++s) combine(d_ + s);
    const std::size_t root = 2 * d_ - 2;
    const Merge& m = dg_.merges.back();
    double best = std::numeric_limits<double>::infinity();
    std::size_t first = 0, last = 0;
    bool have = false;
    // equal-cost orderings (e.g. an ordering and its reverse) resolve to the
    // smallest (first, last) pair
    auto consider = [&](std::size_t a, std::size_t b) {
      const double c = cost_(a, b);
      const double eps = have ? 1e-12 * std::max(1.0, std::abs(best)) : 0.0;
      if (!have || c < best - eps || (c <= best + eps && std::pair(a, b) < std::pair(first, last))) {
        best = have ? std::min(best, c) : c;
        first = a;
        last = b;
        have = true;
      }
    };
    for (std::size_t a : leaves(m.left))
      for (std::size_t b : leaves(m.right)) {
        consider(a, b);
        consider(b, a);
      }
    std::vector<std::size_t> out;
    out.reserve(d_);
    build(root, first, last, out);
    return out;
  }

 private:
  std::span<const std::size_t> leaves(std::size_t node) const {
    return {canon_.data() + lo_[node], hi_[node] - lo_[node]};
  }
  bool contains(std::size_t node, std::size_t leaf) const {
    return lo_[node] <= pos_[leaf] && pos_[leaf] < hi_[node];
  }
  // Leaves that can close an ordering of `node` opened at `leaf`.
  std::span<const std::size_t> partners(std::size_t node, std::size_t leaf) const {
    if (node < d_) return leaves(node);
    const Merge& m = dg_.merges[node - d_];
    return contains(m.left, leaf) ? leaves(m.right) : leaves(m.left);
  }

  void combine(std::size_t node) {
    const Merge& m = dg_.merges[node - d_];
    const auto left = leaves(m.left);
    const auto right = leaves(m.right);
    std::vector<double> reach(right.size());
    std::vector<std::size_t> reach_arg(right.size());
    for (std::size_t a : left) {
      // cheapest way to finish the left part at some k and step to m
      const auto ends = partners(m.left, a);
      for (std::size_t r = 0; r < right.size(); ++r) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t k : ends) {
          const double v = cost_(a, k) + dist_(k, right[r]);
          if (v < best) {
            best = v;
            arg = k;
          }
        }
        reach[r] = best;
        reach_arg[r] = arg;
      }
      for (std::size_t b : right) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg_k = 0, arg_m = 0;
        for (std::size_t mm : partners(m.right, b)) {
          const std::size_t r = pos_[mm] - lo_[m.right];
          const double v = reach[r] + cost_(mm, b);
          if (v < best) {
            best = v;
            arg_k = reach_arg[r];
            arg_m = mm;
          }
        }
        cost_(a, b) = cost_(b, a) = best;
        via_left_[a * d_ + b] = arg_k;
        via_right_[a * d_ + b] = arg_m;
      }
    }
  }

  void build(std::size_t node, std::size_t first, std::size_t last, std::vector<std::size_t>& out) const {
    if (node < d_) {
      out.push_back(first);
      return;
    }
    const Merge& m = dg_.merges[node - d_];
    if (contains(m.left, first)) {
      build(m.left, first, via_left_[first * d_ + last], out);
      build(m.right, via_right_[first * d_ + last], last, out);
    } else {
      std::vector<std::size_t> tmp;
      build(node, last, first, tmp);
      out.insert(out.end(), tmp.rbegin(), tmp.rend());
    }
  }

  const Dendrogram& dg_;
  const Matrix& dist_;
  std::size_t d_;
  std::vector<std::size_t> canon_, pos_, lo_, hi_;
  Matrix cost_;
  std::vector<std::size_t> via_left_, via_right_;
};

}  // namespace

std::vector<std::size_t> leaf_order(const Dendrogram& dg, const Matrix& dist) {
  if (dist.rows() != dg.leaves || dist.cols() != dg.leaves) {
    throw ShapeError("leaf_order: dendrogram has " + std::to_string(dg.leaves) + " leaves but distance matrix is " +
                     std::to_string(dist.rows()) + "x" + std::to_string(dist.cols()));
  }
  if (dg.leaves == 0) return {};
  if (dg.merges.size() + 1 != dg.leaves) throw ArgumentError("dendrogram must have exactly D-1 merges");
  if (dg.leaves == 1) return {0};
  return LeafOrderer(dg, dist).solve();
}

PartitionSpec r2_partition(const Matrix& a, std::size_t c) {
  if (a.rows() < 2) throw ArgumentError("r2_partition: need at least 2 rows");
  PartitionSpec spec;
  spec.boundaries = chunk_boundaries(a.cols(), c);
  Matrix dist = corr_squared(a);
  for (std::size_t i = 0; i < dist.rows(); ++i)
    for (std::size_t j = 0; j < dist.cols(); ++j) dist(i, j) = i == j ? 0.0 : 1.0 - dist(i, j);
  spec.perm = leaf_order(agglomerate(dist), dist);
  return spec;
}

PartitionSpec make_partition(PartitionKind kind, const Matrix& a, std::size_t c, Rng& rng, std::size_t k,
                             std::size_t opq_iters) {
  switch (kind) {
    case PartitionKind::naive: return naive_partition(a.cols(), c);
    case PartitionKind::opq: return opq_partition(a, c, std::min(k, a.rows()), opq_iters, rng);
    case PartitionKind::r2: return r2_partition(a, c);
  }
  throw ArgumentError("unknown partition kind");
}

}  // namespace itlumm
