#include "itlumm/table.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "itlumm/errors.hpp"
#include "itlumm/linalg.hpp"

namespace itlumm {

std::string_view to_string(Objective obj) { return obj == Objective::mse ? "mse" : "kld"; }

Objective parse_objective(std::string_view name) {
  if (name == "mse") return Objective::mse;
  if (name == "kld") return Objective::kld;
  throw ArgumentError("unknown objective '" + std::string(name) + "' (mse, kld)");
}

std::string_view to_string(LutMethod method) { return method == LutMethod::maddness ? "maddness" : "itlumm"; }

LutMethod parse_lut_method(std::string_view name) {
  if (name == "maddness" || name == "baseline") return LutMethod::maddness;
  if (name == "itlumm") return LutMethod::itlumm;
  throw ArgumentError("unknown table method '" + std::string(name) + "' (maddness, itlumm)");
}

void FitConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ArgumentError("fit: lambda must be finite and >= 0");
  if (!(learn_rate > 0.0) || !std::isfinite(learn_rate)) throw ArgumentError("fit: learn_rate must be > 0");
  if (objective == Objective::kld && nonlinearity != Activation::softmax) {
    throw ArgumentError("fit: the KLD objective requires a softmax nonlinearity");
  }
}

Matrix PrototypeSet::dense() const {
  Matrix p(kBuckets * blocks.size(), spec.dims());
  for (std::size_t c = 0; c < blocks.size(); ++c) {
    auto dims = spec.chunk_dims(c);
    for (std::size_t k = 0; k < kBuckets; ++k)
      for (std::size_t j = 0; j < dims.size(); ++j) p(c * kBuckets + k, dims[j]) = blocks[c](k, j);
  }
  return p;
}

double LookupTable::dequantized(std::size_t c, std::size_t k, std::size_t m) const {
  const QuantizedTable& qt = quantized.value();
  return static_cast<double>(qt.q[(c * kBuckets + k) * outputs() + m]) * qt.scale[m] + qt.offset[m];
}

void AmmOperator::validate() const {
  spec.validate();
  const std::size_t c = spec.chunks();
  if (encoders.size() != c) throw ShapeError("amm: encoder count differs from chunk count");
  if (table.t.rows() != c * kBuckets) throw ShapeError("amm: table rows differ from 16 x codebooks");
  if (bias.size() != table.outputs()) throw ShapeError("amm: bias length differs from table width");
  if (table.quantized) {
    const auto& q = *table.quantized;
    if (q.q.size() != table.t.size() || q.scale.size() != table.outputs() || q.offset.size() != table.outputs()) {
      throw ShapeError("amm: quantized table shape mismatch");
    }
  }
  for (std::size_t i = 0; i < c; ++i) {
    const std::size_t width = spec.chunk_size(i);
    if (const auto* tree = std::get_if<HashTree>(&encoders[i])) {
      for (std::size_t lvl = 0; lvl < kTreeLevels; ++lvl) {
        if (tree->split_dim[lvl] >= width) throw ShapeError("amm: split dimension outside its chunk");
        if (tree->thresholds[lvl].size() != (std::size_t{1} << lvl)) throw ShapeError("amm: bad threshold count");
      }
    } else {
      const auto& pq = std::get<PqEncoder>(encoders[i]);
      if (pq.prototypes.rows() != kBuckets || pq.prototypes.cols() != width) {
        throw ShapeError("amm: PQ prototypes do not match chunk width");
      }
    }
  }
}

PrototypeSet optimize_prototypes(const Matrix& a, const Encoding& g, const PrototypeSet& p0, double lambda) {
  if (g.rows != a.rows()) throw ShapeError("optimize_prototypes: encoding rows differ from A rows");
  if (g.codebooks != p0.blocks.size() || p0.spec.chunks() != g.codebooks) {
    throw ShapeError("optimize_prototypes: codebook counts disagree");
  }
  if (p0.spec.dims() != a.cols()) throw ShapeError("optimize_prototypes: partition does not cover A's columns");
  PrototypeSet out{p0.spec, {}};
  out.blocks.reserve(g.codebooks);
  for (std::size_t c = 0; c < g.codebooks; ++c) {
    const Matrix ac = a.gather_cols(p0.spec.chunk_dims(c));
    try {
      out.blocks.push_back(ridge_solve(g.one_hot(c), ac, lambda, p0.blocks[c]));
    } catch (const SingularSystemError&) {
      throw SingularSystemError("optimize_prototypes: codebook " + std::to_string(c) +
                                " has an empty bucket; use lambda > 0");
    }
  }
  return out;
}

LookupTable build_lut(const PrototypeSet& p, const Matrix& b) {
  if (b.rows() != p.spec.dims()) {
    throw ShapeError("build_lut: B has " + std::to_string(b.rows()) + " rows, prototypes span " +
                     std::to_string(p.spec.dims()) + " dims");
  }
  const std::size_t m = b.cols();
  LookupTable lut{Matrix(kBuckets * p.blocks.size(), m), std::nullopt};
  for (std::size_t c = 0; c < p.blocks.size(); ++c) {
    auto dims = p.spec.chunk_dims(c);
    const Matrix& blk = p.blocks[c];
    if (blk.rows() != kBuckets || blk.cols() != dims.size()) throw ShapeError("build_lut: prototype block shape");
    for (std::size_t k = 0; k < kBuckets; ++k) {
      auto dst = lut.t.row(c * kBuckets + k);
      for (std::size_t j = 0; j < dims.size(); ++j) {
        const double pj = blk(k, j);
        if (pj == 0.0) continue;
        auto brow = b.row(dims[j]);
        for (std::size_t col = 0; col < m; ++col) dst[col] += pj * brow[col];
      }
    }
  }
  return lut;
}

LutObjective::LutObjective(const Matrix& ab, const Encoding& g, std::span<const double> bias, Matrix t0,
                           const FitConfig& cfg)
    : target_(ab), g_(g), bias_(bias.begin(), bias.end()), t0_(std::move(t0)), cfg_(cfg) {
  cfg_.validate();
  if (g.rows != ab.rows()) throw ShapeError("lut objective: encoding rows differ from AB rows");
  if (bias_.size() != ab.cols()) throw ShapeError("lut objective: bias length differs from output width");
  if (t0_.rows() != g.codebooks * kBuckets || t0_.cols() != ab.cols()) {
    throw ShapeError("lut objective: regularization center has the wrong shape");
  }
  for (std::size_t r = 0; r < target_.rows(); ++r) {
    auto row = target_.row(r);
    for (std::size_t m = 0; m < row.size(); ++m) row[m] += bias_[m];
    apply_activation(cfg_.nonlinearity, row);
  }
}

double LutObjective::row_loss(std::span<const double> z, std::size_t r, std::span<double> dz) const {
  auto target = target_.row(r);
  const std::size_t m = z.size();
  if (cfg_.objective == Objective::kld) {
    // d KL / dz = softmax(z) − p
    const double kl = kl_to_softmax(target, z);
    if (!dz.empty()) {
      std::copy(z.begin(), z.end(), dz.begin());
      softmax_inplace(dz);
      for (std::size_t i = 0; i < m; ++i) dz[i] -= target[i];
    }
    return kl;
  }
  double loss = 0.0;
  switch (cfg_.nonlinearity) {
    case Activation::identity:
      for (std::size_t i = 0; i < m; ++i) {
        const double e = z[i] - target[i];
        loss += e * e;
        if (!dz.empty()) dz[i] = 2.0 * e;
      }
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < m; ++i) {
        const double out = z[i] > 0.0 ? z[i] : 0.0;
        const double e = out - target[i];
        loss += e * e;
        if (!dz.empty()) dz[i] = z[i] > 0.0 ? 2.0 * e : 0.0;
      }
      break;
    case Activation::softmax: {
      std::vector<double> s(z.begin(), z.end());
      softmax_inplace(s);
      double gs = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double e = s[i] - target[i];
        loss += e * e;
        gs += 2.0 * e * s[i];
      }
      if (!dz.empty()) {
        for (std::size_t i = 0; i < m; ++i) dz[i] = s[i] * (2.0 * (s[i] - target[i]) - gs);
      }
      break;
    }
  }
  return loss;
}

double LutObjective::value(const Matrix& t) const { return evaluate(t, nullptr); }

double LutObjective::value_and_gradient(const Matrix& t, Matrix& grad) const {
  if (grad.rows() != t.rows() || grad.cols() != t.cols()) grad = Matrix(t.rows(), t.cols());
  return evaluate(t, &grad);
}

double LutObjective::evaluate(const Matrix& t, Matrix* grad) const {
  if (t.rows() != t0_.rows() || t.cols() != t0_.cols()) throw ShapeError("lut objective: table shape");
  const bool want_grad = grad != nullptr;
  if (want_grad) std::fill(grad->data().begin(), grad->data().end(), 0.0);
  const std::size_t m = t.cols();
  std::vector<double> z(m), dz(want_grad ? m : 0);
  double loss = 0.0;
  for (std::size_t r = 0; r < g_.rows; ++r) {
    std::copy(bias_.begin(), bias_.end(), z.begin());
    for (std::size_t c = 0; c < g_.codebooks; ++c) {
      auto trow = t.row(c * kBuckets + g_(r, c));
      for (std::size_t i = 0; i < m; ++i) z[i] += trow[i];
    }
    loss += row_loss(z, r, dz);
    if (want_grad) {
      for (std::size_t c = 0; c < g_.codebooks; ++c) {
        auto grow = grad->row(c * kBuckets + g_(r, c));
        for (std::size_t i = 0; i < m; ++i) grow[i] += dz[i];
      }
    }
  }
  double reg = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double d = t.data()[i] - t0_.data()[i];
    reg += d * d;
    if (want_grad) grad->data()[i] += 2.0 * cfg_.lambda * d;
  }
  return loss + cfg_.lambda * reg;
}

namespace {

Matrix solve_linear_table(const Matrix& ab, const Encoding& g, const Matrix& t0, double lambda) {
  const Matrix onehot = g.one_hot();
  if (lambda > 0.0) return ridge_solve(onehot, ab, lambda, t0);
  return lstsq_min_norm(onehot, ab);
}

}  // namespace

LutFitReport optimize_lut_detailed(const Matrix& a, const Matrix& b, const Encoding& g, const PrototypeSet& p0,
                                   std::span<const double> bias, const FitConfig& cfg) {
  cfg.validate();
  if (a.rows() != g.rows) throw ShapeError("optimize_lut: encoding rows differ from A rows");
  if (a.cols() != b.rows()) throw ShapeError("optimize_lut: A and B inner dimensions differ");
  if (bias.size() != b.cols()) throw ShapeError("optimize_lut: bias length differs from B columns");

  const Matrix ab = matmul(a, b);
  const Matrix t0 = build_lut(p0, b).t;
  const LutObjective objective(ab, g, bias, t0, cfg);

  LutFitReport rep;
  rep.initial_objective = objective.value(t0);
  if (!std::isfinite(rep.initial_objective)) throw NumericalError("optimize_lut: objective is not finite at P0 B");

  Matrix linear = solve_linear_table(ab, g, t0, cfg.lambda);
  if (cfg.nonlinearity == Activation::identity && cfg.objective == Objective::mse) {
    rep.closed_form = true;
    rep.final_objective = objective.value(linear);
    rep.table.t = std::move(linear);
    return rep;
  }

  // Gradient descent, each table row's step scaled by 1 / (bucket count + λ).
  std::vector<double> precond(t0.rows(), 0.0);
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.codebooks; ++c) precond[c * kBuckets + g(r, c)] += 1.0;
  for (double& p : precond) p = 1.0 / std::max(p + cfg.lambda, 1.0);

  Matrix t = t0;
  double current = rep.initial_objective;
  const double linear_obj = objective.value(linear);
  if (std::isfinite(linear_obj) && linear_obj < current) {
    t = std::move(linear);
    current = linear_obj;
  }
  Matrix best = t;
  double best_obj = current;
  rep.history.push_back(current);

  Matrix grad(t.rows(), t.cols());
  for (std::size_t step = 0; step < cfg.opt_steps; ++step) {
    objective.value_and_gradient(t, grad);
    for (std::size_t r = 0; r < t.rows(); ++r) {
      const double s = cfg.learn_rate * precond[r];
      auto trow = t.row(r);
      auto grow = grad.row(r);
      for (std::size_t i = 0; i < trow.size(); ++i) trow[i] -= s * grow[i];
    }
    current = objective.value(t);
    if (!std::isfinite(current)) break;
    rep.history.push_back(current);
    if (current < best_obj) {
      best_obj = current;
      best = t;
    }
  }
  rep.final_objective = best_obj;
  rep.table.t = std::move(best);
  return rep;
}

LookupTable optimize_lut(const Matrix& a, const Matrix& b, const Encoding& g, const PrototypeSet& p0,
                         std::span<const double> bias, const FitConfig& cfg) {
  return optimize_lut_detailed(a, b, g, p0, bias, cfg).table;
}

LookupTable quantize_lut(const LookupTable& in) {
  if (!in.t.all_finite()) throw ArgumentError("quantize_lut: table has non-finite entries");
  LookupTable out{in.t, QuantizedTable{}};
  const std::size_t rows = in.t.rows(), m = in.t.cols();
  QuantizedTable& qt = *out.quantized;
  qt.q.resize(rows * m);
  qt.scale.resize(m);
  qt.offset.resize(m);
  for (std::size_t col = 0; col < m; ++col) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t r = 0; r < rows; ++r) {
      lo = std::min(lo, in.t(r, col));
      hi = std::max(hi, in.t(r, col));
    }
    if (rows == 0) lo = hi = 0.0;
    const double scale = hi > lo ? (hi - lo) / 255.0 : 1.0;
    qt.offset[col] = lo;
    qt.scale[col] = scale;
    for (std::size_t r = 0; r < rows; ++r) {
      const double v = std::round((in.t(r, col) - lo) / scale);
      qt.q[r * m + col] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return out;
}

Matrix amm_preactivation(const AmmOperator& op, const Encoding& codes, bool use_quantized) {
  const LookupTable& lut = op.table;
  const std::size_t m = lut.outputs();
  const std::size_t cb = codes.codebooks;
  if (cb != lut.codebooks()) throw ShapeError("amm: encoding has a different codebook count than the table");
  if (use_quantized && !lut.quantized) throw ArgumentError("amm: quantized evaluation requested but table is not quantized");
  Matrix out(codes.rows, m);
  if (use_quantized) {
    const QuantizedTable& qt = *lut.quantized;
    std::vector<std::uint32_t> acc(m);
    for (std::size_t r = 0; r < codes.rows; ++r) {
      std::fill(acc.begin(), acc.end(), 0u);
      for (std::size_t c = 0; c < cb; ++c) {
        const std::uint8_t* q = qt.q.data() + (c * kBuckets + codes(r, c)) * m;
        for (std::size_t i = 0; i < m; ++i) acc[i] += q[i];
      }
      auto dst = out.row(r);
      for (std::size_t i = 0; i < m; ++i) {
        dst[i] = static_cast<double>(acc[i]) * qt.scale[i] + static_cast<double>(cb) * qt.offset[i] + op.bias[i];
      }
    }
    return out;
  }
  for (std::size_t r = 0; r < codes.rows; ++r) {
    auto dst = out.row(r);
    std::copy(op.bias.begin(), op.bias.end(), dst.begin());
    for (std::size_t c = 0; c < cb; ++c) {
      auto trow = lut.t.row(c * kBuckets + codes(r, c));
      for (std::size_t i = 0; i < m; ++i) dst[i] += trow[i];
    }
  }
  return out;
}

Matrix amm_preactivation(const AmmOperator& op, const Matrix& a, bool use_quantized) {
  if (a.cols() != op.input_dim()) {
    throw ShapeError("amm: input has " + std::to_string(a.cols()) + " columns, operator expects " +
                     std::to_string(op.input_dim()));
  }
  return amm_preactivation(op, encode_all(op.encoders, a, op.spec), use_quantized);
}

Matrix amm_apply(const AmmOperator& op, const Matrix& a, bool use_quantized) {
  Matrix z = amm_preactivation(op, a, use_quantized);
  apply_activation(op.nonlinearity, z);
  return z;
}

CostModel lac_cost_model(std::size_t d, std::size_t m, std::size_t c, double ratio) {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) throw ArgumentError("cost model: ratio must be positive");
  const double dd = static_cast<double>(d), mm = static_cast<double>(m), cc = static_cast<double>(c);
  return CostModel{(4.0 * cc + cc * mm) / ratio, dd * mm, dd * mm * ratio / (4.0 + mm)};
}

EncoderFit learn_encoders(const Matrix& a, const PartitionSpec& spec, EncoderKind kind, Rng& rng) {
  if (a.cols() != spec.dims()) throw ShapeError("learn_encoders: partition does not cover A's columns");
  EncoderFit out;
  out.p0.spec = spec;
  for (std::size_t c = 0; c < spec.chunks(); ++c) {
    const Matrix sub = a.gather_cols(spec.chunk_dims(c));
    if (kind == EncoderKind::hash_tree) {
      HashTreeFit fit = learn_hash_tree(sub);
      out.encoders.emplace_back(std::move(fit.tree));
      out.p0.blocks.push_back(std::move(fit.bucket_means));
    } else {
      PqEncoder enc = learn_pq(sub, rng);
      out.p0.blocks.push_back(enc.prototypes);
      out.encoders.emplace_back(std::move(enc));
    }
  }
  return out;
}

AmmOperator fit_amm(const Matrix& a, const Matrix& b, std::span<const double> bias, Activation act,
                    const AmmFitOptions& opts, Rng& rng) {
  if (a.cols() != b.rows()) throw ShapeError("fit_amm: A and B inner dimensions differ");
  if (bias.size() != b.cols()) throw ShapeError("fit_amm: bias length differs from B columns");
  if (opts.codebooks == 0 || opts.codebooks > a.cols()) {
    throw ArgumentError("fit_amm: " + std::to_string(opts.codebooks) + " codebooks for a " +
                        std::to_string(a.cols()) + "-dimensional input");
  }
  FitConfig cfg = opts.fit;
  cfg.nonlinearity = act;
  // the KL objective only applies to softmax outputs
  if (act != Activation::softmax) cfg.objective = Objective::mse;
  cfg.validate();

  AmmOperator op;
  op.spec = make_partition(opts.partition, a, opts.codebooks, rng, kBuckets, opts.opq_iters);
  EncoderFit enc = learn_encoders(a, op.spec, opts.encoder, rng);
  const Encoding g = encode_all(enc.encoders, a, op.spec);
  op.encoders = std::move(enc.encoders);
  op.bias.assign(bias.begin(), bias.end());
  op.nonlinearity = act;
  if (opts.method == LutMethod::maddness) {
    op.table = build_lut(optimize_prototypes(a, g, enc.p0, cfg.lambda), b);
  } else {
    op.table = optimize_lut(a, b, g, enc.p0, bias, cfg);
  }
  if (opts.quantize) op.table = quantize_lut(op.table);
  return op;
}

}  // namespace itlumm
