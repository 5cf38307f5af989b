#include <doctest.h>

#include <cmath>

#include "itlumm/errors.hpp"
#include "itlumm/linalg.hpp"
#include "itlumm/table.hpp"
#include "support.hpp"

using namespace itlumm;

namespace {

struct Instance {
  Matrix a, b;
  std::vector<double> bias;
  PartitionSpec spec;
  std::vector<CodebookEncoder> enc;
  PrototypeSet p0;
  Encoding g;
};

Instance make_instance(std::size_t n, std::size_t d, std::size_t m, std::size_t c, Rng& rng,
                       EncoderKind kind = EncoderKind::pq) {
  Instance in;
  in.a = oracle::random_matrix(n, d, rng);
  in.b = oracle::random_matrix(d, m, rng);
  in.bias.resize(m);
  for (double& v : in.bias) v = rng.uniform(-0.5, 0.5);
  in.spec = naive_partition(d, c);
  auto fit = learn_encoders(in.a, in.spec, kind, rng);
  in.enc = std::move(fit.encoders);
  in.p0 = std::move(fit.p0);
  in.g = encode_all(in.enc, in.a, in.spec);
  return in;
}

// Rows drawn from a pool of `distinct` patterns, so every chunk has few distinct subvectors.
Matrix pooled_rows(std::size_t n, std::size_t d, std::size_t distinct, Rng& rng) {
  const Matrix pool = oracle::random_matrix(distinct, d, rng);
  Matrix a(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) a(r, j) = pool(r % distinct, j);
  return a;
}

double rel_error(const Matrix& x, const Matrix& y) {
  return frobenius_distance(x, y) / std::max({x.frobenius_norm(), y.frobenius_norm(), 1e-300});
}

}  // namespace

TEST_CASE("FitConfig validation and names") {
  FitConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.objective = Objective::kld;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg.nonlinearity = Activation::softmax;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda = -1;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  CHECK(parse_objective("kld") == Objective::kld);
  CHECK(parse_lut_method("baseline") == LutMethod::maddness);
  CHECK_THROWS_AS(parse_objective("l1"), ArgumentError);
}

TEST_CASE("optimize_prototypes") {
  Rng rng(30);
  SUBCASE("one member per bucket at lambda 0") {
    const Matrix a = oracle::random_matrix(16, 2, rng);
    const PartitionSpec spec = naive_partition(2, 1);
    Encoding g{16, 1, {}};
    for (std::size_t r = 0; r < 16; ++r) g.codes.push_back(static_cast<std::uint8_t>((r * 7) % 16));
    PrototypeSet p0{spec, {Matrix(16, 2)}};
    const auto p = optimize_prototypes(a, g, p0, 0.0);
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t j = 0; j < 2; ++j) CHECK(p.blocks[0](g(r, 0), j) == doctest::Approx(a(r, j)).epsilon(1e-12));
  }
  SUBCASE("huge lambda keeps P0") {
    auto in = make_instance(100, 6, 3, 2, rng);
    const auto p = optimize_prototypes(in.a, in.g, in.p0, 1e12);
    for (std::size_t c = 0; c < 2; ++c) CHECK(oracle::max_abs_diff(p.blocks[c], in.p0.blocks[c]) <= 1e-6);
  }
  SUBCASE("matches the per-chunk normal-equation oracle") {
    auto in = make_instance(120, 6, 3, 3, rng, EncoderKind::hash_tree);
    const auto p = optimize_prototypes(in.a, in.g, in.p0, 0.7);
    const Matrix got = p.dense();
    for (std::size_t c = 0; c < 3; ++c) {
      const auto dims = in.spec.chunk_dims(c);
      const Matrix want = oracle::normal_equations(in.g.one_hot(c), in.a.gather_cols(dims), 0.7, in.p0.blocks[c]);
      for (std::size_t k = 0; k < 16; ++k)
        for (std::size_t j = 0; j < dims.size(); ++j)
          CHECK(got(c * 16 + k, dims[j]) == doctest::Approx(want(k, j)).epsilon(1e-9));
    }
    // entries outside a prototype's own chunk stay zero
    for (std::size_t k = 0; k < 16; ++k)
      for (std::size_t dim : in.spec.chunk_dims(1)) CHECK(got(k, dim) == 0.0);
  }
  SUBCASE("empty bucket at lambda 0") {
    const Matrix a = oracle::random_matrix(20, 2, rng);
    Encoding g{20, 1, std::vector<std::uint8_t>(20, 3)};
    PrototypeSet p0{naive_partition(2, 1), {Matrix(16, 2)}};
    CHECK_THROWS_AS(optimize_prototypes(a, g, p0, 0.0), SingularSystemError);
    try {
      optimize_prototypes(a, g, p0, 0.0);
    } catch (const SingularSystemError& e) {
      CHECK(std::string(e.what()).find("lambda > 0") != std::string::npos);
    }
  }
}

TEST_CASE("build_lut") {
  Rng rng(31);
  auto in = make_instance(80, 7, 4, 3, rng);
  SUBCASE("zero weights") {
    const auto t = build_lut(in.p0, Matrix(7, 4));
    CHECK(oracle::max_abs(t.t) == 0.0);
  }
  SUBCASE("identity prototypes copy B") {
    PrototypeSet p{naive_partition(16, 1), {Matrix::identity(16)}};
    const Matrix b = oracle::random_matrix(16, 3, rng);
    CHECK(build_lut(p, b).t == b);
  }
  SUBCASE("per-chunk inner products") {
    const auto t = build_lut(in.p0, in.b);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < 16; ++k)
        for (std::size_t m = 0; m < 4; ++m) {
          double s = 0.0;
          const auto dims = in.spec.chunk_dims(c);
          for (std::size_t j = 0; j < dims.size(); ++j) s += in.p0.blocks[c](k, j) * in.b(dims[j], m);
          CHECK(t.at(c, k, m) == doctest::Approx(s).epsilon(1e-10));
        }
    CHECK(oracle::max_abs_diff(t.t, matmul(in.p0.dense(), in.b)) <= 1e-10);
  }
  SUBCASE("factorization: lookup sum equals G(PB)") {
    const auto t = build_lut(in.p0, in.b);
    AmmOperator op{in.spec, in.enc, t, std::vector<double>(4, 0.0), Activation::identity};
    const Matrix want = matmul(in.g.one_hot(), matmul(in.p0.dense(), in.b));
    CHECK(oracle::max_abs_diff(amm_apply(op, in.a), want) <= 1e-10);
  }
  CHECK_THROWS_AS(build_lut(in.p0, Matrix(6, 4)), ShapeError);
}

TEST_CASE("optimize_lut") {
  Rng rng(32);
  SUBCASE("identity at lambda 0 is the projection onto G's columns") {
    auto in = make_instance(90, 6, 4, 3, rng, EncoderKind::hash_tree);
    FitConfig cfg;
    cfg.lambda = 0.0;
    const auto rep = optimize_lut_detailed(in.a, in.b, in.g, in.p0, in.bias, cfg);
    CHECK(rep.closed_form);
    const Matrix oh = in.g.one_hot();
    const Matrix ab = matmul(in.a, in.b);
    CHECK(oracle::max_abs_diff(matmul(oh, rep.table.t), oracle::project_onto_columns(oh, ab)) <= 1e-8);
  }
  SUBCASE("identity with lambda matches the dense ridge oracle") {
    auto in = make_instance(90, 6, 4, 2, rng);
    FitConfig cfg;
    cfg.lambda = 0.5;
    const auto t = optimize_lut(in.a, in.b, in.g, in.p0, in.bias, cfg);
    const Matrix want = oracle::normal_equations(in.g.one_hot(), matmul(in.a, in.b), 0.5, build_lut(in.p0, in.b).t);
    CHECK(oracle::max_abs_diff(t.t, want) <= 1e-9 * std::max(1.0, oracle::max_abs(want)));
  }
  SUBCASE("PQ-exact data keeps a zero objective") {
    const Matrix a = pooled_rows(64, 6, 10, rng);
    const Matrix b = oracle::random_matrix(6, 5, rng);
    const std::vector<double> bias(5, 0.1);
    const auto spec = naive_partition(6, 2);
    auto fit = learn_encoders(a, spec, EncoderKind::pq, rng);
    const Encoding g = encode_all(fit.encoders, a, spec);
    for (auto act : {Activation::identity, Activation::relu, Activation::softmax}) {
      FitConfig cfg;
      cfg.nonlinearity = act;
      const auto rep = optimize_lut_detailed(a, b, g, fit.p0, bias, cfg);
      CHECK(rep.initial_objective <= 1e-9);
      CHECK(rep.final_objective <= 1e-9);
    }
    FitConfig kcfg;
    kcfg.nonlinearity = Activation::softmax;
    kcfg.objective = Objective::kld;
    CHECK(optimize_lut_detailed(a, b, g, fit.p0, bias, kcfg).final_objective <= 1e-9);
  }
  SUBCASE("never worse than P0 B and best iterate returned") {
    for (auto [act, obj] : {std::pair{Activation::relu, Objective::mse}, std::pair{Activation::softmax, Objective::mse},
                            std::pair{Activation::softmax, Objective::kld}}) {
      auto in = make_instance(120, 8, 6, 2, rng, EncoderKind::hash_tree);
      FitConfig cfg;
      cfg.nonlinearity = act;
      cfg.objective = obj;
      cfg.opt_steps = 100;
      const auto rep = optimize_lut_detailed(in.a, in.b, in.g, in.p0, in.bias, cfg);
      CHECK(rep.final_objective <= rep.initial_objective);
      for (double h : rep.history) CHECK(rep.final_objective <= h);
      const LutObjective j(matmul(in.a, in.b), in.g, in.bias, build_lut(in.p0, in.b).t, cfg);
      CHECK(j.value(rep.table.t) == doctest::Approx(rep.final_objective).epsilon(1e-12));
    }
  }
  SUBCASE("KLD requires softmax") {
    auto in = make_instance(40, 4, 3, 1, rng);
    FitConfig cfg;
    cfg.objective = Objective::kld;
    CHECK_THROWS_AS(optimize_lut(in.a, in.b, in.g, in.p0, in.bias, cfg), ArgumentError);
  }
  SUBCASE("non-finite inputs") {
    auto in = make_instance(40, 4, 3, 1, rng);
    // relu would swallow a NaN (NaN > 0 is false); softmax carries it into the loss
    in.bias[0] = std::nan("");
    FitConfig cfg;
    cfg.nonlinearity = Activation::softmax;
    CHECK_THROWS_AS(optimize_lut(in.a, in.b, in.g, in.p0, in.bias, cfg), NumericalError);
  }
}

TEST_CASE("objective gradients match central differences") {
  Rng rng(33);
  const std::pair<Activation, Objective> cases[] = {{Activation::identity, Objective::mse},
                                                    {Activation::relu, Objective::mse},
                                                    {Activation::softmax, Objective::mse},
                                                    {Activation::softmax, Objective::kld}};
  for (auto [act, obj] : cases) {
    CAPTURE(to_string(act));
    CAPTURE(to_string(obj));
    for (int rep = 0; rep < 5; ++rep) {
      auto in = make_instance(64, 8, 10, 1, rng);
      FitConfig cfg;
      cfg.nonlinearity = act;
      cfg.objective = obj;
      cfg.lambda = 0.3;
      const Matrix ab = matmul(in.a, in.b);
      const Matrix t0 = build_lut(in.p0, in.b).t;
      const LutObjective j(ab, in.g, in.bias, t0, cfg);
      const Matrix t = oracle::random_matrix(t0.rows(), t0.cols(), rng);
      Matrix grad;
      j.value_and_gradient(t, grad);
      const Matrix fd = oracle::finite_difference([&](const Matrix& x) { return j.value(x); }, t);
      CHECK(rel_error(grad, fd) < 1e-4);
    }
  }
}

TEST_CASE("objective definition") {
  Rng rng(34);
  auto in = make_instance(30, 4, 5, 2, rng);
  FitConfig cfg;
  cfg.nonlinearity = Activation::softmax;
  cfg.objective = Objective::kld;
  cfg.lambda = 0.2;
  const Matrix ab = matmul(in.a, in.b);
  const Matrix t0 = build_lut(in.p0, in.b).t;
  const Matrix t = oracle::random_matrix(t0.rows(), t0.cols(), rng);
  const LutObjective j(ab, in.g, in.bias, t0, cfg);
  // summed KL(softmax(ab + bias) || softmax(gt + bias)) plus the ridge term
  const Matrix gt = matmul(in.g.one_hot(), t);
  double want = 0.0;
  for (std::size_t r = 0; r < 30; ++r) {
    std::vector<double> p(5), q(5);
    double zp = 0, zq = 0;
    for (std::size_t m = 0; m < 5; ++m) {
      p[m] = std::exp(ab(r, m) + in.bias[m]);
      q[m] = std::exp(gt(r, m) + in.bias[m]);
      zp += p[m];
      zq += q[m];
    }
    for (std::size_t m = 0; m < 5; ++m) want += p[m] / zp * std::log((p[m] / zp) / (q[m] / zq));
  }
  want += 0.2 * std::pow(frobenius_distance(t, t0), 2);
  CHECK(j.value(t) == doctest::Approx(want).epsilon(1e-10));
  CHECK(j.value(t0) >= 0.0);
}

TEST_CASE("quantize_lut") {
  Rng rng(35);
  SUBCASE("constant table") {
    LookupTable t{Matrix(32, 3, 4.25), std::nullopt};
    const auto q = quantize_lut(t);
    for (double s : q.quantized->scale) CHECK(s == 1.0);
    for (auto v : q.quantized->q) CHECK(v == 0);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t k = 0; k < 16; ++k) CHECK(q.dequantized(c, k, 1) == 4.25);
  }
  SUBCASE("0 and 255") {
    LookupTable t{Matrix(16, 1), std::nullopt};
    for (std::size_t k = 0; k < 16; ++k) t.t(k, 0) = k % 2 ? 255.0 : 0.0;
    const auto q = quantize_lut(t);
    CHECK(q.quantized->scale[0] == 1.0);
    for (std::size_t k = 0; k < 16; ++k) {
      CHECK(q.quantized->q[k] == (k % 2 ? 255 : 0));
      CHECK(q.dequantized(0, k, 0) == t.t(k, 0));
    }
  }
  SUBCASE("random tables respect the half-step bound") {
    for (int rep = 0; rep < 100; ++rep) {
      const std::size_t c = 1 + rng.below(4), m = 1 + rng.below(6);
      LookupTable t{oracle::random_matrix(16 * c, m, rng, -3.0, 5.0), std::nullopt};
      const auto q = quantize_lut(t);
      for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t k = 0; k < 16; ++k)
          for (std::size_t mm = 0; mm < m; ++mm)
            REQUIRE(std::abs(q.dequantized(cc, k, mm) - t.t(cc * 16 + k, mm)) <= q.quantized->scale[mm] / 2 * (1 + 1e-12));
    }
  }
}

TEST_CASE("amm_apply") {
  Rng rng(36);
  SUBCASE("single row, single codebook") {
    auto in = make_instance(20, 3, 4, 1, rng);
    const auto t = build_lut(in.p0, in.b);
    for (auto act : {Activation::identity, Activation::relu, Activation::softmax}) {
      AmmOperator op{in.spec, in.enc, t, in.bias, act};
      const Matrix out = amm_apply(op, in.a.gather_rows(std::vector<std::size_t>{0}));
      std::vector<double> want(4);
      for (std::size_t m = 0; m < 4; ++m) want[m] = t.at(0, in.g(0, 0), m) + in.bias[m];
      apply_activation(act, want);
      for (std::size_t m = 0; m < 4; ++m) CHECK(out(0, m) == doctest::Approx(want[m]).epsilon(1e-14));
    }
  }
  SUBCASE("PQ-exact setup reproduces the exact layer") {
    const Matrix a = pooled_rows(100, 8, 12, rng);
    const Matrix b = oracle::random_matrix(8, 5, rng);
    std::vector<double> bias(5);
    for (double& v : bias) v = rng.uniform();
    for (auto act : {Activation::identity, Activation::relu, Activation::softmax}) {
      AmmFitOptions opts;
      opts.codebooks = 4;
      opts.encoder = EncoderKind::pq;
      opts.method = LutMethod::maddness;
      const AmmOperator op = fit_amm(a, b, bias, act, opts, rng);
      Matrix exact = matmul(a, b);
      for (std::size_t r = 0; r < exact.rows(); ++r)
        for (std::size_t m = 0; m < 5; ++m) exact(r, m) += bias[m];
      apply_activation(act, exact);
      CHECK(oracle::max_abs_diff(amm_apply(op, a), exact) <= 1e-5);
    }
  }
  SUBCASE("quantized accumulation gap") {
    for (int rep = 0; rep < 20; ++rep) {
      auto in = make_instance(50, 8, 6, 4, rng, EncoderKind::hash_tree);
      LookupTable t{oracle::random_matrix(64, 6, rng, -2.0, 2.0), std::nullopt};
      AmmOperator op{in.spec, in.enc, quantize_lut(t), in.bias, Activation::identity};
      const Matrix f = amm_preactivation(op, in.a, false);
      const Matrix q = amm_preactivation(op, in.a, true);
      for (std::size_t r = 0; r < 50; ++r)
        for (std::size_t m = 0; m < 6; ++m)
          CHECK(std::abs(f(r, m) - q(r, m)) <= 4 * op.table.quantized->scale[m] / 2 * (1 + 1e-9));
    }
  }
  SUBCASE("errors") {
    auto in = make_instance(20, 3, 4, 1, rng);
    AmmOperator op{in.spec, in.enc, build_lut(in.p0, in.b), in.bias, Activation::identity};
    CHECK_THROWS_AS(amm_apply(op, Matrix(2, 4)), ShapeError);
    CHECK_THROWS_AS(amm_apply(op, in.a, true), ArgumentError);
  }
}

TEST_CASE("fit_amm") {
  Rng rng(37);
  const Matrix a = oracle::random_matrix(200, 12, rng, 0.0, 1.0);
  const Matrix b = oracle::random_matrix(12, 5, rng);
  const std::vector<double> bias(5, 0.0);
  for (auto part : {PartitionKind::naive, PartitionKind::opq, PartitionKind::r2})
    for (auto method : {LutMethod::maddness, LutMethod::itlumm}) {
      AmmFitOptions opts;
      opts.codebooks = 3;
      opts.partition = part;
      opts.method = method;
      opts.opq_iters = 2;
      opts.quantize = true;
      opts.fit.objective = Objective::kld;  // demoted to MSE on relu layers
      const auto op = fit_amm(a, b, bias, Activation::relu, opts, rng);
      CHECK_NOTHROW(op.validate());
      CHECK(op.table.quantized.has_value());
      CHECK(amm_apply(op, a).all_finite());
    }
  AmmFitOptions opts;
  opts.codebooks = 13;
  CHECK_THROWS_AS(fit_amm(a, b, bias, Activation::relu, opts, rng), ArgumentError);
}

TEST_CASE("lac_cost_model") {
  const auto cm = lac_cost_model(30, 30, 4, 1.0);
  CHECK(cm.breakeven_c == doctest::Approx(900.0 / 34.0));
  CHECK(cm.exact_cost == 900.0);
  CHECK(cm.amm_cost == doctest::Approx((16.0 + 120.0)));
  CHECK(lac_cost_model(30, 30, 0, 1.0).amm_cost == 0.0);
  CHECK(lac_cost_model(30, 30, 0, 2.0).breakeven_c == doctest::Approx(1800.0 / 34.0));
  CHECK(lac_cost_model(30, 1000000, 1, 3.0).breakeven_c == doctest::Approx(90.0).epsilon(1e-4));
  // AMM cost equals exact cost at the breakeven point
  const auto at = lac_cost_model(64, 10, 1, 1.5);
  CHECK((4.0 * at.breakeven_c + at.breakeven_c * 10) / 1.5 == doctest::Approx(at.exact_cost));
}
