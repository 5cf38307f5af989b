// Acceptance run: trains the reference MNIST classifier, runs the replacement
// experiments and the oracle batteries, prints one PASS/FAIL line per criterion.
#include <CLI11.hpp>

#include <unistd.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>

#include "itlumm/data_io.hpp"
#include "itlumm/errors.hpp"
#include "itlumm/experiments.hpp"
#include "itlumm/linalg.hpp"
#include "itlumm/nn.hpp"
#include "itlumm/partition.hpp"
#include "itlumm/table.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace itlumm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---- experiment criteria (1-4) ----

struct Experiments {
  double baseline = 0.0;
  std::map<std::size_t, double> full;                                // C -> replace-all accuracy
  std::map<std::pair<std::size_t, std::size_t>, double> single;      // (C, layer) -> ablation accuracy
  std::map<std::pair<std::size_t, std::string>, double> compare;     // (C, variant) -> relative accuracy
  std::size_t layers = 0;
};

Experiments run_experiments(const fs::path& data_dir, const std::string& out_dir) {
  const LabeledDataset tr = load_mnist_split(data_dir, true);
  const LabeledDataset te = load_mnist_split(data_dir, false);
  TrainConfig tcfg;
  tcfg.seed = 7;
  Rng rng(tcfg.seed);
  const std::vector<std::size_t> widths{784, 30, 30, 30, 10};
  MlpModel model = make_mlp(widths, rng);
  train(model, tr, tcfg);

  Experiments ex;
  ex.baseline = accuracy(model, te);
  ex.layers = model.layers.size();
  std::printf("reference model: exact test accuracy %.4f (%zu train / %zu test rows)\n", ex.baseline, tr.size(),
              te.size());

  ExperimentConfig cfg;
  cfg.amm.fit.objective = Objective::kld;
  cfg.codebooks = {1, 2, 4, 8, 16};
  const auto full = run_replace_all(model, tr, te, cfg, true);
  const auto abl = run_ablation(model, tr, te, cfg);
  ExperimentConfig ccfg = cfg;
  ccfg.codebooks = {2, 4, 8};
  const auto variants = default_compare_variants();
  const PartitionKind naive[] = {PartitionKind::naive};
  const auto cmp = run_compare(model, tr, te, ccfg, variants, naive);

  for (const auto& r : full)
    if (r.layer == "all") ex.full[r.codebooks] = r.accuracy;
  for (const auto& r : abl) ex.single[{r.codebooks, std::stoul(r.layer)}] = r.accuracy;
  for (const auto& r : cmp) ex.compare[{r.codebooks, r.objective}] = r.relative_accuracy;

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::vector<ExperimentRow> all(full);
    all.insert(all.end(), abl.begin(), abl.end());
    all.insert(all.end(), cmp.begin(), cmp.end());
    std::ofstream os(fs::path(out_dir) / "acceptance.csv");
    write_csv(os, all);
  }
  return ex;
}

Outcome criterion1(const Experiments& ex) {
  Outcome o{true, ""};
  double prev = -1.0;
  for (auto [c, acc] : ex.full) {
    o.detail += "C=" + std::to_string(c) + ":" + fmt("%.4f", acc) + " ";
    // monotone trend, with one point of slack for near-equal neighbours
    if (acc < prev - 0.01) o.pass = false;
    prev = acc;
  }
  if (!(ex.full.at(16) >= 0.78)) o.pass = false;
  if (!(ex.full.at(1) <= 0.48)) o.pass = false;
  o.detail += "(need C=16 >= 0.78, C=1 <= 0.48, non-decreasing)";
  return o;
}

Outcome criterion2(const Experiments& ex) {
  Outcome o{true, ""};
  const std::size_t last = ex.layers - 1;
  for (std::size_t c : {4, 8}) {
    const double first = ex.single.at({c, 0}), fin = ex.single.at({c, last});
    o.detail += "C=" + std::to_string(c) + " final " + fmt("%.4f", fin) + " vs first " + fmt("%.4f", first) + "; ";
    if (!(fin >= first)) o.pass = false;
  }
  const double gap = ex.baseline - ex.single.at({16, last});
  o.detail += "C=16 final-layer gap " + fmt("%.4f", gap) + " (need <= 0.05)";
  if (!(gap <= 0.05)) o.pass = false;
  return o;
}

Outcome criterion3(const Experiments& ex) {
  Outcome o{true, ""};
  for (std::size_t c : {4, 8, 16}) {
    double lo = INFINITY;
    for (std::size_t l = 0; l < ex.layers; ++l) lo = std::min(lo, ex.single.at({c, l}));
    const double full = ex.full.at(c);
    o.detail += "C=" + std::to_string(c) + " full " + fmt("%.4f", full) + " <= min single " + fmt("%.4f", lo) + "; ";
    if (!(full <= lo)) o.pass = false;
  }
  return o;
}

Outcome criterion4(const Experiments& ex) {
  Outcome o{true, ""};
  for (std::size_t c : {2, 4, 8}) {
    const double kld = ex.compare.at({c, "itlumm-kld"}), mse = ex.compare.at({c, "itlumm-mse"}),
                 base = ex.compare.at({c, "maddness"});
    o.detail += "C=" + std::to_string(c) + " kld " + fmt("%.4f", kld) + " mse " + fmt("%.4f", mse) + " baseline " +
                fmt("%.4f", base) + "; ";
    if (!(kld >= base - 0.01 && kld >= mse - 0.01)) o.pass = false;
  }
  return o;
}

// ---- oracle criteria (5-8) ----

Matrix pooled_rows(std::size_t n, std::size_t d, std::size_t distinct, Rng& rng) {
  const Matrix pool = oracle::random_matrix(distinct, d, rng);
  Matrix a(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) a(r, j) = pool(r % distinct, j);
  return a;
}

Outcome criterion5() {
  Rng rng(501);
  Outcome o{true, ""};
  // ridge vs Gaussian elimination on the normal equations
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t k = 1 + rng.below(12), n = k + rng.below(40), m = 1 + rng.below(5);
    const Matrix g = oracle::random_matrix(n, k, rng), y = oracle::random_matrix(n, m, rng),
                 p0 = oracle::random_matrix(k, m, rng);
    const double lambda = rep % 10 == 0 ? 0.0 : rng.uniform(1e-3, 5.0);
    const Matrix want = oracle::normal_equations(g, y, lambda, p0);
    worst = std::max(worst, oracle::max_abs_diff(ridge_solve(g, y, lambda, p0), want) / std::max(1.0, oracle::max_abs(want)));
  }
  o.detail += "ridge worst rel " + fmt("%.2e", worst) + "; ";
  if (!(worst <= 1e-9)) o.pass = false;

  // Hungarian vs brute force
  std::size_t bad = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 1 + rng.below(7);
    Matrix w = oracle::random_matrix(n, n, rng);
    if (rep % 2 == 0)
      for (double& v : w.data()) v = std::round(v * 4);  // integer weights: exact sums, many ties
    const auto p = hungarian_max(w);
    const std::set<std::size_t> cols(p.begin(), p.end());
    const double got = assignment_value(w, p), best = oracle::brute_force_assignment(w);
    const bool ok = cols.size() == n && (rep % 2 == 0 ? got == best : std::abs(got - best) <= 1e-12 * std::max(1.0, std::abs(best)));
    if (!ok) ++bad;
  }
  o.detail += "hungarian mismatches " + std::to_string(bad) + "/1000; ";
  if (bad) o.pass = false;

  // leaf ordering vs every flip of the dendrogram
  bad = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rng.below(9);
    Matrix d(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) d(i, j) = d(j, i) = rng.uniform();
    const auto dg = agglomerate(d);
    const double got = ordering_cost(leaf_order(dg, d), d);
    double best = INFINITY;
    for (const auto& cand : oracle::all_flips(dg)) best = std::min(best, ordering_cost(cand, d));
    if (std::abs(got - best) > 1e-12 * std::max(1.0, best)) ++bad;
  }
  o.detail += "leaf order mismatches " + std::to_string(bad) + "/100; ";
  if (bad) o.pass = false;

  // PQ-exact end to end
  double gap = 0.0;
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t c = 1 + rng.below(4), d = c * (1 + rng.below(4)), m = 1 + rng.below(6);
    const Matrix a = pooled_rows(80, d, 1 + rng.below(16), rng);
    const Matrix b = oracle::random_matrix(d, m, rng);
    std::vector<double> bias(m);
    for (double& v : bias) v = rng.uniform(-1.0, 1.0);
    const Activation act = std::array{Activation::identity, Activation::relu, Activation::softmax}[rep % 3];
    AmmFitOptions opts;
    opts.codebooks = c;
    opts.encoder = EncoderKind::pq;
    opts.method = rep % 2 ? LutMethod::itlumm : LutMethod::maddness;
    if (act == Activation::softmax && rep % 4 == 1) opts.fit.objective = Objective::kld;
    const AmmOperator op = fit_amm(a, b, bias, act, opts, rng);
    Matrix exact = matmul(a, b);
    for (std::size_t r = 0; r < exact.rows(); ++r)
      for (std::size_t j = 0; j < m; ++j) exact(r, j) += bias[j];
    apply_activation(act, exact);
    gap = std::max(gap, oracle::max_abs_diff(amm_apply(op, a), exact));
  }
  o.detail += "PQ-exact max gap " + fmt("%.2e", gap);
  if (!(gap <= 1e-5)) o.pass = false;
  return o;
}

Outcome criterion6() {
  Rng rng(601);
  Outcome o{true, ""};
  for (Objective obj : {Objective::mse, Objective::kld}) {
    double worst = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
      const std::size_t c = 1 + rng.below(3), d = 2 * c + rng.below(6), m = 2 + rng.below(8), n = 32 + rng.below(64);
      const Matrix a = oracle::random_matrix(n, d, rng), b = oracle::random_matrix(d, m, rng);
      std::vector<double> bias(m);
      for (double& v : bias) v = rng.uniform(-0.5, 0.5);
      const PartitionSpec spec = naive_partition(d, c);
      const EncoderFit fit = learn_encoders(a, spec, EncoderKind::hash_tree, rng);
      const Encoding g = encode_all(fit.encoders, a, spec);
      FitConfig cfg;
      cfg.objective = obj;
      cfg.nonlinearity = obj == Objective::kld ? Activation::softmax
                                               : std::array{Activation::identity, Activation::relu, Activation::softmax}[rep % 3];
      cfg.lambda = rng.uniform(0.0, 1.0);
      const Matrix t0 = build_lut(fit.p0, b).t;
      const LutObjective j(matmul(a, b), g, bias, t0, cfg);
      const Matrix t = oracle::random_matrix(t0.rows(), t0.cols(), rng);
      Matrix grad;
      j.value_and_gradient(t, grad);
      const Matrix fd = oracle::finite_difference([&](const Matrix& x) { return j.value(x); }, t);
      double diff = 0.0;
      for (std::size_t i = 0; i < grad.size(); ++i) diff += std::pow(grad.data()[i] - fd.data()[i], 2);
      const double norm = std::max(grad.frobenius_norm(), fd.frobenius_norm());
      worst = std::max(worst, std::sqrt(diff) / std::max(norm, 1e-300));
    }
    o.detail += std::string(to_string(obj)) + " worst rel " + fmt("%.2e", worst) + "; ";
    if (!(worst < 1e-4)) o.pass = false;
  }
  return o;
}

Outcome criterion7() {
  Rng rng(701);
  Outcome o{true, ""};
  double worst_deq = 0.0, worst_acc = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t c = 1 + rng.below(6), m = 1 + rng.below(8), d = c + rng.below(8);
    LookupTable t{oracle::random_matrix(16 * c, m, rng, -4.0, 4.0), std::nullopt};
    const LookupTable q = quantize_lut(t);
    for (std::size_t cc = 0; cc < c; ++cc)
      for (std::size_t k = 0; k < 16; ++k)
        for (std::size_t mm = 0; mm < m; ++mm)
          worst_deq = std::max(worst_deq, std::abs(q.dequantized(cc, k, mm) - t.t(cc * 16 + k, mm)) / (q.quantized->scale[mm] / 2));

    const Matrix a = oracle::random_matrix(40, d, rng);
    const PartitionSpec spec = naive_partition(d, c);
    EncoderFit fit = learn_encoders(a, spec, EncoderKind::hash_tree, rng);
    const AmmOperator op{spec, std::move(fit.encoders), q, std::vector<double>(m, 0.0), Activation::identity};
    const Matrix f = amm_preactivation(op, a, false), g = amm_preactivation(op, a, true);
    for (std::size_t r = 0; r < f.rows(); ++r)
      for (std::size_t mm = 0; mm < m; ++mm)
        worst_acc = std::max(worst_acc, std::abs(f(r, mm) - g(r, mm)) / (static_cast<double>(c) * q.quantized->scale[mm] / 2));
  }
  o.detail = "dequant error / (scale/2) max " + fmt("%.6f", worst_deq) + "; accumulated gap / (C*scale/2) max " +
             fmt("%.6f", worst_acc);
  o.pass = worst_deq <= 1.0 + 1e-9 && worst_acc <= 1.0 + 1e-9;
  return o;
}

MlpModel random_model(Rng& rng) {
  std::vector<std::size_t> widths{2 + rng.below(8)};
  const std::size_t depth = 1 + rng.below(3);
  for (std::size_t i = 0; i < depth; ++i) widths.push_back(1 + rng.below(7));
  widths.back() = std::max<std::size_t>(widths.back(), 2);
  MlpModel m = make_mlp(widths, rng);
  m.metadata["rep"] = std::to_string(rng.below(1000));
  const Matrix x = oracle::random_matrix(40, widths[0], rng);
  for (std::size_t l = 0; l < depth; ++l) {
    if (rng.below(2) == 0) continue;
    AmmFitOptions opts;
    opts.codebooks = 1 + rng.below(std::min<std::size_t>(widths[l], 3));
    opts.encoder = rng.below(2) ? EncoderKind::pq : EncoderKind::hash_tree;
    opts.quantize = rng.below(2) == 0;
    replace_layer(m, l, x, opts, rng);
  }
  return m;
}

Outcome criterion8(const fs::path& tmp) {
  Rng rng(801);
  Outcome o{true, ""};
  std::size_t bad_trip = 0, accepted = 0, fixtures = 0;
  fs::create_directories(tmp);
  for (int rep = 0; rep < 100; ++rep) {
    const MlpModel m = random_model(rng);
    const fs::path file = tmp / ("m" + std::to_string(rep) + ".itlm");
    save_model(m, file);
    const MlpModel back = load_model(file);
    const auto bytes = serialize_model(m);
    if (!(back == m) || serialize_model(back) != bytes || read_bytes(file) != bytes) ++bad_trip;
    fs::remove(file);

    // corruption fixtures: a sample of flips and truncations per model, all of
    // them for the first few
    const bool all = rep < 5;
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      if (!all && rng.below(8) != 0) continue;
      auto flipped = bytes;
      flipped[i] ^= static_cast<std::uint8_t>(1u << rng.below(8));
      ++fixtures;
      try {
        deserialize_model(flipped);
        ++accepted;
      } catch (const FormatError&) {
      }
      ++fixtures;
      try {
        deserialize_model(std::span(bytes).first(i));
        ++accepted;
      } catch (const FormatError&) {
      }
    }
  }
  o.detail = "round-trip failures " + std::to_string(bad_trip) + "/100; corrupted fixtures accepted " +
             std::to_string(accepted) + "/" + std::to_string(fixtures);
  o.pass = bad_trip == 0 && accepted == 0;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string data_dir, out_dir;
  bool skip_experiments = false;
  app.add_option("--data-dir", data_dir, "MNIST directory (default $ITLUMM_DATA_DIR/mnist or the bundled subset)");
  app.add_option("--out", out_dir, "write the experiment CSV here");
  app.add_flag("--skip-experiments", skip_experiments, "only the oracle criteria 5-8");
  CLI11_PARSE(app, argc, argv);

  if (data_dir.empty()) {
    const char* env = std::getenv("ITLUMM_DATA_DIR");
    data_dir = (env && *env) ? std::string(env) + "/mnist" : std::string(ITLUMM_DATA_DIR) + "/mnist";
  }

  const auto t0 = std::chrono::steady_clock::now();
  int failures = 0;
  auto report = [&](int id, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    while (!o.detail.empty() && (o.detail.back() == ' ' || o.detail.back() == ';')) o.detail.pop_back();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d: %s  %s  [t=%.0fs]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failures;
  };

  if (!skip_experiments) {
    Experiments ex;
    std::string error;
    try {
      ex = run_experiments(data_dir, out_dir);
    } catch (const std::exception& e) {
      error = e.what();
    }
    using Fn = Outcome (*)(const Experiments&);
    const Fn fns[] = {criterion1, criterion2, criterion3, criterion4};
    for (int i = 0; i < 4; ++i)
      report(i + 1, [&] {
        if (!error.empty()) throw std::runtime_error(error);
        return fns[i](ex);
      });
  }
  report(5, criterion5);
  report(6, criterion6);
  report(7, criterion7);
  const fs::path tmp = fs::temp_directory_path() / ("itlumm_acceptance_" + std::to_string(::getpid()));
  report(8, [&] { return criterion8(tmp); });
  std::error_code ec;
  fs::remove_all(tmp, ec);

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
