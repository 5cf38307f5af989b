#include "itlumm/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <functional>
#include <mutex>
#include <ostream>
#include <thread>

#include "itlumm/errors.hpp"

#ifndef ITLUMM_VERSION
#define ITLUMM_VERSION "unknown"
#endif

namespace itlumm {

namespace {

// Runs fn(0..n-1) on up to `jobs` threads. Cells write to their own slot, so
// the output order never depends on scheduling.
void run_cells(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

void check_inputs(const MlpModel& model, const LabeledDataset& train_data, const LabeledDataset& eval_data,
                  const ExperimentConfig& cfg) {
  model.validate();
  train_data.validate();
  eval_data.validate();
  if (train_data.features.cols() != model.input_dim() || eval_data.features.cols() != model.input_dim()) {
    throw ShapeError("dataset has " + std::to_string(train_data.features.cols()) + " features, model expects " +
                     std::to_string(model.input_dim()));
  }
  if (eval_data.size() == 0) throw ArgumentError("evaluation set is empty");
  if (cfg.codebooks.empty()) throw ArgumentError("no codebook counts given");
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    if (model.is_replaced(l)) throw ArgumentError("experiments need an exact model; layer " + std::to_string(l) + " is already replaced");
}

double checked_relative(double acc, double base) { return base > 0.0 ? acc / base : 0.0; }

ExperimentRow make_row(std::string experiment, std::string layer, std::size_t c, PartitionKind part,
                       std::string objective, double acc, double base, const CostModel& cost) {
  return ExperimentRow{std::move(experiment), std::move(layer), c, std::string(to_string(part)),
                       std::move(objective), acc, checked_relative(acc, base),
                       cost.amm_cost / cost.exact_cost, cost.breakeven_c};
}

}  // namespace

std::vector<CompareVariant> default_compare_variants() {
  return {{"maddness", LutMethod::maddness, Objective::mse},
          {"itlumm-mse", LutMethod::itlumm, Objective::mse},
          {"itlumm-kld", LutMethod::itlumm, Objective::kld}};
}

CompareVariant parse_compare_variant(std::string_view name) {
  for (auto& v : default_compare_variants())
    if (v.name == name) return v;
  if (name == "baseline") return default_compare_variants()[0];
  if (name == "mse") return default_compare_variants()[1];
  if (name == "kld") return default_compare_variants()[2];
  throw ArgumentError("unknown variant '" + std::string(name) + "' (maddness, itlumm-mse, itlumm-kld)");
}

CostModel network_cost(const MlpModel& model, const std::vector<bool>& replaced, std::size_t c, double ratio) {
  if (replaced.size() != model.layers.size()) throw ShapeError("network_cost: one flag per layer");
  double amm = 0.0, exact = 0.0, replaced_exact = 0.0, replaced_amm = 0.0;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const CostModel m = lac_cost_model(layer_input_dim(model.layers[l]), layer_output_dim(model.layers[l]), c, ratio);
    exact += m.exact_cost;
    amm += replaced[l] ? m.amm_cost : m.exact_cost;
    if (replaced[l]) {
      replaced_exact += m.exact_cost;
      replaced_amm += m.amm_cost;
    }
  }
  // AMM cost is linear in C
  const double breakeven = replaced_amm > 0.0 ? static_cast<double>(c) * replaced_exact / replaced_amm : 0.0;
  return CostModel{amm, exact, breakeven};
}

std::vector<ExperimentRow> run_ablation(const MlpModel& model, const LabeledDataset& train_data,
                                        const LabeledDataset& eval_data, const ExperimentConfig& cfg) {
  check_inputs(model, train_data, eval_data, cfg);
  const std::size_t layers = model.layers.size();
  const double base = accuracy(model, eval_data);
  std::vector<ExperimentRow> rows(cfg.codebooks.size() * layers);
  run_cells(rows.size(), cfg.jobs, [&](std::size_t cell) {
    const std::size_t c = cfg.codebooks[cell / layers], l = cell % layers;
    MlpModel m = model;
    AmmFitOptions opts = cfg.amm;
    opts.codebooks = c;
    // same stream as step l of incremental replacement
    Rng rng = Rng(cfg.seed).fork(l);
    replace_layer(m, l, train_data.features, opts, rng);
    const CostModel lc = lac_cost_model(layer_input_dim(model.layers[l]), layer_output_dim(model.layers[l]), c,
                                        cfg.mac_lac_ratio);
    rows[cell] = make_row("ablate", std::to_string(l), c, opts.partition, std::string(to_string(opts.fit.objective)),
                          accuracy(m, eval_data), base, lc);
  });
  std::stable_sort(rows.begin(), rows.end(), [](const ExperimentRow& a, const ExperimentRow& b) {
    return a.codebooks < b.codebooks;
  });
  return rows;
}

std::vector<ExperimentRow> run_replace_all(const MlpModel& model, const LabeledDataset& train_data,
                                           const LabeledDataset& eval_data, const ExperimentConfig& cfg,
                                           bool finetune) {
  check_inputs(model, train_data, eval_data, cfg);
  const std::size_t layers = model.layers.size();
  const double base = accuracy(model, eval_data);
  const std::string id = finetune ? "replace_all" : "replace_all_nofinetune";
  std::vector<std::vector<ExperimentRow>> per_c(cfg.codebooks.size());
  run_cells(per_c.size(), cfg.jobs, [&](std::size_t i) {
    const std::size_t c = cfg.codebooks[i];
    MlpModel m = model;
    IncrementalOptions opts;
    opts.amm = cfg.amm;
    opts.amm.codebooks = c;
    opts.finetune = cfg.finetune;
    opts.finetune_enabled = finetune;
    opts.seed = cfg.seed;
    const auto rep = incremental_replace_all(m, train_data, eval_data, opts);
    const std::string obj(to_string(opts.amm.fit.objective));
    std::vector<bool> flags(layers, false);
    for (std::size_t l = 0; l < layers; ++l) {
      flags[l] = true;
      per_c[i].push_back(make_row(id, std::to_string(l), c, opts.amm.partition, obj, rep.step_accuracy[l], base,
                                  network_cost(model, flags, c, cfg.mac_lac_ratio)));
    }
    ExperimentRow all = per_c[i].back();
    all.layer = "all";
    per_c[i].push_back(std::move(all));
  });
  std::vector<ExperimentRow> rows;
  for (auto& v : per_c) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

std::vector<ExperimentRow> run_compare(const MlpModel& model, const LabeledDataset& train_data,
                                       const LabeledDataset& eval_data, const ExperimentConfig& cfg,
                                       std::span<const CompareVariant> variants,
                                       std::span<const PartitionKind> partitions) {
  check_inputs(model, train_data, eval_data, cfg);
  if (variants.empty() || partitions.empty()) throw ArgumentError("compare: need at least one variant and partition");
  const std::size_t last = model.layers.size() - 1;
  const double base = accuracy(model, eval_data);
  // the classifier's inputs do not change between cells
  const Matrix inputs = forward_range(model, train_data.features, 0, last);
  const std::size_t nv = variants.size(), np = partitions.size();
  std::vector<ExperimentRow> rows(cfg.codebooks.size() * np * nv);
  run_cells(rows.size(), cfg.jobs, [&](std::size_t cell) {
    const std::size_t c = cfg.codebooks[cell / (np * nv)];
    const PartitionKind part = partitions[(cell / nv) % np];
    const CompareVariant& var = variants[cell % nv];
    AmmFitOptions opts = cfg.amm;
    opts.codebooks = c;
    opts.partition = part;
    opts.method = var.method;
    opts.fit.objective = var.objective;
    Rng rng = Rng(cfg.seed).fork(last);
    const DenseLayer& d = model.dense(last);
    AmmOperator op = fit_amm(inputs, d.weights, d.bias, d.activation, opts, rng);
    MlpModel m = model;
    m.layers[last] = std::move(op);
    const CostModel lc = lac_cost_model(layer_input_dim(model.layers[last]), layer_output_dim(model.layers[last]), c,
                                        cfg.mac_lac_ratio);
    rows[cell] = make_row("compare", std::to_string(last), c, part, var.name, accuracy(m, eval_data), base, lc);
  });
  return rows;
}

const char* csv_header() {
  return "experiment,layer,codebooks,partition,objective,accuracy,relative_accuracy,ratio,breakeven_c";
}

std::string to_csv(const ExperimentRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, ",%zu,", r.codebooks);
  std::string out = r.experiment + "," + r.layer + buf + r.partition + "," + r.objective;
  std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6g,%.6g", r.accuracy, r.relative_accuracy, r.ratio, r.breakeven_c);
  return out + buf;
}

void write_csv(std::ostream& os, std::span<const ExperimentRow> rows) {
  os << csv_header() << '\n';
  for (const auto& r : rows) os << to_csv(r) << '\n';
}

const char* version_string() { return ITLUMM_VERSION; }

}  // namespace itlumm
