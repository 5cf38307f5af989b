#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "itlumm/dataset.hpp"
#include "itlumm/nn.hpp"
#include "itlumm/table.hpp"

namespace itlumm {

/// One CSV line. `layer` is a layer index, or "all" for a whole-network result.
/// `ratio` is modeled AMM cost / exact cost over the layers the row replaces,
/// `breakeven_c` the codebook count where the two are equal.
struct ExperimentRow {
  std::string experiment;
  std::string layer;
  std::size_t codebooks = 0;
  std::string partition;
  std::string objective;
  double accuracy = 0.0;
  double relative_accuracy = 0.0;
  double ratio = 0.0;
  double breakeven_c = 0.0;
};

struct ExperimentConfig {
  std::vector<std::size_t> codebooks{1, 2, 4, 8, 16};
  AmmFitOptions amm;  // codebooks is overwritten per cell
  TrainConfig finetune = default_finetune_config();
  std::uint64_t seed = 0;
  double mac_lac_ratio = 1.0;
  std::size_t jobs = 1;
};

/// A LUT-fitting variant in the classifier comparison.
struct CompareVariant {
  std::string name;
  LutMethod method = LutMethod::itlumm;
  Objective objective = Objective::mse;
};

/// maddness (ridge prototypes, T = PB), itlumm-mse, itlumm-kld.
std::vector<CompareVariant> default_compare_variants();
CompareVariant parse_compare_variant(std::string_view name);

/// Modeled cost with the layers flagged in `replaced` swapped for C-codebook AMM.
CostModel network_cost(const MlpModel& model, const std::vector<bool>& replaced, std::size_t c, double ratio);

/// Every layer on its own, from the pristine model, at every C.
/// Rows sorted by (C, layer).
std::vector<ExperimentRow> run_ablation(const MlpModel& model, const LabeledDataset& train_data,
                                        const LabeledDataset& eval_data, const ExperimentConfig& cfg);

/// Incremental replacement per C: one row per step (layer = last replaced
/// index) and a final "all" row. Experiment id is replace_all or
/// replace_all_nofinetune.
std::vector<ExperimentRow> run_replace_all(const MlpModel& model, const LabeledDataset& train_data,
                                           const LabeledDataset& eval_data, const ExperimentConfig& cfg,
                                           bool finetune);

/// Final layer only: variants × partitions × C. Rows sorted by (C, partition, variant).
std::vector<ExperimentRow> run_compare(const MlpModel& model, const LabeledDataset& train_data,
                                       const LabeledDataset& eval_data, const ExperimentConfig& cfg,
                                       std::span<const CompareVariant> variants,
                                       std::span<const PartitionKind> partitions);

const char* csv_header();
std::string to_csv(const ExperimentRow& row);
void write_csv(std::ostream& os, std::span<const ExperimentRow> rows);

/// git describe of the source tree at configure time.
const char* version_string();

}  // namespace itlumm
