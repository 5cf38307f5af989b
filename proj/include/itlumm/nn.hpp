#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "itlumm/activation.hpp"
#include "itlumm/dataset.hpp"
#include "itlumm/matrix.hpp"
#include "itlumm/rng.hpp"
#include "itlumm/table.hpp"

namespace itlumm {

/// Exact layer σ(x·W + b).
struct DenseLayer {
  Matrix weights;  // D_l × M_l
  std::vector<double> bias;
  Activation activation = Activation::relu;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

using Layer = std::variant<DenseLayer, AmmOperator>;

struct MlpModel {
  std::vector<Layer> layers;
  std::uint64_t seed = 0;
  /// Free-form provenance (training config, flags, ...). Serialized verbatim.
  std::map<std::string, std::string> metadata;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  bool is_replaced(std::size_t l) const { return std::holds_alternative<AmmOperator>(layers.at(l)); }
  const DenseLayer& dense(std::size_t l) const;
  DenseLayer& dense(std::size_t l);
  /// Chained dimensions, finite parameters, softmax only on the last layer.
  void validate() const;

  friend bool operator==(const MlpModel&, const MlpModel&) = default;
};

/// widths = {input, hidden..., classes}; ReLU hidden layers and a softmax
/// output. He-uniform weights for ReLU layers, Glorot-uniform for the output.
MlpModel make_mlp(std::span<const std::size_t> widths, Rng& rng);

std::size_t layer_input_dim(const Layer& layer);
std::size_t layer_output_dim(const Layer& layer);
Matrix apply_layer(const Layer& layer, const Matrix& x);

struct ForwardResult {
  Matrix output;
  std::vector<Matrix> layer_inputs;  // input of every layer, in order
};

ForwardResult forward(const MlpModel& model, const Matrix& x);
/// Output only, through layers [first, last).
Matrix forward_range(const MlpModel& model, const Matrix& x, std::size_t first, std::size_t last);

std::vector<std::size_t> predict(const MlpModel& model, const Matrix& x);
double accuracy(const MlpModel& model, const LabeledDataset& data);
/// Mean cross-entropy of the model's output probabilities.
double cross_entropy(const MlpModel& model, const LabeledDataset& data);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double learn_rate = 0.1;
  double momentum = 0.9;
  std::size_t decay_every = 5;  // epochs between learn-rate halvings
  double decay = 0.5;
  std::uint64_t seed = 0;
  /// Stop (restoring the best parameters) as soon as an epoch raises the loss.
  bool early_stop = false;

  void validate() const;
};

struct TrainReport {
  /// Mean training cross-entropy before training, then after each epoch.
  std::vector<double> loss;
  bool stopped_early = false;
};

/// Mini-batch SGD with momentum on the cross-entropy loss. Layers before
/// `first_trainable` are frozen (their outputs are computed once); every
/// layer from `first_trainable` on must be dense. The last layer must be
/// softmax. Throws NumericalError if the loss becomes non-finite.
TrainReport train(MlpModel& model, const LabeledDataset& data, const TrainConfig& cfg,
                  std::size_t first_trainable = 0);

/// Replaces dense layer l with an AMM operator fit on the inputs that reach
/// layer l through the current (possibly partially replaced) model.
void replace_layer(MlpModel& model, std::size_t l, const Matrix& x, const AmmFitOptions& opts, Rng& rng);

/// Freezes layers 0..l and trains layers l+1.. with early stopping. No-op for
/// the last layer.
TrainReport finetune_suffix(MlpModel& model, std::size_t l, const LabeledDataset& data, const TrainConfig& cfg);

/// Suffix fine-tuning budget: 5 epochs at learn rate 0.02, early stopping.
TrainConfig default_finetune_config(std::uint64_t seed = 0);

struct IncrementalOptions {
  AmmFitOptions amm;
  TrainConfig finetune = default_finetune_config();
  bool finetune_enabled = true;
  std::uint64_t seed = 0;
  /// Called with (layer, inputs used to fit that layer) at every step.
  std::function<void(std::size_t, const Matrix&)> on_layer_inputs;
};

struct IncrementalReport {
  std::vector<double> step_accuracy;  // evaluation accuracy after each step
};

/// Layer by layer from the input: replace layer l, then fine-tune l+1.. .
IncrementalReport incremental_replace_all(MlpModel& model, const LabeledDataset& train_data,
                                          const LabeledDataset& eval_data, const IncrementalOptions& opts);

}  // namespace itlumm
