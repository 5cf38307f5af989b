#include "itlumm/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "itlumm/errors.hpp"
#include "itlumm/linalg.hpp"

namespace itlumm {

std::size_t layer_input_dim(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) return d->weights.rows();
  return std::get<AmmOperator>(layer).input_dim();
}

std::size_t layer_output_dim(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) return d->weights.cols();
  return std::get<AmmOperator>(layer).output_dim();
}

static Activation layer_activation(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) return d->activation;
  return std::get<AmmOperator>(layer).nonlinearity;
}

std::size_t MlpModel::input_dim() const {
  if (layers.empty()) throw ArgumentError("model has no layers");
  return layer_input_dim(layers.front());
}

std::size_t MlpModel::output_dim() const {
  if (layers.empty()) throw ArgumentError("model has no layers");
  return layer_output_dim(layers.back());
}

const DenseLayer& MlpModel::dense(std::size_t l) const {
  const auto* d = std::get_if<DenseLayer>(&layers.at(l));
  if (!d) throw ArgumentError("layer " + std::to_string(l) + " is already replaced");
  return *d;
}

DenseLayer& MlpModel::dense(std::size_t l) {
  auto* d = std::get_if<DenseLayer>(&layers.at(l));
  if (!d) throw ArgumentError("layer " + std::to_string(l) + " is already replaced");
  return *d;
}

void MlpModel::validate() const {
  if (layers.empty()) throw ArgumentError("model has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& layer = layers[l];
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      if (d->bias.size() != d->weights.cols())
        throw ShapeError("layer " + std::to_string(l) + ": bias length differs from output width");
      if (!d->weights.all_finite() || !std::all_of(d->bias.begin(), d->bias.end(), [](double v) {
            return std::isfinite(v);
          }))
        throw NumericalError("layer " + std::to_string(l) + " has non-finite parameters");
    } else {
      std::get<AmmOperator>(layer).validate();
    }
    if (l > 0 && layer_input_dim(layer) != layer_output_dim(layers[l - 1]))
      throw ShapeError("layer " + std::to_string(l) + " expects " + std::to_string(layer_input_dim(layer)) +
                       " inputs but layer " + std::to_string(l - 1) + " produces " +
                       std::to_string(layer_output_dim(layers[l - 1])));
    if (layer_activation(layer) == Activation::softmax && l + 1 != layers.size())
      throw ArgumentError("softmax is only allowed on the last layer");
  }
}

MlpModel make_mlp(std::span<const std::size_t> widths, Rng& rng) {
  if (widths.size() < 2) throw ArgumentError("make_mlp needs at least an input and an output width");
  for (std::size_t w : widths)
    if (w == 0) throw ArgumentError("make_mlp: zero layer width");
  MlpModel model;
  model.seed = rng.seed();
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t d = widths[l], m = widths[l + 1];
    const bool last = l + 2 == widths.size();
    DenseLayer layer;
    layer.activation = last ? Activation::softmax : Activation::relu;
    const double limit = last ? std::sqrt(6.0 / static_cast<double>(d + m)) : std::sqrt(6.0 / static_cast<double>(d));
    layer.weights = Matrix(d, m);
    for (double& w : layer.weights.data()) w = rng.uniform(-limit, limit);
    layer.bias.assign(m, 0.0);
    model.layers.emplace_back(std::move(layer));
  }
  return model;
}

static Matrix dense_preactivation(const DenseLayer& d, const Matrix& x) {
  Matrix z = matmul(x, d.weights);
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += d.bias[j];
  }
  return z;
}

Matrix apply_layer(const Layer& layer, const Matrix& x) {
  if (x.cols() != layer_input_dim(layer))
    throw ShapeError("layer expects " + std::to_string(layer_input_dim(layer)) + " inputs, got " +
                     std::to_string(x.cols()));
  if (const auto* d = std::get_if<DenseLayer>(&layer)) {
    Matrix z = dense_preactivation(*d, x);
    apply_activation(d->activation, z);
    return z;
  }
  const auto& op = std::get<AmmOperator>(layer);
  return amm_apply(op, x, op.table.quantized.has_value());
}

ForwardResult forward(const MlpModel& model, const Matrix& x) {
  ForwardResult out;
  Matrix cur = x;
  for (const Layer& layer : model.layers) {
    Matrix next = apply_layer(layer, cur);
    out.layer_inputs.push_back(std::move(cur));
    cur = std::move(next);
  }
  out.output = std::move(cur);
  return out;
}

Matrix forward_range(const MlpModel& model, const Matrix& x, std::size_t first, std::size_t last) {
  if (first > last || last > model.layers.size()) throw ArgumentError("forward_range: bad layer range");
  Matrix cur = x;
  for (std::size_t l = first; l < last; ++l) cur = apply_layer(model.layers[l], cur);
  return cur;
}

std::vector<std::size_t> predict(const MlpModel& model, const Matrix& x) {
  const Matrix out = forward_range(model, x, 0, model.layers.size());
  std::vector<std::size_t> pred(out.rows());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    pred[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return pred;
}

double accuracy(const MlpModel& model, const LabeledDataset& data) {
  data.validate();
  if (data.size() == 0) throw ArgumentError("accuracy of an empty dataset");
  const auto pred = predict(model, data.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

namespace {

constexpr double kProbFloor = 1e-300;

double mean_cross_entropy(const Matrix& probs, std::span<const std::size_t> labels) {
  double loss = 0.0;
  for (std::size_t r = 0; r < probs.rows(); ++r) loss -= std::log(std::max(probs(r, labels[r]), kProbFloor));
  return loss / static_cast<double>(probs.rows());
}

}  // namespace

double cross_entropy(const MlpModel& model, const LabeledDataset& data) {
  data.validate();
  if (data.size() == 0) throw ArgumentError("cross-entropy of an empty dataset");
  return mean_cross_entropy(forward_range(model, data.features, 0, model.layers.size()), data.labels);
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ArgumentError("batch size must be positive");
  if (!(learn_rate >= 0.0) || !std::isfinite(learn_rate)) throw ArgumentError("learn rate must be finite and non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must lie in [0, 1)");
  if (decay_every == 0) throw ArgumentError("decay interval must be positive");
  if (!(decay > 0.0 && decay <= 1.0)) throw ArgumentError("decay factor must lie in (0, 1]");
}

TrainReport train(MlpModel& model, const LabeledDataset& data, const TrainConfig& cfg, std::size_t first_trainable) {
  cfg.validate();
  model.validate();
  data.validate();
  const std::size_t L = model.layers.size();
  if (first_trainable >= L) throw ArgumentError("no trainable layers");
  if (data.size() == 0) throw ArgumentError("training on an empty dataset");
  if (data.features.cols() != model.input_dim())
    throw ShapeError("data has " + std::to_string(data.features.cols()) + " features, model expects " +
                     std::to_string(model.input_dim()));
  if (data.num_classes > model.output_dim()) throw ShapeError("more classes than model outputs");
  for (std::size_t l = first_trainable; l < L; ++l)
    if (model.is_replaced(l)) throw ArgumentError("layer " + std::to_string(l) + " is replaced and cannot be trained");
  if (model.dense(L - 1).activation != Activation::softmax)
    throw ArgumentError("training needs a softmax output layer");

  const Matrix inputs = forward_range(model, data.features, 0, first_trainable);
  const std::size_t n = data.size();
  const std::size_t depth = L - first_trainable;

  auto full_loss = [&]() {
    return mean_cross_entropy(forward_range(model, inputs, first_trainable, L), data.labels);
  };

  std::vector<Matrix> vel_w(depth);
  std::vector<std::vector<double>> vel_b(depth);
  for (std::size_t i = 0; i < depth; ++i) {
    const DenseLayer& d = model.dense(first_trainable + i);
    vel_w[i] = Matrix(d.weights.rows(), d.weights.cols());
    vel_b[i].assign(d.bias.size(), 0.0);
  }

  TrainReport report;
  report.loss.push_back(full_loss());
  if (!std::isfinite(report.loss.back())) throw NumericalError("initial training loss is not finite");
  std::vector<Layer> best_layers(model.layers.begin() + static_cast<std::ptrdiff_t>(first_trainable),
                                 model.layers.end());
  double best_loss = report.loss.back();

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<Matrix> acts(depth + 1);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.learn_rate * std::pow(cfg.decay, static_cast<double>((epoch - 1) / cfg.decay_every));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, stop - start);
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      acts[0] = inputs.gather_rows(batch);
      for (std::size_t i = 0; i < depth; ++i) acts[i + 1] = apply_layer(model.layers[first_trainable + i], acts[i]);

      // softmax + cross-entropy: dz = p − onehot
      Matrix dz = acts[depth];
      for (std::size_t r = 0; r < batch.size(); ++r) dz(r, data.labels[batch[r]]) -= 1.0;
      for (double& v : dz.data()) v *= inv_b;

      for (std::size_t i = depth; i-- > 0;) {
        DenseLayer& d = model.dense(first_trainable + i);
        const Matrix gw = matmul_tn(acts[i], dz);
        std::vector<double> gb(d.bias.size(), 0.0);
        for (std::size_t r = 0; r < dz.rows(); ++r)
          for (std::size_t j = 0; j < gb.size(); ++j) gb[j] += dz(r, j);
        if (i > 0) {
          Matrix da = matmul(dz, d.weights.transpose());
          const Activation prev = model.dense(first_trainable + i - 1).activation;
          if (prev == Activation::relu) {
            for (std::size_t k = 0; k < da.size(); ++k)
              if (acts[i].data()[k] <= 0.0) da.data()[k] = 0.0;
          }
          dz = std::move(da);
        }
        auto& vw = vel_w[i].data();
        auto& w = d.weights.data();
        for (std::size_t k = 0; k < w.size(); ++k) {
          vw[k] = cfg.momentum * vw[k] - lr * gw.data()[k];
          w[k] += vw[k];
        }
        for (std::size_t j = 0; j < gb.size(); ++j) {
          vel_b[i][j] = cfg.momentum * vel_b[i][j] - lr * gb[j];
          d.bias[j] += vel_b[i][j];
        }
      }
    }
    const double loss = full_loss();
    if (!std::isfinite(loss)) throw NumericalError("training diverged at epoch " + std::to_string(epoch));
    report.loss.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      std::copy(model.layers.begin() + static_cast<std::ptrdiff_t>(first_trainable), model.layers.end(),
                best_layers.begin());
    } else if (cfg.early_stop) {
      std::copy(best_layers.begin(), best_layers.end(),
                model.layers.begin() + static_cast<std::ptrdiff_t>(first_trainable));
      report.stopped_early = true;
      break;
    }
  }
  return report;
}

void replace_layer(MlpModel& model, std::size_t l, const Matrix& x, const AmmFitOptions& opts, Rng& rng) {
  if (l >= model.layers.size()) throw ArgumentError("layer index " + std::to_string(l) + " out of range");
  const DenseLayer& d = model.dense(l);
  if (opts.codebooks == 0 || opts.codebooks > d.weights.rows())
    throw ArgumentError(std::to_string(opts.codebooks) + " codebooks exceed the " + std::to_string(d.weights.rows()) +
                        " inputs of layer " + std::to_string(l));
  const Matrix a = forward_range(model, x, 0, l);
  AmmOperator op = fit_amm(a, d.weights, d.bias, d.activation, opts, rng);
  model.layers[l] = std::move(op);
}

TrainConfig default_finetune_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.learn_rate = 0.02;
  cfg.seed = seed;
  cfg.early_stop = true;
  return cfg;
}

TrainReport finetune_suffix(MlpModel& model, std::size_t l, const LabeledDataset& data, const TrainConfig& cfg) {
  if (l >= model.layers.size()) throw ArgumentError("layer index " + std::to_string(l) + " out of range");
  if (l + 1 == model.layers.size()) return {};
  TrainConfig c = cfg;
  c.early_stop = true;
  return train(model, data, c, l + 1);
}

IncrementalReport incremental_replace_all(MlpModel& model, const LabeledDataset& train_data,
                                          const LabeledDataset& eval_data, const IncrementalOptions& opts) {
  model.validate();
  IncrementalReport report;
  const Rng root(opts.seed);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (opts.on_layer_inputs) opts.on_layer_inputs(l, forward_range(model, train_data.features, 0, l));
    Rng rng = root.fork(l);
    replace_layer(model, l, train_data.features, opts.amm, rng);
    if (opts.finetune_enabled) finetune_suffix(model, l, train_data, opts.finetune);
    report.step_accuracy.push_back(accuracy(model, eval_data));
  }
  return report;
}

}  // namespace itlumm
