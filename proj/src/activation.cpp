#include "itlumm/activation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "itlumm/errors.hpp"

namespace itlumm {

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity" || name == "linear") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "softmax") return Activation::softmax;
  throw ArgumentError("unknown activation '" + std::string(name) + "'");
}

void softmax_inplace(std::span<double> row) {
  if (row.empty()) return;
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

void apply_activation(Activation act, std::span<double> row) {
  switch (act) {
    case Activation::identity: return;
    case Activation::relu:
      for (double& v : row) v = v > 0.0 ? v : 0.0;
      return;
    case Activation::softmax: softmax_inplace(row); return;
  }
}

void apply_activation(Activation act, Matrix& z) {
  if (act == Activation::identity) return;
  for (std::size_t r = 0; r < z.rows(); ++r) apply_activation(act, z.row(r));
}

double kl_to_softmax(std::span<const double> p, std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double log_norm = mx + std::log(sum);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * (std::log(p[i]) - (logits[i] - log_norm));
  }
  return kl;
}

}  // namespace itlumm
