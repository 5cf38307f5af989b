#pragma once

#include <span>
#include <string_view>

#include "itlumm/matrix.hpp"

namespace itlumm {

/// Elementwise (relu, identity) or row-wise (softmax) output nonlinearity.
enum class Activation { identity, relu, softmax };

std::string_view to_string(Activation act);
Activation parse_activation(std::string_view name);

/// In place, row by row.
void apply_activation(Activation act, Matrix& z);
void apply_activation(Activation act, std::span<double> row);

/// Numerically stable softmax of one row, in place.
void softmax_inplace(std::span<double> row);

/// KL(p ‖ softmax(logits)) for a probability row p; terms with p = 0 vanish.
double kl_to_softmax(std::span<const double> p, std::span<const double> logits);

}  // namespace itlumm
