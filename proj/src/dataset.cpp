#include "itlumm/dataset.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "itlumm/errors.hpp"

namespace itlumm {

void LabeledDataset::validate() const {
  if (features.rows() != labels.size())
    throw ShapeError("dataset has " + std::to_string(features.rows()) + " feature rows but " +
                     std::to_string(labels.size()) + " labels");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= num_classes)
      throw ArgumentError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                          " is outside [0, " + std::to_string(num_classes) + ")");
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> idx) const {
  LabeledDataset out;
  out.features = features.gather_rows(idx);
  out.labels.reserve(idx.size());
  for (std::size_t i : idx) out.labels.push_back(labels.at(i));
  out.num_classes = num_classes;
  return out;
}

LabeledDataset LabeledDataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return subset(idx);
}

}  // namespace itlumm
