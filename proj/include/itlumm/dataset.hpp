#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "itlumm/matrix.hpp"

namespace itlumm {

struct LabeledDataset {
  Matrix features;                  // N × D
  std::vector<std::size_t> labels;  // N entries in [0, num_classes)
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  /// Throws ShapeError/ArgumentError when lengths differ or a label is out of range.
  void validate() const;
  /// Rows `idx`, in that order.
  LabeledDataset subset(std::span<const std::size_t> idx) const;
  /// The first n rows.
  LabeledDataset head(std::size_t n) const;
};

}  // namespace itlumm
