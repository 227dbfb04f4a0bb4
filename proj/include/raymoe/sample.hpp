#pragma once

#include <cstddef>
#include <string>

namespace raymoe {

/// Outcome of evaluating one sample. `index` is the position within the
/// evaluated split.
struct SampleRecord {
  std::size_t index = 0;
  std::size_t label = 0;
  std::size_t prediction = 0;
  bool correct = false;
  double loss = 0.0;
  std::size_t used_params = 0;
  double active_block_pct = 0.0;
  std::size_t steps = 0;
  double final_theta = 0.0;
  /// "output_threshold", "t_max", or "dense" for ungated models.
  std::string terminated_by;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

}  // namespace raymoe
