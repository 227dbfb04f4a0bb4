#pragma once

// Forward arithmetic shared by the tape and by tape-free inference. Both
// paths call exactly these routines so recorded and unrecorded runs agree
// bitwise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>

namespace raymoe::kernels {

struct Nonzero {
  std::uint32_t row = 0;
  std::uint32_t col = 0;

  friend bool operator==(const Nonzero&, const Nonzero&) = default;
  friend auto operator<=>(const Nonzero&, const Nonzero&) = default;
};

/// y = W x, W row-major rows x cols.
inline void matvec(std::span<const double> w, std::size_t rows, std::size_t cols,
                   std::span<const double> x, std::span<double> y) noexcept {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = w.data() + i * cols;
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
}

/// y = W x where W's nonzeros are listed in `pattern` (sorted by row, col)
/// and `w[k]` is the value at pattern[k].
inline void sparse_matvec(std::span<const double> w, std::span<const Nonzero> pattern,
                          std::span<const double> x, std::span<double> y) noexcept {
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t k = 0; k < pattern.size(); ++k) {
    y[pattern[k].row] += w[k] * x[pattern[k].col];
  }
}

inline double sum(std::span<const double> x) noexcept {
  double acc = 0.0;
  for (double v : x) acc += v;
  return acc;
}

/// Max-shifted softmax; `y` may alias `x`.
inline void softmax(std::span<const double> x, std::span<double> y) noexcept {
  const double m = *std::max_element(x.begin(), x.end());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - m);
    total += y[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] /= total;
}

/// -log softmax(logits)[label], evaluated as (max - z_label) + log1p(sum of
/// the non-argmax exponentials) so tiny losses keep full relative precision.
inline double cross_entropy(std::span<const double> logits, std::size_t label) noexcept {
  const auto top = static_cast<std::size_t>(
      std::max_element(logits.begin(), logits.end()) - logits.begin());
  const double m = logits[top];
  double rest = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (k != top) rest += std::exp(logits[k] - m);
  }
  return (m - logits[label]) + std::log1p(rest);
}

/// Lowest index among the maximal entries.
inline std::size_t argmax(std::span<const double> x) noexcept {
  return static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
}

}  // namespace raymoe::kernels
