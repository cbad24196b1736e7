#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "gradshield/rng.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

/// Outcome of comparing an analytic gradient against central differences.
struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  bool passed(double tol) const { return max_rel_error < tol; }
};

/// Central-difference check of d f / d x at selected coordinates of x.
///
/// `loss` must evaluate the scalar objective from the current values of
/// `x` without touching gradients; `analytic` is the gradient under test.
/// The relative error is |a - n| / max(|a| + |n|, floor) so coordinates whose
/// true derivative is ~0 are judged in absolute terms.
template <typename T>
GradCheckResult central_difference_check(Tensor<T>& x, std::span<const T> analytic,
                                         const std::function<double()>& loss,
                                         std::span<const std::size_t> coords, double step = 1e-5,
                                         double floor = 1e-6) {
  GradCheckResult r;
  auto values = x.mutable_values();
  for (std::size_t idx : coords) {
    const T original = values[idx];
    values[idx] = static_cast<T>(original + step);
    const double up = loss();
    values[idx] = static_cast<T>(original - step);
    const double down = loss();
    values[idx] = original;
    const double numeric = (up - down) / (2 * step);
    const double a = static_cast<double>(analytic[idx]);
    const double err = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), floor);
    if (r.checked == 0 || err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = idx;
    }
    ++r.checked;
  }
  return r;
}

/// `count` distinct coordinates drawn uniformly from [0, size).
inline std::vector<std::size_t> sample_coords(std::size_t size, std::size_t count, Rng& rng) {
  std::vector<std::size_t> all(size);
  for (std::size_t i = 0; i < size; ++i) all[i] = i;
  count = std::min(count, size);
  for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.below(size - i)]);
  all.resize(count);
  return all;
}

}  // namespace gradshield
