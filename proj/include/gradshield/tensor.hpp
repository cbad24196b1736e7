#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gradshield/errors.hpp"

namespace gradshield {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// the tape relies on to route gradients back to the tensors a caller holds.
/// Values are treated as immutable once the tensor takes part in a recorded
/// computation; only optimizers write into parameter storage, between passes.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::make_shared<std::vector<T>>(std::move(values));
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data->size(); }

  std::span<const T> values() const { return *impl_->data; }
  std::span<T> mutable_values() { return *impl_->data; }
  const T* data() const { return impl_->data->data(); }
  T* mutable_data() { return impl_->data->data(); }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return (*impl_->data)[0];
  }
  T operator[](std::size_t i) const { return (*impl_->data)[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient storage, allocated (zero-filled) on first access. The grad slot
  /// is the one mutable part of a tensor, so this works through const handles.
  std::span<T> mutable_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), T(0));
    return impl_->grad;
  }
  void clear_grad() const { impl_->grad.clear(); }
  /// Gradient as a standalone tensor; zeros when the slot is empty.
  Tensor grad_tensor() const {
    if (!has_grad()) return zeros(shape());
    return Tensor(shape(), impl_->grad);
  }

  /// New handle sharing storage, outside any gradient flow.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), *impl_->data, requires_grad); }

  /// Same underlying storage and gradient slot.
  bool is(const Tensor& other) const { return impl_ == other.impl_; }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape: " + shape_str(this->shape()) + " -> " + shape_str(shape));
    }
    Tensor t = detach();
    t.impl_->shape = std::move(shape);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    std::transform(values().begin(), values().end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out));
  }

 private:
  struct Impl {
    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

/// Copies samples [begin, end) of an N-leading tensor.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) throw ShapeError("slice_batch: bad range");
  const std::size_t per = x.rank() ? shape_numel(Shape(x.shape().begin() + 1, x.shape().end())) : 0;
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<T> out(x.values().begin() + begin * per, x.values().begin() + end * per);
  return Tensor<T>(std::move(shape), std::move(out));
}

/// Copies the listed samples of an N-leading tensor, in list order.
template <typename T>
Tensor<T> gather_batch(const Tensor<T>& x, std::span<const std::size_t> indices) {
  const std::size_t per = x.rank() ? shape_numel(Shape(x.shape().begin() + 1, x.shape().end())) : 0;
  Shape shape = x.shape();
  shape[0] = indices.size();
  std::vector<T> out(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.dim(0)) throw ShapeError("gather_batch: index out of range");
    std::copy_n(x.values().begin() + indices[i] * per, per, out.begin() + i * per);
  }
  return Tensor<T>(std::move(shape), std::move(out));
}

/// Stacks N-leading tensors along the batch axis.
template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no parts");
  Shape shape = parts[0].shape();
  std::size_t n = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat_batch: " + shape_str(p.shape()) + " vs " + shape_str(shape));
    }
    n += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  shape[0] = n;
  return Tensor<T>(std::move(shape), std::move(out));
}

}  // namespace gradshield
