#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradshield/errors.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

namespace detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
  // 1x1, stride 1, no padding: the input plane already is the column matrix.
  bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0; }
};

// Column matrix is row-major [patch x positions], i.e. column-major
// [positions x patch], so one GEMM against the kernel yields a CxHxW plane.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t positions = g.positions();
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= h) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = plane + iy * w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-adds a column-matrix gradient back into an image gradient.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t positions = g.positions();
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= h) continue;
          const T* src = row + oy * g.out_w;
          T* dst = plane + iy * w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

/// Records differentiable operations and replays them in reverse.
///
/// An operation is recorded only when one of its operands requires a
/// gradient, so a Tape used purely for inference stays empty. Nodes are
/// appended in execution order, which is a valid topological order.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Cross-correlation with zero padding. kernel is Cout x Cin x kh x kw.
  Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                   std::size_t padding) {
    detail::require_rank(x.shape(), 4, "conv2d", "input");
    detail::require_rank(kernel.shape(), 4, "conv2d", "kernel");
    detail::require_rank(bias.shape(), 1, "conv2d", "bias");
    if (stride == 0) throw ValidationError("conv2d: stride must be positive");
    detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3),
                           stride, padding, 0, 0};
    if (kernel.dim(1) != g.in_channels) {
      throw ShapeError("conv2d: input channels " + std::to_string(g.in_channels) + " != kernel dim 1 (" +
                       std::to_string(kernel.dim(1)) + ")");
    }
    if (bias.dim(0) != g.out_channels) {
      throw ShapeError("conv2d: bias length " + std::to_string(bias.dim(0)) + " != kernel dim 0 (" +
                       std::to_string(g.out_channels) + ")");
    }
    if (g.height + 2 * padding < g.kernel_h) throw ShapeError("conv2d: input height smaller than kernel height");
    if (g.width + 2 * padding < g.kernel_w) throw ShapeError("conv2d: input width smaller than kernel width");
    g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
    g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;

    const std::size_t P = g.positions(), K = g.patch(), Co = g.out_channels;
    const std::size_t in_plane = g.in_channels * g.height * g.width;
    std::vector<T> out(g.batch * Co * P);
    std::vector<T> col(g.pointwise() ? 0 : K * P);
    detail::ConstMatMap<T> wt(kernel.data(), K, Co);
    for (std::size_t n = 0; n < g.batch; ++n) {
      const T* src = x.data() + n * in_plane;
      if (!g.pointwise()) {
        detail::im2col(src, g, col.data());
        src = col.data();
      }
      detail::MatMap<T> y(out.data() + n * Co * P, P, Co);
      y.noalias() = detail::ConstMatMap<T>(src, P, K) * wt;
      for (std::size_t c = 0; c < Co; ++c) y.col(c).array() += bias[c];
    }
    Tensor<T> result({g.batch, Co, g.out_h, g.out_w}, std::move(out));

    record(result, {x, kernel, bias}, [x, kernel, bias, result, g]() mutable {
      const std::size_t P = g.positions(), K = g.patch(), Co = g.out_channels;
      const std::size_t in_plane = g.in_channels * g.height * g.width;
      const bool need_x = x.requires_grad(), need_w = kernel.requires_grad(), need_b = bias.requires_grad();
      std::vector<T> col(g.pointwise() ? 0 : K * P);
      std::vector<T> dcol(need_x && !g.pointwise() ? K * P : 0);
      detail::ConstMatMap<T> wt(kernel.data(), K, Co);
      T* dw = need_w ? kernel.mutable_grad().data() : nullptr;
      T* db = need_b ? bias.mutable_grad().data() : nullptr;
      T* dx = need_x ? x.mutable_grad().data() : nullptr;
      for (std::size_t n = 0; n < g.batch; ++n) {
        detail::ConstMatMap<T> dy(result.grad().data() + n * Co * P, P, Co);
        if (need_w) {
          const T* src = x.data() + n * in_plane;
          if (!g.pointwise()) {
            detail::im2col(src, g, col.data());
            src = col.data();
          }
          detail::MatMap<T>(dw, K, Co).noalias() += detail::ConstMatMap<T>(src, P, K).transpose() * dy;
        }
        if (need_b) {
          // Sequential sum: Eigen's vectorized redux peels by address, so its order would vary run to run.
          for (std::size_t c = 0; c < Co; ++c) {
            T acc = 0;
            for (std::size_t p = 0; p < P; ++p) acc += dy(p, c);
            db[c] += acc;
          }
        }
        if (need_x) {
          if (g.pointwise()) {
            detail::MatMap<T>(dx + n * in_plane, P, K).noalias() += dy * wt.transpose();
          } else {
            detail::MatMap<T>(dcol.data(), P, K).noalias() = dy * wt.transpose();
            detail::col2im_add(dcol.data(), g, dx + n * in_plane);
          }
        }
      }
    });
    return result;
  }

  /// max(x, 0); the gradient at exactly 0 is taken as 0.
  Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    Tensor<T> result(x.shape(), std::move(out));
    record(result, {x}, [x, result]() mutable {
      auto dx = x.mutable_grad();
      auto gy = result.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (x[i] > T(0)) dx[i] += gy[i];
      }
    });
    return result;
  }

  Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T v = x[i];
      if (v >= T(0)) {
        out[i] = T(1) / (T(1) + std::exp(-v));
      } else {
        const T e = std::exp(v);
        out[i] = e / (T(1) + e);
      }
    }
    Tensor<T> result(x.shape(), std::move(out));
    record(result, {x}, [x, result]() mutable {
      auto dx = x.mutable_grad();
      auto gy = result.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const T s = result[i];
        dx[i] += gy[i] * s * (T(1) - s);
      }
    });
    return result;
  }

  /// x (N x F) . weight (F x K) + bias. Each row is computed independently,
  /// so a sample's output does not depend on what else is in the batch.
  Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require_rank(x.shape(), 2, "dense", "input");
    detail::require_rank(weight.shape(), 2, "dense", "weight");
    detail::require_rank(bias.shape(), 1, "dense", "bias");
    const std::size_t N = x.dim(0), F = x.dim(1), K = weight.dim(1);
    if (weight.dim(0) != F) {
      throw ShapeError("dense: input features " + std::to_string(F) + " != weight rows " +
                       std::to_string(weight.dim(0)));
    }
    if (bias.dim(0) != K) {
      throw ShapeError("dense: bias length " + std::to_string(bias.dim(0)) + " != weight columns " +
                       std::to_string(K));
    }
    std::vector<T> out(N * K);
    for (std::size_t n = 0; n < N; ++n) {
      T* row = out.data() + n * K;
      std::copy_n(bias.data(), K, row);
      for (std::size_t f = 0; f < F; ++f) {
        const T xv = x[n * F + f];
        const T* w = weight.data() + f * K;
        for (std::size_t k = 0; k < K; ++k) row[k] += xv * w[k];
      }
    }
    Tensor<T> result({N, K}, std::move(out));
    record(result, {x, weight, bias}, [x, weight, bias, result, N, F, K]() mutable {
      auto gy = result.grad();
      if (x.requires_grad()) {
        auto dx = x.mutable_grad();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t f = 0; f < F; ++f) {
            T acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += gy[n * K + k] * weight[f * K + k];
            dx[n * F + f] += acc;
          }
        }
      }
      if (weight.requires_grad()) {
        auto dw = weight.mutable_grad();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t f = 0; f < F; ++f) {
            const T xv = x[n * F + f];
            for (std::size_t k = 0; k < K; ++k) dw[f * K + k] += xv * gy[n * K + k];
          }
        }
      }
      if (bias.requires_grad()) {
        auto db = bias.mutable_grad();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) db[k] += gy[n * K + k];
        }
      }
    });
    return result;
  }

  /// Stacks N x Ci x H x W parts along channels, in argument order.
  Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no parts");
    for (const auto& p : parts) detail::require_rank(p.shape(), 4, "concat_channels", "part");
    const std::size_t N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
    std::size_t C = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const auto& p = parts[i];
      if (p.dim(0) != N || p.dim(2) != H || p.dim(3) != W) {
        throw ShapeError("concat_channels: part " + std::to_string(i) + " has shape " + shape_str(p.shape()) +
                         ", expected N=" + std::to_string(N) + " H=" + std::to_string(H) +
                         " W=" + std::to_string(W));
      }
      C += p.dim(1);
    }
    if (parts.size() == 1) return parts[0];
    const std::size_t plane = H * W;
    std::vector<T> out(N * C * plane);
    for (std::size_t n = 0; n < N; ++n) {
      T* dst = out.data() + n * C * plane;
      for (const auto& p : parts) {
        const std::size_t chunk = p.dim(1) * plane;
        std::copy_n(p.data() + n * chunk, chunk, dst);
        dst += chunk;
      }
    }
    Tensor<T> result({N, C, H, W}, std::move(out));
    std::vector<Tensor<T>> saved(parts.begin(), parts.end());
    record(result, saved, [saved, result, N, C, plane]() mutable {
      auto gy = result.grad();
      std::size_t offset = 0;
      for (auto& p : saved) {
        const std::size_t chunk = p.dim(1) * plane;
        if (p.requires_grad()) {
          auto dp = p.mutable_grad();
          for (std::size_t n = 0; n < N; ++n) {
            const T* src = gy.data() + n * C * plane + offset;
            for (std::size_t i = 0; i < chunk; ++i) dp[n * chunk + i] += src[i];
          }
        }
        offset += chunk;
      }
    });
    return result;
  }

  Tensor<T> concat_channels(std::initializer_list<Tensor<T>> parts) {
    return concat_channels(std::span<const Tensor<T>>(parts.begin(), parts.size()));
  }

  /// N x C x H x W -> N x C spatial means.
  Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 4, "global_avg_pool", "input");
    const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    std::vector<T> out(N * C);
    for (std::size_t i = 0; i < N * C; ++i) {
      T acc = 0;
      for (std::size_t p = 0; p < plane; ++p) acc += x[i * plane + p];
      out[i] = acc / static_cast<T>(plane);
    }
    Tensor<T> result({N, C}, std::move(out));
    record(result, {x}, [x, result, N, C, plane]() mutable {
      auto dx = x.mutable_grad();
      auto gy = result.grad();
      for (std::size_t i = 0; i < N * C; ++i) {
        const T g = gy[i] / static_cast<T>(plane);
        for (std::size_t p = 0; p < plane; ++p) dx[i * plane + p] += g;
      }
    });
    return result;
  }

  /// Multiplies every channel plane of x (N x C x H x W) by gates (N x C).
  Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& gates) {
    detail::require_rank(x.shape(), 4, "channel_scale", "input");
    detail::require_rank(gates.shape(), 2, "channel_scale", "gates");
    const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (gates.dim(0) != N || gates.dim(1) != C) {
      throw ShapeError("channel_scale: gates " + shape_str(gates.shape()) + " do not match input " +
                       shape_str(x.shape()));
    }
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < N * C; ++i) {
      const T s = gates[i];
      for (std::size_t p = 0; p < plane; ++p) out[i * plane + p] = x[i * plane + p] * s;
    }
    Tensor<T> result(x.shape(), std::move(out));
    record(result, {x, gates}, [x, gates, result, N, C, plane]() mutable {
      auto gy = result.grad();
      if (x.requires_grad()) {
        auto dx = x.mutable_grad();
        for (std::size_t i = 0; i < N * C; ++i) {
          for (std::size_t p = 0; p < plane; ++p) dx[i * plane + p] += gy[i * plane + p] * gates[i];
        }
      }
      if (gates.requires_grad()) {
        auto dg = gates.mutable_grad();
        for (std::size_t i = 0; i < N * C; ++i) {
          T acc = 0;
          for (std::size_t p = 0; p < plane; ++p) acc += gy[i * plane + p] * x[i * plane + p];
          dg[i] += acc;
        }
      }
    });
    return result;
  }

  /// Mean over the batch of -log softmax(logits)[label].
  Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    detail::require_rank(logits.shape(), 2, "softmax_cross_entropy", "logits");
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    if (labels.size() != N) {
      throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                       std::to_string(N));
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= K) {
        throw ValidationError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(K) + ")");
      }
    }
    std::vector<T> probs = softmax_rows(logits);
    T total = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* z = logits.data() + n * K;
      const T m = *std::max_element(z, z + K);
      T s = 0;
      for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - m);
      total += std::log(s) + m - z[labels[n]];
    }
    Tensor<T> result = Tensor<T>::scalar(total / static_cast<T>(N));
    std::vector<int> saved_labels(labels.begin(), labels.end());
    record(result, {logits}, [logits, result, probs = std::move(probs), saved_labels, N, K]() mutable {
      auto dz = logits.mutable_grad();
      const T g = result.grad()[0] / static_cast<T>(N);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
          const T onehot = static_cast<int>(k) == saved_labels[n] ? T(1) : T(0);
          dz[n * K + k] += g * (probs[n * K + k] - onehot);
        }
      }
    });
    return result;
  }

  /// Mean squared difference over all elements.
  Tensor<T> l2_loss(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "l2_loss");
    const std::size_t count = a.numel();
    T acc = 0;
    for (std::size_t i = 0; i < count; ++i) {
      const T d = a[i] - b[i];
      acc += d * d;
    }
    Tensor<T> result = Tensor<T>::scalar(acc / static_cast<T>(count));
    record(result, {a, b}, [a, b, result, count]() mutable {
      const T g = T(2) * result.grad()[0] / static_cast<T>(count);
      if (a.requires_grad()) {
        auto da = a.mutable_grad();
        for (std::size_t i = 0; i < count; ++i) da[i] += g * (a[i] - b[i]);
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (std::size_t i = 0; i < count; ++i) db[i] -= g * (a[i] - b[i]);
      }
    });
    return result;
  }

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return axpby(a, b, T(1), "add"); }
  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return axpby(a, b, T(-1), "sub"); }

  Tensor<T> scalar_mul(const Tensor<T>& x, T s) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    Tensor<T> result(x.shape(), std::move(out));
    record(result, {x}, [x, result, s]() mutable {
      auto dx = x.mutable_grad();
      auto gy = result.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] * s;
    });
    return result;
  }

  /// Same values under a new shape; the gradient flows back unchanged.
  Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor<T> result(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
    record(result, {x}, [x, result]() mutable {
      auto dx = x.mutable_grad();
      auto gy = result.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i];
    });
    return result;
  }

  Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.values()) acc += v;
    Tensor<T> result = Tensor<T>::scalar(acc);
    record(result, {x}, [x, result]() mutable {
      const T g = result.grad()[0];
      for (auto& d : x.mutable_grad()) d += g;
    });
    return result;
  }

  /// In-graph clamp to [lo, hi]; gradient passes where lo <= x <= hi.
  /// Used for the restored-image range; attack projections use ops::clamp.
  Tensor<T> clip(const Tensor<T>& x, T lo, T hi) {
    if (lo > hi) throw ValidationError("clip: lo > hi");
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x[i], lo), hi);
    Tensor<T> result(x.shape(), std::move(out));
    record(result, {x}, [x, result, lo, hi]() mutable {
      auto dx = x.mutable_grad();
      auto gy = result.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (x[i] >= lo && x[i] <= hi) dx[i] += gy[i];
      }
    });
    return result;
  }

  /// Forward clamp to [lo, hi] with an identity backward (straight-through).
  /// The value is the projection; the gradient is that of the unclamped input,
  /// so saturated outputs still receive a pull back into range.
  Tensor<T> clamp_straight_through(const Tensor<T>& x, T lo, T hi) {
    if (lo > hi) throw ValidationError("clamp_straight_through: lo > hi");
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x[i], lo), hi);
    Tensor<T> result(x.shape(), std::move(out));
    record(result, {x}, [x, result]() mutable {
      auto dx = x.mutable_grad();
      auto gy = result.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i];
    });
    return result;
  }

  /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls;
  /// intermediate gradients are reset at the start of every pass.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    const T one = 1;
    backward(loss, std::span<const T>(&one, 1));
  }

  /// Reverse pass seeded with an explicit output gradient.
  void backward(const Tensor<T>& output, std::span<const T> seed) {
    if (seed.size() != output.numel()) throw ShapeError("backward: seed size does not match output");
    for (auto& node : nodes_) node.output.clear_grad();
    Tensor<T> out = output;
    auto g = out.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
  }

  /// Row-wise softmax of an N x K tensor, max-subtracted.
  static std::vector<T> softmax_rows(const Tensor<T>& logits) {
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    std::vector<T> p(N * K);
    for (std::size_t n = 0; n < N; ++n) {
      const T* z = logits.data() + n * K;
      const T m = *std::max_element(z, z + K);
      T s = 0;
      for (std::size_t k = 0; k < K; ++k) s += (p[n * K + k] = std::exp(z[k] - m));
      for (std::size_t k = 0; k < K; ++k) p[n * K + k] /= s;
    }
    return p;
  }

 private:
  struct Node {
    Tensor<T> output;
    std::function<void()> backward;
  };

  template <typename Inputs, typename Fn>
  void record(Tensor<T>& output, const Inputs& inputs, Fn&& fn) {
    bool needed = false;
    for (const auto& in : inputs) needed = needed || in.requires_grad();
    if (!needed) return;
    output.set_requires_grad(true);
    nodes_.push_back(Node{output, std::forward<Fn>(fn)});
  }

  template <typename Fn>
  void record(Tensor<T>& output, std::initializer_list<Tensor<T>> inputs, Fn&& fn) {
    record<std::initializer_list<Tensor<T>>>(output, inputs, std::forward<Fn>(fn));
  }

  Tensor<T> axpby(const Tensor<T>& a, const Tensor<T>& b, T sb, const char* op) {
    detail::require_same_shape(a.shape(), b.shape(), op);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sb > T(0) ? a[i] + b[i] : a[i] - b[i];
    Tensor<T> result(a.shape(), std::move(out));
    record(result, {a, b}, [a, b, result, sb]() mutable {
      auto gy = result.grad();
      if (a.requires_grad()) {
        auto da = a.mutable_grad();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += sb > T(0) ? gy[i] : -gy[i];
      }
    });
    return result;
  }

  std::vector<Node> nodes_;
};

/// Value-level elementwise operations. None of these are recorded on a tape;
/// the attacks use them for their update and projection steps.
namespace ops {

/// sign(x) with sign(0) == 0.
template <typename T>
Tensor<T> sign(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0));
  return Tensor<T>(x.shape(), std::move(out));
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  if (lo > hi) throw ValidationError("clamp: lo (" + std::to_string(lo) + ") > hi (" + std::to_string(hi) + ")");
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x[i], lo), hi);
  return Tensor<T>(x.shape(), std::move(out));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>(a.shape(), std::move(out));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>(a.shape(), std::move(out));
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, T s) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return Tensor<T>(x.shape(), std::move(out));
}

/// Row-wise argmax of an N x K tensor.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data() + n * K;
    out[n] = static_cast<int>(std::max_element(z, z + K) - z);
  }
  return out;
}

}  // namespace ops

}  // namespace gradshield
