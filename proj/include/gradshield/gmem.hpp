#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gradshield/classifier.hpp"
#include "gradshield/errors.hpp"
#include "gradshield/tape.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

/// Scaling applied to each per-class map before it reaches the restoration network.
enum class MapNormalization { per_map_std, sign, none };

inline std::string to_string(MapNormalization m) {
  switch (m) {
    case MapNormalization::per_map_std: return "per-map-std";
    case MapNormalization::sign: return "sign";
    case MapNormalization::none: return "none";
  }
  return "?";
}

inline MapNormalization parse_map_normalization(const std::string& s) {
  if (s == "per-map-std") return MapNormalization::per_map_std;
  if (s == "sign") return MapNormalization::sign;
  if (s == "none") return MapNormalization::none;
  throw ValidationError("unknown gradient-map normalization '" + s + "'");
}

/// Per-class input gradients, N x (classes * C) x H x W, class-ascending.
template <typename T>
struct GradientMaps {
  Tensor<T> maps;
  std::size_t classes = 0;
  std::size_t channels_per_map = 0;
  MapNormalization normalization = MapNormalization::none;

  /// Channel block of class i as an N x C x H x W tensor.
  Tensor<T> slice(std::size_t i) const {
    const std::size_t N = maps.dim(0), plane = maps.dim(2) * maps.dim(3);
    const std::size_t block = channels_per_map * plane;
    std::vector<T> out(N * block);
    for (std::size_t n = 0; n < N; ++n) {
      const T* src = maps.data() + (n * classes + i) * block;
      std::copy_n(src, block, out.data() + n * block);
    }
    return Tensor<T>({N, channels_per_map, maps.dim(2), maps.dim(3)}, std::move(out));
  }
};

/// How many classifier passes a gradient_maps call spent.
struct GmemCounters {
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;
};

/// shared_forward replays n backward passes over one recorded forward pass;
/// independent runs n complete forward/backward pairs.
enum class GmemPasses { shared_forward, independent };

/// Divides every (sample, class) map by its standard deviation + 1e-8, or
/// applies sign / identity. `channels_per_map` is the image channel count.
template <typename T>
Tensor<T> normalize_maps(const Tensor<T>& raw, std::size_t channels_per_map, MapNormalization mode) {
  if (mode == MapNormalization::none) return raw;
  if (mode == MapNormalization::sign) return ops::sign(raw);
  if (raw.rank() != 4 || channels_per_map == 0 || raw.dim(1) % channels_per_map != 0) {
    throw ShapeError("normalize_maps: " + shape_str(raw.shape()) + " is not a stack of " +
                     std::to_string(channels_per_map) + "-channel maps");
  }
  const std::size_t block = channels_per_map * raw.dim(2) * raw.dim(3);
  const std::size_t blocks = raw.numel() / block;
  std::vector<T> out(raw.numel());
  for (std::size_t b = 0; b < blocks; ++b) {
    const T* src = raw.data() + b * block;
    double mean = 0;
    for (std::size_t i = 0; i < block; ++i) mean += src[i];
    mean /= static_cast<double>(block);
    double var = 0;
    for (std::size_t i = 0; i < block; ++i) var += (src[i] - mean) * (src[i] - mean);
    const double sd = std::sqrt(var / static_cast<double>(block));
    const T scale = static_cast<T>(1.0 / (sd + 1e-8));
    for (std::size_t i = 0; i < block; ++i) out[b * block + i] = src[i] * scale;
  }
  return Tensor<T>(raw.shape(), std::move(out));
}

/// Gradient maps of x_adv: for every class i, the gradient of the
/// per-sample cross-entropy CE(C(x_adv), i) with respect to x_adv. No
/// ground-truth label enters the computation.
template <typename T>
GradientMaps<T> gradient_maps(const Classifier<T>& model, const Tensor<T>& x_adv,
                              MapNormalization normalization = MapNormalization::per_map_std,
                              GmemCounters* counters = nullptr, GmemPasses passes = GmemPasses::shared_forward) {
  model.check_input(x_adv);
  for (T v : x_adv.values()) {
    if (!std::isfinite(v)) throw NumericError("gradient_maps: non-finite input pixel");
    if (v < T(0) || v > T(1)) throw ValidationError("gradient_maps: input pixel outside [0,1]");
  }
  const std::size_t N = x_adv.dim(0), C = x_adv.dim(1), plane = x_adv.dim(2) * x_adv.dim(3);
  const std::size_t n = model.classes();
  const std::size_t block = C * plane;
  std::vector<T> raw(N * n * block);
  GmemCounters local;

  auto store = [&](std::size_t cls, const Tensor<T>& input) {
    auto g = input.grad();
    if (!all_finite(g)) throw NumericError("gradient_maps: non-finite gradient for class " + std::to_string(cls));
    for (std::size_t s = 0; s < N; ++s) {
      std::copy_n(g.data() + s * block, block, raw.data() + (s * n + cls) * block);
    }
  };

  if (passes == GmemPasses::shared_forward) {
    Tape<T> tape;
    Tensor<T> input = x_adv.clone(true);
    Tensor<T> logits = model.forward(tape, input);
    ++local.forward_passes;
    const std::vector<T> probs = Tape<T>::softmax_rows(logits);
    std::vector<T> seed(probs.size());
    for (std::size_t cls = 0; cls < n; ++cls) {
      for (std::size_t s = 0; s < N; ++s) {
        for (std::size_t k = 0; k < n; ++k) seed[s * n + k] = probs[s * n + k] - (k == cls ? T(1) : T(0));
      }
      input.clear_grad();
      tape.backward(logits, seed);
      ++local.backward_passes;
      store(cls, input);
    }
  } else {
    for (std::size_t cls = 0; cls < n; ++cls) {
      Tape<T> tape;
      Tensor<T> input = x_adv.clone(true);
      const std::vector<int> labels(N, static_cast<int>(cls));
      Tensor<T> loss = tape.softmax_cross_entropy(model.forward(tape, input), labels);
      ++local.forward_passes;
      // Seeding with N undoes the batch mean: each slice is a per-sample gradient.
      const T seed = static_cast<T>(N);
      tape.backward(loss, std::span<const T>(&seed, 1));
      ++local.backward_passes;
      store(cls, input);
    }
  }
  if (counters) {
    counters->forward_passes += local.forward_passes;
    counters->backward_passes += local.backward_passes;
  }
  GradientMaps<T> out;
  out.classes = n;
  out.channels_per_map = C;
  out.normalization = normalization;
  out.maps = normalize_maps(Tensor<T>({N, n * C, x_adv.dim(2), x_adv.dim(3)}, std::move(raw)), C, normalization);
  return out;
}

}  // namespace gradshield
