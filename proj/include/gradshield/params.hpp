#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "gradshield/errors.hpp"
#include "gradshield/rng.hpp"
#include "gradshield/serialize.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

/// Whether a forward pass should route gradients into model parameters.
/// Frozen passes see detached parameter handles, so a backward pass only
/// ever materializes input gradients.
enum class ParamMode { frozen, trainable };

/// Ordered, named parameter set shared by every model in the library.
template <typename T>
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  Tensor<T>& add(std::string name, Tensor<T> tensor) {
    tensor.set_requires_grad(true);
    entries_.emplace_back(std::move(name), std::move(tensor));
    return entries_.back().second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  const Tensor<T>& at(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
      if (n == name) return t;
    }
    throw ConfigError("no parameter named '" + name + "'");
  }
  Tensor<T>& at(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParamSet&>(*this).at(name));
  }

  Tensor<T> view(const std::string& name, ParamMode mode) const {
    const Tensor<T>& t = at(name);
    return mode == ParamMode::trainable ? t : t.detach();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void clear_grads() {
    for (auto& [name, t] : entries_) t.clear_grad();
  }

  /// FNV-1a over the raw parameter bytes, in declaration order.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : entries_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
      for (std::size_t i = 0; i < t.numel() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }

  /// Overwrites values from a loaded checkpoint; names and shapes must match exactly.
  void assign(const std::vector<std::pair<std::string, Tensor<T>>>& loaded) {
    if (loaded.size() != entries_.size()) {
      throw FormatError("checkpoint holds " + std::to_string(loaded.size()) + " parameters, model expects " +
                        std::to_string(entries_.size()));
    }
    for (std::size_t i = 0; i < loaded.size(); ++i) {
      auto& [name, t] = entries_[i];
      if (loaded[i].first != name) throw FormatError("checkpoint parameter '" + loaded[i].first + "' where '" + name + "' expected");
      if (loaded[i].second.shape() != t.shape()) {
        throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(loaded[i].second.shape()) +
                          ", model expects " + shape_str(t.shape()));
      }
      std::copy(loaded[i].second.values().begin(), loaded[i].second.values().end(), t.mutable_values().begin());
    }
  }

 private:
  std::vector<Entry> entries_;
};

/// He-normal initialization, std = sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  const double sd = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * sd);
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename Model>
void save_checkpoint(const Model& model, const std::string& path) {
  save_checkpoint_file(path, model.descriptor(), model.params().entries());
}

}  // namespace gradshield
