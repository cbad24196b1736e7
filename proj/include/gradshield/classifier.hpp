#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gradshield/errors.hpp"
#include "gradshield/params.hpp"
#include "gradshield/serialize.hpp"
#include "gradshield/tape.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

/// Miniature residual network: a 3x3 stem, then one residual block per
/// stage with stride-2 3x3 downsampling between stages, global average
/// pooling and a dense head. No normalization layers; inputs are raw [0,1]
/// pixels.
struct ClassifierArch {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes = 10;
  std::vector<std::size_t> widths{16, 32, 64};

  Descriptor descriptor() const {
    Descriptor d;
    d.kind = "classifier";
    d.fields["channels"] = std::to_string(channels);
    d.fields["height"] = std::to_string(height);
    d.fields["width"] = std::to_string(width);
    d.fields["classes"] = std::to_string(classes);
    std::string w;
    for (std::size_t i = 0; i < widths.size(); ++i) w += (i ? "," : "") + std::to_string(widths[i]);
    d.fields["widths"] = w;
    return d;
  }

  static ClassifierArch from_descriptor(const Descriptor& d) {
    if (d.kind != "classifier") throw FormatError("unknown architecture tag '" + d.kind + "', expected classifier");
    ClassifierArch a;
    a.channels = d.size_at("channels");
    a.height = d.size_at("height");
    a.width = d.size_at("width");
    a.classes = d.size_at("classes");
    a.widths.clear();
    std::istringstream ws(d.at("widths"));
    for (std::string item; std::getline(ws, item, ',');) a.widths.push_back(std::stoull(item));
    if (a.widths.empty()) throw FormatError("classifier descriptor has no stage widths");
    return a;
  }
};

template <typename T>
class Classifier {
 public:
  /// He-initialized convolutions; the dense head starts at zero so the
  /// untrained model emits all-zero logits.
  explicit Classifier(ClassifierArch arch = {}, std::uint64_t seed = 0) : arch_(std::move(arch)) {
    if (arch_.classes < 1 || arch_.widths.empty()) throw ConfigError("classifier: need classes >= 1 and a stage");
    Rng rng(seed);
    auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout) {
      params_.add(name + ".w", he_normal<T>({cout, cin, 3, 3}, cin * 9, rng));
      params_.add(name + ".b", Tensor<T>::zeros({cout}));
    };
    conv("stem", arch_.channels, arch_.widths[0]);
    for (std::size_t s = 0; s < arch_.widths.size(); ++s) {
      const std::string stage = "stage" + std::to_string(s);
      if (s > 0) conv(stage + ".down", arch_.widths[s - 1], arch_.widths[s]);
      conv(stage + ".res1", arch_.widths[s], arch_.widths[s]);
      conv(stage + ".res2", arch_.widths[s], arch_.widths[s]);
    }
    params_.add("head.w", Tensor<T>::zeros({arch_.widths.back(), arch_.classes}));
    params_.add("head.b", Tensor<T>::zeros({arch_.classes}));
  }

  const ClassifierArch& arch() const { return arch_; }
  std::size_t classes() const { return arch_.classes; }
  const ParamSet<T>& params() const { return params_; }
  ParamSet<T>& params() { return params_; }
  std::uint64_t checksum() const { return params_.checksum(); }

  /// Free-form training metadata persisted alongside the weights.
  std::map<std::string, std::string>& meta() { return meta_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }

  std::string descriptor() const {
    Descriptor d = arch_.descriptor();
    for (const auto& [k, v] : meta_) d.fields["meta." + k] = v;
    return d.str();
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4) throw ShapeError("classifier: input must be N x C x H x W, got " + shape_str(x.shape()));
    if (x.dim(1) != arch_.channels || x.dim(2) != arch_.height || x.dim(3) != arch_.width) {
      throw ShapeError("classifier: input " + shape_str(x.shape()) + " does not match C x H x W = " +
                       std::to_string(arch_.channels) + "x" + std::to_string(arch_.height) + "x" +
                       std::to_string(arch_.width));
    }
  }

  /// Logits N x classes, recorded on `tape` wherever x or (trainable) parameters need gradients.
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, ParamMode mode = ParamMode::frozen) const {
    check_input(x);
    auto p = [&](const std::string& name) { return params_.view(name, mode); };
    auto conv = [&](const Tensor<T>& in, const std::string& name, std::size_t stride) {
      return tape.conv2d(in, p(name + ".w"), p(name + ".b"), stride, 1);
    };
    Tensor<T> h = tape.relu(conv(x, "stem", 1));
    for (std::size_t s = 0; s < arch_.widths.size(); ++s) {
      const std::string stage = "stage" + std::to_string(s);
      if (s > 0) h = tape.relu(conv(h, stage + ".down", 2));
      Tensor<T> r = tape.relu(conv(h, stage + ".res1", 1));
      r = conv(r, stage + ".res2", 1);
      h = tape.relu(tape.add(h, r));
    }
    return tape.dense(tape.global_avg_pool(h), p("head.w"), p("head.b"));
  }

  /// Inference-only logits.
  Tensor<T> logits(const Tensor<T>& x) const {
    Tape<T> tape;
    return forward(tape, x.detach());
  }

  std::vector<int> predict(const Tensor<T>& x) const { return ops::argmax_rows(logits(x)); }

 private:
  ClassifierArch arch_;
  ParamSet<T> params_;
  std::map<std::string, std::string> meta_;
};

template <typename T>
Classifier<T> load_classifier(const std::string& path) {
  CheckpointData<T> data = load_checkpoint_file<T>(path);
  const Descriptor d = Descriptor::parse(data.descriptor);
  Classifier<T> model(ClassifierArch::from_descriptor(d));
  model.params().assign(data.params);
  for (const auto& [k, v] : d.fields) {
    if (k.rfind("meta.", 0) == 0) model.meta()[k.substr(5)] = v;
  }
  return model;
}

}  // namespace gradshield
