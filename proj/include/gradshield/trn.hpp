#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gradshield/classifier.hpp"
#include "gradshield/errors.hpp"
#include "gradshield/gmem.hpp"
#include "gradshield/params.hpp"
#include "gradshield/serialize.hpp"
#include "gradshield/tape.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

/// Which streams a restoration network runs. The one-stream variants are
/// the ablations: image_only drops the gradient stream, gradient_only keeps
/// only the last image-stream convolution.
enum class StreamMode { two_stream, image_only, gradient_only };

inline std::string to_string(StreamMode m) {
  switch (m) {
    case StreamMode::two_stream: return "two-stream";
    case StreamMode::image_only: return "image-only";
    case StreamMode::gradient_only: return "gradient-only";
  }
  return "?";
}

inline StreamMode parse_stream_mode(const std::string& s) {
  if (s == "two-stream") return StreamMode::two_stream;
  if (s == "image-only") return StreamMode::image_only;
  if (s == "gradient-only") return StreamMode::gradient_only;
  throw ValidationError("unknown stream mode '" + s + "'");
}

/// Squeeze-and-excitation weights: C -> hidden -> C.
template <typename T>
struct ChannelAttentionParams {
  Tensor<T> w1, b1, w2, b2;
};

/// Hidden width of the excitation bottleneck: max(ceil(C / r), 4).
inline std::size_t attention_hidden(std::size_t channels, std::size_t reduction) {
  return std::max<std::size_t>((channels + reduction - 1) / reduction, 4);
}

/// Global-average squeeze, dense-relu-dense-sigmoid excitation, per-channel gating.
template <typename T>
Tensor<T> channel_attention(Tape<T>& tape, const Tensor<T>& features, const ChannelAttentionParams<T>& p) {
  Tensor<T> squeeze = tape.global_avg_pool(features);
  Tensor<T> hidden = tape.relu(tape.dense(squeeze, p.w1, p.b1));
  Tensor<T> gates = tape.sigmoid(tape.dense(hidden, p.w2, p.b2));
  return tape.channel_scale(features, gates);
}

struct TrnArch {
  std::size_t channels = 1;  // image channels C
  std::size_t classes = 10;  // gradient maps carry classes * C channels
  std::size_t blocks = 1;
  std::size_t growth = 16;
  std::size_t image_width = 32;
  std::size_t gradient_width = 32;
  std::size_t ca_reduction = 4;
  StreamMode mode = StreamMode::two_stream;
  bool per_block_image_residual = false;
  MapNormalization normalization = MapNormalization::per_map_std;

  std::size_t map_channels() const { return classes * channels; }
  bool uses_image_stream() const { return mode != StreamMode::gradient_only; }
  bool uses_gradient_stream() const { return mode != StreamMode::image_only; }

  Descriptor descriptor() const {
    Descriptor d;
    d.kind = "trn";
    d.fields["channels"] = std::to_string(channels);
    d.fields["classes"] = std::to_string(classes);
    d.fields["blocks"] = std::to_string(blocks);
    d.fields["growth"] = std::to_string(growth);
    d.fields["image_width"] = std::to_string(image_width);
    d.fields["gradient_width"] = std::to_string(gradient_width);
    d.fields["ca_reduction"] = std::to_string(ca_reduction);
    d.fields["mode"] = to_string(mode);
    d.fields["per_block_image_residual"] = per_block_image_residual ? "1" : "0";
    d.fields["normalization"] = to_string(normalization);
    return d;
  }

  static TrnArch from_descriptor(const Descriptor& d) {
    if (d.kind != "trn") throw FormatError("unknown architecture tag '" + d.kind + "', expected trn");
    TrnArch a;
    a.channels = d.size_at("channels");
    a.classes = d.size_at("classes");
    a.blocks = d.size_at("blocks");
    a.growth = d.size_at("growth");
    a.image_width = d.size_at("image_width");
    a.gradient_width = d.size_at("gradient_width");
    a.ca_reduction = d.size_at("ca_reduction");
    a.mode = parse_stream_mode(d.at("mode"));
    a.per_block_image_residual = d.at("per_block_image_residual") == "1";
    a.normalization = parse_map_normalization(d.at("normalization"));
    return a;
  }

  void validate() const {
    if (blocks == 0) throw ConfigError("trn: at least one fusion block is required");
    if (channels == 0 || classes == 0 || growth == 0 || image_width == 0 || gradient_width == 0 || ca_reduction == 0) {
      throw ConfigError("trn: widths, channels, classes and reduction must be positive");
    }
  }
};

struct TrnForwardOptions {
  ParamMode params = ParamMode::frozen;
  // Cuts the gradient stream out of the backward pass where it feeds the
  // image stream. Forward values are unchanged.
  bool detach_gradient_stream = false;
};

template <typename T>
struct BlockFeatures {
  Tensor<T> image;
  Tensor<T> gradient;
};

/// Stack of Fusion Blocks between an image stem / gradient stem and an
/// image-space head whose output is added to the adversarial image.
///
/// Per block, with g = growth and dense connectivity inside each stream:
///   image stream    i1, i2 over [img, ...];  i3..i5 over [img, i1, ...]
///   injection       ca1([i1, i2]) is appended to the gradient stream input
///   gradient stream g1..g4 over [ca2(grad), injection, g1, ...]
///   fusion          i6([i5, g4]) is added to img (feature-space residual)
///   refinement      grad + transition1x1(g4), on every block but the last
template <typename T>
class TrnModel {
 public:
  explicit TrnModel(TrnArch arch = {}, std::uint64_t seed = 0) : arch_(std::move(arch)) {
    arch_.validate();
    Rng rng(seed);
    const std::size_t g = arch_.growth, iw = arch_.image_width, gw = arch_.gradient_width;
    auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
      params_.add(name + ".w", he_normal<T>({cout, cin, k, k}, cin * k * k, rng));
      params_.add(name + ".b", Tensor<T>::zeros({cout}));
    };
    auto zero_conv = [&](const std::string& name, std::size_t cin, std::size_t cout) {
      params_.add(name + ".w", Tensor<T>::zeros({cout, cin, 3, 3}));
      params_.add(name + ".b", Tensor<T>::zeros({cout}));
    };
    auto attention = [&](const std::string& name, std::size_t c) {
      const std::size_t h = attention_hidden(c, arch_.ca_reduction);
      params_.add(name + ".w1", he_normal<T>({c, h}, c, rng));
      params_.add(name + ".b1", Tensor<T>::zeros({h}));
      params_.add(name + ".w2", he_normal<T>({h, c}, h, rng));
      params_.add(name + ".b2", Tensor<T>::zeros({c}));
    };

    if (arch_.uses_image_stream()) conv("img_stem", arch_.channels, iw, 3);
    if (arch_.uses_gradient_stream()) conv("grad_stem", arch_.map_channels(), gw, 3);
    for (std::size_t k = 0; k < arch_.blocks; ++k) {
      const std::string b = block_prefix(k);
      const bool img = arch_.uses_image_stream(), grad = arch_.uses_gradient_stream();
      if (img) {
        for (std::size_t j = 1; j <= 5; ++j) conv(b + ".i" + std::to_string(j), iw + (j - 1) * g, g, 3);
      }
      if (grad) {
        const std::size_t inject = img ? 2 * g : 0;
        if (img) attention(b + ".ca1", 2 * g);
        attention(b + ".ca2", gw);
        for (std::size_t j = 1; j <= 4; ++j) conv(b + ".g" + std::to_string(j), gw + inject + (j - 1) * g, g, 3);
        // The last block's gradient output has no consumer, so it has no transition.
        if (k + 1 < arch_.blocks) conv(b + ".transition", g, gw, 1);
      }
      // image_only keeps i6's gradient half and feeds it zeros.
      conv(b + ".i6", img ? 2 * g : g, iw, 3);
      if (arch_.per_block_image_residual) zero_conv(b + ".head", iw, arch_.channels);
    }
    if (!arch_.per_block_image_residual) zero_conv("head", iw, arch_.channels);
  }

  const TrnArch& arch() const { return arch_; }
  const ParamSet<T>& params() const { return params_; }
  ParamSet<T>& params() { return params_; }
  std::uint64_t checksum() const { return params_.checksum(); }
  std::map<std::string, std::string>& meta() { return meta_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }

  std::string descriptor() const {
    Descriptor d = arch_.descriptor();
    for (const auto& [k, v] : meta_) d.fields["meta." + k] = v;
    return d.str();
  }

  static std::string block_prefix(std::size_t k) { return "block" + std::to_string(k); }

  ChannelAttentionParams<T> attention_params(const std::string& name, ParamMode mode) const {
    return {params_.view(name + ".w1", mode), params_.view(name + ".b1", mode), params_.view(name + ".w2", mode),
            params_.view(name + ".b2", mode)};
  }

  /// One Fusion Block. Features must carry the declared stream widths.
  BlockFeatures<T> block_forward(Tape<T>& tape, std::size_t k, const Tensor<T>& img, const Tensor<T>& grad,
                                 const TrnForwardOptions& opts = {}) const {
    if (k >= arch_.blocks) throw ConfigError("trn: no block " + std::to_string(k));
    const std::string b = block_prefix(k);
    auto require_width = [&](const Tensor<T>& t, std::size_t width, const char* what) {
      if (t.rank() != 4 || t.dim(1) != width) {
        throw ShapeError("fusion block " + std::to_string(k) + ": " + what + " features " + shape_str(t.shape()) +
                         " do not have " + std::to_string(width) + " channels");
      }
    };
    require_width(img, arch_.image_width, "image");
    require_width(grad, arch_.gradient_width, "gradient");
    auto conv = [&](const std::vector<Tensor<T>>& inputs, const std::string& name, bool activate) {
      Tensor<T> in = tape.concat_channels(std::span<const Tensor<T>>(inputs));
      const std::size_t pad = params_.at(name + ".w").dim(2) / 2;
      Tensor<T> out = tape.conv2d(in, params_.view(name + ".w", opts.params), params_.view(name + ".b", opts.params), 1, pad);
      return activate ? tape.relu(out) : out;
    };

    std::vector<Tensor<T>> image_stack{img};
    Tensor<T> injection;
    if (arch_.uses_image_stream()) {
      for (std::size_t j = 1; j <= 2; ++j) image_stack.push_back(conv(image_stack, b + ".i" + std::to_string(j), true));
      if (arch_.uses_gradient_stream()) {
        injection = channel_attention(tape, tape.concat_channels({image_stack[1], image_stack[2]}),
                                      attention_params(b + ".ca1", opts.params));
      }
    }

    BlockFeatures<T> out;
    Tensor<T> g4;
    if (arch_.uses_gradient_stream()) {
      std::vector<Tensor<T>> grad_stack{channel_attention(tape, grad, attention_params(b + ".ca2", opts.params))};
      if (injection.defined()) grad_stack.push_back(injection);
      for (std::size_t j = 1; j <= 4; ++j) grad_stack.push_back(conv(grad_stack, b + ".g" + std::to_string(j), true));
      g4 = grad_stack.back();
      out.gradient = k + 1 < arch_.blocks ? tape.add(grad, conv({g4}, b + ".transition", false)) : grad;
      if (opts.detach_gradient_stream) g4 = g4.detach();
    } else {
      out.gradient = grad;
      g4 = Tensor<T>::zeros({img.dim(0), arch_.growth, img.dim(2), img.dim(3)});
    }

    Tensor<T> fused;
    if (arch_.uses_image_stream()) {
      for (std::size_t j = 3; j <= 5; ++j) image_stack.push_back(conv(image_stack, b + ".i" + std::to_string(j), true));
      fused = conv({image_stack.back(), g4}, b + ".i6", false);
    } else {
      fused = conv({g4}, b + ".i6", false);
    }
    out.image = tape.add(img, fused);
    return out;
  }

  /// x_r = clamp(x_adv + head(features), 0, 1). `maps` may be left
  /// undefined for the image-only variant.
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& maps, const Tensor<T>& x_adv,
                    const TrnForwardOptions& opts = {}) const {
    if (x_adv.rank() != 4 || x_adv.dim(1) != arch_.channels) {
      throw ShapeError("trn: adversarial image " + shape_str(x_adv.shape()) + " does not have " +
                       std::to_string(arch_.channels) + " channels");
    }
    const std::size_t N = x_adv.dim(0), H = x_adv.dim(2), W = x_adv.dim(3);
    if (arch_.uses_gradient_stream()) {
      if (!maps.defined() || maps.shape() != Shape{N, arch_.map_channels(), H, W}) {
        throw ShapeError("trn: gradient maps " + (maps.defined() ? shape_str(maps.shape()) : std::string("<none>")) +
                         " do not match N x " + std::to_string(arch_.map_channels()) + " x H x W");
      }
    }
    auto p = [&](const std::string& name) { return params_.view(name, opts.params); };
    Tensor<T> img = arch_.uses_image_stream() ? tape.conv2d(x_adv, p("img_stem.w"), p("img_stem.b"), 1, 1)
                                              : Tensor<T>::zeros({N, arch_.image_width, H, W});
    Tensor<T> grad = arch_.uses_gradient_stream() ? tape.conv2d(maps, p("grad_stem.w"), p("grad_stem.b"), 1, 1)
                                                  : Tensor<T>::zeros({N, arch_.gradient_width, H, W});
    Tensor<T> restored = x_adv;
    for (std::size_t k = 0; k < arch_.blocks; ++k) {
      BlockFeatures<T> f = block_forward(tape, k, img, grad, opts);
      img = f.image;
      grad = f.gradient;
      if (arch_.per_block_image_residual) {
        const std::string h = block_prefix(k) + ".head";
        restored = tape.add(restored, tape.conv2d(img, p(h + ".w"), p(h + ".b"), 1, 1));
      }
    }
    if (!arch_.per_block_image_residual) restored = tape.add(x_adv, tape.conv2d(img, p("head.w"), p("head.b"), 1, 1));
    return tape.clamp_straight_through(restored, T(0), T(1));
  }

  /// Inference: computes gradient maps from `classifier` when the gradient
  /// stream is in use, then restores.
  Tensor<T> restore(const Classifier<T>& classifier, const Tensor<T>& x_adv, GmemCounters* counters = nullptr) const {
    Tensor<T> maps;
    if (arch_.uses_gradient_stream()) maps = gradient_maps(classifier, x_adv, arch_.normalization, counters).maps;
    return restore_with_maps(maps, x_adv);
  }

  Tensor<T> restore_with_maps(const Tensor<T>& maps, const Tensor<T>& x_adv) const {
    Tape<T> tape;
    return forward(tape, maps.defined() ? maps.detach() : maps, x_adv.detach()).detach();
  }

 private:
  TrnArch arch_;
  ParamSet<T> params_;
  std::map<std::string, std::string> meta_;
};

template <typename T>
BlockFeatures<T> fusion_block_forward(Tape<T>& tape, const TrnModel<T>& model, std::size_t block,
                                      const Tensor<T>& img_feat, const Tensor<T>& grad_feat,
                                      const TrnForwardOptions& opts = {}) {
  return model.block_forward(tape, block, img_feat, grad_feat, opts);
}

template <typename T>
TrnModel<T> load_trn(const std::string& path) {
  CheckpointData<T> data = load_checkpoint_file<T>(path);
  const Descriptor d = Descriptor::parse(data.descriptor);
  TrnModel<T> model(TrnArch::from_descriptor(d));
  model.params().assign(data.params);
  for (const auto& [k, v] : d.fields) {
    if (k.rfind("meta.", 0) == 0) model.meta()[k.substr(5)] = v;
  }
  return model;
}

}  // namespace gradshield
