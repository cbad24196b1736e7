#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gradshield/errors.hpp"
#include "gradshield/rng.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}

/// Images M x C x H x W in [0,1] with labels and contiguous split ranges.
template <typename T>
struct Dataset {
  Tensor<T> images;
  std::vector<int> labels;
  std::size_t classes = 0;
  IndexRange train, val, test;
  std::string source;

  std::size_t size() const { return labels.size(); }

  IndexRange range(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::val: return val;
      case Split::test: return test;
    }
    return {};
  }

  Tensor<T> images_of(IndexRange r) const { return slice_batch(images, r.begin, r.end); }
  std::vector<int> labels_of(IndexRange r) const { return {labels.begin() + r.begin, labels.begin() + r.end}; }

  /// Checks pixel range, label range and split layout.
  void validate() const {
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
      throw ShapeError("dataset: images " + shape_str(images.shape()) + " vs " + std::to_string(labels.size()) + " labels");
    }
    for (T v : images.values()) {
      if (!(v >= T(0) && v <= T(1))) throw ValidationError("dataset: pixel outside [0,1]");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw ValidationError("dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
      }
    }
    const IndexRange rs[] = {train, val, test};
    for (const auto& r : rs) {
      if (r.begin > r.end || r.end > size()) throw ValidationError("dataset: split range out of bounds");
    }
    if (train.end > val.begin && !val.empty() && !train.empty()) throw ValidationError("dataset: overlapping splits");
    if (val.end > test.begin && !test.empty() && !val.empty()) throw ValidationError("dataset: overlapping splits");
  }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated " + what);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

inline std::vector<unsigned char> read_bytes(std::istream& is, std::size_t n, const std::string& what) {
  std::vector<unsigned char> out(n);
  if (n && !is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n))) {
    throw FormatError("truncated " + what);
  }
  return out;
}

inline std::ifstream open_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return is;
}

}  // namespace detail

/// IDX image/label pair (magic 0x00000803 / 0x00000801, big-endian). All
/// samples land in the train range.
template <typename T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes = 10) {
  std::ifstream img = detail::open_binary(images_path);
  std::ifstream lbl = detail::open_binary(labels_path);
  const std::uint32_t img_magic = detail::read_be32(img, "IDX image header");
  if (img_magic != 0x00000803) throw FormatError(images_path + ": bad IDX image magic");
  const std::uint32_t lbl_magic = detail::read_be32(lbl, "IDX label header");
  if (lbl_magic != 0x00000801) throw FormatError(labels_path + ": bad IDX label magic");
  const std::size_t count = detail::read_be32(img, "IDX image header");
  const std::size_t rows = detail::read_be32(img, "IDX image header");
  const std::size_t cols = detail::read_be32(img, "IDX image header");
  const std::size_t label_count = detail::read_be32(lbl, "IDX label header");
  if (count != label_count) {
    throw FormatError("IDX count mismatch: " + std::to_string(count) + " images vs " + std::to_string(label_count) +
                      " labels");
  }
  const auto pixels = detail::read_bytes(img, count * rows * cols, "IDX image data in " + images_path);
  const auto raw_labels = detail::read_bytes(lbl, count, "IDX label data in " + labels_path);
  Dataset<T> ds;
  std::vector<T> values(pixels.size());
  std::transform(pixels.begin(), pixels.end(), values.begin(), [](unsigned char b) { return static_cast<T>(b) / T(255); });
  ds.images = Tensor<T>({count, 1, rows, cols}, std::move(values));
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  ds.classes = classes;
  ds.train = {0, count};
  ds.val = ds.test = {count, count};
  ds.source = "idx:" + images_path;
  ds.validate();
  return ds;
}

/// CIFAR-10 binary batches: 3073-byte records (label, then R, G, B planes).
template <typename T>
Dataset<T> load_cifar_bin(const std::vector<std::string>& paths) {
  constexpr std::size_t record = 3073, plane = 1024;
  std::vector<T> values;
  std::vector<int> labels;
  for (const auto& path : paths) {
    std::ifstream is = detail::open_binary(path);
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() % record != 0) {
      throw FormatError(path + ": size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
    }
    for (std::size_t off = 0; off < bytes.size(); off += record) {
      if (bytes[off] >= 10) throw ValidationError(path + ": label byte " + std::to_string(bytes[off]) + " >= 10");
      labels.push_back(bytes[off]);
      for (std::size_t i = 0; i < 3 * plane; ++i) values.push_back(static_cast<T>(bytes[off + 1 + i]) / T(255));
    }
  }
  Dataset<T> ds;
  const std::size_t n = labels.size();
  ds.images = Tensor<T>({n, 3, 32, 32}, std::move(values));
  ds.labels = std::move(labels);
  ds.classes = 10;
  ds.train = {0, n};
  ds.val = ds.test = {n, n};
  ds.source = "cifar10";
  ds.validate();
  return ds;
}

/// Nearest-neighbour resampling: output (y, x) reads input (y*H/H', x*W/W') floored.
template <typename T>
Tensor<T> resize_nn(const Tensor<T>& images, std::size_t out_h, std::size_t out_w) {
  if (images.rank() != 4) throw ShapeError("resize_nn: expected N x C x H x W");
  if (out_h == 0 || out_w == 0) throw ValidationError("resize_nn: target must be at least 1x1");
  const std::size_t NC = images.dim(0) * images.dim(1), H = images.dim(2), W = images.dim(3);
  if (H == out_h && W == out_w) return images.clone();
  std::vector<T> out(NC * out_h * out_w);
  for (std::size_t p = 0; p < NC; ++p) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const std::size_t sy = y * H / out_h;
      for (std::size_t x = 0; x < out_w; ++x) {
        out[(p * out_h + y) * out_w + x] = images[(p * H + sy) * W + x * W / out_w];
      }
    }
  }
  return Tensor<T>({images.dim(0), images.dim(1), out_h, out_w}, std::move(out));
}

/// Appends `test` to `train` and carves a seeded validation subset (val_fraction
/// of train) out of the training samples.
template <typename T>
Dataset<T> compose_splits(const Dataset<T>& train, const Dataset<T>& test, std::uint64_t seed,
                          double val_fraction = 0.1) {
  if (train.images.defined() && test.images.defined() && train.size() && test.size() &&
      !std::equal(train.images.shape().begin() + 1, train.images.shape().end(), test.images.shape().begin() + 1)) {
    throw ShapeError("compose_splits: train and test images differ in shape");
  }
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(order.size())));
  // Train first, then the carved validation samples, both in original order.
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::vector<std::size_t> all = train_idx;
  all.insert(all.end(), val_idx.begin(), val_idx.end());

  Dataset<T> ds;
  const Tensor<T> parts[] = {gather_batch(train.images, all), test.images};
  ds.images = concat_batch(std::span<const Tensor<T>>(parts));
  for (std::size_t i : all) ds.labels.push_back(train.labels[i]);
  ds.labels.insert(ds.labels.end(), test.labels.begin(), test.labels.end());
  ds.classes = std::max(train.classes, test.classes);
  ds.train = {0, train_idx.size()};
  ds.val = {train_idx.size(), all.size()};
  ds.test = {all.size(), ds.labels.size()};
  ds.source = train.source;
  ds.validate();
  return ds;
}

struct SynthOptions {
  std::uint64_t seed = 0;
  std::size_t classes = 10;
  std::size_t per_class = 100;
  // Per-class split counts; when all zero, per_class is split 80/10/10.
  std::size_t train_per_class = 0;
  std::size_t val_per_class = 0;
  std::size_t test_per_class = 0;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  double noise = 0.1;
  double bar_contrast = 0.05;
  double blob_contrast = 0.05;
};

/// Template of class `cls`: a grating oriented at pi * cls / classes plus a
/// Gaussian blob placed on a ring at angle 2 * pi * cls / classes, on a 0.5
/// grey background. Channels c > 0 carry the same pattern with a per-channel
/// phase shift.
inline std::vector<double> synth_template(std::size_t cls, const SynthOptions& o) {
  const double theta = std::numbers::pi * static_cast<double>(cls) / static_cast<double>(o.classes);
  const double ring = 2 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(o.classes);
  const double H = static_cast<double>(o.height), W = static_cast<double>(o.width);
  const double cy = H / 2 - 0.5 + 0.3 * H * std::sin(ring), cx = W / 2 - 0.5 + 0.3 * W * std::cos(ring);
  const double sigma = 0.12 * std::min(H, W);
  std::vector<double> t(o.channels * o.height * o.width);
  for (std::size_t c = 0; c < o.channels; ++c) {
    for (std::size_t y = 0; y < o.height; ++y) {
      for (std::size_t x = 0; x < o.width; ++x) {
        const double u = (static_cast<double>(x) - W / 2) / W, v = (static_cast<double>(y) - H / 2) / H;
        const double bar = std::cos(2 * std::numbers::pi * 2.0 * (u * std::cos(theta) + v * std::sin(theta)) +
                                    0.7 * static_cast<double>(c));
        const double d2 = (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy) +
                          (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx);
        const double blob = std::exp(-d2 / (2 * sigma * sigma));
        t[(c * o.height + y) * o.width + x] = 0.5 + o.bar_contrast * bar + o.blob_contrast * (2 * blob - 0.5);
      }
    }
  }
  return t;
}

/// Deterministic synthetic dataset: class template + U(-noise, noise),
/// clamped to [0,1]. Samples are laid out train | val | test, classes
/// interleaved within each split.
template <typename T>
Dataset<T> synth_dataset(const SynthOptions& opts) {
  if (opts.classes < 2) throw ValidationError("synth_dataset: need at least 2 classes");
  SynthOptions o = opts;
  if (o.train_per_class + o.val_per_class + o.test_per_class == 0) {
    o.train_per_class = o.per_class * 8 / 10;
    o.val_per_class = o.per_class / 10;
    o.test_per_class = o.per_class - o.train_per_class - o.val_per_class;
  }
  std::vector<std::vector<double>> templates;
  for (std::size_t c = 0; c < o.classes; ++c) templates.push_back(synth_template(c, o));
  const std::size_t per = o.channels * o.height * o.width;
  const std::size_t counts[] = {o.train_per_class, o.val_per_class, o.test_per_class};
  const std::size_t total = (counts[0] + counts[1] + counts[2]) * o.classes;
  Rng rng(o.seed);
  std::vector<T> values;
  values.reserve(total * per);
  Dataset<T> ds;
  for (std::size_t count : counts) {
    for (std::size_t j = 0; j < count; ++j) {
      for (std::size_t c = 0; c < o.classes; ++c) {
        for (std::size_t i = 0; i < per; ++i) {
          const double v = templates[c][i] + (o.noise > 0 ? rng.uniform(-o.noise, o.noise) : 0.0);
          values.push_back(static_cast<T>(std::clamp(v, 0.0, 1.0)));
        }
        ds.labels.push_back(static_cast<int>(c));
      }
    }
  }
  ds.images = Tensor<T>({total, o.channels, o.height, o.width}, std::move(values));
  ds.classes = o.classes;
  const std::size_t a = counts[0] * o.classes, b = a + counts[1] * o.classes;
  ds.train = {0, a};
  ds.val = {a, b};
  ds.test = {b, total};
  std::ostringstream src;
  src << "synth://seed=" << o.seed << ",n=" << o.classes << ",train=" << o.train_per_class
      << ",val=" << o.val_per_class << ",test=" << o.test_per_class;
  ds.source = src.str();
  ds.validate();
  return ds;
}

template <typename T>
struct Batch {
  Tensor<T> x;
  std::vector<int> y;
  std::vector<std::size_t> indices;
};

/// Index batches over a range: seeded Fisher-Yates shuffle, final short batch kept.
inline std::vector<std::vector<std::size_t>> batch_indices(IndexRange range, std::size_t batch_size,
                                                           std::uint64_t shuffle_seed, bool shuffle = true) {
  if (batch_size == 0) throw ValidationError("batches: batch_size must be >= 1");
  std::vector<std::size_t> order(range.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = range.begin + i;
  if (shuffle) {
    Rng rng(shuffle_seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
  }
  return out;
}

/// Range over the minibatches of one epoch; batches are materialized on dereference.
template <typename T>
class Batches {
 public:
  Batches(const Dataset<T>& ds, IndexRange range, std::size_t batch_size, std::uint64_t shuffle_seed,
          bool shuffle = true)
      : ds_(&ds), plan_(batch_indices(range, batch_size, shuffle_seed, shuffle)) {}

  class iterator {
   public:
    using value_type = Batch<T>;
    using difference_type = std::ptrdiff_t;
    iterator(const Batches* owner, std::size_t i) : owner_(owner), i_(i) {}
    Batch<T> operator*() const { return owner_->at(i_); }
    iterator& operator++() {
      ++i_;
      return *this;
    }
    bool operator==(const iterator& o) const { return i_ == o.i_; }

   private:
    const Batches* owner_;
    std::size_t i_;
  };

  iterator begin() const { return {this, 0}; }
  iterator end() const { return {this, plan_.size()}; }
  std::size_t size() const { return plan_.size(); }

  Batch<T> at(std::size_t i) const {
    Batch<T> b;
    b.indices = plan_.at(i);
    b.x = gather_batch(ds_->images, std::span<const std::size_t>(b.indices));
    for (std::size_t idx : b.indices) b.y.push_back(ds_->labels[idx]);
    return b;
  }

 private:
  const Dataset<T>* ds_;
  std::vector<std::vector<std::size_t>> plan_;
};

template <typename T>
Batches<T> batches(const Dataset<T>& ds, IndexRange range, std::size_t batch_size, std::uint64_t shuffle_seed,
                   bool shuffle = true) {
  return Batches<T>(ds, range, batch_size, shuffle_seed, shuffle);
}

/// Resolves a relative path against $GRADSHIELD_DATA_DIR when set.
inline std::string resolve_data_path(const std::string& path) {
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  if (const char* root = std::getenv("GRADSHIELD_DATA_DIR"); root && *root) return (std::filesystem::path(root) / p).string();
  return path;
}

/// Parses "key=value,key=value".
inline std::map<std::string, std::string> parse_kv_list(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  for (std::string item; std::getline(is, item, ',');) {
    if (item.empty()) continue;
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos) throw ValidationError("expected key=value, got '" + item + "'");
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

/// Dataset references:
///   synth://seed=S,n=10,per_class=P[,train=A,val=B,test=C][,noise=X][,size=H]
///   fashion://DIR   (standard IDX file names, resized to 32x32)
///   cifar10://DIR   (data_batch_1..5.bin, test_batch.bin)
///   idx://IMAGES,LABELS
/// Non-synthetic sources take a seeded 10% validation carve-out from train.
template <typename T>
Dataset<T> load_dataset(const std::string& ref, std::uint64_t seed = 0) {
  const std::size_t sep = ref.find("://");
  if (sep == std::string::npos) throw ValidationError("dataset reference needs a scheme: '" + ref + "'");
  const std::string scheme = ref.substr(0, sep), rest = ref.substr(sep + 3);
  auto num = [](const std::map<std::string, std::string>& kv, const std::string& key, std::size_t fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : static_cast<std::size_t>(std::stoull(it->second));
  };
  if (scheme == "synth") {
    const auto kv = parse_kv_list(rest);
    for (const auto& [k, v] : kv) {
      static const char* known[] = {"seed", "n", "per_class", "train", "val", "test", "noise", "size", "channels"};
      if (std::none_of(std::begin(known), std::end(known), [&](const char* s) { return k == s; })) {
        throw ValidationError("unknown synth key '" + k + "'");
      }
    }
    SynthOptions o;
    o.seed = num(kv, "seed", 0);
    o.classes = num(kv, "n", 10);
    o.per_class = num(kv, "per_class", 100);
    o.train_per_class = num(kv, "train", 0);
    o.val_per_class = num(kv, "val", 0);
    o.test_per_class = num(kv, "test", 0);
    o.height = o.width = num(kv, "size", 16);
    o.channels = num(kv, "channels", 1);
    if (auto it = kv.find("noise"); it != kv.end()) o.noise = std::stod(it->second);
    return synth_dataset<T>(o);
  }
  if (scheme == "fashion") {
    const std::filesystem::path dir = resolve_data_path(rest);
    auto tr = load_idx<T>((dir / "train-images-idx3-ubyte").string(), (dir / "train-labels-idx1-ubyte").string());
    auto te = load_idx<T>((dir / "t10k-images-idx3-ubyte").string(), (dir / "t10k-labels-idx1-ubyte").string());
    tr.images = resize_nn(tr.images, 32, 32);
    te.images = resize_nn(te.images, 32, 32);
    auto ds = compose_splits(tr, te, seed);
    ds.source = ref;
    return ds;
  }
  if (scheme == "cifar10") {
    const std::filesystem::path dir = resolve_data_path(rest);
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i) train_files.push_back((dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
    auto ds = compose_splits(load_cifar_bin<T>(train_files), load_cifar_bin<T>({(dir / "test_batch.bin").string()}), seed);
    ds.source = ref;
    return ds;
  }
  if (scheme == "idx") {
    const std::size_t comma = rest.find(',');
    if (comma == std::string::npos) throw ValidationError("idx:// needs IMAGES,LABELS");
    Dataset<T> all = load_idx<T>(resolve_data_path(rest.substr(0, comma)), resolve_data_path(rest.substr(comma + 1)));
    Dataset<T> none;
    none.images = Tensor<T>({0, all.images.dim(1), all.images.dim(2), all.images.dim(3)}, {});
    none.classes = all.classes;
    auto ds = compose_splits(all, none, seed);
    ds.source = ref;
    return ds;
  }
  throw ValidationError("unknown dataset scheme '" + scheme + "'");
}

}  // namespace gradshield
