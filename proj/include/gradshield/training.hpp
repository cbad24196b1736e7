#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "gradshield/attacks.hpp"
#include "gradshield/classifier.hpp"
#include "gradshield/data.hpp"
#include "gradshield/errors.hpp"
#include "gradshield/gmem.hpp"
#include "gradshield/params.hpp"
#include "gradshield/tape.hpp"
#include "gradshield/trn.hpp"

namespace gradshield {

/// Bias-corrected Adam. Moments match parameter shapes; step only grows.
template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One Adam update from the gradients accumulated on `params`. A parameter
/// without a gradient slot is treated as having a zero gradient.
template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state) {
  auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& [name, t] : entries) {
      state.m.emplace_back(t.numel(), T(0));
      state.v.emplace_back(t.numel(), T(0));
    }
  }
  if (state.m.size() != entries.size()) throw ContractError("adam: state built for a different parameter set");
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto& [name, t] = entries[p];
    if (state.m[p].size() != t.numel()) throw ShapeError("adam: moment shape mismatch for '" + name + "'");
    if (t.has_grad() && !all_finite(t.grad())) throw NumericError("adam: non-finite gradient in parameter '" + name + "'");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& t = entries[p].second;
    if (!t.has_grad()) {
      // Zero gradient: moments decay, parameters still move by the momentum term.
      for (auto& x : state.m[p]) x *= b1;
      for (auto& x : state.v[p]) x *= b2;
    } else {
      auto g = t.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        state.m[p][i] = b1 * state.m[p][i] + (T(1) - b1) * g[i];
        state.v[p][i] = b2 * state.v[p][i] + (T(1) - b2) * g[i] * g[i];
      }
    }
    auto w = t.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double mh = static_cast<double>(state.m[p][i]) / c1;
      const double vh = static_cast<double>(state.v[p][i]) / c2;
      w[i] -= static_cast<T>(state.lr * mh / (std::sqrt(vh) + state.epsilon));
    }
  }
}

/// lr0 * factor^-(floor(epoch / every)).
inline double scheduled_lr(double lr0, std::size_t epoch, std::size_t every = 30, double factor = 10.0) {
  if (every == 0) return lr0;
  return lr0 * std::pow(factor, -static_cast<double>(epoch / every));
}

/// Mean squared difference between the benign and restored images.
template <typename T>
Tensor<T> pixel_loss(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& x_r) {
  return tape.l2_loss(x_r, x);
}

/// Mean cross-entropy of the restored image's logits against the true labels.
template <typename T>
Tensor<T> semantic_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> y) {
  return tape.softmax_cross_entropy(logits, y);
}

/// One line of the JSON-lines training log. NaN accuracy means "not measured".
struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double loss_pix = 0;
  double loss_smt = 0;
  double loss_total = 0;
  double clean_acc = std::numeric_limits<double>::quiet_NaN();
  double adv_acc = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0;

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"epoch", epoch},       {"lr", lr},           {"loss_pix", loss_pix}, {"loss_smt", loss_smt}, {"loss_total", loss_total},
            {"clean_acc", num(clean_acc)}, {"adv_acc", num(adv_acc)}, {"wall_ms", wall_ms}};
  }
};

struct StepRecord {
  double loss_pix = 0;
  double loss_smt = 0;
  double loss_total = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  bool early_stopped = false;
  std::size_t best_epoch = 0;
  double best_metric = -1;
  // Loss at the parameters the run started from, on the first training batch.
  double initial_loss = std::numeric_limits<double>::quiet_NaN();

  void write_jsonl(std::ostream& os) const {
    for (const auto& e : epochs) os << e.to_json().dump() << '\n';
  }
};

using EpochCallback = std::function<void(const EpochRecord&)>;

template <typename T>
double accuracy_percent(const std::vector<int>& pred, std::span<const int> y) {
  if (y.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += pred[i] == y[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(y.size());
}

/// Batched argmax predictions (bounded memory).
template <typename T>
std::vector<int> predict_batched(const Classifier<T>& model, const Tensor<T>& x, std::size_t batch = 256) {
  std::vector<int> out;
  for (std::size_t b = 0; b < x.dim(0); b += batch) {
    const auto p = model.predict(slice_batch(x, b, std::min(x.dim(0), b + batch)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

struct ClassifierTrainConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t lr_decay_every = 30;
  std::uint64_t seed = 0;
  Split eval_split = Split::val;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("classifier training: epochs and batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("classifier training: lr must be positive");
  }
};

/// Cross-entropy minimization with Adam over shuffled minibatches of the
/// train split. clean_acc is measured on cfg.eval_split after each epoch;
/// loss_smt carries the epoch-mean cross-entropy and loss_pix is 0.
template <typename T>
TrainReport train_classifier(const Dataset<T>& ds, Classifier<T>& model, const ClassifierTrainConfig& cfg,
                             const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (ds.train.empty()) throw ValidationError("train_classifier: empty training split");
  model.check_input(slice_batch(ds.images, ds.train.begin, ds.train.begin + 1));
  if (ds.classes > model.classes()) throw ValidationError("train_classifier: dataset has more classes than the model");
  AdamState<T> adam;
  TrainReport report;
  Rng shuffle_rng(cfg.seed);
  const IndexRange eval = ds.range(cfg.eval_split);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    adam.lr = scheduled_lr(cfg.lr, epoch, cfg.lr_decay_every);
    double loss_sum = 0;
    std::size_t seen = 0;
    for (const Batch<T>& b : batches(ds, ds.train, cfg.batch_size, shuffle_rng.fork(epoch).seed())) {
      Tape<T> tape;
      Tensor<T> loss = tape.softmax_cross_entropy(model.forward(tape, b.x, ParamMode::trainable), b.y);
      const double l = static_cast<double>(loss.item());
      if (!std::isfinite(l)) throw NumericError("train_classifier: loss diverged in epoch " + std::to_string(epoch));
      if (std::isnan(report.initial_loss)) report.initial_loss = l;
      model.params().clear_grads();
      tape.backward(loss);
      adam_step(model.params(), adam);
      loss_sum += l * static_cast<double>(b.y.size());
      seen += b.y.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    rec.loss_smt = rec.loss_total = loss_sum / static_cast<double>(seen);
    if (!eval.empty()) {
      const auto y = ds.labels_of(eval);
      rec.clean_acc = accuracy_percent<T>(predict_batched(model, ds.images_of(eval)), y);
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  model.params().clear_grads();
  return report;
}

/// Adversarial examples and gradient maps for a fixed set of dataset
/// samples, computed once against a frozen classifier. Valid only for
/// deterministic attacks, where x' is a pure function of (x, y).
template <typename T>
struct AdversarialPool {
  std::vector<std::size_t> indices;
  Tensor<T> x_clean;
  std::vector<int> labels;
  Tensor<T> x_adv;
  Tensor<T> maps_adv;
  Tensor<T> maps_clean;
  AttackMethod method = AttackMethod::mim;
  AttackConfig attack;
  MapNormalization normalization = MapNormalization::per_map_std;
  std::uint64_t classifier_checksum = 0;

  std::size_t size() const { return indices.size(); }
  /// Row of the pool holding dataset sample `index`.
  std::size_t row_of(std::size_t index) const {
    auto it = std::lower_bound(indices.begin(), indices.end(), index);
    if (it == indices.end() || *it != index) throw ContractError("pool has no sample " + std::to_string(index));
    return static_cast<std::size_t>(it - indices.begin());
  }
};

/// Builds a pool over `indices` (sorted ascending), `chunk` samples at a time.
template <typename T>
AdversarialPool<T> build_pool(const Classifier<T>& classifier, const Dataset<T>& ds, std::vector<std::size_t> indices,
                              AttackMethod method, const AttackConfig& attack, MapNormalization normalization,
                              bool with_clean_maps = true, std::size_t chunk = 128) {
  if (!attack_is_deterministic(method, attack)) {
    throw ContractError("build_pool: " + to_string(method) + " draws fresh randomness and cannot be pooled");
  }
  std::sort(indices.begin(), indices.end());
  AdversarialPool<T> pool;
  pool.indices = indices;
  pool.method = method;
  pool.attack = attack;
  pool.normalization = normalization;
  pool.classifier_checksum = classifier.checksum();
  pool.x_clean = gather_batch(ds.images, std::span<const std::size_t>(indices));
  for (std::size_t i : indices) pool.labels.push_back(ds.labels[i]);
  std::vector<Tensor<T>> adv, madv, mclean;
  for (std::size_t b = 0; b < indices.size(); b += chunk) {
    const std::size_t e = std::min(indices.size(), b + chunk);
    Tensor<T> x = slice_batch(pool.x_clean, b, e);
    std::span<const int> y(pool.labels.data() + b, e - b);
    Tensor<T> xa = run_attack(method, classifier, x, y, attack).x_adv;
    adv.push_back(xa);
    madv.push_back(gradient_maps(classifier, xa, normalization).maps);
    if (with_clean_maps) mclean.push_back(gradient_maps(classifier, x, normalization).maps);
  }
  pool.x_adv = concat_batch(std::span<const Tensor<T>>(adv));
  pool.maps_adv = concat_batch(std::span<const Tensor<T>>(madv));
  if (with_clean_maps) pool.maps_clean = concat_batch(std::span<const Tensor<T>>(mclean));
  return pool;
}

struct TrnTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t lr_decay_every = 30;
  AttackMethod attack = AttackMethod::mim;
  AttackConfig attack_config = AttackConfig::defaults_for(AttackMethod::mim);
  bool include_benign = true;
  double w_pix = 1.0;
  double w_smt = 1.0;
  std::uint64_t seed = 0;
  // Early stop when validation defended accuracy has not improved by
  // min_improvement points within `patience` epochs. 0 disables.
  std::size_t patience = 10;
  double min_improvement = 0.2;
  // Leading samples of the train / val splits to use; 0 means all.
  std::size_t train_limit = 0;
  std::size_t val_limit = 0;
  bool record_steps = false;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("trn training: epochs and batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("trn training: lr must be positive");
    if (w_pix < 0 || w_smt < 0 || (w_pix == 0 && w_smt == 0)) {
      throw ConfigError("trn training: loss weights must be >= 0 and not both zero");
    }
    if (attack == AttackMethod::bpda) throw ConfigError("trn training: BPDA needs a defense and cannot craft training data");
    attack_config.validate(attack);
  }
};

/// Leading `limit` indices of a split (all when limit is 0).
inline std::vector<std::size_t> split_indices(IndexRange r, std::size_t limit) {
  const std::size_t n = limit ? std::min(limit, r.size()) : r.size();
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = r.begin + i;
  return out;
}

/// Defended accuracy of pooled clean and adversarial samples, in percent.
template <typename T>
std::pair<double, double> pooled_defended_accuracy(const Classifier<T>& classifier, const TrnModel<T>& trn,
                                                   const AdversarialPool<T>& pool, std::size_t chunk = 128) {
  std::vector<int> clean, adv;
  const bool maps = trn.arch().uses_gradient_stream();
  for (std::size_t b = 0; b < pool.size(); b += chunk) {
    const std::size_t e = std::min(pool.size(), b + chunk);
    auto run = [&](const Tensor<T>& x, const Tensor<T>& m, std::vector<int>& out) {
      const auto p = classifier.predict(trn.restore_with_maps(maps ? slice_batch(m, b, e) : Tensor<T>{}, slice_batch(x, b, e)));
      out.insert(out.end(), p.begin(), p.end());
    };
    if (pool.maps_clean.defined()) run(pool.x_clean, pool.maps_clean, clean);
    run(pool.x_adv, pool.maps_adv, adv);
  }
  const double c = pool.maps_clean.defined() ? accuracy_percent<T>(clean, pool.labels) : std::numeric_limits<double>::quiet_NaN();
  return {c, accuracy_percent<T>(adv, pool.labels)};
}

/// Adversarial training of the restoration network against a frozen
/// classifier. Per minibatch: craft x' with the configured attack against
/// the classifier, compute gradient maps of x', restore, and take one Adam
/// step on the TRN parameters to minimize
///   w_pix * ||x_r - x||^2 + w_smt * CE(C(x_r), y).
/// With include_benign every batch also carries the clean samples and their
/// maps, 1:1. The classifier checksum is verified around every epoch.
template <typename T>
TrainReport train_trn(const Dataset<T>& ds, const Classifier<T>& classifier, TrnModel<T>& trn,
                      const TrnTrainConfig& cfg, std::type_identity_t<const AdversarialPool<T>*> train_pool = nullptr,
                      std::type_identity_t<const AdversarialPool<T>*> val_pool = nullptr,
                      const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (ds.train.empty()) throw ValidationError("train_trn: empty training split");
  if (trn.arch().classes != classifier.classes() || trn.arch().channels != classifier.arch().channels) {
    throw ConfigError("train_trn: restoration network and classifier disagree on classes or channels");
  }
  const std::uint64_t frozen = classifier.checksum();
  auto check_frozen = [&](std::size_t epoch) {
    if (classifier.checksum() != frozen) {
      throw ContractError("train_trn: classifier parameters changed during epoch " + std::to_string(epoch));
    }
  };
  const bool deterministic = attack_is_deterministic(cfg.attack, cfg.attack_config);
  const MapNormalization norm = trn.arch().normalization;
  auto pool_ok = [&](const AdversarialPool<T>* p) {
    return p && p->method == cfg.attack && p->normalization == norm && p->classifier_checksum == frozen &&
           (!cfg.include_benign || p->maps_clean.defined());
  };
  if (train_pool && !pool_ok(train_pool)) throw ContractError("train_trn: training pool does not match the configuration");
  std::optional<AdversarialPool<T>> own_val;
  if (!val_pool && !ds.val.empty()) {
    const AttackMethod m = deterministic ? cfg.attack : AttackMethod::mim;
    AttackConfig ac = deterministic ? cfg.attack_config : AttackConfig::defaults_for(AttackMethod::mim);
    if (!deterministic) ac.epsilon = cfg.attack_config.epsilon;
    own_val = build_pool(classifier, ds, split_indices(ds.val, cfg.val_limit), m, ac, norm);
    val_pool = &*own_val;
  }

  const auto train_idx = split_indices(ds.train, cfg.train_limit);
  IndexRange train_range{0, train_idx.size()};
  const bool uses_maps = trn.arch().uses_gradient_stream();
  AdamState<T> adam;
  TrainReport report;
  Rng rng(cfg.seed);
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    check_frozen(epoch);
    const auto start = std::chrono::steady_clock::now();
    adam.lr = scheduled_lr(cfg.lr, epoch, cfg.lr_decay_every);
    double pix_sum = 0, smt_sum = 0, tot_sum = 0;
    std::size_t steps = 0;
    std::size_t batch_no = 0;
    for (const auto& local : batch_indices(train_range, cfg.batch_size, rng.fork(epoch).seed())) {
      std::vector<std::size_t> idx(local.size());
      for (std::size_t i = 0; i < local.size(); ++i) idx[i] = train_idx[local[i]];
      Tensor<T> x = gather_batch(ds.images, std::span<const std::size_t>(idx));
      std::vector<int> y;
      for (std::size_t i : idx) y.push_back(ds.labels[i]);

      Tensor<T> x_adv, maps_adv, maps_clean;
      if (train_pool) {
        std::vector<std::size_t> rows;
        for (std::size_t i : idx) rows.push_back(train_pool->row_of(i));
        x_adv = gather_batch(train_pool->x_adv, std::span<const std::size_t>(rows));
        if (uses_maps) {
          maps_adv = gather_batch(train_pool->maps_adv, std::span<const std::size_t>(rows));
          if (cfg.include_benign) maps_clean = gather_batch(train_pool->maps_clean, std::span<const std::size_t>(rows));
        }
      } else {
        AttackConfig ac = cfg.attack_config;
        if (!deterministic) ac.seed = rng.fork(epoch).fork(batch_no).seed();
        x_adv = run_attack(cfg.attack, classifier, x, y, ac).x_adv;
        if (uses_maps) {
          maps_adv = gradient_maps(classifier, x_adv, norm).maps;
          if (cfg.include_benign) maps_clean = gradient_maps(classifier, x, norm).maps;
        }
      }
      ++batch_no;

      Tensor<T> input = x_adv, maps = maps_adv, target = x;
      std::vector<int> labels = y;
      if (cfg.include_benign) {
        const Tensor<T> in_parts[] = {x_adv, x};
        input = concat_batch(std::span<const Tensor<T>>(in_parts));
        const Tensor<T> tgt_parts[] = {x, x};
        target = concat_batch(std::span<const Tensor<T>>(tgt_parts));
        if (uses_maps) {
          const Tensor<T> map_parts[] = {maps_adv, maps_clean};
          maps = concat_batch(std::span<const Tensor<T>>(map_parts));
        }
        labels.insert(labels.end(), y.begin(), y.end());
      }

      Tape<T> tape;
      TrnForwardOptions opts;
      opts.params = ParamMode::trainable;
      Tensor<T> restored = trn.forward(tape, maps, input, opts);
      Tensor<T> lp = pixel_loss(tape, target, restored);
      Tensor<T> ls = semantic_loss(tape, classifier.forward(tape, restored, ParamMode::frozen), labels);
      Tensor<T> total = tape.add(tape.scalar_mul(lp, static_cast<T>(cfg.w_pix)), tape.scalar_mul(ls, static_cast<T>(cfg.w_smt)));
      const StepRecord step{static_cast<double>(lp.item()), static_cast<double>(ls.item()), static_cast<double>(total.item())};
      if (!std::isfinite(step.loss_total)) throw NumericError("train_trn: loss diverged in epoch " + std::to_string(epoch));
      if (std::isnan(report.initial_loss)) report.initial_loss = step.loss_total;
      if (cfg.record_steps) report.steps.push_back(step);
      trn.params().clear_grads();
      tape.backward(total);
      adam_step(trn.params(), adam);
      pix_sum += step.loss_pix;
      smt_sum += step.loss_smt;
      tot_sum += step.loss_total;
      ++steps;
    }
    trn.params().clear_grads();
    check_frozen(epoch);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    rec.loss_pix = pix_sum / static_cast<double>(steps);
    rec.loss_smt = smt_sum / static_cast<double>(steps);
    rec.loss_total = tot_sum / static_cast<double>(steps);
    if (val_pool) std::tie(rec.clean_acc, rec.adv_acc) = pooled_defended_accuracy(classifier, trn, *val_pool);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (val_pool && cfg.patience > 0) {
      if (rec.adv_acc >= report.best_metric + cfg.min_improvement || report.best_metric < 0) {
        report.best_metric = rec.adv_acc;
        report.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        report.early_stopped = true;
        break;
      }
    }
  }
  return report;
}

}  // namespace gradshield
