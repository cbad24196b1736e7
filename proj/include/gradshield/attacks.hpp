#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradshield/classifier.hpp"
#include "gradshield/errors.hpp"
#include "gradshield/gmem.hpp"
#include "gradshield/rng.hpp"
#include "gradshield/tape.hpp"
#include "gradshield/tensor.hpp"
#include "gradshield/trn.hpp"

namespace gradshield {

enum class AttackMethod { fgsm, bim, pgd, mim, ffgsm, bpda };

inline std::string to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::fgsm: return "fgsm";
    case AttackMethod::bim: return "bim";
    case AttackMethod::pgd: return "pgd";
    case AttackMethod::mim: return "mim";
    case AttackMethod::ffgsm: return "ffgsm";
    case AttackMethod::bpda: return "bpda";
  }
  return "?";
}

inline AttackMethod parse_attack_method(const std::string& s) {
  for (AttackMethod m : {AttackMethod::fgsm, AttackMethod::bim, AttackMethod::pgd, AttackMethod::mim,
                         AttackMethod::ffgsm, AttackMethod::bpda}) {
    if (to_string(m) == s) return m;
  }
  throw ValidationError("unknown attack method '" + s + "'");
}

/// Parses "k/255"-style fractions exactly (k / 255.0) or a plain decimal.
inline double parse_pixel_value(const std::string& s) {
  try {
    const std::size_t slash = s.find('/');
    std::size_t used = 0;
    if (slash == std::string::npos) {
      const double v = std::stod(s, &used);
      if (used != s.size()) throw ValidationError("");
      return v;
    }
    const double num = std::stod(s.substr(0, slash), &used);
    if (used != slash) throw ValidationError("");
    const std::string den_s = s.substr(slash + 1);
    const double den = std::stod(den_s, &used);
    if (used != den_s.size() || den == 0) throw ValidationError("");
    return num / den;
  } catch (const std::exception&) {
    throw ValidationError("cannot parse pixel value '" + s + "'");
  }
}

/// Shared l-infinity attack settings, all in [0,1] pixel units.
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double alpha = 1.0 / 255.0;
  int iterations = 10;
  double momentum_decay = 1.0;
  bool random_init = false;
  std::uint64_t seed = 0;
  int restarts = 1;
  // Evaluates the loss once more after the last step so the trace ends at x'_T.
  bool track_loss = false;

  /// Defaults per method: eps 8/255, alpha 1/255, 10 iterations; PGD starts
  /// from a random point; FFGSM steps 1.25 * eps from its random start.
  static AttackConfig defaults_for(AttackMethod m) {
    AttackConfig c;
    if (m == AttackMethod::pgd || m == AttackMethod::bpda) c.random_init = true;
    if (m == AttackMethod::ffgsm) {
      c.random_init = true;
      c.alpha = 1.25 * c.epsilon;
    }
    return c;
  }

  /// alpha may exceed epsilon only for FFGSM, whose conventional step is 1.25 * eps.
  void validate(AttackMethod m) const {
    if (!(epsilon >= 0 && epsilon <= 1)) throw ValidationError("attack: epsilon must lie in [0, 1]");
    if (!(alpha >= 0)) throw ValidationError("attack: alpha must be non-negative");
    if (m != AttackMethod::ffgsm && alpha > epsilon) throw ValidationError("attack: alpha must not exceed epsilon");
    if (iterations < 1) throw ValidationError("attack: iterations must be >= 1");
    if (!(momentum_decay >= 0)) throw ValidationError("attack: momentum decay must be >= 0");
    if (restarts < 1) throw ValidationError("attack: restarts must be >= 1");
  }
};

template <typename T>
struct AdversarialBatch {
  Tensor<T> x_adv;
  Tensor<T> x_clean;
  std::vector<int> labels;
  AttackConfig config;
  // Mean cross-entropy at each iterate; entry t is the loss at x'_t.
  std::vector<double> loss_trace;
};

/// Gradient of the summed cross-entropy w.r.t. the input, plus the mean loss.
template <typename T>
struct InputGradient {
  Tensor<T> grad;
  double mean_loss = 0;
};

template <typename T>
using GradientFn = std::function<InputGradient<T>(const Tensor<T>&, std::span<const int>)>;
template <typename T>
using PredictFn = std::function<std::vector<int>(const Tensor<T>&)>;

namespace detail {

// Loss is summed over the batch (seed N on the batch mean) so every sample's
// gradient is independent of what else shares its batch.
template <typename T>
InputGradient<T> backprop_input(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& logits,
                                std::span<const int> y) {
  Tensor<T> loss = tape.softmax_cross_entropy(logits, y);
  const T seed = static_cast<T>(input.dim(0));
  tape.backward(loss, std::span<const T>(&seed, 1));
  return {input.grad_tensor(), static_cast<double>(loss.item())};
}

template <typename T>
void check_attack_inputs(const Tensor<T>& x, std::span<const int> y) {
  if (x.rank() != 4) throw ShapeError("attack: input must be N x C x H x W, got " + shape_str(x.shape()));
  if (y.size() != x.dim(0)) throw ShapeError("attack: label count does not match batch");
  for (T v : x.values()) {
    if (!(v >= T(0) && v <= T(1))) throw ValidationError("attack: clean input outside [0,1]");
  }
}

/// eps-ball clamp around `clean`, then [0,1]. Idempotent.
template <typename T>
void project(std::span<T> adv, std::span<const T> clean, T eps) {
  for (std::size_t i = 0; i < adv.size(); ++i) {
    T v = std::min(std::max(adv[i], clean[i] - eps), clean[i] + eps);
    adv[i] = std::min(std::max(v, T(0)), T(1));
  }
}

template <typename T>
bool within_budget(std::span<const T> adv, std::span<const T> clean, double eps) {
  for (std::size_t i = 0; i < adv.size(); ++i) {
    if (std::abs(static_cast<double>(adv[i]) - static_cast<double>(clean[i])) > eps + 1e-6) return false;
    if (adv[i] < T(0) || adv[i] > T(1)) return false;
  }
  return true;
}

template <typename T>
T sign_of(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

template <typename T>
Tensor<T> uniform_start(const Tensor<T>& x, T eps, Rng rng) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T noise = static_cast<T>(rng.uniform(-static_cast<double>(eps), static_cast<double>(eps)));
    out[i] = std::min(std::max(x[i] + noise, T(0)), T(1));
  }
  return Tensor<T>(x.shape(), std::move(out));
}

/// Sign-gradient iterations from `start`, with the MIM accumulator when
/// `momentum` is set.
template <typename T>
Tensor<T> iterate(const GradientFn<T>& gradient, const Tensor<T>& x, std::span<const int> y, const AttackConfig& cfg,
                  Tensor<T> start, bool momentum, std::vector<double>* trace) {
  const T eps = static_cast<T>(cfg.epsilon), alpha = static_cast<T>(cfg.alpha), mu = static_cast<T>(cfg.momentum_decay);
  Tensor<T> adv = start.clone();
  const std::size_t N = x.dim(0), per = x.numel() / N;
  std::vector<T> velocity(momentum ? adv.numel() : 0, T(0));
  for (int t = 0; t < cfg.iterations; ++t) {
    InputGradient<T> g = gradient(adv, y);
    if (trace) trace->push_back(g.mean_loss);
    auto grad = g.grad.values();
    auto a = adv.mutable_values();
    if (momentum) {
      for (std::size_t n = 0; n < N; ++n) {
        T l1 = 0;
        for (std::size_t i = 0; i < per; ++i) l1 += std::abs(grad[n * per + i]);
        // A zero gradient has no direction to normalize; it contributes nothing.
        for (std::size_t i = 0; i < per; ++i) {
          const std::size_t k = n * per + i;
          velocity[k] = mu * velocity[k] + (l1 > T(0) ? grad[k] / l1 : T(0));
          a[k] += alpha * sign_of(velocity[k]);
        }
      }
    } else {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += alpha * sign_of(grad[i]);
    }
    project<T>(a, x.values(), eps);
    assert(within_budget<T>(adv.values(), x.values(), cfg.epsilon));
  }
  if (trace && cfg.track_loss) trace->push_back(gradient(adv, y).mean_loss);
  return adv;
}

}  // namespace detail

/// Input-gradient oracle for a frozen classifier.
template <typename T>
GradientFn<T> classifier_gradient(const Classifier<T>& model) {
  return [&model](const Tensor<T>& x, std::span<const int> y) {
    Tape<T> tape;
    Tensor<T> input = x.clone(true);
    return detail::backprop_input(tape, input, model.forward(tape, input), y);
  };
}

/// x' = clamp(x + eps * sign(grad), 0, 1) from a single gradient evaluation.
template <typename T>
AdversarialBatch<T> fgsm(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y,
                         const AttackConfig& cfg) {
  cfg.validate(AttackMethod::fgsm);
  model.check_input(x);
  detail::check_attack_inputs(x, y);
  AdversarialBatch<T> out{x, x, {y.begin(), y.end()}, cfg, {}};
  InputGradient<T> g = classifier_gradient(model)(x, y);
  out.loss_trace.push_back(g.mean_loss);
  const T eps = static_cast<T>(cfg.epsilon);
  std::vector<T> adv(x.numel());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    adv[i] = std::min(std::max(x[i] + eps * detail::sign_of(g.grad[i]), T(0)), T(1));
  }
  out.x_adv = Tensor<T>(x.shape(), std::move(adv));
  if (cfg.track_loss) out.loss_trace.push_back(classifier_gradient(model)(out.x_adv, y).mean_loss);
  return out;
}

/// Random-start iterative attack against an arbitrary gradient oracle.
/// With several restarts the first candidate that fools `predict` is kept
/// per sample; samples never fooled keep the last restart's candidate.
template <typename T>
AdversarialBatch<T> projected_attack(const GradientFn<T>& gradient, const PredictFn<T>& predict, const Tensor<T>& x,
                                     std::span<const int> y, const AttackConfig& cfg) {
  detail::check_attack_inputs(x, y);
  AdversarialBatch<T> out{x, x, {y.begin(), y.end()}, cfg, {}};
  const T eps = static_cast<T>(cfg.epsilon);
  const std::size_t N = x.dim(0), per = x.numel() / N;
  std::vector<bool> fooled(N, false);
  Tensor<T> best;
  for (int r = 0; r < cfg.restarts; ++r) {
    Tensor<T> start = cfg.random_init ? detail::uniform_start(x, eps, Rng(cfg.seed).fork(static_cast<std::uint64_t>(r))) : x;
    Tensor<T> adv = detail::iterate(gradient, x, y, cfg, start, false, r == 0 ? &out.loss_trace : nullptr);
    if (cfg.restarts == 1) {
      out.x_adv = adv;
      return out;
    }
    const std::vector<int> pred = predict(adv);
    if (!best.defined()) best = adv.clone();
    auto b = best.mutable_values();
    for (std::size_t n = 0; n < N; ++n) {
      if (fooled[n]) continue;
      std::copy_n(adv.values().begin() + n * per, per, b.begin() + n * per);
      fooled[n] = pred[n] != y[n];
    }
  }
  out.x_adv = best;
  return out;
}

/// Basic iterative method: T sign steps of size alpha from x, projected each step.
template <typename T>
AdversarialBatch<T> bim(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y,
                        const AttackConfig& cfg) {
  cfg.validate(AttackMethod::bim);
  model.check_input(x);
  AttackConfig c = cfg;
  c.random_init = false;
  c.restarts = 1;
  AdversarialBatch<T> out = projected_attack<T>(classifier_gradient(model), {}, x, y, c);
  out.config = cfg;
  return out;
}

/// Projected gradient descent: BIM from a uniform random start in the eps-ball.
template <typename T>
AdversarialBatch<T> pgd(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y,
                        const AttackConfig& cfg) {
  cfg.validate(AttackMethod::pgd);
  model.check_input(x);
  return projected_attack<T>(classifier_gradient(model), [&model](const Tensor<T>& a) { return model.predict(a); },
                             x, y, cfg);
}

/// Momentum iterative method: g_t = mu * g_{t-1} + grad / ||grad||_1 per sample.
template <typename T>
AdversarialBatch<T> mim(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y,
                        const AttackConfig& cfg) {
  cfg.validate(AttackMethod::mim);
  model.check_input(x);
  detail::check_attack_inputs(x, y);
  AdversarialBatch<T> out{x, x, {y.begin(), y.end()}, cfg, {}};
  out.x_adv = detail::iterate(classifier_gradient(model), x, y, cfg, x, true, &out.loss_trace);
  return out;
}

/// Fast FGSM: one alpha-sized sign step from a uniform random start, projected.
template <typename T>
AdversarialBatch<T> ffgsm(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> y,
                          const AttackConfig& cfg) {
  cfg.validate(AttackMethod::ffgsm);
  model.check_input(x);
  detail::check_attack_inputs(x, y);
  AdversarialBatch<T> out{x, x, {y.begin(), y.end()}, cfg, {}};
  AttackConfig c = cfg;
  c.iterations = 1;
  Tensor<T> start = detail::uniform_start(x, static_cast<T>(cfg.epsilon), Rng(cfg.seed).fork(0));
  out.x_adv = detail::iterate(classifier_gradient(model), x, y, c, start, false, &out.loss_trace);
  return out;
}

/// Gradient oracle for the defended pipeline C(TRN(G(x'), x')): the forward
/// pass is the full defense, the backward pass runs through the image
/// stream only (gradient maps are constants, the gradient stream is cut).
template <typename T>
GradientFn<T> bpda_gradient(const TrnModel<T>& defense, const Classifier<T>& model) {
  return [&defense, &model](const Tensor<T>& x, std::span<const int> y) {
    Tensor<T> maps;
    if (defense.arch().uses_gradient_stream()) {
      maps = gradient_maps(model, x, defense.arch().normalization).maps;
    }
    Tape<T> tape;
    Tensor<T> input = x.clone(true);
    TrnForwardOptions opts;
    opts.detach_gradient_stream = true;
    Tensor<T> restored = defense.forward(tape, maps, input, opts);
    return detail::backprop_input(tape, input, model.forward(tape, restored), y);
  };
}

/// Predictions of the defended pipeline, or of the bare model when defense is null.
template <typename T>
std::vector<int> defended_predict(const TrnModel<T>* defense, const Classifier<T>& model, const Tensor<T>& x) {
  if (!defense) return model.predict(x);
  return model.predict(defense->restore(model, x));
}

/// PGD against the defended pipeline with the BPDA gradient. A null
/// defense stands for the identity pre-processor, which reduces to pgd().
template <typename T>
AdversarialBatch<T> bpda_attack(const TrnModel<T>* defense, const Classifier<T>& model, const Tensor<T>& x,
                                std::span<const int> y, const AttackConfig& cfg) {
  cfg.validate(AttackMethod::bpda);
  model.check_input(x);
  if (!defense) return pgd(model, x, y, cfg);
  return projected_attack<T>(bpda_gradient(*defense, model),
                             [defense, &model](const Tensor<T>& a) { return defended_predict(defense, model, a); },
                             x, y, cfg);
}

/// Dispatches on method. `defense` is consulted only by BPDA.
template <typename T>
AdversarialBatch<T> run_attack(AttackMethod method, const Classifier<T>& model, const Tensor<T>& x,
                               std::span<const int> y, const AttackConfig& cfg, const TrnModel<T>* defense = nullptr) {
  switch (method) {
    case AttackMethod::fgsm: return fgsm(model, x, y, cfg);
    case AttackMethod::bim: return bim(model, x, y, cfg);
    case AttackMethod::pgd: return pgd(model, x, y, cfg);
    case AttackMethod::mim: return mim(model, x, y, cfg);
    case AttackMethod::ffgsm: return ffgsm(model, x, y, cfg);
    case AttackMethod::bpda: return bpda_attack(defense, model, x, y, cfg);
  }
  throw ValidationError("unknown attack method");
}

/// Whether an attack output draws fresh randomness (and so cannot be cached
/// across epochs as a pure function of the clean batch).
inline bool attack_is_deterministic(AttackMethod m, const AttackConfig& cfg) {
  if (m == AttackMethod::ffgsm) return false;
  if (m == AttackMethod::pgd || m == AttackMethod::bpda) return !cfg.random_init;
  return true;
}

template <typename T>
double linf_distance(const Tensor<T>& a, const Tensor<T>& b) {
  return static_cast<double>(max_abs_diff(a, b));
}

}  // namespace gradshield
