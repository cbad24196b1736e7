#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "gradshield/attacks.hpp"
#include "gradshield/classifier.hpp"
#include "gradshield/data.hpp"
#include "gradshield/training.hpp"
#include "gradshield/trn.hpp"

namespace gradshield {

inline constexpr const char* kVersion = "0.1.0";

struct AttackSpec {
  std::string name;
  AttackMethod method = AttackMethod::pgd;
  AttackConfig config;
};

/// `attack` with its method defaults and name.
inline AttackSpec make_attack(AttackMethod m, double epsilon = 8.0 / 255, double alpha = 1.0 / 255, int iterations = 10,
                              std::uint64_t seed = 0) {
  AttackSpec s{to_string(m), m, AttackConfig::defaults_for(m)};
  s.config.epsilon = epsilon;
  s.config.alpha = m == AttackMethod::ffgsm ? 1.25 * epsilon : alpha;
  s.config.iterations = iterations;
  s.config.seed = seed;
  return s;
}

/// Runs `fn(i)` for i in [0, count) on up to `threads` workers. Exceptions
/// are captured per job rather than propagated.
inline std::vector<std::exception_ptr> parallel_for(std::size_t count, std::size_t threads,
                                                    const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, count));
  if (n == 1) {
    worker();
    return errors;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return errors;
}

inline std::string describe(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "unknown error";
  }
}

/// Adversarial versions of x crafted `chunk` samples at a time. Chunk b of
/// a randomized attack draws from Rng(seed).fork(b), so the output depends
/// only on (x, y, config, chunk). BPDA targets the defended pipeline; every
/// other method targets the bare classifier.
template <typename T>
Tensor<T> craft_adversarial(const Classifier<T>& model, const AttackSpec& attack, const Tensor<T>& x,
                            std::span<const int> y, std::type_identity_t<const TrnModel<T>*> defense = nullptr,
                            std::size_t chunk = 128) {
  attack.config.validate(attack.method);
  std::vector<Tensor<T>> parts;
  for (std::size_t b = 0, k = 0; b < x.dim(0); b += chunk, ++k) {
    const std::size_t e = std::min(x.dim(0), b + chunk);
    AttackConfig c = attack.config;
    c.seed = Rng(attack.config.seed).fork(k).seed();
    parts.push_back(run_attack(attack.method, model, slice_batch(x, b, e), y.subspan(b, e - b), c, defense).x_adv);
  }
  if (parts.empty()) return x.clone();
  return concat_batch(std::span<const Tensor<T>>(parts));
}

/// Percent of samples the (optionally defended) classifier labels correctly.
template <typename T>
double defended_accuracy(const Classifier<T>& model, std::type_identity_t<const TrnModel<T>*> defense, const Tensor<T>& x,
                         std::span<const int> y, std::size_t chunk = 128) {
  if (y.empty()) throw ValidationError("accuracy over an empty sample set");
  std::size_t hit = 0;
  for (std::size_t b = 0; b < x.dim(0); b += chunk) {
    const std::size_t e = std::min(x.dim(0), b + chunk);
    const auto pred = defended_predict(defense, model, slice_batch(x, b, e));
    for (std::size_t i = b; i < e; ++i) hit += pred[i - b] == y[i];
  }
  return 100.0 * static_cast<double>(hit) / static_cast<double>(y.size());
}

struct EvalResult {
  double accuracy = 0;
  std::size_t samples = 0;
};

/// Accuracy on a split, optionally under attack and/or behind a defense.
/// `limit` keeps the leading samples of the split (0 = all).
template <typename T>
EvalResult evaluate_accuracy(const Classifier<T>& model, std::type_identity_t<const TrnModel<T>*> defense,
                             const std::optional<AttackSpec>& attack, const Dataset<T>& ds, Split split,
                             std::size_t limit = 0) {
  const auto idx = split_indices(ds.range(split), limit);
  if (idx.empty()) throw ValidationError("evaluate_accuracy: split '" + to_string(split) + "' is empty");
  Tensor<T> x = gather_batch(ds.images, std::span<const std::size_t>(idx));
  std::vector<int> y;
  for (std::size_t i : idx) y.push_back(ds.labels[i]);
  if (attack) x = craft_adversarial(model, *attack, x, y, attack->method == AttackMethod::bpda ? defense : nullptr);
  return {defended_accuracy(model, defense, x, y), y.size()};
}

struct DefenseSpec {
  std::string name;
  // Empty path: no defense.
  std::string trn_path;
};

struct ExperimentSpec {
  std::string dataset = "synth://seed=0,n=10,per_class=100";
  std::string classifier_path;
  std::vector<DefenseSpec> defenses;
  std::vector<AttackSpec> attacks;
  bool include_clean = true;
  Split split = Split::test;
  std::size_t limit = 0;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  std::string csv_path;
  std::string json_path;

  void validate() const {
    if (classifier_path.empty()) throw ConfigError("experiment: classifier checkpoint required");
    if (defenses.empty()) throw ConfigError("experiment: at least one defense row (use 'none' for no defense)");
    if (attacks.empty() && !include_clean) throw ConfigError("experiment: no columns");
    for (const auto& a : attacks) a.config.validate(a.method);
  }
};

struct Cell {
  std::string defense;
  std::string attack;
  double accuracy = std::nan("");
  std::size_t samples = 0;
  std::string error;
  bool ok() const { return error.empty(); }
};

struct Report {
  std::vector<std::string> rows;
  std::vector<std::string> columns;
  std::vector<Cell> cells;  // row-major
  std::map<std::string, std::string> metadata;
  double wall_ms = 0;

  const Cell& at(const std::string& row, const std::string& col) const {
    for (const auto& c : cells) {
      if (c.defense == row && c.attack == col) return c;
    }
    throw ValidationError("report has no cell (" + row + ", " + col + ")");
  }

  /// max - min over the attack columns of a row (the clean column excluded).
  double variation(const std::string& row) const {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& c : cells) {
      if (c.defense != row || c.attack == "clean" || !c.ok()) continue;
      lo = std::min(lo, c.accuracy);
      hi = std::max(hi, c.accuracy);
    }
    return hi >= lo ? hi - lo : std::nan("");
  }

  bool failed() const {
    return std::any_of(cells.begin(), cells.end(), [](const Cell& c) { return !c.ok(); });
  }

  std::string csv() const {
    std::ostringstream os;
    os << "defense";
    for (const auto& c : columns) os << ',' << c;
    os << ",Variation\n";
    os.setf(std::ios::fixed);
    os.precision(2);
    for (const auto& r : rows) {
      os << r;
      for (const auto& c : columns) {
        const Cell& cell = at(r, c);
        os << ',';
        if (cell.ok()) os << cell.accuracy;
        else os << "ERROR";
      }
      const double v = variation(r);
      os << ',';
      if (std::isfinite(v)) os << v;
      os << '\n';
    }
    return os.str();
  }

  nlohmann::json json() const {
    nlohmann::json j;
    j["metadata"] = metadata;
    j["wall_ms"] = wall_ms;
    j["rows"] = rows;
    j["columns"] = columns;
    for (const auto& c : cells) {
      nlohmann::json cell{{"defense", c.defense}, {"attack", c.attack}, {"samples", c.samples}};
      if (c.ok()) cell["accuracy"] = c.accuracy;
      else cell["error"] = c.error;
      j["cells"].push_back(cell);
    }
    for (const auto& r : rows) {
      const double v = variation(r);
      j["variation"][r] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
    }
    return j;
  }
};

/// Evaluates every (defense, attack) cell on one split with already-loaded
/// models. Gray-box adversarial sets are crafted once per attack and shared
/// by all rows; BPDA is crafted per defense. Failed cells carry the error.
template <typename T>
Report run_matrix(const Classifier<T>& model, const std::vector<std::pair<std::string, const TrnModel<T>*>>& defenses,
                  const std::vector<AttackSpec>& attacks, const Dataset<T>& ds, Split split, std::size_t limit = 0,
                  std::size_t threads = 1, bool include_clean = true) {
  const auto start = std::chrono::steady_clock::now();
  Report report;
  const auto idx = split_indices(ds.range(split), limit);
  if (idx.empty()) throw ValidationError("run_matrix: split '" + to_string(split) + "' is empty");
  const Tensor<T> x = gather_batch(ds.images, std::span<const std::size_t>(idx));
  std::vector<int> y;
  for (std::size_t i : idx) y.push_back(ds.labels[i]);

  for (const auto& [name, d] : defenses) report.rows.push_back(name);
  if (include_clean) report.columns.push_back("clean");
  for (const auto& a : attacks) report.columns.push_back(a.name);

  // Gray-box adversarial sets, one per non-BPDA attack.
  std::vector<Tensor<T>> crafted(attacks.size());
  std::vector<std::exception_ptr> craft_errors = parallel_for(attacks.size(), threads, [&](std::size_t a) {
    if (attacks[a].method != AttackMethod::bpda) crafted[a] = craft_adversarial(model, attacks[a], x, y);
  });

  report.cells.resize(report.rows.size() * report.columns.size());
  const std::size_t cols = report.columns.size();
  std::vector<std::exception_ptr> cell_errors = parallel_for(report.cells.size(), threads, [&](std::size_t i) {
    const std::size_t r = i / cols, c = i % cols;
    Cell& cell = report.cells[i];
    cell.defense = report.rows[r];
    cell.attack = report.columns[c];
    cell.samples = y.size();
    const TrnModel<T>* defense = defenses[r].second;
    if (include_clean && c == 0) {
      cell.accuracy = defended_accuracy(model, defense, x, y);
      return;
    }
    const std::size_t a = c - (include_clean ? 1 : 0);
    if (craft_errors[a]) std::rethrow_exception(craft_errors[a]);
    const Tensor<T> x_eval =
        attacks[a].method == AttackMethod::bpda ? craft_adversarial(model, attacks[a], x, y, defense) : crafted[a];
    cell.accuracy = defended_accuracy(model, defense, x_eval, y);
  });
  for (std::size_t i = 0; i < cell_errors.size(); ++i) {
    if (cell_errors[i]) {
      const std::size_t r = i / cols, c = i % cols;
      report.cells[i].defense = report.rows[r];
      report.cells[i].attack = report.columns[c];
      report.cells[i].error = describe(cell_errors[i]);
    }
  }
  report.metadata["version"] = kVersion;
  report.metadata["dataset"] = ds.source;
  report.metadata["split"] = to_string(split);
  report.metadata["samples"] = std::to_string(y.size());
  report.metadata["precision"] = sizeof(T) == 4 ? "f32" : "f64";
  std::string seeds;
  for (const auto& a : attacks) seeds += (seeds.empty() ? "" : ",") + a.name + ":" + std::to_string(a.config.seed);
  report.metadata["attack_seeds"] = seeds;
  report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return report;
}

/// Loads the checkpoints named by `spec` and runs the matrix. A defense
/// that fails to load marks its whole row as failed.
template <typename T>
Report run_matrix(const ExperimentSpec& spec) {
  spec.validate();
  const Dataset<T> ds = load_dataset<T>(spec.dataset, spec.seed);
  const Classifier<T> model = load_classifier<T>(spec.classifier_path);
  std::vector<std::optional<TrnModel<T>>> owned(spec.defenses.size());
  std::vector<std::string> load_errors(spec.defenses.size());
  std::vector<std::pair<std::string, const TrnModel<T>*>> rows;
  for (std::size_t i = 0; i < spec.defenses.size(); ++i) {
    if (!spec.defenses[i].trn_path.empty()) {
      try {
        owned[i] = load_trn<T>(spec.defenses[i].trn_path);
      } catch (const std::exception& e) {
        load_errors[i] = e.what();
      }
    }
    rows.emplace_back(spec.defenses[i].name, owned[i] ? &*owned[i] : nullptr);
  }
  Report report = run_matrix(model, rows, spec.attacks, ds, spec.split, spec.limit, spec.threads, spec.include_clean);
  for (auto& cell : report.cells) {
    for (std::size_t i = 0; i < spec.defenses.size(); ++i) {
      if (cell.defense == spec.defenses[i].name && !load_errors[i].empty()) {
        cell.error = "load failed: " + load_errors[i];
        cell.accuracy = std::nan("");
      }
    }
  }
  report.metadata["seed"] = std::to_string(spec.seed);
  report.metadata["classifier"] = spec.classifier_path;
  if (!spec.csv_path.empty()) std::ofstream(spec.csv_path) << report.csv();
  if (!spec.json_path.empty()) std::ofstream(spec.json_path) << report.json().dump(2) << '\n';
  return report;
}

struct BpdaGap {
  double pgd_acc = 0;
  double bpda_acc = 0;
  double gap = 0;
  std::size_t samples = 0;
};

/// Defended accuracy under gray-box PGD and under BPDA with the same
/// configuration; gap = pgd_acc - bpda_acc.
template <typename T>
BpdaGap bpda_gap(const Classifier<T>& model, const TrnModel<T>& trn, const AttackConfig& cfg, const Dataset<T>& ds,
                 Split split, std::size_t limit = 0) {
  AttackSpec pgd_spec{"pgd", AttackMethod::pgd, cfg};
  AttackSpec bpda_spec{"bpda", AttackMethod::bpda, cfg};
  const EvalResult p = evaluate_accuracy(model, &trn, std::optional<AttackSpec>(pgd_spec), ds, split, limit);
  const EvalResult b = evaluate_accuracy(model, &trn, std::optional<AttackSpec>(bpda_spec), ds, split, limit);
  return {p.accuracy, b.accuracy, p.accuracy - b.accuracy, p.samples};
}

}  // namespace gradshield
