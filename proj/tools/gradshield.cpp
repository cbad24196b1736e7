// Experiment CLI. Every subcommand prints one JSON object on stdout; progress
// goes to stderr.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "gradshield/gradshield.hpp"
#include "json.hpp"

using namespace gradshield;
using nlohmann::json;

namespace {

constexpr const char* kDefaultData = "synth://seed=0,n=10,train=500,val=100,test=100";

struct Global {
  std::uint64_t seed = 0;
  std::string precision = "f32";
  std::size_t threads = 1;
};

struct AttackArgs {
  std::string method = "pgd";
  std::string eps = "8/255";
  std::string alpha = "1/255";
  int iters = 10;
  double mu = 1.0;
  int restarts = 1;

  AttackSpec spec(std::uint64_t seed) const {
    const AttackMethod m = parse_attack_method(method);
    AttackSpec s = make_attack(m, parse_pixel_value(eps), parse_pixel_value(alpha), iters, seed);
    s.config.momentum_decay = mu;
    s.config.restarts = restarts;
    return s;
  }

  void add_to(CLI::App* app, bool with_method = true) {
    if (with_method) app->add_option("--method", method, "fgsm|bim|pgd|mim|ffgsm|bpda")->capture_default_str();
    app->add_option("--eps", eps, "L-inf budget, decimal or k/255")->capture_default_str();
    app->add_option("--alpha", alpha, "step size, decimal or k/255 (FFGSM uses 1.25*eps)")->capture_default_str();
    app->add_option("--iters", iters, "iterations")->capture_default_str();
    app->add_option("--mu", mu, "MIM momentum decay")->capture_default_str();
    app->add_option("--restarts", restarts, "PGD random restarts")->capture_default_str();
  }
};

struct EvalArgs {
  std::string data = kDefaultData;
  std::string classifier;
  std::string trn;
  std::string split = "test";
  std::size_t limit = 0;

  void add_to(CLI::App* app, bool trn_required = false) {
    app->add_option("--data", data, "dataset reference")->capture_default_str();
    app->add_option("--classifier", classifier, "classifier checkpoint")->required();
    auto* t = app->add_option("--trn", trn, "restoration network checkpoint");
    if (trn_required) t->required();
    app->add_option("--split", split, "train|val|test")->capture_default_str();
    app->add_option("--limit", limit, "leading samples of the split (0 = all)")->capture_default_str();
  }
};

void emit(const json& j) { std::cout << j.dump(2) << std::endl; }

template <typename T>
int train_classifier_cmd(const Global& g, const std::string& data, const std::string& out, ClassifierTrainConfig cfg,
                         const std::vector<std::size_t>& widths, const std::string& log_path) {
  const Dataset<T> ds = load_dataset<T>(data, g.seed);
  ClassifierArch arch;
  arch.channels = ds.images.dim(1);
  arch.height = ds.images.dim(2);
  arch.width = ds.images.dim(3);
  arch.classes = ds.classes;
  if (!widths.empty()) arch.widths = widths;
  Classifier<T> model(arch, g.seed);
  cfg.seed = g.seed;
  std::ofstream log;
  if (!log_path.empty()) log.open(log_path);
  const TrainReport r = train_classifier(ds, model, cfg, [&](const EpochRecord& e) {
    std::cerr << "epoch " << e.epoch << " loss " << e.loss_smt << " acc " << e.clean_acc << '\n';
    if (log) log << e.to_json().dump() << '\n';
  });
  const double test_acc = evaluate_accuracy<T>(model, nullptr, std::nullopt, ds, Split::test).accuracy;
  model.meta()["epochs"] = std::to_string(r.epochs.size());
  model.meta()["dataset"] = ds.source;
  model.meta()["test_acc"] = std::to_string(test_acc);
  save_checkpoint(model, out);
  emit({{"checkpoint", out}, {"epochs", r.epochs.size()}, {"val_acc", r.epochs.back().to_json()["clean_acc"]},
        {"test_acc", test_acc}, {"checksum", model.checksum()}});
  return 0;
}

template <typename T>
int train_trn_cmd(const Global& g, const std::string& data, const std::string& clf_path, const std::string& out,
                  TrnArch arch, TrnTrainConfig cfg, const AttackArgs& atk, bool pool, const std::string& log_path) {
  const Dataset<T> ds = load_dataset<T>(data, g.seed);
  const Classifier<T> clf = load_classifier<T>(clf_path);
  arch.channels = clf.arch().channels;
  arch.classes = clf.classes();
  const AttackSpec spec = atk.spec(g.seed);
  cfg.attack = spec.method;
  cfg.attack_config = spec.config;
  cfg.seed = g.seed;
  TrnModel<T> trn(arch, g.seed);
  std::optional<AdversarialPool<T>> train_pool;
  if (pool && attack_is_deterministic(cfg.attack, cfg.attack_config)) {
    std::cerr << "crafting training pool\n";
    train_pool = build_pool(clf, ds, split_indices(ds.train, cfg.train_limit), cfg.attack, cfg.attack_config,
                            arch.normalization, cfg.include_benign);
  }
  std::ofstream log;
  if (!log_path.empty()) log.open(log_path);
  const TrainReport r = train_trn<T>(ds, clf, trn, cfg, train_pool ? &*train_pool : nullptr, nullptr,
                                  [&](const EpochRecord& e) {
                                    std::cerr << "epoch " << e.epoch << " loss " << e.loss_total << " val adv "
                                              << e.adv_acc << " val clean " << e.clean_acc << '\n';
                                    if (log) log << e.to_json().dump() << '\n';
                                  });
  trn.meta()["epochs"] = std::to_string(r.epochs.size());
  trn.meta()["attack"] = to_string(cfg.attack);
  trn.meta()["classifier_checksum"] = std::to_string(clf.checksum());
  save_checkpoint(trn, out);
  emit({{"checkpoint", out}, {"epochs", r.epochs.size()}, {"early_stopped", r.early_stopped},
        {"best_epoch", r.best_epoch}, {"last", r.epochs.back().to_json()}, {"checksum", trn.checksum()}});
  return 0;
}

template <typename T>
int attack_cmd(const Global& g, const EvalArgs& ev, const AttackArgs& atk, const std::string& out,
               const std::string& dump_dir) {
  const Dataset<T> ds = load_dataset<T>(ev.data, g.seed);
  const Classifier<T> clf = load_classifier<T>(ev.classifier);
  std::optional<TrnModel<T>> trn;
  if (!ev.trn.empty()) trn = load_trn<T>(ev.trn);
  const TrnModel<T>* defense = trn ? &*trn : nullptr;
  const auto idx = split_indices(ds.range(parse_split(ev.split)), ev.limit);
  const Tensor<T> x = gather_batch(ds.images, std::span<const std::size_t>(idx));
  std::vector<int> y;
  for (std::size_t i : idx) y.push_back(ds.labels[i]);
  const AttackSpec spec = atk.spec(g.seed);
  const Tensor<T> x_adv = craft_adversarial(clf, spec, x, y, defense);
  if (!out.empty()) save_tensor(out, x_adv);
  if (!dump_dir.empty()) {
    std::filesystem::create_directories(dump_dir);
    const auto maps = gradient_maps(clf, x_adv, defense ? defense->arch().normalization : MapNormalization::per_map_std);
    save_tensor((std::filesystem::path(dump_dir) / "gradmaps.gtns").string(), maps.maps);
    save_tensor((std::filesystem::path(dump_dir) / "x_adv.gtns").string(), x_adv);
    save_tensor((std::filesystem::path(dump_dir) / "x_clean.gtns").string(), x);
  }
  emit({{"method", spec.name},
        {"samples", y.size()},
        {"linf", linf_distance(x_adv, x)},
        {"clean_acc", defended_accuracy<T>(clf, nullptr, x, y)},
        {"adv_acc", defended_accuracy<T>(clf, nullptr, x_adv, y)},
        {"defended_adv_acc", defense ? json(defended_accuracy(clf, defense, x_adv, y)) : json(nullptr)}});
  return 0;
}

template <typename T>
int evaluate_cmd(const Global& g, const EvalArgs& ev, const std::optional<AttackArgs>& atk) {
  const Dataset<T> ds = load_dataset<T>(ev.data, g.seed);
  const Classifier<T> clf = load_classifier<T>(ev.classifier);
  std::optional<TrnModel<T>> trn;
  if (!ev.trn.empty()) trn = load_trn<T>(ev.trn);
  std::optional<AttackSpec> spec;
  if (atk) spec = atk->spec(g.seed);
  const EvalResult r = evaluate_accuracy(clf, trn ? &*trn : nullptr, spec, ds, parse_split(ev.split), ev.limit);
  emit({{"accuracy", r.accuracy}, {"samples", r.samples}, {"attack", spec ? json(spec->name) : json(nullptr)},
        {"defended", trn.has_value()}});
  return 0;
}

template <typename T>
int matrix_cmd(const Global& g, ExperimentSpec spec) {
  spec.seed = g.seed;
  spec.threads = g.threads;
  const Report r = run_matrix<T>(spec);
  std::cout << r.csv();
  if (r.failed()) {
    for (const auto& c : r.cells) {
      if (!c.ok()) std::cerr << "cell (" << c.defense << ", " << c.attack << ") failed: " << c.error << '\n';
    }
    return 2;
  }
  return 0;
}

template <typename T>
int bpda_cmd(const Global& g, const EvalArgs& ev, const AttackArgs& atk) {
  const Dataset<T> ds = load_dataset<T>(ev.data, g.seed);
  const Classifier<T> clf = load_classifier<T>(ev.classifier);
  const TrnModel<T> trn = load_trn<T>(ev.trn);
  AttackArgs a = atk;
  a.method = "pgd";
  const BpdaGap r = bpda_gap(clf, trn, a.spec(g.seed).config, ds, parse_split(ev.split), ev.limit);
  emit({{"pgd_acc", r.pgd_acc}, {"bpda_acc", r.bpda_acc}, {"gap", r.gap}, {"samples", r.samples}});
  return 0;
}

/// Central differences on a small random double-precision classifier and
/// restoration network, through the full composed pipeline.
int gradcheck_cmd(const Global& g, std::size_t points, double tolerance) {
  Rng rng(g.seed);
  ClassifierArch ca;
  ca.height = ca.width = 8;
  ca.classes = 4;
  ca.widths = {4, 6};
  Classifier<double> clf(ca, g.seed);
  TrnArch ta;
  ta.classes = 4;
  ta.growth = 3;
  ta.image_width = 4;
  ta.gradient_width = 5;
  TrnModel<double> trn(ta, g.seed + 1);
  // Zero-initialized tensors (heads, biases) get small random values so every
  // parameter carries gradient while the restored image stays inside (0, 1),
  // where the output clamp's straight-through backward is exact.
  auto randomize_zeros = [&](auto& params, double scale) {
    for (auto& [name, t] : params.entries()) {
      auto v = t.mutable_values();
      if (std::any_of(v.begin(), v.end(), [](double e) { return e != 0; })) continue;
      for (auto& e : v) e = rng.uniform(-scale, scale);
    }
  };
  randomize_zeros(clf.params(), 0.5);
  randomize_zeros(trn.params(), 0.02);
  std::vector<double> xv(2 * 64);
  for (auto& v : xv) v = rng.uniform(0.3, 0.7);
  Tensor<double> x({2, 1, 8, 8}, xv);
  const std::vector<int> y{1, 3};
  const Tensor<double> maps = gradient_maps(clf, x).maps;

  auto loss_value = [&](Tape<double>& t, const TrnForwardOptions& opts) {
    Tensor<double> xr = trn.forward(t, maps, x, opts);
    Tensor<double> total = t.add(t.l2_loss(xr, x), t.softmax_cross_entropy(clf.forward(t, xr, ParamMode::trainable), y));
    return total;
  };
  TrnForwardOptions train_opts;
  train_opts.params = ParamMode::trainable;
  {
    Tape<double> t;
    clf.params().clear_grads();
    trn.params().clear_grads();
    Tensor<double> loss = loss_value(t, train_opts);
    t.backward(loss);
  }
  json report = json::array();
  double worst = 0;
  auto check = [&](const std::string& name, Tensor<double>& p) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    const auto coords = sample_coords(p.numel(), points, rng);
    const auto r = central_difference_check<double>(
        p, analytic,
        [&] {
          Tape<double> t;
          return loss_value(t, {}).item();
        },
        coords);
    worst = std::max(worst, r.max_rel_error);
    report.push_back({{"tensor", name}, {"max_rel_error", r.max_rel_error}, {"checked", r.checked}});
  };
  for (auto& [name, p] : clf.params().entries()) check("classifier." + name, p);
  for (auto& [name, p] : trn.params().entries()) check("trn." + name, p);
  emit({{"tensors", report}, {"max_rel_error", worst}, {"tolerance", tolerance}, {"passed", worst < tolerance}});
  return worst < tolerance ? 0 : 1;
}

template <typename F>
int dispatch(const std::string& precision, F&& f) {
  if (precision == "f32") return f(float{});
  if (precision == "f64") return f(double{});
  throw ValidationError("precision must be f32 or f64");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gradshield: gradient-map restoration defense experiments"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "key = value configuration file");
  app.require_subcommand(1);
  Global g;
  app.add_option("--seed", g.seed, "master seed")->capture_default_str();
  app.add_option("--precision", g.precision, "f32|f64")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads for matrix cells")->check(CLI::PositiveNumber)->capture_default_str();

  // train-classifier
  auto* tc = app.add_subcommand("train-classifier", "train the target classifier");
  std::string tc_data = kDefaultData, tc_out, tc_log;
  ClassifierTrainConfig tc_cfg;
  std::vector<std::size_t> tc_widths;
  tc->add_option("--data", tc_data, "dataset reference")->capture_default_str();
  tc->add_option("--out", tc_out, "checkpoint path")->required();
  tc->add_option("--epochs", tc_cfg.epochs)->capture_default_str();
  tc->add_option("--batch", tc_cfg.batch_size)->capture_default_str();
  tc->add_option("--lr", tc_cfg.lr)->capture_default_str();
  tc->add_option("--widths", tc_widths, "stage widths, e.g. 16 32 64")->delimiter(',');
  tc->add_option("--log", tc_log, "JSON-lines epoch log");

  // train-trn
  auto* tt = app.add_subcommand("train-trn", "adversarially train the restoration network");
  std::string tt_data = tc_data, tt_clf, tt_out, tt_log, tt_mode = "two-stream", tt_norm = "per-map-std";
  TrnArch tt_arch;
  TrnTrainConfig tt_cfg;
  AttackArgs tt_atk;
  tt_atk.method = "mim";
  bool tt_no_benign = false, tt_no_pool = false;
  tt->add_option("--data", tt_data, "dataset reference")->capture_default_str();
  tt->add_option("--classifier", tt_clf, "frozen classifier checkpoint")->required();
  tt->add_option("--out", tt_out, "checkpoint path")->required();
  tt->add_option("--blocks", tt_arch.blocks, "fusion blocks")->capture_default_str();
  tt->add_option("--growth", tt_arch.growth)->capture_default_str();
  tt->add_option("--image-width", tt_arch.image_width)->capture_default_str();
  tt->add_option("--gradient-width", tt_arch.gradient_width)->capture_default_str();
  tt->add_option("--ca-reduction", tt_arch.ca_reduction)->capture_default_str();
  tt->add_option("--mode", tt_mode, "two-stream|image-only|gradient-only")->capture_default_str();
  tt->add_option("--normalization", tt_norm, "per-map-std|sign|none")->capture_default_str();
  tt->add_flag("--per-block-image-residual", tt_arch.per_block_image_residual, "image-space residual after every block");
  tt->add_option("--epochs", tt_cfg.epochs)->capture_default_str();
  tt->add_option("--batch", tt_cfg.batch_size)->capture_default_str();
  tt->add_option("--lr", tt_cfg.lr)->capture_default_str();
  tt->add_option("--w-pix", tt_cfg.w_pix)->capture_default_str();
  tt->add_option("--w-smt", tt_cfg.w_smt)->capture_default_str();
  tt->add_option("--patience", tt_cfg.patience)->capture_default_str();
  tt->add_option("--train-limit", tt_cfg.train_limit)->capture_default_str();
  tt->add_option("--val-limit", tt_cfg.val_limit)->capture_default_str();
  tt->add_flag("--no-benign", tt_no_benign, "train on adversarial samples only");
  tt->add_flag("--no-pool", tt_no_pool, "craft deterministic attacks per batch instead of once");
  tt->add_option("--log", tt_log, "JSON-lines epoch log");
  tt_atk.add_to(tt);

  // attack
  auto* at = app.add_subcommand("attack", "craft adversarial examples and report accuracy");
  EvalArgs at_ev;
  AttackArgs at_atk;
  std::string at_out, at_dump;
  at_ev.add_to(at);
  at_atk.add_to(at);
  at->add_option("--out", at_out, "write the adversarial batch as a tensor file");
  at->add_option("--dump-gradmaps", at_dump, "directory for gradient maps and images");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "accuracy on a split, optionally attacked and/or defended");
  EvalArgs ev_ev;
  AttackArgs ev_atk;
  ev_atk.method = "";
  ev_ev.add_to(ev);
  ev_atk.add_to(ev);

  // matrix
  auto* mx = app.add_subcommand("matrix", "defense x attack accuracy matrix");
  ExperimentSpec mx_spec;
  mx_spec.dataset = kDefaultData;
  std::vector<std::string> mx_defenses{"none"}, mx_attacks{"fgsm", "bim", "pgd", "mim"};
  AttackArgs mx_atk;
  std::string mx_split = "test";
  bool mx_no_clean = false;
  mx->add_option("--data", mx_spec.dataset, "dataset reference")->capture_default_str();
  mx->add_option("--classifier", mx_spec.classifier_path)->required();
  mx->add_option("--defense", mx_defenses, "NAME=TRN_PATH, or 'none'; repeatable")->capture_default_str();
  mx->add_option("--attacks", mx_attacks, "comma-separated methods")->delimiter(',')->capture_default_str();
  mx->add_option("--split", mx_split)->capture_default_str();
  mx->add_option("--limit", mx_spec.limit)->capture_default_str();
  mx->add_option("--csv", mx_spec.csv_path);
  mx->add_option("--json", mx_spec.json_path);
  mx->add_flag("--no-clean", mx_no_clean, "omit the clean column");
  mx_atk.add_to(mx, false);

  // bpda
  auto* bp = app.add_subcommand("bpda", "gray-box PGD vs BPDA on the defended pipeline");
  EvalArgs bp_ev;
  AttackArgs bp_atk;
  bp_ev.add_to(bp, true);
  bp_atk.add_to(bp, false);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "central-difference check of the composed pipeline");
  std::size_t gc_points = 10;
  double gc_tol = 1e-4;
  gc->add_option("--points", gc_points, "coordinates per tensor")->capture_default_str();
  gc->add_option("--tolerance", gc_tol)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*tc) {
      return dispatch(g.precision, [&](auto tag) {
        return train_classifier_cmd<decltype(tag)>(g, tc_data, tc_out, tc_cfg, tc_widths, tc_log);
      });
    }
    if (*tt) {
      tt_arch.mode = parse_stream_mode(tt_mode);
      tt_arch.normalization = parse_map_normalization(tt_norm);
      tt_cfg.include_benign = !tt_no_benign;
      return dispatch(g.precision, [&](auto tag) {
        return train_trn_cmd<decltype(tag)>(g, tt_data, tt_clf, tt_out, tt_arch, tt_cfg, tt_atk, !tt_no_pool, tt_log);
      });
    }
    if (*at) {
      return dispatch(g.precision, [&](auto tag) { return attack_cmd<decltype(tag)>(g, at_ev, at_atk, at_out, at_dump); });
    }
    if (*ev) {
      std::optional<AttackArgs> atk;
      if (!ev_atk.method.empty()) atk = ev_atk;
      return dispatch(g.precision, [&](auto tag) { return evaluate_cmd<decltype(tag)>(g, ev_ev, atk); });
    }
    if (*mx) {
      mx_spec.split = parse_split(mx_split);
      mx_spec.include_clean = !mx_no_clean;
      for (const auto& d : mx_defenses) {
        const auto eq = d.find('=');
        if (d == "none") mx_spec.defenses.push_back({"none", ""});
        else if (eq == std::string::npos) throw ValidationError("--defense expects NAME=PATH or 'none', got '" + d + "'");
        else mx_spec.defenses.push_back({d.substr(0, eq), d.substr(eq + 1)});
      }
      for (const auto& a : mx_attacks) {
        AttackArgs one = mx_atk;
        one.method = a;
        mx_spec.attacks.push_back(one.spec(g.seed));
      }
      return dispatch(g.precision, [&](auto tag) { return matrix_cmd<decltype(tag)>(g, mx_spec); });
    }
    if (*bp) return dispatch(g.precision, [&](auto tag) { return bpda_cmd<decltype(tag)>(g, bp_ev, bp_atk); });
    if (*gc) return gradcheck_cmd(g, gc_points, gc_tol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
