#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "gradshield/gradshield.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "suites.hpp"

using namespace gradshield;

namespace {

TrnArch tiny_trn() {
  TrnArch a;
  a.growth = 3;
  a.image_width = a.gradient_width = 4;
  return a;
}

/// Plain Adam written from the update rule, one scalar at a time.
struct ReferenceAdam {
  explicit ReferenceAdam(double rate) : lr(rate) {}
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  int t = 0;

  void step(std::vector<double>& w, const std::vector<double>& g) {
    if (m.empty()) m.assign(w.size(), 0), v.assign(w.size(), 0);
    ++t;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
      w[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

ParamSet<double> one_param(std::vector<double> w) {
  ParamSet<double> p;
  const std::size_t n = w.size();
  p.add("w", Tensor<double>({n}, std::move(w)));
  return p;
}

void set_grad(ParamSet<double>& p, const std::vector<double>& g) {
  auto s = p.at("w").mutable_grad();
  std::copy(g.begin(), g.end(), s.begin());
}

Dataset<float> single_sample(int label) {
  Dataset<float> ds;
  Rng rng(4);
  ds.images = oracle::random_tensor<float>({1, 1, 16, 16}, rng, 0, 1);
  ds.labels = {label};
  ds.classes = 10;
  ds.train = {0, 1};
  ds.val = ds.test = {1, 1};
  return ds;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = one_param({0.5, -1.0, 2.0});
  set_grad(p, {0, 0, 0});
  AdamState<double> s;
  for (int i = 0; i < 3; ++i) adam_step(p, s);
  EXPECT_EQ(std::vector<double>(p.at("w").values().begin(), p.at("w").values().end()), (std::vector<double>{0.5, -1.0, 2.0}));
}

TEST(Adam, FirstStepMovesEachWeightByTheLearningRate) {
  auto p = one_param({0.5, -1.0, 2.0});
  set_grad(p, {0.3, -4.0, 1e-3});
  AdamState<double> s;
  s.lr = 1e-2;
  adam_step(p, s);
  const auto w = p.at("w").values();
  EXPECT_NEAR(0.5 - w[0], 1e-2, 1e-6);
  EXPECT_NEAR(w[1] - (-1.0), 1e-2, 1e-6);
  EXPECT_NEAR(2.0 - w[2], 1e-2, 1e-6);
}

TEST(Adam, MatchesReferenceOverManySteps) {
  Rng rng(1);
  std::vector<double> w0(7);
  for (auto& x : w0) x = rng.uniform(-1, 1);
  auto p = one_param(w0);
  AdamState<double> s;
  s.lr = 3e-3;
  ReferenceAdam ref(3e-3);
  std::vector<double> w = w0;
  for (int k = 0; k < 25; ++k) {
    std::vector<double> g(7);
    for (auto& x : g) x = rng.uniform(-2, 2);
    p.at("w").clear_grad();
    set_grad(p, g);
    adam_step(p, s);
    ref.step(w, g);
  }
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(p.at("w")[i], w[i], 1e-12);
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
  auto p = one_param({1.0, 2.0});
  p.add("bias", Tensor<double>({1}, {0.0}));
  set_grad(p, {0.1, 0.2});
  p.at("bias").mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamState<double> s;
  try {
    adam_step(p, s);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("bias"), std::string::npos);
  }
  EXPECT_EQ(p.at("w")[0], 1.0);
}

TEST(Training, StepLearningRateSchedule) {
  EXPECT_EQ(scheduled_lr(1e-3, 0), 1e-3);
  EXPECT_EQ(scheduled_lr(1e-3, 29), 1e-3);
  EXPECT_NEAR(scheduled_lr(1e-3, 30), 1e-4, 1e-18);
  EXPECT_NEAR(scheduled_lr(1e-3, 65), 1e-5, 1e-18);
  EXPECT_EQ(scheduled_lr(1e-3, 100, 0), 1e-3);
}

TEST(Training, LossExamples) {
  Tape<double> t;
  const auto x = Tensor<double>::full({2, 1, 3, 3}, 0.4);
  EXPECT_EQ(pixel_loss(t, x, x).item(), 0.0);
  EXPECT_NEAR(pixel_loss(t, x, Tensor<double>::full({2, 1, 3, 3}, 0.5)).item(), 0.01, 1e-15);

  auto z = Tensor<double>::zeros({3, 5}, true);
  const std::vector<int> y{0, 4, 2};
  Tape<double> t2;
  const auto l = semantic_loss(t2, z, y);
  EXPECT_NEAR(l.item(), std::log(5.0), 1e-15);
  t2.backward(l);
  const auto expect = oracle::ce_logit_gradient(oracle::as_double(z), 3, 5, y);
  for (std::size_t i = 0; i < 15; ++i) EXPECT_NEAR(z.grad()[i], expect[i] / 3, 1e-15);
}

TEST(Training, ClassifierMemorizesOneSample) {
  const auto ds = single_sample(3);
  ClassifierArch arch;
  arch.widths = {4, 8};
  Classifier<float> m(arch, 2);
  ClassifierTrainConfig cfg;
  cfg.epochs = 60;
  cfg.lr = 1e-2;
  cfg.eval_split = Split::train;
  const auto report = train_classifier(ds, m, cfg);
  EXPECT_EQ(m.predict(ds.images)[0], 3);
  EXPECT_LT(report.epochs.back().loss_smt, 0.05);
  EXPECT_EQ(report.epochs.back().clean_acc, 100.0);
}

TEST(Training, OneEpochBeatsChance) {
  const auto& ds = suites::quick_dataset();
  Classifier<float> m({}, 5);
  ClassifierTrainConfig cfg;
  cfg.epochs = 1;
  const auto report = train_classifier(ds, m, cfg);
  EXPECT_NEAR(report.initial_loss, std::log(10.0), 1e-5);
  Tape<float> t;
  const auto train = ds.labels_of(ds.train);
  EXPECT_LT(semantic_loss(t, m.logits(ds.images_of(ds.train)), train).item(), std::log(10.0));
}

TEST(Training, DivergenceIsReported) {
  const auto ds = single_sample(1);
  Classifier<float> m({}, 6);
  m.params().at("head.b").mutable_values()[0] = std::numeric_limits<float>::quiet_NaN();
  ClassifierTrainConfig cfg;
  cfg.epochs = 2;
  cfg.eval_split = Split::train;
  try {
    train_classifier(ds, m, cfg);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
  }
}

TEST(TrnTraining, ZeroBudgetPixelOnlyStaysAtIdentity) {
  const auto& clf = suites::quick_classifier();
  const auto& ds = suites::quick_dataset();
  TrnModel<float> trn(tiny_trn(), 7);
  TrnTrainConfig cfg;
  cfg.epochs = 1;
  cfg.w_smt = 0;
  cfg.attack_config.epsilon = 0;
  cfg.attack_config.alpha = 0;
  cfg.train_limit = 64;
  cfg.val_limit = 20;
  const auto before = clf.checksum();
  train_trn(ds, clf, trn, cfg);
  EXPECT_EQ(clf.checksum(), before);
  const auto x = ds.images_of(ds.test);
  EXPECT_LT(max_abs_diff(trn.restore(clf, x), x), 1e-6);
}

TEST(TrnTraining, TotalLossComposesWeightedTerms) {
  const auto& clf = suites::quick_classifier();
  TrnModel<float> trn(tiny_trn(), 8);
  TrnTrainConfig cfg;
  cfg.epochs = 1;
  cfg.w_pix = 2.0;
  cfg.w_smt = 0.5;
  cfg.train_limit = 64;
  cfg.val_limit = 20;
  cfg.record_steps = true;
  const auto report = train_trn(suites::quick_dataset(), clf, trn, cfg);
  ASSERT_EQ(report.steps.size(), 2u);
  for (const auto& s : report.steps) EXPECT_NEAR(s.loss_total, 2.0 * s.loss_pix + 0.5 * s.loss_smt, 1e-6);
  const auto& e = report.epochs[0];
  EXPECT_NEAR(e.loss_total, 2.0 * e.loss_pix + 0.5 * e.loss_smt, 1e-6);
}

TEST(TrnTraining, SeededRunsAreReproducibleInDoublePrecision) {
  SynthOptions o;
  o.seed = 2;
  o.classes = 4;
  o.train_per_class = 6;
  o.val_per_class = 2;
  o.test_per_class = 1;
  const auto ds = synth_dataset<double>(o);
  ClassifierArch arch;
  arch.classes = 4;
  arch.widths = {4, 6};
  Classifier<double> clf(arch, 3);
  suites::randomize_zero_params(clf, 4, 0.3);
  TrnArch ta = tiny_trn();
  ta.classes = 4;
  TrnTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.attack = AttackMethod::pgd;
  cfg.attack_config = AttackConfig::defaults_for(AttackMethod::pgd);
  cfg.attack_config.iterations = 2;
  auto run = [&](std::uint64_t seed) {
    cfg.seed = seed;
    TrnModel<double> trn(ta, 9);
    const auto r = train_trn(ds, clf, trn, cfg);
    return std::make_pair(trn.checksum(), r.epochs.back().loss_total);
  };
  const auto a = run(1);
  EXPECT_EQ(a, run(1));
  EXPECT_NE(a.first, run(2).first);
}

TEST(TrnTraining, PooledAndOnTheFlyAgreeForDeterministicAttacks) {
  const auto& clf = suites::quick_classifier();
  const auto& ds = suites::quick_dataset();
  TrnTrainConfig cfg;
  cfg.epochs = 2;
  cfg.train_limit = 48;
  cfg.val_limit = 10;
  cfg.attack_config.iterations = 3;
  const auto val = build_pool(clf, ds, split_indices(ds.val, 10), cfg.attack, cfg.attack_config, MapNormalization::per_map_std);
  const auto pool = build_pool(clf, ds, split_indices(ds.train, 48), cfg.attack, cfg.attack_config, MapNormalization::per_map_std);
  TrnModel<float> a(tiny_trn(), 10), b(tiny_trn(), 10);
  const auto ra = train_trn(ds, clf, a, cfg, &pool, &val);
  const auto rb = train_trn<float>(ds, clf, b, cfg, nullptr, &val);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_EQ(ra.epochs.back().loss_total, rb.epochs.back().loss_total);
}

TEST(TrnTraining, ConfigurationErrors) {
  TrnTrainConfig c;
  c.attack = AttackMethod::bpda;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.w_pix = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.w_pix = c.w_smt = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.attack_config.alpha = 1;
  EXPECT_THROW(c.validate(), ValidationError);

  c = {};
  const auto& clf = suites::quick_classifier();
  const auto& ds = suites::quick_dataset();
  AttackConfig pgd_cfg = AttackConfig::defaults_for(AttackMethod::pgd);
  EXPECT_THROW(build_pool(clf, ds, {0, 1}, AttackMethod::pgd, pgd_cfg, MapNormalization::per_map_std), ContractError);
  const auto sign_pool = build_pool(clf, ds, {0, 1}, AttackMethod::mim, c.attack_config, MapNormalization::sign);
  TrnModel<float> trn(tiny_trn(), 1);
  c = {};
  EXPECT_THROW(train_trn(ds, clf, trn, c, &sign_pool, &sign_pool), ContractError);
  TrnArch other = tiny_trn();
  other.classes = 4;
  TrnModel<float> mismatched(other, 1);
  EXPECT_THROW(train_trn(ds, clf, mismatched, c), ConfigError);
}

TEST(TrnTraining, EarlyStoppingAndJsonLog) {
  const auto& clf = suites::quick_classifier();
  const auto& ds = suites::quick_dataset();
  TrnModel<float> trn(tiny_trn(), 11);
  TrnTrainConfig cfg;
  cfg.epochs = 5;
  cfg.train_limit = 32;
  cfg.val_limit = 10;
  cfg.attack_config.iterations = 2;
  cfg.patience = 1;
  cfg.min_improvement = 1000;
  std::size_t callbacks = 0;
  const auto r = train_trn<float>(ds, clf, trn, cfg, nullptr, nullptr, [&](const EpochRecord&) { ++callbacks; });
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(callbacks, 2u);
  EXPECT_EQ(r.best_epoch, 0u);
  std::ostringstream os;
  r.write_jsonl(os);
  std::istringstream is(os.str());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "lr", "loss_pix", "loss_smt", "loss_total", "clean_acc", "adv_acc", "wall_ms"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
    EXPECT_EQ(j["epoch"], lines);
    EXPECT_TRUE(j["adv_acc"].is_number());
    ++lines;
  }
  EXPECT_EQ(lines, 2u);
  EpochRecord blank;
  EXPECT_TRUE(blank.to_json()["adv_acc"].is_null());
}

TEST(TrnTraining, RestorationMovesTowardBenignImages) {
  const auto& clf = suites::quick_classifier();
  const auto& ds = suites::quick_dataset();
  TrnTrainConfig cfg;
  cfg.epochs = 4;
  cfg.train_limit = 160;
  cfg.val_limit = 10;
  cfg.attack_config.iterations = 5;
  const auto pool = build_pool(clf, ds, split_indices(ds.train, 160), cfg.attack, cfg.attack_config, MapNormalization::per_map_std);
  TrnArch a = tiny_trn();
  a.growth = 4;
  a.image_width = a.gradient_width = 8;
  TrnModel<float> trn(a, 12);
  train_trn(ds, clf, trn, cfg, &pool);
  const auto restored = trn.restore_with_maps(pool.maps_adv, pool.x_adv);
  Tape<float> t;
  const double after = pixel_loss(t, pool.x_clean, restored).item();
  const double before = pixel_loss(t, pool.x_clean, pool.x_adv).item();
  EXPECT_LT(after, before);
}
