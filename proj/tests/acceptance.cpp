// Desk-scale acceptance run. Prints one [PASS]/[FAIL] line per criterion and
// exits nonzero if any fails. Intermediate numbers go to stderr and to
// <workdir>/acceptance.json.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "gradshield/gradshield.hpp"
#include "json.hpp"
#include "suites.hpp"

using namespace gradshield;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string title;
  std::string detail;
  double seconds = 0;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

// Desk-scale constants shared by every trained network.
constexpr std::uint64_t kDataSeed = 1;
constexpr std::uint64_t kClassifierSeed = 1;
constexpr std::uint64_t kTrnSeed = 7;
constexpr std::size_t kTrnEpochs = 20;
constexpr std::size_t kTrainLimit = 2000;
constexpr std::size_t kValLimit = 300;
constexpr std::size_t kBpdaLimit = 500;

TrnArch desk_trn(std::size_t blocks, StreamMode mode) {
  TrnArch a;
  a.blocks = blocks;
  a.mode = mode;
  a.growth = 8;
  a.image_width = a.gradient_width = 16;
  return a;
}

struct TrainedTrn {
  TrnModel<float> model;
  double pgd_acc = 0;
  std::size_t epochs = 0;
};

}  // namespace

int main(int argc, char** argv) {
  std::filesystem::path workdir = std::filesystem::temp_directory_path() / "gradshield_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) workdir = argv[++i];
    else {
      std::cerr << "usage: acceptance [--workdir DIR]\n";
      return 2;
    }
  }
  std::filesystem::create_directories(workdir);
  json log;
  std::map<int, Verdict> verdicts;
  const auto run_start = Clock::now();

  try {
    // 1. Gradient correctness.
    {
      const auto t0 = Clock::now();
      const auto reports = suites::gradient_suite(2024, 10);
      double worst = 0;
      std::string worst_name;
      for (const auto& r : reports) {
        log["gradients"][r.name] = r.max_rel_error;
        if (r.max_rel_error > worst || !std::isfinite(r.max_rel_error)) {
          worst = r.max_rel_error;
          worst_name = r.name;
        }
      }
      const double s = seconds_since(t0);
      verdicts[1] = {worst < 1e-4 && s < 60, "gradient correctness",
                     std::to_string(reports.size()) + " checks, worst rel. err " + sci(worst) + " (" + worst_name + ")", s};
    }

    // 3. Undefended vulnerability: the classifier everything else builds on.
    SynthOptions so;
    so.seed = kDataSeed;
    so.train_per_class = 500;
    so.val_per_class = 100;
    so.test_per_class = 100;
    const Dataset<float> ds = synth_dataset<float>(so);
    Classifier<float> clf({}, kClassifierSeed);
    double clean_acc = 0, undef_pgd = 0, undef_bim = 0, undef_fgsm = 0;
    {
      const auto t0 = Clock::now();
      ClassifierTrainConfig cfg;
      cfg.epochs = 6;
      cfg.seed = kClassifierSeed;
      train_classifier(ds, clf, cfg);
      save_checkpoint(clf, (workdir / "classifier.gsck").string());
      clean_acc = evaluate_accuracy<float>(clf, nullptr, std::nullopt, ds, Split::test).accuracy;
      undef_pgd = evaluate_accuracy<float>(clf, nullptr, make_attack(AttackMethod::pgd), ds, Split::test).accuracy;
      undef_bim = evaluate_accuracy<float>(clf, nullptr, make_attack(AttackMethod::bim), ds, Split::test).accuracy;
      undef_fgsm = evaluate_accuracy<float>(clf, nullptr, make_attack(AttackMethod::fgsm), ds, Split::test).accuracy;
      const double s = seconds_since(t0);
      log["undefended"] = {{"clean", clean_acc}, {"pgd", undef_pgd}, {"bim", undef_bim}, {"fgsm", undef_fgsm}};
      const bool ok = clean_acc >= 90 && undef_pgd <= 10 && undef_pgd <= undef_bim && undef_bim <= undef_fgsm + 5;
      verdicts[3] = {ok && s < 360, "undefended vulnerability",
                     "clean " + fmt(clean_acc) + ", PGD " + fmt(undef_pgd) + ", BIM " + fmt(undef_bim) + ", FGSM " +
                         fmt(undef_fgsm),
                     s};
    }
    std::cerr << "classifier: clean " << clean_acc << " pgd " << undef_pgd << '\n';

    // 2. Attack contract suite, against a non-trivial defense for BPDA.
    {
      const auto t0 = Clock::now();
      TrnModel<float> defense(desk_trn(1, StreamMode::two_stream), 31);
      suites::randomize_zero_params(defense, 32, 0.01);
      const auto test_x = ds.images_of(ds.test);
      const auto test_y = ds.labels_of(ds.test);
      const auto r = suites::attack_contract_suite<float>(clf, defense, test_x, test_y, 50, 4, 77);
      const double s = seconds_since(t0);
      log["attack_contract"] = {{"batches", r.batches},
                                {"budget_violations", r.budget_violations},
                                {"range_violations", r.range_violations},
                                {"determinism_failures", r.determinism_failures},
                                {"collapse_fgsm_bim", r.collapse_fgsm_bim},
                                {"collapse_pgd_bim", r.collapse_pgd_bim},
                                {"collapse_mim_bim", r.collapse_mim_bim},
                                {"max_linf_excess", r.max_linf_excess}};
      verdicts[2] = {r.ok() && r.batches == 50 && s < 120, "attack contract suite",
                     std::to_string(r.batches) + " batches x 6 attacks, violations budget/range/determinism " +
                         std::to_string(r.budget_violations) + "/" + std::to_string(r.range_violations) + "/" +
                         std::to_string(r.determinism_failures) + ", collapse failures " +
                         std::to_string(r.collapse_fgsm_bim + r.collapse_pgd_bim + r.collapse_mim_bim),
                     s};
    }

    // 6. GMEM correctness.
    {
      const auto t0 = Clock::now();
      static_assert(!suites::gmem_accepts_labels, "gradient_maps must not take labels");
      const std::vector<std::size_t> idx{ds.test.begin, ds.test.begin + 137, ds.test.begin + 402, ds.test.begin + 999};
      const auto x = gather_batch(ds.images, std::span<const std::size_t>(idx));
      const auto r = suites::gmem_slice_check(clf, x);
      verdicts[6] = {r.max_abs_diff <= 1e-6 && r.channel_count_ok, "GMEM correctness",
                     "max |slice - class gradient| " + sci(r.max_abs_diff) + ", channels " +
                         (r.channel_count_ok ? "n*C" : "WRONG") + ", no label parameter",
                     seconds_since(t0)};
    }

    // 10. Identity at initialization.
    {
      const auto t0 = Clock::now();
      std::size_t failures = 0;
      for (std::size_t k = 1; k <= 3; ++k) {
        failures += suites::identity_at_init_failures(clf, desk_trn(k, StreamMode::two_stream), k == 1 ? 20 : 5, 90 + k);
      }
      failures += suites::identity_at_init_failures(clf, desk_trn(1, StreamMode::image_only), 5, 95);
      failures += suites::identity_at_init_failures(clf, desk_trn(1, StreamMode::gradient_only), 5, 96);
      verdicts[10] = {failures == 0, "identity at initialization",
                      std::to_string(failures) + " of 40 random inputs differ from their restoration", seconds_since(t0)};
    }

    // Shared adversarial pools for every TRN: all configurations use the
    // same normalization and the same MIM training attack.
    TrnTrainConfig tcfg;
    tcfg.epochs = kTrnEpochs;
    tcfg.train_limit = kTrainLimit;
    tcfg.val_limit = kValLimit;
    tcfg.seed = kTrnSeed;
    const auto pool_t0 = Clock::now();
    const auto train_pool = build_pool(clf, ds, split_indices(ds.train, kTrainLimit), tcfg.attack, tcfg.attack_config,
                                       MapNormalization::per_map_std);
    const auto val_pool = build_pool(clf, ds, split_indices(ds.val, kValLimit), tcfg.attack, tcfg.attack_config,
                                     MapNormalization::per_map_std);
    const double pool_seconds = seconds_since(pool_t0);
    std::cerr << "pools built in " << pool_seconds << " s\n";

    auto train_one = [&](const std::string& name, const TrnArch& arch) {
      const auto t0 = Clock::now();
      TrnModel<float> trn(arch, kTrnSeed);
      const TrainReport rep = train_trn(ds, clf, trn, tcfg, &train_pool, &val_pool, [&](const EpochRecord& e) {
        std::cerr << name << " epoch " << e.epoch << " total " << e.loss_total << " val adv " << e.adv_acc << '\n';
        log["trn"][name]["epochs"].push_back(e.to_json());
      });
      save_checkpoint(trn, (workdir / (name + ".gsck")).string());
      const double pgd = evaluate_accuracy<float>(clf, &trn, make_attack(AttackMethod::pgd), ds, Split::test).accuracy;
      log["trn"][name]["test_pgd"] = pgd;
      log["trn"][name]["seconds"] = seconds_since(t0);
      std::cerr << name << " defended PGD " << pgd << " (" << seconds_since(t0) << " s)\n";
      return TrainedTrn{std::move(trn), pgd, rep.epochs.size()};
    };

    // 4 and 7. Defense efficacy and cross-attack generalization.
    const auto main_t0 = Clock::now();
    const TrainedTrn two = train_one("two_stream_k1", desk_trn(1, StreamMode::two_stream));
    const std::vector<AttackSpec> attacks{make_attack(AttackMethod::pgd), make_attack(AttackMethod::fgsm),
                                          make_attack(AttackMethod::bim)};
    const Report matrix = run_matrix<float>(clf, {{"none", nullptr}, {"trn", &two.model}}, attacks, ds, Split::test, 0, 1);
    {
      std::ofstream(workdir / "matrix.csv") << matrix.csv();
      log["matrix"] = matrix.json();
      const double def_clean = matrix.at("trn", "clean").accuracy;
      const double def_pgd = matrix.at("trn", "pgd").accuracy;
      const double s = pool_seconds + seconds_since(main_t0);
      const bool ok = !matrix.failed() && def_pgd - undef_pgd >= 50 && def_clean >= clean_acc - 5 && s < 480;
      verdicts[4] = {ok, "defense efficacy",
                     "PGD " + fmt(undef_pgd) + " -> " + fmt(def_pgd) + " defended, clean " + fmt(clean_acc) + " -> " +
                         fmt(def_clean),
                     s};
    }
    {
      bool ok = !matrix.failed();
      std::string detail;
      for (const char* a : {"pgd", "fgsm", "bim"}) {
        const double u = matrix.at("none", a).accuracy, d = matrix.at("trn", a).accuracy;
        ok = ok && d >= u + 30;
        detail += std::string(a) + " " + fmt(u) + "->" + fmt(d) + ", ";
      }
      detail += "Variation " + fmt(matrix.variation("trn"));
      verdicts[7] = {ok, "cross-attack generalization", detail, 0};
    }

    // 8. BPDA.
    {
      const auto t0 = Clock::now();
      AttackConfig pgd_cfg = make_attack(AttackMethod::pgd).config;
      const TrnModel<float> identity(desk_trn(1, StreamMode::two_stream), 41);
      const BpdaGap id_gap = bpda_gap(clf, identity, pgd_cfg, ds, Split::test, 200);
      const BpdaGap gap = bpda_gap(clf, two.model, pgd_cfg, ds, Split::test, kBpdaLimit);
      log["bpda"] = {{"identity_gap", id_gap.gap},
                     {"pgd_acc", gap.pgd_acc},
                     {"bpda_acc", gap.bpda_acc},
                     {"gap", gap.gap},
                     {"samples", gap.samples}};
      std::cerr << "BPDA gap " << gap.gap << " (PGD " << gap.pgd_acc << ", BPDA " << gap.bpda_acc << ")\n";
      const bool ok = id_gap.gap == 0.0 && gap.bpda_acc >= undef_pgd + 30;
      verdicts[8] = {ok, "BPDA",
                     "identity gap " + fmt(id_gap.gap) + "; trained gap " + fmt(gap.gap) + " (defended PGD " +
                         fmt(gap.pgd_acc) + ", BPDA " + fmt(gap.bpda_acc) + ", undefended PGD " + fmt(undef_pgd) + ")",
                     seconds_since(t0)};
    }

    // 5. Two-stream against single-stream ablations.
    {
      const auto t0 = Clock::now();
      const TrainedTrn img = train_one("image_only_k1", desk_trn(1, StreamMode::image_only));
      const TrainedTrn grad = train_one("gradient_only_k1", desk_trn(1, StreamMode::gradient_only));
      const bool ok = two.pgd_acc >= img.pgd_acc - 1 && two.pgd_acc >= grad.pgd_acc - 1;
      verdicts[5] = {ok, "two-stream superiority",
                     "defended PGD two-stream " + fmt(two.pgd_acc) + ", image-only " + fmt(img.pgd_acc) +
                         ", gradient-only " + fmt(grad.pgd_acc),
                     seconds_since(t0)};
    }

    // 9. Scalability in the number of fusion blocks.
    {
      const auto t0 = Clock::now();
      std::vector<double> acc{two.pgd_acc};
      std::string error;
      for (std::size_t k : {2u, 3u}) {
        try {
          acc.push_back(train_one("two_stream_k" + std::to_string(k), desk_trn(k, StreamMode::two_stream)).pgd_acc);
        } catch (const std::exception& e) {
          error = "K=" + std::to_string(k) + ": " + e.what();
          acc.push_back(-1);
        }
      }
      const double best = *std::max_element(acc.begin(), acc.end());
      bool ok = error.empty();
      for (double a : acc) ok = ok && a >= best - 10;
      log["scalability"] = {{"pgd", acc}, {"one_block_shortfall", best - acc[0]}};
      verdicts[9] = {ok, "scalability",
                     "defended PGD K=1/2/3 " + fmt(acc[0]) + "/" + fmt(acc[1]) + "/" + fmt(acc[2]) +
                         ", one-block shortfall " + fmt(best - acc[0]) + (error.empty() ? "" : "; " + error),
                     seconds_since(t0)};
    }
  } catch (const std::exception& e) {
    std::cerr << "acceptance run aborted: " << e.what() << '\n';
    log["aborted"] = e.what();
  }

  bool all = true;
  for (int n = 1; n <= 10; ++n) {
    auto it = verdicts.find(n);
    if (it == verdicts.end()) {
      std::cout << "[FAIL] " << n << ". not reached\n";
      all = false;
      continue;
    }
    const Verdict& v = it->second;
    all = all && v.pass;
    std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << n << ". " << v.title << ": " << v.detail;
    if (v.seconds > 0) std::cout << " [" << fmt(v.seconds, 1) << " s]";
    std::cout << '\n';
    log["criteria"][std::to_string(n)] = {{"pass", v.pass}, {"detail", v.detail}, {"seconds", v.seconds}};
  }
  log["total_seconds"] = seconds_since(run_start);
  std::ofstream(workdir / "acceptance.json") << log.dump(2) << '\n';
  std::cout << (all ? "all criteria passed" : "some criteria failed") << " in " << fmt(seconds_since(run_start), 0)
            << " s\n";
  return all ? 0 : 1;
}
