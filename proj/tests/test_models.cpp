#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradshield/gradshield.hpp"
#include "oracles.hpp"

using namespace gradshield;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("gradshield_models_" + std::to_string(::getpid()) + "_" + name);
}

void perturb(Classifier<float>& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, t] : m.params().entries()) {
    for (auto& v : t.mutable_values()) v += static_cast<float>(rng.uniform(-0.05, 0.05));
  }
}

}  // namespace

TEST(Classifier, ZeroHeadGivesUniformSoftmax) {
  Classifier<double> m({}, 3);
  Rng rng(1);
  auto x = oracle::random_tensor<double>({4, 1, 16, 16}, rng, 0, 1);
  auto z = m.logits(x);
  ASSERT_EQ(z.shape(), (Shape{4, 10}));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  Tape<double> t;
  const std::vector<int> y{0, 1, 2, 9};
  EXPECT_NEAR(t.softmax_cross_entropy(z, y).item(), std::log(10.0), 1e-15);
}

TEST(Classifier, LogitsShapeForAnyBatch) {
  Classifier<float> m({}, 1);
  Rng rng(2);
  for (std::size_t n : {1u, 2u, 7u}) {
    EXPECT_EQ(m.logits(oracle::random_tensor<float>({n, 1, 16, 16}, rng, 0, 1)).shape(), (Shape{n, 10}));
  }
}

TEST(Classifier, BatchIndependence) {
  Classifier<float> m({}, 4);
  perturb(m, 4);
  Rng rng(3);
  auto a = oracle::random_tensor<float>({1, 1, 16, 16}, rng, 0, 1);
  auto b = oracle::random_tensor<float>({1, 1, 16, 16}, rng, 0, 1);
  const Tensor<float> parts[] = {b, a};
  auto pair = m.logits(concat_batch(std::span<const Tensor<float>>(parts)));
  auto single = m.logits(a);
  for (std::size_t k = 0; k < 10; ++k) EXPECT_NEAR(pair[10 + k], single[k], 1e-6);
}

TEST(Classifier, ShapeMismatchIsAShapeError) {
  Classifier<float> m;
  EXPECT_THROW(m.logits(Tensor<float>::zeros({1, 3, 16, 16})), ShapeError);
  EXPECT_THROW(m.logits(Tensor<float>::zeros({1, 1, 15, 16})), ShapeError);
  EXPECT_THROW(m.logits(Tensor<float>::zeros({16, 16})), ShapeError);
}

TEST(Classifier, ArgmaxInvariantUnderLogitShift) {
  Classifier<float> m({}, 5);
  perturb(m, 5);
  Rng rng(5);
  auto z = m.logits(oracle::random_tensor<float>({8, 1, 16, 16}, rng, 0, 1));
  auto shifted = ops::add(z, Tensor<float>::full(z.shape(), 37.5f));
  EXPECT_EQ(ops::argmax_rows(z), ops::argmax_rows(shifted));
}

TEST(Classifier, RepeatedEvaluationHasNoHiddenState) {
  Classifier<float> m({}, 6);
  perturb(m, 6);
  Rng rng(6);
  auto x = oracle::random_tensor<float>({5, 1, 16, 16}, rng, 0, 1);
  EXPECT_TRUE(bit_equal(m.logits(x), m.logits(x)));
}

TEST(Classifier, FrozenForwardLeavesParametersWithoutGradients) {
  Classifier<float> m({}, 7);
  Rng rng(7);
  Tape<float> t;
  auto x = oracle::random_tensor<float>({2, 1, 16, 16}, rng, 0, 1, true);
  const std::vector<int> y{1, 2};
  t.backward(t.softmax_cross_entropy(m.forward(t, x), y));
  EXPECT_TRUE(x.has_grad());
  for (const auto& [name, p] : m.params().entries()) EXPECT_FALSE(p.has_grad()) << name;
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  Classifier<float> m({}, 8);
  perturb(m, 8);
  m.meta()["epochs"] = "6";
  m.meta()["val_acc"] = "99.3";
  const auto p = temp_path("clf.gsck");
  save_checkpoint(m, p.string());
  Classifier<float> back = load_classifier<float>(p.string());
  ASSERT_EQ(back.params().size(), m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_EQ(back.params().entries()[i].first, m.params().entries()[i].first);
    EXPECT_TRUE(bit_equal(back.params().entries()[i].second, m.params().entries()[i].second));
  }
  EXPECT_EQ(back.meta().at("epochs"), "6");
  Rng rng(8);
  auto x = oracle::random_tensor<float>({3, 1, 16, 16}, rng, 0, 1);
  EXPECT_TRUE(bit_equal(back.logits(x), m.logits(x)));
  std::filesystem::remove(p);
}

TEST(Checkpoint, CustomArchitectureRoundTrips) {
  ClassifierArch arch;
  arch.channels = 3;
  arch.height = arch.width = 12;
  arch.classes = 5;
  arch.widths = {4, 8};
  Classifier<double> m(arch, 9);
  const auto p = temp_path("arch.gsck");
  save_checkpoint(m, p.string());
  auto back = load_classifier<double>(p.string());
  EXPECT_EQ(back.arch().widths, arch.widths);
  EXPECT_EQ(back.classes(), 5u);
  EXPECT_EQ(back.checksum(), m.checksum());
  std::filesystem::remove(p);
}

TEST(Checkpoint, TruncatedFileIsAnError) {
  Classifier<float> m({}, 10);
  const auto p = temp_path("trunc.gsck");
  save_checkpoint(m, p.string());
  const auto full = std::filesystem::file_size(p);
  for (auto keep : {full - 1, full / 2, std::uintmax_t{6}, std::uintmax_t{0}}) {
    std::filesystem::resize_file(p, keep);
    EXPECT_THROW(load_classifier<float>(p.string()), FormatError) << keep;
  }
  std::filesystem::remove(p);
}

TEST(Checkpoint, VersionAndArchitectureTagAreChecked) {
  Classifier<float> m({}, 11);
  const auto p = temp_path("ver.gsck");
  save_checkpoint(m, p.string());
  {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char v = 9;
    f.write(&v, 1);
  }
  EXPECT_THROW(load_classifier<float>(p.string()), FormatError);
  save_checkpoint_file<float>(p.string(), "resnet18;classes=10", m.params().entries());
  try {
    load_classifier<float>(p.string());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("resnet18"), std::string::npos);
  }
  std::filesystem::remove(p);
}

TEST(Checkpoint, PrecisionConvertsOnLoad) {
  Classifier<float> m({}, 12);
  const auto p = temp_path("prec.gsck");
  save_checkpoint(m, p.string());
  auto d = load_classifier<double>(p.string());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& a = m.params().entries()[i].second;
    const auto& b = d.params().entries()[i].second;
    for (std::size_t k = 0; k < a.numel(); ++k) ASSERT_EQ(static_cast<double>(a[k]), b[k]);
  }
  std::filesystem::remove(p);
}
