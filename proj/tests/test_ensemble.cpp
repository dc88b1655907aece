#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

#include "kdas/ensemble.hpp"
#include "test_util.hpp"

namespace kdas {
namespace {

// Logits [N,B,C] where member j predicts `pred[j][i]` for example i.
Tensor member_predictions(const std::vector<std::vector<int>>& pred, int classes) {
  const auto n = static_cast<std::int64_t>(pred.size()), b = static_cast<std::int64_t>(pred[0].size());
  Array v = Array::Zero(n * b * classes);
  for (std::int64_t j = 0; j < n; ++j)
    for (std::int64_t i = 0; i < b; ++i) v[(j * b + i) * classes + pred[j][i]] = 1.0;
  return Tensor({n, b, classes}, v);
}

TEST(EnsembleStats, HandCountedExample) {
  const std::vector<int> labels{0, 1, 2, 0};
  // Member 0 right on examples 0,1; member 1 right on 1,2; nobody on 3.
  const Tensor m = member_predictions({{0, 1, 0, 1}, {1, 1, 2, 2}}, 3);
  EXPECT_DOUBLE_EQ(member_accuracy(m, 0, labels), 0.5);
  EXPECT_DOUBLE_EQ(member_accuracy(m, 1, labels), 0.5);
  EXPECT_DOUBLE_EQ(oracle_accuracy(m, labels), 0.75);
  const CorrectnessHistogram h = correctness_histogram(m, labels);
  EXPECT_EQ(h.counts, (std::vector<std::int64_t>{1, 2, 1}));
  EXPECT_EQ(h.total(), 4);
}

TEST(EnsembleStats, OracleDominatesEveryMember) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    for (int n : {2, 3, 5}) {
      const auto labels = test::random_labels(50, 4, rng);
      const Tensor m = test::random_tensor({n, 50, 4}, rng, -2.0, 2.0);
      double best = 0.0;
      for (int j = 0; j < n; ++j) best = std::max(best, member_accuracy(m, static_cast<std::size_t>(j), labels));
      EXPECT_GE(oracle_accuracy(m, labels), best);
      EXPECT_GE(oracle_accuracy(m, labels), ensemble_accuracy(m, labels));
    }
  }
}

TEST(EnsembleStats, SingleMemberOracleIsMemberAccuracy) {
  Rng rng(2);
  const auto labels = test::random_labels(40, 5, rng);
  const Tensor m = test::random_tensor({1, 40, 5}, rng);
  EXPECT_DOUBLE_EQ(oracle_accuracy(m, labels), member_accuracy(m, 0, labels));
  EXPECT_DOUBLE_EQ(ensemble_accuracy(m, labels), member_accuracy(m, 0, labels));
}

TEST(EnsembleStats, HistogramPercentagesSumToHundred) {
  Rng rng(3);
  const auto labels = test::random_labels(77, 3, rng);
  const Tensor m = test::random_tensor({5, 77, 3}, rng);
  const CorrectnessHistogram h = correctness_histogram(m, labels);
  ASSERT_EQ(h.counts.size(), 6u);
  EXPECT_EQ(h.total(), 77);
  const auto p = h.percentages();
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 100.0, 1e-9);
}

TEST(EnsembleStats, AverageLogits) {
  Rng rng(4);
  const Tensor m = test::random_tensor({3, 2, 4}, rng);
  const Tensor avg = average_logits(m);
  ASSERT_EQ(avg.shape(), (Shape{2, 4}));
  for (Eigen::Index k = 0; k < 8; ++k) {
    EXPECT_NEAR(avg.values()[k], (m.values()[k] + m.values()[8 + k] + m.values()[16 + k]) / 3.0, 1e-15);
  }
}

TEST(EnsembleStats, MemberSeedsAreDistinctAndStable) {
  const auto a = member_seeds(9, 5), b = member_seeds(9, 5);
  EXPECT_EQ(a, b);
  EXPECT_EQ(std::set<std::uint64_t>(a.begin(), a.end()).size(), 5u);
}

class EnsembleTrainingTest : public ::testing::Test {
 protected:
  void SetUp() override {
    DataSpec spec;
    spec.classes = 3;
    spec.height = 8;
    spec.width = 8;
    spec.train_per_class = 10;
    spec.test_per_class = 4;
    const DataSplits s = make_splits(spec, SeedStreams(31));
    const Normalization norm = Normalization::fit(s.train);
    train = to_tensor_dataset(s.train, norm);
    val = to_tensor_dataset(s.val, norm);
    test = to_tensor_dataset(s.test, norm);
    arch = make_backbone("mini-resnet", 3);
    schedule.epochs = 1;
    schedule.batch_size = 9;
  }

  TensorDataset train, val, test;
  BackboneSpec arch;
  Schedule schedule;
};

TEST_F(EnsembleTrainingTest, ThreadCountDoesNotChangeResults) {
  const auto seeds = member_seeds(1, 3);
  const EnsembleTeacher a = train_ensemble(arch, train, val, test, schedule, seeds, 1);
  const EnsembleTeacher b = train_ensemble(arch, train, val, test, schedule, seeds, 3);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a.train_logits.shape(), (Shape{3, static_cast<std::int64_t>(train.size()), 3}));
  EXPECT_EQ(test::max_abs_diff(a.train_logits.values(), b.train_logits.values()), 0.0);
  EXPECT_EQ(test::max_abs_diff(a.test_logits.values(), b.test_logits.values()), 0.0);
}

TEST_F(EnsembleTrainingTest, ManifestRoundTrip) {
  const EnsembleTeacher t = train_ensemble(arch, train, val, test, schedule, member_seeds(2, 2), 1);
  const auto dir = std::filesystem::temp_directory_path() / "kdas_ensemble_test";
  std::filesystem::remove_all(dir);
  const std::string manifest = save_ensemble(dir.string(), t, "abc123");
  const LoadedEnsemble back = load_ensemble(manifest);
  EXPECT_EQ(back.dataset_hash, "abc123");
  EXPECT_EQ(back.teacher.seeds, t.seeds);
  EXPECT_EQ(back.teacher.arch.id, t.arch.id);
  EXPECT_EQ(test::max_abs_diff(back.teacher.val_logits.values(), t.val_logits.values()), 0.0);
  // Reloaded members reproduce the cached logits.
  std::vector<ParamStore> members = back.teacher.members;
  const Tensor recomputed = member_logits(back.teacher.arch, members, test);
  EXPECT_LE(test::max_abs_diff(recomputed.values(), t.test_logits.values()), 1e-12);
  std::filesystem::remove_all(dir);
}

TEST_F(EnsembleTrainingTest, MissingManifestIsRejected) {
  EXPECT_ANY_THROW(load_ensemble("/nonexistent/manifest.json"));
}

}  // namespace
}  // namespace kdas
