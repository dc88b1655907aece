#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "kdas/data.hpp"
#include "kdas/ops.hpp"
#include "kdas/optim.hpp"
#include "kdas/training.hpp"
#include "test_util.hpp"

namespace kdas {
namespace {

Dataset tiny_dataset(int n, int classes, Rng& rng) {
  Dataset d;
  d.channels = 2;
  d.height = 3;
  d.width = 4;
  d.num_classes = classes;
  for (int i = 0; i < n; ++i) {
    d.labels.push_back(static_cast<std::uint16_t>(rng() % static_cast<unsigned>(classes)));
    for (std::size_t p = 0; p < d.image_size(); ++p) d.pixels.push_back(static_cast<std::uint8_t>(rng() & 0xff));
  }
  return d;
}

DataSpec small_spec(const std::string& kind) {
  DataSpec s;
  s.kind = kind;
  s.classes = 4;
  s.height = 8;
  s.width = 8;
  s.train_per_class = 30;
  s.test_per_class = 10;
  return s;
}

TEST(DatasetFormat, RoundTrip) {
  Rng rng(1);
  const Dataset d = tiny_dataset(17, 5, rng);
  const std::string bytes = encode_dataset(d);
  EXPECT_EQ(bytes.substr(0, 4), "KDTD");
  EXPECT_EQ(bytes.size(), 4u + 4 + 4 + 1 + 2 + 2 + 2 + 17 * (2 + d.image_size()));
  const Dataset back = decode_dataset(bytes);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.channels, 2);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.width, 4);
  EXPECT_EQ(back.num_classes, 5);
}

TEST(DatasetFormat, CorruptionIsRejectedWithOffset) {
  Rng rng(2);
  const std::string good = encode_dataset(tiny_dataset(4, 3, rng));
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_dataset(bad_magic), std::runtime_error);
  EXPECT_THROW(decode_dataset(good.substr(0, good.size() - 1)), std::runtime_error);
  EXPECT_THROW(decode_dataset(good + "z"), std::runtime_error);
  std::string bad_label = good;
  bad_label[19] = 9;  // first record's label
  try {
    decode_dataset(bad_label);
    FAIL() << "label out of range accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
}

TEST(DatasetFormat, ExternalBinaryRecords) {
  std::string bytes;
  for (int r = 0; r < 2; ++r) {
    bytes.push_back(static_cast<char>(3 + r));   // coarse label
    bytes.push_back(static_cast<char>(40 + r));  // fine label
    for (int p = 0; p < 3072; ++p) bytes.push_back(static_cast<char>((p + r) & 0xff));
  }
  const Dataset d = read_external_binary(bytes, "archive");
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.num_classes, 100);
  EXPECT_EQ(d.labels[0], 40);
  EXPECT_EQ(d.labels[1], 41);
  EXPECT_EQ(d.pixels[3072 + 5], 6);
  EXPECT_THROW(read_external_binary(bytes.substr(1), "archive"), std::runtime_error);
  std::string bad = bytes;
  bad[3074 + 1] = static_cast<char>(100);
  EXPECT_THROW(read_external_binary(bad, "archive"), std::runtime_error);
}

TEST(DataSplits, ValidationFractionAndMembership) {
  Rng rng(3);
  const Dataset total = tiny_dataset(123, 4, rng);
  const Dataset test = tiny_dataset(10, 4, rng);
  Rng split_a(9), split_b(9);
  const DataSplits a = split_train_val(total, test, 0.1, split_a);
  const DataSplits b = split_train_val(total, test, 0.1, split_b);
  EXPECT_EQ(a.val.size(), static_cast<std::size_t>(std::llround(0.1 * 123)));
  EXPECT_EQ(a.train.size() + a.val.size(), 123u);
  EXPECT_EQ(a.val.pixels, b.val.pixels);
  EXPECT_EQ(a.train.labels, b.train.labels);
  // Every original record lands in exactly one split.
  std::multiset<std::vector<std::uint8_t>> orig, parts;
  const auto n = total.image_size();
  for (std::size_t i = 0; i < total.size(); ++i) {
    orig.insert({total.pixels.begin() + static_cast<std::ptrdiff_t>(i * n),
                 total.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)});
  }
  for (const Dataset* d : {&a.train, &a.val}) {
    for (std::size_t i = 0; i < d->size(); ++i) {
      parts.insert({d->pixels.begin() + static_cast<std::ptrdiff_t>(i * n),
                    d->pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)});
    }
  }
  EXPECT_EQ(orig, parts);
}

TEST(DataSplits, SameSeedSameSplits) {
  const DataSpec spec = small_spec("synthetic-textured-patches");
  const DataSplits a = make_splits(spec, SeedStreams(5));
  const DataSplits b = make_splits(spec, SeedStreams(5));
  const DataSplits c = make_splits(spec, SeedStreams(6));
  EXPECT_EQ(a.train.pixels, b.train.pixels);
  EXPECT_EQ(a.val.labels, b.val.labels);
  EXPECT_EQ(a.test.pixels, b.test.pixels);
  EXPECT_NE(a.train.pixels, c.train.pixels);
  EXPECT_EQ(a.train.size() + a.val.size(), 120u);
  EXPECT_EQ(a.val.size(), 12u);
  EXPECT_EQ(a.test.size(), 40u);
}

TEST(DataSpecTest, FieldDiagnostics) {
  DataSpec s;
  s.val_fraction = 1.5;
  try {
    s.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("val_fraction"), std::string::npos);
  }
  s = DataSpec{};
  s.kind = "nope";
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = DataSpec{};
  s.kind = "external-binary";
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(DataSplits, GaussianClassesAreLinearlySeparable) {
  DataSpec spec = small_spec("synthetic-gaussian-classes");
  spec.separation = 3.0;
  spec.train_per_class = 100;
  spec.test_per_class = 50;
  const DataSplits s = make_splits(spec, SeedStreams(11));
  const Normalization norm = Normalization::fit(s.train);
  const TensorDataset train = to_tensor_dataset(s.train, norm), test = to_tensor_dataset(s.test, norm);
  const std::int64_t d = static_cast<std::int64_t>(s.train.image_size());
  Tensor w = Tensor::zeros({spec.classes, d}, true), b = Tensor::zeros({spec.classes}, true);
  std::vector<Tensor> params{w, b};
  SgdState sgd(SgdOptions{0.05, 0.9, 0.0, true});
  std::vector<std::size_t> all(train.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Tensor x = reshape(train.batch(all), {static_cast<std::int64_t>(all.size()), d});
  const auto y = train.batch_labels(all);
  for (int it = 0; it < 100; ++it) {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = cross_entropy(linear(x, w, b), y);
    }
    const GradientMap g = backward(tape, loss);
    sgd_step(params, {g.of(w), g.of(b)}, sgd);
  }
  std::vector<std::size_t> tidx(test.size());
  for (std::size_t i = 0; i < tidx.size(); ++i) tidx[i] = i;
  const Tensor xt = reshape(test.batch(tidx), {static_cast<std::int64_t>(tidx.size()), d});
  EXPECT_GT(accuracy(linear(xt, w, b), test.batch_labels(tidx)), 0.95);
}

TEST(Normalization, TrainSplitIsStandardized) {
  const DataSplits s = make_splits(small_spec("synthetic-textured-patches"), SeedStreams(4));
  const Normalization norm = Normalization::fit(s.train);
  const TensorDataset t = to_tensor_dataset(s.train, norm);
  const std::size_t hw = static_cast<std::size_t>(t.height * t.width);
  for (int c = 0; c < t.channels; ++c) {
    double sum = 0.0, sq = 0.0, count = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (std::size_t p = 0; p < hw; ++p) {
        const double v = t.images[static_cast<Eigen::Index>((i * static_cast<std::size_t>(t.channels) +
                                                              static_cast<std::size_t>(c)) * hw + p)];
        sum += v;
        sq += v * v;
        count += 1.0;
      }
    }
    EXPECT_NEAR(sum / count, 0.0, 1e-9);
    EXPECT_NEAR(sq / count, 1.0, 1e-9);
  }
}

TEST(Augment, ZeroPaddingOnlyFlips) {
  Rng rng(5);
  const Tensor x = test::random_tensor({6, 2, 4, 5}, rng);
  Rng arng(6);
  const Tensor y = augment(x, 0, arng);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::int64_t n = 0; n < 6; ++n) {
    bool same = true, flipped = true;
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t i = 0; i < 4; ++i)
        for (std::int64_t j = 0; j < 5; ++j) {
          const double a = y.values()[((n * 2 + c) * 4 + i) * 5 + j];
          same = same && a == x.values()[((n * 2 + c) * 4 + i) * 5 + j];
          flipped = flipped && a == x.values()[((n * 2 + c) * 4 + i) * 5 + (4 - j)];
        }
    EXPECT_TRUE(same || flipped) << "image " << n;
  }
}

TEST(ScheduleTest, StepDecayAndWarmup) {
  Schedule s;
  s.epochs = 20;
  EXPECT_EQ(s.milestone_epochs(), (std::vector<int>{10, 15}));
  EXPECT_DOUBLE_EQ(s.lr_at(0, 0), 0.1);
  EXPECT_DOUBLE_EQ(s.lr_at(9, 500), 0.1);
  EXPECT_NEAR(s.lr_at(10, 600), 0.01, 1e-15);
  EXPECT_NEAR(s.lr_at(15, 900), 0.001, 1e-15);
  s.warmup_iters = 5;
  EXPECT_DOUBLE_EQ(s.lr_at(0, 4), 0.01);
  EXPECT_DOUBLE_EQ(s.lr_at(0, 5), 0.1);
  s.milestones = {3, 2};
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Accuracy, CountsStrictArgmax) {
  // Batch of 8 with 6 correct.
  Array v(16);
  for (int i = 0; i < 8; ++i) {
    v[2 * i] = 1.0;
    v[2 * i + 1] = 0.0;
  }
  const Tensor logits({8, 2}, v);
  EXPECT_DOUBLE_EQ(accuracy(logits, std::vector<int>{0, 0, 0, 0, 0, 0, 1, 1}), 0.75);
  const Tensor tie({1, 2}, Array::Zero(2));
  EXPECT_DOUBLE_EQ(accuracy(tie, std::vector<int>{0}), 0.0);
}

class TrainingTest : public ::testing::Test {
 protected:
  void SetUp() override {
    DataSpec spec = small_spec("synthetic-textured-patches");
    spec.train_per_class = 12;
    const DataSplits s = make_splits(spec, SeedStreams(21));
    const Normalization norm = Normalization::fit(s.train);
    train = to_tensor_dataset(s.train, norm);
    val = to_tensor_dataset(s.val, norm);
    bb = make_backbone("mini-resnet", spec.classes);
    layout = SlotLayout{{0, 0}};
    net = decode(neutral_genome(layout, bb.id), bb, layout);
  }

  TensorDataset train, val;
  BackboneSpec bb;
  SlotLayout layout;
  CandidateNetwork net;
};

TEST_F(TrainingTest, ZeroLearningRateKeepsParameters) {
  Rng init(1), order(2);
  ParamStore store = init_params(net.params, init);
  const ParamStore before = store.clone();
  Schedule s;
  s.epochs = 2;
  s.lr = 0.0;
  s.batch_size = 16;
  TrainOptions opt;
  opt.val = &val;
  const TrainResult r = train_network(net, store, train, s, opt, order);
  ASSERT_EQ(r.log.size(), 2u);
  for (const auto& [name, t] : before.params()) {
    EXPECT_EQ(test::max_abs_diff(t.values(), store.get(name).values()), 0.0) << name;
  }
  EXPECT_GE(r.val_acc, 0.0);
  EXPECT_TRUE(std::isfinite(r.log.back().train_loss));
}

TEST_F(TrainingTest, DeterministicGivenSeeds) {
  Schedule s;
  s.epochs = 2;
  s.batch_size = 16;
  auto run = [&] {
    Rng init(3), order(4);
    ParamStore store = init_params(net.params, init);
    TrainOptions opt;
    opt.val = &val;
    return train_network(net, store, train, s, opt, order);
  };
  const TrainResult a = run(), b = run();
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
    EXPECT_EQ(a.log[i].val_acc, b.log[i].val_acc);
  }
  EXPECT_EQ(training_log_csv(a.log, 7), training_log_csv(b.log, 7));
}

TEST_F(TrainingTest, LossDecreasesOnTrainingSet) {
  Rng init(5), order(6);
  ParamStore store = init_params(net.params, init);
  Schedule s;
  s.epochs = 8;
  s.batch_size = 12;
  s.lr = 0.05;
  const TrainResult r = train_network(net, store, train, s, TrainOptions{}, order);
  EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
}

TEST_F(TrainingTest, LogCsvHeaderAndRows) {
  std::vector<EpochLog> log{{0, 0.1, 1.5, 0.25, 0.3, -1.0}, {1, 0.01, 1.0, 0.5, 0.4, 0.45}};
  const std::string csv = training_log_csv(log, 9);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "seed,epoch,lr,train_loss,train_acc,val_acc,test_acc");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("9,1,0.01"), std::string::npos);
}

TEST_F(TrainingTest, DistillationNeedsTeacher) {
  Rng init(1), order(2);
  ParamStore store = init_params(net.params, init);
  Schedule s;
  s.epochs = 1;
  TrainOptions opt;
  opt.loss = LossKind::kOD;
  EXPECT_THROW(train_network(net, store, train, s, opt, order), std::invalid_argument);
}

TEST_F(TrainingTest, GatherMemberRows) {
  Array v(2 * 3 * 2);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const Tensor m({2, 3, 2}, v);
  const std::vector<std::size_t> idx{2, 0};
  const Tensor g = gather_member_rows(m, idx);
  ASSERT_EQ(g.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(test::to_vec(g), (std::vector<double>{4, 5, 0, 1, 10, 11, 6, 7}));
}

}  // namespace
}  // namespace kdas
