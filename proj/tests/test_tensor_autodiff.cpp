#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "kdas/checkpoint.hpp"
#include "kdas/gradcheck.hpp"
#include "kdas/losses.hpp"
#include "kdas/ops.hpp"
#include "kdas/optim.hpp"
#include "test_util.hpp"

using namespace kdas;
using kdas::test::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

}  // namespace

TEST(Conv2d, DeltaKernelIsIdentity) {
  Rng rng(1);
  Tensor x = random_tensor({2, 1, 6, 5}, rng);
  Tensor w = Tensor::of({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(x, w, b, {1, 1, 1});
  ASSERT_EQ(y.shape(), x.shape());
  EXPECT_EQ(test::max_abs_diff(y.values(), x.values()), 0.0);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(2);
  Tensor x = random_tensor({2, 3, 5, 6}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor y = conv2d(x, w, b, {1, 1, 1});
  auto ref = test::direct_conv(test::to_vec(x), 2, 3, 5, 6, test::to_vec(w), 4, 3, 1, 1, test::to_vec(b));
  ASSERT_EQ(static_cast<std::size_t>(y.size()), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[static_cast<Eigen::Index>(i)], ref[i], 1e-12);
}

TEST(Conv2d, DepthwiseSeparableMatchesNestedLoopOracle) {
  Rng rng(3);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor dw = random_tensor({2, 1, 3, 3}, rng);
  Tensor dwb = random_tensor({2}, rng);
  Tensor pw = random_tensor({2, 2, 1, 1}, rng);
  Tensor pwb = random_tensor({2}, rng);
  Tensor y = conv2d(conv2d(x, dw, dwb, {1, 1, 2}), pw, pwb);

  auto depth = test::direct_conv(test::to_vec(x), 1, 2, 5, 5, test::to_vec(dw), 2, 3, 1, 2, test::to_vec(dwb));
  auto ref = test::direct_conv(depth, 1, 2, 5, 5, test::to_vec(pw), 2, 1, 0, 1, test::to_vec(pwb));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[static_cast<Eigen::Index>(i)], ref[i], 1e-12);
}

TEST(Conv2d, StridedOutputShape) {
  Rng rng(4);
  Tensor y = conv2d(random_tensor({1, 2, 8, 8}, rng), random_tensor({3, 2, 3, 3}, rng), {}, {2, 1, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
}

TEST(Conv2d, ShapeMismatchNamesOpAndShapes) {
  Rng rng(5);
  try {
    conv2d(random_tensor({1, 2, 4, 4}, rng), random_tensor({3, 5, 3, 3}, rng));
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("conv2d"), std::string::npos);
    EXPECT_NE(msg.find("[1,2,4,4]"), std::string::npos);
    EXPECT_NE(msg.find("[3,5,3,3]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);
  EXPECT_THROW(linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), std::invalid_argument);
}

TEST(Pooling, AveragePoolKeepsConstants) {
  Tensor x = Tensor::full({2, 3, 5, 4}, 2.75);
  Tensor y = avg_pool2d(x, {3, 1, 1});
  ASSERT_EQ(y.shape(), x.shape());
  EXPECT_LT((y.values() - 2.75).abs().maxCoeff(), 1e-15);
}

TEST(Pooling, MaxPoolPicksWindowMaximum) {
  Tensor x = Tensor::of({1, 1, 3, 3}, {1, 2, 3, 4, 9, 6, 7, 8, 5});
  Tensor y = max_pool2d(x, {3, 1, 1});
  EXPECT_EQ(y[0], 9.0);
  EXPECT_EQ(y[8], 9.0);
  Tensor corner = Tensor::of({1, 1, 3, 3}, {-5, -4, -3, -2, -1, -6, -7, -8, -9});
  EXPECT_EQ(max_pool2d(corner, {3, 1, 1})[0], -1.0);
}

TEST(Backward, SumHasUnitGradient) {
  Tensor x = Tensor::of({3}, {1.0, -2.0, 5.0}, true);
  Tape tape;
  GradientMap g;
  {
    TapeScope scope(tape);
    g = backward(tape, sum(x));
  }
  EXPECT_EQ(test::to_vec(g.of(x)), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, UnusedParameterGetsZeros) {
  Tensor x = Tensor::of({2}, {1.0, 2.0}, true);
  Tensor unused = Tensor::full({2, 2}, 3.0, true);
  Tape tape;
  TapeScope scope(tape);
  GradientMap g = backward(tape, sum(mul(x, x)));
  EXPECT_FALSE(g.reached(unused));
  Tensor gu = g.of(unused);
  EXPECT_EQ(gu.shape(), unused.shape());
  EXPECT_EQ(gu.values().abs().maxCoeff(), 0.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x = Tensor::of({2}, {1.0, 2.0}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(backward(tape, y), std::invalid_argument);
}

TEST(Backward, VisitsEachRecordOnceInTopologicalOrder) {
  Tensor x = Tensor::of({2}, {0.5, -1.0}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor a = tanh(x);
  Tensor b = mul(a, a);
  Tensor loss = sum(add(a, b));
  ASSERT_EQ(tape.size(), 4u);
  // Inputs of every record were produced earlier or are leaves.
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (const auto& in : tape.records()[i].inputs) {
      bool leaf = in.id() == x.id();
      bool earlier = false;
      for (std::size_t k = 0; k < i; ++k) earlier = earlier || tape.records()[k].output.id() == in.id();
      EXPECT_TRUE(leaf || earlier);
    }
  }
  GradientMap g = backward(tape, loss);
  // d/dx (tanh + tanh^2) = (1 + 2 tanh) (1 - tanh^2)
  for (int i = 0; i < 2; ++i) {
    const double t = std::tanh(x[i]);
    EXPECT_NEAR(g.of(x)[i], (1 + 2 * t) * (1 - t * t), 1e-14);
  }
}

TEST(Backward, NoTapeMeansNoTracking) {
  Tensor x = Tensor::of({2}, {1.0, 2.0}, true);
  Tensor y = scale(x, 3.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, CrossEntropyMatchesFiniteDifferences) {
  Rng rng(6);
  Tensor logits = random_tensor({4, 5}, rng, -2, 2);
  auto labels = test::random_labels(4, 5, rng);
  double err = grad_check([&](const Tensor& z) { return cross_entropy(z, labels); }, logits, 1e-5);
  EXPECT_LT(err, kGradTol);
}

TEST(GradCheck, QuadraticIsExact) {
  Tensor x = Tensor::of({1}, {2.0});
  EXPECT_LT(grad_check([](const Tensor& v) { return sum(mul(v, v)); }, x), 1e-8);
}

TEST(GradCheck, ConstantFunctionGivesZero) {
  Tensor x = Tensor::of({3}, {1, 2, 3});
  EXPECT_EQ(grad_check([](const Tensor&) { return Tensor::scalar(4.0); }, x), 0.0);
}

TEST(GradCheck, NanPropagates) {
  Tensor x = Tensor::of({1}, {-1.0});
  double err = grad_check(
      [](const Tensor& v) {
        return detail::record_op("sqrt", {1}, v.values().sqrt(), {v},
                                 [](const Array&, std::span<Array*>) {});
      },
      x);
  EXPECT_TRUE(std::isnan(err));
}

TEST(GradCheck, DetectsCorruptedAdjoint) {
  auto bad_square = [](const Tensor& v) {
    Array vv = v.values();
    return detail::record_op("bad_square", v.shape(), vv.square(), {v},
                             [vv](const Array& g, std::span<Array*> gi) {
                               if (gi[0]) *gi[0] += g * vv * 3.0;  // should be 2
                             });
  };
  Tensor x = Tensor::of({2}, {0.7, -1.2});
  EXPECT_GT(grad_check([&](const Tensor& v) { return sum(bad_square(v)); }, x), 1e-2);
}

TEST(GradCheck, MiniNetworkEndToEnd) {
  Rng rng(7);
  Tensor images = random_tensor({3, 2, 5, 5}, rng);
  Tensor w1 = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
  Tensor b1 = random_tensor({3}, rng);
  Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
  Tensor beta = random_tensor({3}, rng);
  Tensor fc = random_tensor({4, 3}, rng);
  Tensor fcb = random_tensor({4}, rng);
  std::vector<int> labels{0, 3, 1};
  auto net = [&](const Tensor& w) {
    BatchNormState st = BatchNormState::fresh(3);
    Tensor h = conv2d(images, w, b1, {1, 1, 1});
    h = relu(batch_norm(h, gamma, beta, st, {NormMode::kBatchStats}));
    h = avg_pool2d(h, {3, 1, 1});
    return cross_entropy(linear(global_avg_pool(h), fc, fcb), labels);
  };
  EXPECT_LT(grad_check(net, w1), kGradTol);
  auto net_x = [&](const Tensor& x) {
    BatchNormState st = BatchNormState::fresh(3);
    Tensor h = relu(batch_norm(conv2d(x, w1, b1, {1, 1, 1}), gamma, beta, st, {NormMode::kBatchStats}));
    return cross_entropy(linear(global_avg_pool(max_pool2d(h)), fc, fcb), labels);
  };
  EXPECT_LT(grad_check(net_x, images), kGradTol);
}

// Every differentiable op against central differences on random inputs.
TEST(GradCheck, EveryOpMatchesFiniteDifferences) {
  Rng rng(8);
  auto r = [&](Shape s, double lo = -1, double hi = 1) { return random_tensor(std::move(s), rng, lo, hi); };
  Tensor w = r({3, 4});
  Tensor other = r({2, 4});
  Tensor img = r({2, 2, 4, 4});
  Tensor g2 = r({2}, 0.5, 1.5), b2 = r({2});
  Tensor kern = r({3, 2, 3, 3}), kb = r({3});
  Tensor dwk = r({2, 1, 5, 5}), dwb = r({2});
  Tensor proj4 = r({2, 4, 2, 2});
  Tensor out23 = r({2, 3});
  Tensor pool_proj = r({2, 2, 4, 4});

  struct Case {
    const char* name;
    ScalarFn fn;
    Tensor at;
  };
  std::vector<Case> cases{
      {"add", [&](const Tensor& x) { return sum(mul(add(x, other), other)); }, r({2, 4})},
      {"sub", [&](const Tensor& x) { return sum(mul(sub(other, x), other)); }, r({2, 4})},
      {"mul", [&](const Tensor& x) { return sum(mul(x, x)); }, r({2, 4})},
      {"scale", [&](const Tensor& x) { return sum(mul(scale(x, -1.7), other)); }, r({2, 4})},
      {"add_scalar", [&](const Tensor& x) { return sum(mul(add_scalar(x, 0.3), x)); }, r({2, 4})},
      {"mean", [&](const Tensor& x) { return mean(mul(x, other)); }, r({2, 4})},
      {"reshape", [&](const Tensor& x) { return sum(mul(reshape(x, {2, 4}), other)); }, r({8})},
      {"relu", [&](const Tensor& x) { return sum(mul(relu(x), other)); }, r({2, 4})},
      {"sigmoid", [&](const Tensor& x) { return sum(mul(sigmoid(x), other)); }, r({2, 4})},
      {"tanh", [&](const Tensor& x) { return sum(mul(tanh(x), other)); }, r({2, 4})},
      {"linear.x", [&](const Tensor& x) { return sum(mul(linear(x, w, kb), out23)); }, r({2, 4})},
      {"linear.w", [&](const Tensor& x) { return sum(tanh(linear(other, x, kb))); }, r({3, 4})},
      {"row", [&](const Tensor& x) { return sum(mul(row(x, 1), row(other, 0))); }, r({3, 4})},
      {"pick", [&](const Tensor& x) { return mul(pick(x, 5), pick(x, 2)); }, r({2, 4})},
      {"softmax", [&](const Tensor& x) { return sum(mul(softmax(x), other)); }, r({2, 4})},
      {"log_softmax", [&](const Tensor& x) { return sum(mul(log_softmax(x), other)); }, r({2, 4})},
      {"conv2d.x", [&](const Tensor& x) { return sum(tanh(conv2d(x, kern, kb, {1, 1, 1}))); }, r({2, 2, 4, 4})},
      {"conv2d.w", [&](const Tensor& x) { return sum(tanh(conv2d(img, x, kb, {2, 1, 1}))); }, r({3, 2, 3, 3})},
      {"conv2d.b", [&](const Tensor& x) { return sum(tanh(conv2d(img, kern, x, {1, 1, 1}))); }, r({3})},
      {"depthwise.x", [&](const Tensor& x) { return sum(tanh(conv2d(x, dwk, dwb, {1, 2, 2}))); }, r({2, 2, 4, 4})},
      {"depthwise.w", [&](const Tensor& x) { return sum(tanh(conv2d(img, x, dwb, {1, 2, 2}))); }, r({2, 1, 5, 5})},
      {"max_pool", [&](const Tensor& x) { return sum(mul(max_pool2d(x), pool_proj)); }, r({2, 2, 4, 4})},
      {"avg_pool", [&](const Tensor& x) { return sum(tanh(avg_pool2d(x))); }, r({2, 2, 4, 4})},
      {"global_avg_pool", [&](const Tensor& x) { return sum(tanh(global_avg_pool(x))); }, r({2, 2, 4, 4})},
      {"shortcut_pad", [&](const Tensor& x) { return sum(mul(shortcut_pad(x, 2, 4), proj4)); }, r({2, 2, 4, 4})},
      {"batch_norm.train",
       [&](const Tensor& x) {
         BatchNormState st = BatchNormState::fresh(2);
         return sum(tanh(batch_norm(x, g2, b2, st, {NormMode::kTrain})));
       },
       r({3, 2, 3, 3})},
      {"batch_norm.gamma",
       [&](const Tensor& x) {
         BatchNormState st = BatchNormState::fresh(2);
         return sum(tanh(batch_norm(img, x, b2, st, {NormMode::kBatchStats})));
       },
       r({2}, 0.5, 1.5)},
      {"batch_norm.running",
       [&](const Tensor& x) {
         BatchNormState st{Array::Constant(2, 0.1), Array::Constant(2, 2.0)};
         return sum(tanh(batch_norm(x, g2, b2, st, {NormMode::kRunning})));
       },
       r({3, 2, 3, 3})},
  };
  for (const auto& c : cases) {
    const double err = grad_check(c.fn, c.at, 1e-5);
    EXPECT_LT(err, kGradTol) << c.name;
  }
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(9);
  Tensor x = random_tensor({5, 7}, rng, -30, 30);
  Tensor p = softmax(x);
  for (int r = 0; r < 5; ++r) EXPECT_NEAR(p.values().segment(r * 7, 7).sum(), 1.0, 1e-12);
  Tensor shifted(x.shape(), x.values() + 123.25);
  EXPECT_LT(test::max_abs_diff(softmax(shifted).values(), p.values()), 1e-12);
}

TEST(BatchNorm, InferenceModeIsAffine) {
  Rng rng(10);
  Tensor gamma = random_tensor({3}, rng, 0.5, 2), beta = random_tensor({3}, rng);
  BatchNormState st{Array::Constant(3, 0.4), Array::Constant(3, 1.7)};
  Tensor x1 = random_tensor({2, 3, 4, 4}, rng), x2 = random_tensor({2, 3, 4, 4}, rng);
  const double a = 0.3;
  auto f = [&](const Tensor& x) { return batch_norm(x, gamma, beta, st, {NormMode::kRunning}).values(); };
  Array mixed = f(Tensor(x1.shape(), a * x1.values() + (1 - a) * x2.values()));
  EXPECT_LT((mixed - (a * f(x1) + (1 - a) * f(x2))).abs().maxCoeff(), 1e-12);
}

TEST(BatchNorm, TrainModeUpdatesRunningStatistics) {
  Tensor x = Tensor::of({4, 1}, {1, 2, 3, 4});
  BatchNormState st = BatchNormState::fresh(1);
  batch_norm(x, Tensor::of({1}, {1}), Tensor::of({1}, {0}), st, {NormMode::kTrain, 0.1});
  EXPECT_NEAR(st.running_mean[0], 0.25, 1e-15);
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-15);
  BatchNormState frozen = BatchNormState::fresh(1);
  batch_norm(x, Tensor::of({1}, {1}), Tensor::of({1}, {0}), frozen, {NormMode::kBatchStats});
  EXPECT_EQ(frozen.running_mean[0], 0.0);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  auto run = [] {
    Rng rng(11);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    Tensor w = random_tensor({4, 3, 5, 5}, rng);
    BatchNormState st = BatchNormState::fresh(4);
    return batch_norm(conv2d(x, w, {}, {1, 2, 1}), Tensor::full({4}, 1.0), Tensor::zeros({4}), st).values();
  };
  Array a = run(), b = run();
  EXPECT_TRUE((a == b).all());
}

TEST(Sgd, PlainStepWithoutMomentum) {
  std::vector<Tensor> params{Tensor::of({2}, {1.0, -2.0})};
  std::vector<Tensor> grads{Tensor::of({2}, {0.5, 4.0})};
  SgdState st({0.1, 0.0, 0.0, true});
  sgd_step(params, grads, st);
  EXPECT_NEAR(params[0][0], 1.0 - 0.05, 1e-15);
  EXPECT_NEAR(params[0][1], -2.0 - 0.4, 1e-15);
}

TEST(Sgd, NesterovMatchesScalarReference) {
  // Scalar reference recursion on f(x) = x^2 / 2, g = x.
  const double lr = 0.1, mu = 0.9;
  double x = 1.0, v = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double g = x;
    v = mu * v - lr * g;
    x = x + mu * v - lr * g;
  }
  EXPECT_NEAR(x, 0.5751, 1e-12);

  std::vector<Tensor> params{Tensor::of({1}, {1.0})};
  SgdState st({lr, mu, 0.0, true});
  for (int k = 0; k < 2; ++k) {
    std::vector<Tensor> grads{Tensor::of({1}, {params[0][0]})};
    sgd_step(params, grads, st);
  }
  EXPECT_NEAR(params[0][0], x, 1e-15);
}

TEST(Sgd, WeightDecayShrinksParameters) {
  std::vector<Tensor> params{Tensor::of({2}, {2.0, -4.0})};
  std::vector<Tensor> grads{Tensor::zeros({2})};
  SgdState st({0.1, 0.0, 1e-4, true});
  sgd_step(params, grads, st);
  EXPECT_NEAR(params[0][0], 2.0 * (1 - 1e-5), 1e-15);
  EXPECT_NEAR(params[0][1], -4.0 * (1 - 1e-5), 1e-15);
}

TEST(Sgd, RejectsShapeMismatch) {
  std::vector<Tensor> params{Tensor::zeros({2})};
  std::vector<Tensor> grads{Tensor::zeros({3})};
  SgdState st;
  EXPECT_THROW(sgd_step(params, grads, st), std::invalid_argument);
}

TEST(Checkpoint, RoundTripAndByteLayout) {
  NamedTensors entries{{"a", Tensor::of({2}, {1.5, -2.0})}, {"layer.w", Tensor::of({1, 2, 1}, {3.0, 4.0})}};
  const std::string bytes = encode_checkpoint(entries);
  ASSERT_EQ(bytes.substr(0, 4), "ODTW");
  // version 1, two entries, then u16 name length 1 and 'a'.
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 1);
  EXPECT_EQ(bytes[13], 0);
  EXPECT_EQ(bytes[14], 'a');
  EXPECT_EQ(bytes.size(), 4u + 4 + 4 + (2 + 1 + 1 + 4 + 16) + (2 + 7 + 1 + 12 + 16));
  auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].first, "layer.w");
  EXPECT_EQ(back[1].second.shape(), (Shape{1, 2, 1}));
  EXPECT_EQ(back[1].second[1], 4.0);

  const auto path = std::filesystem::temp_directory_path() / "kdas_ckpt_test.odtw";
  save_checkpoint(path, entries);
  EXPECT_EQ(load_checkpoint(path)[0].second[0], 1.5);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::string bytes = encode_checkpoint({{"w", Tensor::of({2}, {1, 2})}});
  EXPECT_THROW(decode_checkpoint("ODTX" + bytes.substr(4)), std::runtime_error);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
}

TEST(GradCheckSuite, StandardCasesPassAndReportPerCheck) {
  const auto report = run_grad_checks(standard_grad_cases());
  EXPECT_TRUE(report.passed());
  for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-4) << e.name;
  std::vector<std::string> names;
  for (const auto& e : report.entries) names.push_back(e.name);
  for (const char* want : {"conv2d.w", "depthwise.x", "batch_norm.train", "cross_entropy", "kl_distill.T1",
                           "kl_distill.T3", "kd_loss.lambda0.5", "od_loss.lambda1", "mini_network.inputs"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
  }
  EXPECT_EQ(report.to_csv().substr(0, 29), "check,max_rel_error,passed\nad");
}

TEST(GradCheckSuite, CorruptedAdjointFailsTheReport) {
  auto cases = standard_grad_cases();
  cases.push_back({"bad_square",
                   [](const Tensor& v) {
                     Array vv = v.values();
                     return sum(detail::record_op("bad_square", v.shape(), vv.square(), {v},
                                                  [vv](const Array& g, std::span<Array*> gi) {
                                                    if (gi[0]) *gi[0] += g * vv * 3.0;
                                                  }));
                   },
                   Tensor::of({2}, {0.7, -1.2})});
  const auto report = run_grad_checks(cases);
  EXPECT_FALSE(report.passed());
  EXPECT_FALSE(report.entries.back().passed);
  EXPECT_TRUE(report.entries.front().passed);
}
