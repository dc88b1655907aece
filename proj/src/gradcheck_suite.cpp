#include <chrono>
#include <cmath>
#include <memory>
#include <sstream>

#include "kdas/gradcheck.hpp"
#include "kdas/losses.hpp"
#include "kdas/ops.hpp"
#include "kdas/random.hpp"

namespace kdas {

bool GradCheckReport::passed() const {
  for (const auto& e : entries)
    if (!e.passed) return false;
  return !entries.empty();
}

std::string GradCheckReport::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << "check,max_rel_error,passed\n";
  for (const auto& e : entries) os << e.name << ',' << e.max_rel_error << ',' << (e.passed ? 1 : 0) << '\n';
  return os.str();
}

namespace {

struct Inputs {
  Rng rng;
  explicit Inputs(std::uint64_t seed) : rng(seed) {}

  Tensor r(Shape s, double lo = -1.0, double hi = 1.0) {
    Array v(numel(s));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = uniform(rng, lo, hi);
    return Tensor(std::move(s), std::move(v));
  }
};

// Members [3,B,C] where example 0 has no correct member, example 1 has exactly
// one and the rest are random.
Tensor mixed_members(Inputs& in, const std::vector<int>& labels, std::int64_t classes) {
  const auto batch = static_cast<std::int64_t>(labels.size());
  Tensor m = in.r({3, batch, classes}, -2.0, 2.0);
  Array& v = m.mutable_values();
  for (std::int64_t j = 0; j < 3; ++j) {
    v[(j * batch + 0) * classes + labels[0]] = -5.0;
    v[(j * batch + 1) * classes + labels[1]] = j == 0 ? 5.0 : -5.0;
  }
  return m;
}

}  // namespace

std::vector<GradCase> standard_grad_cases(std::uint64_t seed) {
  auto in = std::make_shared<Inputs>(seed);
  auto r = [in](Shape s, double lo = -1.0, double hi = 1.0) { return in->r(std::move(s), lo, hi); };
  const Tensor w = r({3, 4}), other = r({2, 4}), img = r({2, 2, 4, 4});
  const Tensor g2 = r({2}, 0.5, 1.5), b2 = r({2});
  const Tensor kern = r({3, 2, 3, 3}), kb = r({3});
  const Tensor dwk = r({2, 1, 5, 5}), dwb = r({2});
  const Tensor proj4 = r({2, 4, 2, 2}), out23 = r({2, 3}), pool_proj = r({2, 2, 4, 4});

  std::vector<GradCase> cases{
      {"add", [=](const Tensor& x) { return sum(mul(add(x, other), other)); }, r({2, 4})},
      {"sub", [=](const Tensor& x) { return sum(mul(sub(other, x), other)); }, r({2, 4})},
      {"mul", [=](const Tensor& x) { return sum(mul(x, x)); }, r({2, 4})},
      {"scale", [=](const Tensor& x) { return sum(mul(scale(x, -1.7), other)); }, r({2, 4})},
      {"add_scalar", [=](const Tensor& x) { return sum(mul(add_scalar(x, 0.3), x)); }, r({2, 4})},
      {"sum", [=](const Tensor& x) { return mul(sum(x), sum(x)); }, r({2, 4})},
      {"mean", [=](const Tensor& x) { return mean(mul(x, other)); }, r({2, 4})},
      {"reshape", [=](const Tensor& x) { return sum(mul(reshape(x, {2, 4}), other)); }, r({8})},
      {"identity", [=](const Tensor& x) { return sum(mul(identity(x), other)); }, r({2, 4})},
      {"relu", [=](const Tensor& x) { return sum(mul(relu(x), other)); }, r({2, 4})},
      {"sigmoid", [=](const Tensor& x) { return sum(mul(sigmoid(x), other)); }, r({2, 4})},
      {"tanh", [=](const Tensor& x) { return sum(mul(tanh(x), other)); }, r({2, 4})},
      {"linear.x", [=](const Tensor& x) { return sum(mul(linear(x, w, kb), out23)); }, r({2, 4})},
      {"linear.w", [=](const Tensor& x) { return sum(tanh(linear(other, x, kb))); }, r({3, 4})},
      {"linear.b", [=](const Tensor& x) { return sum(tanh(linear(other, w, x))); }, r({3})},
      {"row", [=](const Tensor& x) { return sum(mul(row(x, 1), row(other, 0))); }, r({3, 4})},
      {"pick", [=](const Tensor& x) { return mul(pick(x, 5), pick(x, 2)); }, r({2, 4})},
      {"softmax", [=](const Tensor& x) { return sum(mul(softmax(x), other)); }, r({2, 4})},
      {"log_softmax", [=](const Tensor& x) { return sum(mul(log_softmax(x), other)); }, r({2, 4})},
      {"conv2d.x", [=](const Tensor& x) { return sum(tanh(conv2d(x, kern, kb, {1, 1, 1}))); }, r({2, 2, 4, 4})},
      {"conv2d.w", [=](const Tensor& x) { return sum(tanh(conv2d(img, x, kb, {2, 1, 1}))); }, r({3, 2, 3, 3})},
      {"conv2d.b", [=](const Tensor& x) { return sum(tanh(conv2d(img, kern, x, {1, 1, 1}))); }, r({3})},
      {"depthwise.x", [=](const Tensor& x) { return sum(tanh(conv2d(x, dwk, dwb, {1, 2, 2}))); }, r({2, 2, 4, 4})},
      {"depthwise.w", [=](const Tensor& x) { return sum(tanh(conv2d(img, x, dwb, {1, 2, 2}))); }, r({2, 1, 5, 5})},
      {"depthwise.b", [=](const Tensor& x) { return sum(tanh(conv2d(img, dwk, x, {1, 2, 2}))); }, r({2})},
      {"max_pool", [=](const Tensor& x) { return sum(mul(max_pool2d(x), pool_proj)); }, r({2, 2, 4, 4})},
      {"avg_pool", [=](const Tensor& x) { return sum(tanh(avg_pool2d(x))); }, r({2, 2, 4, 4})},
      {"global_avg_pool", [=](const Tensor& x) { return sum(tanh(global_avg_pool(x))); }, r({2, 2, 4, 4})},
      {"shortcut_pad", [=](const Tensor& x) { return sum(mul(shortcut_pad(x, 2, 4), proj4)); }, r({2, 2, 4, 4})},
      {"batch_norm.train",
       [=](const Tensor& x) {
         BatchNormState st = BatchNormState::fresh(2);
         return sum(tanh(batch_norm(x, g2, b2, st, {NormMode::kTrain})));
       },
       r({3, 2, 3, 3})},
      {"batch_norm.gamma",
       [=](const Tensor& x) {
         BatchNormState st = BatchNormState::fresh(2);
         return sum(tanh(batch_norm(img, x, b2, st, {NormMode::kBatchStats})));
       },
       r({2}, 0.5, 1.5)},
      {"batch_norm.beta",
       [=](const Tensor& x) {
         BatchNormState st = BatchNormState::fresh(2);
         return sum(tanh(batch_norm(img, g2, x, st, {NormMode::kBatchStats})));
       },
       r({2})},
      {"batch_norm.running",
       [=](const Tensor& x) {
         BatchNormState st{Array::Constant(2, 0.1), Array::Constant(2, 2.0)};
         return sum(tanh(batch_norm(x, g2, b2, st, {NormMode::kRunning})));
       },
       r({3, 2, 3, 3})},
  };

  const std::vector<int> labels{0, 3, 1, 2, 3};
  const Tensor teacher = r({5, 4}, -2.0, 2.0);
  const Tensor members = mixed_members(*in, labels, 4);
  auto logits = [&] { return r({5, 4}, -2.0, 2.0); };
  cases.push_back({"cross_entropy", [=](const Tensor& z) { return cross_entropy(z, labels); }, logits()});
  for (double t : {1.0, 3.0}) {
    std::ostringstream name;
    name << "kl_distill.T" << t;
    cases.push_back({name.str(), [=](const Tensor& z) { return kl_distill(z, teacher, t); }, logits()});
  }
  for (double lambda : {0.0, 0.5, 1.0}) {
    std::ostringstream kd, od;
    kd << "kd_loss.lambda" << lambda;
    od << "od_loss.lambda" << lambda;
    const DistillConfig cfg{3.0, lambda};
    cases.push_back({kd.str(), [=](const Tensor& z) { return kd_loss(z, teacher, labels, cfg); }, logits()});
    cases.push_back({od.str(), [=](const Tensor& z) { return od_loss(z, members, labels, cfg); }, logits()});
  }

  const Tensor images = r({3, 2, 5, 5});
  const Tensor w1 = r({3, 2, 3, 3}, -0.5, 0.5), b1 = r({3});
  const Tensor gamma = r({3}, 0.5, 1.5), beta = r({3});
  const Tensor fc = r({4, 3}), fcb = r({4});
  const std::vector<int> net_labels{0, 3, 1};
  auto mini = [=](const Tensor& x, const Tensor& weight) {
    BatchNormState st = BatchNormState::fresh(3);
    Tensor h = relu(batch_norm(conv2d(x, weight, b1, {1, 1, 1}), gamma, beta, st, {NormMode::kBatchStats}));
    return cross_entropy(linear(global_avg_pool(avg_pool2d(h, {3, 1, 1})), fc, fcb), net_labels);
  };
  cases.push_back({"mini_network.weights", [=](const Tensor& x) { return mini(images, x); }, w1});
  cases.push_back({"mini_network.inputs", [=](const Tensor& x) { return mini(x, w1); }, images});
  return cases;
}

GradCheckReport run_grad_checks(const std::vector<GradCase>& cases, double tolerance, double eps) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckReport report;
  report.tolerance = tolerance;
  for (const auto& c : cases) {
    const double err = grad_check(c.fn, c.at, eps);
    report.entries.push_back({c.name, err, err < tolerance});
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace kdas
