#include "kdas/training.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "kdas/optim.hpp"

namespace kdas {

void Schedule::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("schedule." + field + ": " + msg);
  };
  if (epochs < 0) fail("epochs", "must be >= 0");
  if (batch_size < 2) fail("batch_size", "must be >= 2");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr", "must be finite and >= 0");
  if (!(warmup_lr >= 0.0)) fail("warmup_lr", "must be >= 0");
  if (warmup_iters < 0) fail("warmup_iters", "must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must be in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (augment_padding < 0) fail("augment_padding", "must be >= 0");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 0 || (i > 0 && milestones[i] <= milestones[i - 1])) {
      fail("milestones", "must be non-negative and strictly increasing");
    }
  }
}

std::vector<int> Schedule::milestone_epochs() const {
  if (!milestones.empty()) return milestones;
  return {static_cast<int>(std::lround(0.5 * epochs)), static_cast<int>(std::lround(0.75 * epochs))};
}

double Schedule::lr_at(int epoch, std::int64_t iteration) const {
  if (iteration < warmup_iters) return warmup_lr;
  double out = lr;
  for (int m : milestone_epochs()) {
    if (epoch >= m) out /= 10.0;
  }
  return out;
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw std::invalid_argument("accuracy: logits " + shape_str(logits.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw std::invalid_argument("accuracy: empty batch");
  const auto c = logits.dim(1);
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    hits += predicts(logits.values().data() + static_cast<std::int64_t>(i) * c, c, labels[i]) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

Tensor gather_member_rows(const Tensor& member_logits, std::span<const std::size_t> indices) {
  if (member_logits.rank() != 3) {
    throw std::invalid_argument("gather: member logits must be [N,T,C], got " + shape_str(member_logits.shape()));
  }
  const auto n = member_logits.dim(0), t = member_logits.dim(1), c = member_logits.dim(2);
  const auto b = static_cast<std::int64_t>(indices.size());
  Array out(n * b * c);
  for (std::int64_t j = 0; j < n; ++j)
    for (std::int64_t k = 0; k < b; ++k) {
      const auto i = static_cast<std::int64_t>(indices[static_cast<std::size_t>(k)]);
      if (i >= t) throw std::out_of_range("gather: row index out of range");
      out.segment((j * b + k) * c, c) = member_logits.values().segment((j * t + i) * c, c);
    }
  return Tensor({n, b, c}, std::move(out));
}

Tensor predict_logits(const CandidateNetwork& net, ParamStore& store, const TensorDataset& data, NormMode mode,
                      int batch_size) {
  const auto n = data.size();
  const auto c = static_cast<std::int64_t>(net.backbone.num_classes);
  Array out(static_cast<Eigen::Index>(n) * c);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + static_cast<std::size_t>(batch_size)); ++i) idx.push_back(i);
    const Tensor logits = forward(net, store, data.batch(idx), mode);
    out.segment(static_cast<Eigen::Index>(start) * c, logits.size()) = logits.values();
  }
  return Tensor({static_cast<std::int64_t>(n), c}, std::move(out));
}

TrainResult train_network(const CandidateNetwork& net, ParamStore& store, const TensorDataset& train,
                          const Schedule& schedule, const TrainOptions& options, Rng& rng) {
  schedule.validate();
  options.distill.validate();
  if (train.size() < 2) throw std::invalid_argument("train: need at least 2 training examples");
  if (options.loss != LossKind::kCE) {
    if (options.teacher == nullptr) throw std::invalid_argument("train: distillation loss without teacher logits");
    if (options.teacher->rank() != 3 || options.teacher->dim(1) != static_cast<std::int64_t>(train.size()) ||
        options.teacher->dim(2) != net.backbone.num_classes) {
      throw std::invalid_argument("train: teacher logits " + shape_str(options.teacher->shape()) +
                                  " do not match the training set");
    }
  }
  std::vector<Tensor> params = collect_params(net, store);
  SgdState sgd({schedule.lr, schedule.momentum, schedule.weight_decay, schedule.nesterov});
  TrainResult result;
  std::int64_t iteration = 0;
  const Tensor no_teacher = Tensor::zeros({1, 1, net.backbone.num_classes});
  const auto bs = static_cast<std::size_t>(schedule.batch_size);

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const auto order = permutation(train.size(), rng);
    EpochLog log;
    log.epoch = epoch;
    log.lr = schedule.lr_at(epoch, iteration);
    double loss_sum = 0.0;
    std::int64_t seen = 0, hits = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const auto end = std::min(order.size(), start + bs);
      if (end - start < 2) break;  // batch statistics need two examples
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor images = train.batch(idx);
      if (schedule.augment) images = augment(images, schedule.augment_padding, rng);
      const auto labels = train.batch_labels(idx);
      const Tensor teacher = options.loss == LossKind::kCE ? no_teacher : gather_member_rows(*options.teacher, idx);

      Tape tape;
      Tensor logits, loss;
      {
        TapeScope scope(tape);
        logits = forward(net, store, images, NormMode::kTrain);
        loss = options.loss == LossKind::kCE ? cross_entropy(logits, labels)
                                             : training_loss(options.loss, logits, teacher, labels, options.distill);
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", iteration " + std::to_string(iteration));
      }
      const GradientMap grads = backward(tape, loss);
      std::vector<Tensor> g;
      g.reserve(params.size());
      for (const auto& p : params) g.push_back(grads.of(p));
      sgd.options.learning_rate = schedule.lr_at(epoch, iteration);
      sgd_step(params, g, sgd);

      const auto b = static_cast<std::int64_t>(labels.size());
      loss_sum += value * static_cast<double>(b);
      seen += b;
      hits += static_cast<std::int64_t>(std::llround(accuracy(logits, labels) * static_cast<double>(b)));
      ++iteration;
    }
    log.train_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
    log.train_acc = seen > 0 ? static_cast<double>(hits) / static_cast<double>(seen) : 0.0;
    const bool last = epoch + 1 == schedule.epochs;
    if (options.val != nullptr && options.val->size() > 0) {
      log.val_acc = accuracy(predict_logits(net, store, *options.val), options.val->labels);
    }
    if (options.test != nullptr && options.test->size() > 0 && (last || options.test_every_epoch)) {
      log.test_acc = accuracy(predict_logits(net, store, *options.test), options.test->labels);
    }
    result.log.push_back(log);
  }
  if (options.val != nullptr && options.val->size() > 0) {
    result.val_acc = result.log.empty() ? accuracy(predict_logits(net, store, *options.val), options.val->labels)
                                        : result.log.back().val_acc;
  }
  if (options.test != nullptr && options.test->size() > 0) {
    result.test_acc = result.log.empty() ? accuracy(predict_logits(net, store, *options.test), options.test->labels)
                                         : result.log.back().test_acc;
  }
  return result;
}

std::string training_log_csv(const std::vector<EpochLog>& log, std::uint64_t seed) {
  std::ostringstream out;
  out.precision(17);
  out << "seed,epoch,lr,train_loss,train_acc,val_acc,test_acc\n";
  auto opt = [](double v) {
    if (v < 0.0) return std::string();
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  for (const auto& e : log) {
    out << seed << ',' << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_acc << ','
        << opt(e.val_acc) << ',' << opt(e.test_acc) << '\n';
  }
  return out.str();
}

}  // namespace kdas
