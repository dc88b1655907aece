#include "kdas/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "kdas/ops.hpp"

namespace kdas {

void DistillConfig::validate() const {
  if (!(temperature >= 1.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("distill: temperature must be >= 1, got " + std::to_string(temperature));
  }
  if (!(balance >= 0.0 && balance <= 1.0)) {
    throw std::invalid_argument("distill: balance must lie in [0,1], got " + std::to_string(balance));
  }
}

namespace {

void check_logits(std::string_view op, const Tensor& logits, std::size_t labels) {
  if (logits.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": logits must be [B,C], got " + shape_str(logits.shape()));
  }
  if (static_cast<std::size_t>(logits.dim(0)) != labels) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(labels) + " labels for logits " +
                                shape_str(logits.shape()));
  }
}

void check_labels(std::string_view op, std::span<const int> labels, std::int64_t classes) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw std::invalid_argument(std::string(op) + ": label " + std::to_string(labels[i]) + " at index " +
                                  std::to_string(i) + " outside [0," + std::to_string(classes) + ")");
    }
  }
}

Array log_softmax_row(const Eigen::Ref<const Array>& z) {
  const double m = z.maxCoeff();
  return z - (m + std::log((z - m).exp().sum()));
}

// -log softmax(z)[label]; gradient softmax(z) - onehot.
double ce_row(const Eigen::Ref<const Array>& z, int label, Eigen::Ref<Array> grad) {
  const Array lp = log_softmax_row(z);
  grad = lp.exp();
  grad[label] -= 1.0;
  return -lp[label];
}

// T^2 KL(softmax(t/T) || softmax(s/T)); gradient w.r.t. s is T (q_s - q_t).
double kl_row(const Eigen::Ref<const Array>& s, const Eigen::Ref<const Array>& t, double temp,
              Eigen::Ref<Array> grad) {
  const Array ls = log_softmax_row(s / temp);
  const Array lt = log_softmax_row(t / temp);
  const Array qt = lt.exp();
  grad = temp * (ls.exp() - qt);
  return temp * temp * (qt * (lt - ls)).sum();
}

Tensor rowwise_loss(std::string_view op, const Tensor& student, Array per_example, Array grads) {
  const double batch = static_cast<double>(student.dim(0));
  return detail::record_op(op, {1}, Array::Constant(1, per_example.sum() / batch), {student},
                           [grads = std::move(grads), batch](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) *gi[0] += grads * (g[0] / batch);
                           });
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_logits("cross_entropy", logits, labels.size());
  const auto b = logits.dim(0), c = logits.dim(1);
  check_labels("cross_entropy", labels, c);
  Array per(b), grads(b * c);
  for (std::int64_t i = 0; i < b; ++i) {
    per[i] = ce_row(logits.values().segment(i * c, c), labels[i], grads.segment(i * c, c));
  }
  return rowwise_loss("cross_entropy", logits, std::move(per), std::move(grads));
}

Tensor kl_distill(const Tensor& student, const Tensor& teacher, double temperature) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("kl_distill: temperature must be positive, got " + std::to_string(temperature));
  }
  if (student.rank() != 2 || student.shape() != teacher.shape()) {
    throw std::invalid_argument("kl_distill: student " + shape_str(student.shape()) + " and teacher " +
                                shape_str(teacher.shape()) + " must be equal [B,C] shapes");
  }
  const auto b = student.dim(0), c = student.dim(1);
  Array per(b), grads(b * c);
  for (std::int64_t i = 0; i < b; ++i) {
    per[i] = kl_row(student.values().segment(i * c, c), teacher.values().segment(i * c, c), temperature,
                    grads.segment(i * c, c));
  }
  return rowwise_loss("kl_distill", student, std::move(per), std::move(grads));
}

Tensor kd_loss(const Tensor& student, const Tensor& teacher, std::span<const int> labels,
               const DistillConfig& cfg) {
  cfg.validate();
  return add(scale(cross_entropy(student, labels), cfg.balance),
             scale(kl_distill(student, teacher, cfg.temperature), 1.0 - cfg.balance));
}

int OracleTargets::correct_count(std::int64_t example) const {
  int n = 0;
  for (std::int64_t j = 0; j < members; ++j) n += member_correct(example, j) ? 1 : 0;
  return n;
}

std::optional<Array> OracleTargets::target(std::int64_t example) const {
  if (!present[static_cast<std::size_t>(example)]) return std::nullopt;
  return Array(targets.segment(example * classes, classes));
}

bool predicts(const double* row, std::int64_t classes, int label) {
  const double mine = row[label];
  for (std::int64_t k = 0; k < classes; ++k) {
    if (k != label && row[k] >= mine) return false;
  }
  return true;
}

OracleTargets oracle_target(const Tensor& member_logits, std::span<const int> labels) {
  if (member_logits.rank() != 3) {
    throw std::invalid_argument("oracle_target: member logits must be [N,B,C], got " +
                                shape_str(member_logits.shape()));
  }
  OracleTargets out;
  out.members = member_logits.dim(0);
  out.batch = member_logits.dim(1);
  out.classes = member_logits.dim(2);
  if (static_cast<std::size_t>(out.batch) != labels.size()) {
    throw std::invalid_argument("oracle_target: " + std::to_string(labels.size()) + " labels for member logits " +
                                shape_str(member_logits.shape()));
  }
  check_labels("oracle_target", labels, out.classes);
  const auto B = out.batch, C = out.classes, N = out.members;
  out.correct.assign(static_cast<std::size_t>(B * N), 0);
  out.present.assign(static_cast<std::size_t>(B), 0);
  out.targets = Array::Zero(B * C);
  const double* v = member_logits.values().data();
  for (std::int64_t i = 0; i < B; ++i) {
    int hits = 0;
    for (std::int64_t j = 0; j < N; ++j) {
      const double* row = v + (j * B + i) * C;
      if (predicts(row, C, labels[i])) {
        out.correct[static_cast<std::size_t>(i * N + j)] = 1;
        out.targets.segment(i * C, C) += Eigen::Map<const Array>(row, C);
        ++hits;
      }
    }
    if (hits > 0) {
      out.present[static_cast<std::size_t>(i)] = 1;
      out.targets.segment(i * C, C) /= static_cast<double>(hits);
    }
  }
  return out;
}

Tensor od_loss(const Tensor& student, const OracleTargets& oracle, std::span<const int> labels,
               const DistillConfig& cfg) {
  cfg.validate();
  check_logits("od_loss", student, labels.size());
  const auto b = student.dim(0), c = student.dim(1);
  if (oracle.batch != b || oracle.classes != c) {
    throw std::invalid_argument("od_loss: oracle targets for batch " + std::to_string(oracle.batch) + "x" +
                                std::to_string(oracle.classes) + " do not match student " +
                                shape_str(student.shape()));
  }
  check_labels("od_loss", labels, c);
  Array per(b), grads(b * c), g_ce(c), g_kl(c);
  for (std::int64_t i = 0; i < b; ++i) {
    const auto z = student.values().segment(i * c, c);
    const double ce = ce_row(z, labels[i], g_ce);
    if (oracle.present[static_cast<std::size_t>(i)]) {
      const double kl = kl_row(z, oracle.targets.segment(i * c, c), cfg.temperature, g_kl);
      per[i] = cfg.balance * ce + (1.0 - cfg.balance) * kl;
      grads.segment(i * c, c) = cfg.balance * g_ce + (1.0 - cfg.balance) * g_kl;
    } else {
      per[i] = ce;
      grads.segment(i * c, c) = g_ce;
    }
  }
  return rowwise_loss("od_loss", student, std::move(per), std::move(grads));
}

Tensor od_loss(const Tensor& student, const Tensor& member_logits, std::span<const int> labels,
               const DistillConfig& cfg) {
  if (member_logits.rank() != 3 || member_logits.dim(1) != student.dim(0) ||
      (student.rank() == 2 && member_logits.dim(2) != student.dim(1))) {
    throw std::invalid_argument("od_loss: member logits " + shape_str(member_logits.shape()) +
                                " incompatible with student " + shape_str(student.shape()));
  }
  return od_loss(student, oracle_target(member_logits, labels), labels, cfg);
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kCE: return "CE";
    case LossKind::kKD: return "KD";
    case LossKind::kOD: return "OD";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& name) {
  if (name == "CE" || name == "ce") return LossKind::kCE;
  if (name == "KD" || name == "kd") return LossKind::kKD;
  if (name == "OD" || name == "od") return LossKind::kOD;
  throw std::invalid_argument("unknown loss '" + name + "' (expected CE, KD or OD)");
}

Tensor mean_over_members(const Tensor& member_logits) {
  if (member_logits.rank() != 3) {
    throw std::invalid_argument("mean_over_members: expected [N,B,C], got " + shape_str(member_logits.shape()));
  }
  const auto n = member_logits.dim(0), bc = member_logits.dim(1) * member_logits.dim(2);
  Array acc = Array::Zero(bc);
  for (std::int64_t j = 0; j < n; ++j) acc += member_logits.values().segment(j * bc, bc);
  acc /= static_cast<double>(n);
  return Tensor({member_logits.dim(1), member_logits.dim(2)}, std::move(acc));
}

Tensor training_loss(LossKind kind, const Tensor& student, const Tensor& member_logits, std::span<const int> labels,
                     const DistillConfig& cfg) {
  switch (kind) {
    case LossKind::kCE: return cross_entropy(student, labels);
    case LossKind::kKD: return kd_loss(student, mean_over_members(member_logits), labels, cfg);
    case LossKind::kOD: return od_loss(student, member_logits, labels, cfg);
  }
  throw std::invalid_argument("training_loss: bad loss kind");
}

}  // namespace kdas
