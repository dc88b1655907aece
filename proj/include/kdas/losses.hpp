// Classification and distillation losses. Every loss takes student logits
// [B,C], reduces by the batch mean and treats teacher logits as constants.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdas/tensor.hpp"

namespace kdas {

struct DistillConfig {
  double temperature = 3.0;
  double balance = 0.0;  // weight of the cross-entropy term

  void validate() const;
};

/// mean_i -log softmax(logits_i)[label_i]
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// mean_i T^2 KL(softmax(teacher_i / T) || softmax(student_i / T))
Tensor kl_distill(const Tensor& student, const Tensor& teacher, double temperature);

/// balance * CE + (1 - balance) * KL-distill
Tensor kd_loss(const Tensor& student, const Tensor& teacher, std::span<const int> labels,
               const DistillConfig& cfg);

/// Per-example oracle statistics of an ensemble over one batch.
struct OracleTargets {
  std::int64_t members = 0;
  std::int64_t batch = 0;
  std::int64_t classes = 0;
  std::vector<std::uint8_t> correct;  // [B][N]: member j predicts example i's label
  std::vector<std::uint8_t> present;  // [B]: at least one member is correct
  Array targets;                      // [B*C]: mean logits of the correct members, zero rows when absent

  bool member_correct(std::int64_t example, std::int64_t member) const {
    return correct[static_cast<std::size_t>(example * members + member)] != 0;
  }
  int correct_count(std::int64_t example) const;
  /// Target logits of one example, or nullopt when no member is correct.
  std::optional<Array> target(std::int64_t example) const;
};

/// True when `label` is the unique maximum of `row`; ties count as wrong.
bool predicts(const double* row, std::int64_t classes, int label);

/// member_logits [N,B,C].
OracleTargets oracle_target(const Tensor& member_logits, std::span<const int> labels);

/// Per example: KD against the correct-member mean when any member is correct,
/// plain cross-entropy otherwise; batch mean of the per-example values.
Tensor od_loss(const Tensor& student, const Tensor& member_logits, std::span<const int> labels,
               const DistillConfig& cfg);
Tensor od_loss(const Tensor& student, const OracleTargets& oracle, std::span<const int> labels,
               const DistillConfig& cfg);

enum class LossKind { kCE, kKD, kOD };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

/// member_logits [N,B,C] (N >= 1). KD distills from the member mean.
Tensor training_loss(LossKind kind, const Tensor& student, const Tensor& member_logits, std::span<const int> labels,
                     const DistillConfig& cfg);

/// Mean over the member axis of [N,B,C] -> [B,C].
Tensor mean_over_members(const Tensor& member_logits);

}  // namespace kdas
