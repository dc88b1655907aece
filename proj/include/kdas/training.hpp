// Supervised / distillation training of one network with step-decay SGD.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kdas/data.hpp"
#include "kdas/losses.hpp"
#include "kdas/network.hpp"

namespace kdas {

struct Schedule {
  int epochs = 20;
  int batch_size = 64;
  double lr = 0.1;
  /// Decay points in epochs; empty means 50% and 75% of `epochs`.
  std::vector<int> milestones;
  int warmup_iters = 0;
  double warmup_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = true;
  bool augment = false;
  int augment_padding = 2;

  void validate() const;
  std::vector<int> milestone_epochs() const;
  /// lr / 10^(milestones passed), or warmup_lr during the first warmup_iters iterations.
  double lr_at(int epoch, std::int64_t iteration) const;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = -1.0;   // -1 when not evaluated
  double test_acc = -1.0;  // -1 when not evaluated
};

struct TrainOptions {
  LossKind loss = LossKind::kCE;
  DistillConfig distill;
  /// Teacher member logits [N, |train|, C], row-aligned with the training set.
  const Tensor* teacher = nullptr;
  const TensorDataset* val = nullptr;
  const TensorDataset* test = nullptr;
  /// Evaluate the test split every epoch instead of only after the last one.
  bool test_every_epoch = false;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double val_acc = -1.0;
  double test_acc = -1.0;
};

/// Trains the parameters of `net` held in `store` in place. Throws
/// std::runtime_error on a non-finite loss.
TrainResult train_network(const CandidateNetwork& net, ParamStore& store, const TensorDataset& train,
                          const Schedule& schedule, const TrainOptions& options, Rng& rng);

/// Logits [|data|, C] in evaluation mode.
Tensor predict_logits(const CandidateNetwork& net, ParamStore& store, const TensorDataset& data,
                      NormMode mode = NormMode::kRunning, int batch_size = 250);

/// Fraction of rows whose label is the strict argmax.
double accuracy(const Tensor& logits, std::span<const int> labels);

/// Rows `indices` of every member: [N,T,C] -> [N,|indices|,C].
Tensor gather_member_rows(const Tensor& member_logits, std::span<const std::size_t> indices);

/// CSV with header seed,epoch,lr,train_loss,train_acc,val_acc,test_acc.
std::string training_log_csv(const std::vector<EpochLog>& log, std::uint64_t seed);

}  // namespace kdas
