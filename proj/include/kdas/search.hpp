// Alternating search loop: shared-weight training epochs interleaved with
// controller updates on validation-batch rewards.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kdas/controller.hpp"
#include "kdas/supernet.hpp"
#include "kdas/training.hpp"

namespace kdas {

struct SearchConfig {
  int epochs = 10;
  /// Controller updates after each shared-weight epoch.
  int controller_steps = 20;
  int reward_batch = 64;
  /// Shared-weight steps per sampled genome; each training batch gets a new sample.
  int steps_per_sample = 1;
  LossKind loss = LossKind::kOD;
  DistillConfig distill;
  /// Shared-weight optimizer; milestones count search epochs.
  Schedule shared;
  ControllerOptions controller;
  int leaderboard_size = 10;
  int convergence_window = 20;
  double convergence_tol = 1e-3;
  /// Hard cap on controller updates; 0 means epochs * controller_steps.
  int max_updates = 0;
  int threads = 1;

  void validate() const;
  int update_cap() const { return max_updates > 0 ? max_updates : epochs * controller_steps; }
};

struct CurvePoint {
  int update = 0;
  int epoch = 0;
  double mean_reward = 0.0;
  double baseline = 0.0;
};

struct SearchResult {
  SharedPool pool;
  ControllerPolicy policy;
  BaselineState baseline;
  std::vector<CurvePoint> curve;
  /// Highest rewards seen, best first.
  std::vector<ScoredGenome> leaderboard;
  bool converged = false;
  int shared_steps = 0;
};

/// True when the last `window` + 1 baseline values span less than `tol`.
bool baseline_converged(const std::vector<CurvePoint>& curve, int window, double tol);

/// Keeps the best reward per genome and the top `size` entries (ties by genome order).
void update_leaderboard(std::vector<ScoredGenome>& board, const ScoredGenome& entry, int size);

/// Full search. `teacher_train` is [N,|train|,C] and may be null for CE.
/// Streams used: "pool", "controller", "order", "sampling", "reward".
SearchResult run_search(const BackboneSpec& backbone, const SlotLayout& layout, const TensorDataset& train,
                        const TensorDataset& val, const Tensor* teacher_train, const SearchConfig& cfg,
                        const SeedStreams& seeds);

/// Controller-only search against fixed rewards; the returned pool holds no entries.
SearchResult run_surrogate_search(const BackboneSpec& backbone, const SlotLayout& layout, const RewardFn& reward,
                                  const SearchConfig& cfg, const SeedStreams& seeds);

/// CSV with header update,epoch,mean_reward,baseline.
std::string reward_curve_csv(const std::vector<CurvePoint>& curve);

}  // namespace kdas
