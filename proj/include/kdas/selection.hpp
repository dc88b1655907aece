// Memory-constrained choice of the final genome and its from-scratch retraining.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "kdas/controller.hpp"
#include "kdas/supernet.hpp"
#include "kdas/training.hpp"

namespace kdas {

struct CandidateEval {
  ArchitectureGenome genome;
  double reward = -1.0;  // -1 for over-budget candidates, which are not evaluated
  std::int64_t params = 0;
};

struct SelectionReport {
  std::int64_t budget = 0;
  std::vector<CandidateEval> candidates;  // feasible, evaluated
  std::vector<CandidateEval> rejected;    // over budget
  CandidateEval winner;

  /// Throws when the winner is over budget or beaten by a feasible candidate.
  void validate() const;
  nlohmann::json to_json() const;
  static SelectionReport from_json(const nlohmann::json& j);
};

class NoFeasibleModel : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// True when `a` ranks above `b`: higher reward, then fewer parameters, then genome order.
bool better_candidate(const CandidateEval& a, const CandidateEval& b);

/// Feasible argmax under `budget`. Over-budget entries move to `rejected`.
/// Throws NoFeasibleModel when nothing fits.
SelectionReport select_feasible(std::vector<CandidateEval> candidates, std::int64_t budget);

/// `n` sampled genomes plus the policy's argmax plus `extra`, duplicates removed
/// (first occurrence kept).
std::vector<ArchitectureGenome> candidate_genomes(const ControllerPolicy& policy, int n, Rng& rng,
                                                  std::span<const ArchitectureGenome> extra = {});

using ParamCountFn = std::function<std::int64_t(const ArchitectureGenome&)>;

/// Evaluates the feasible candidates with `reward` and returns the feasible argmax.
SelectionReport select_best(const ControllerPolicy& policy, std::int64_t budget, int n_candidates,
                            const RewardFn& reward, const ParamCountFn& count, Rng& rng,
                            std::span<const ArchitectureGenome> extra = {});

/// Rewards are shared-weight accuracies on the whole validation split.
SelectionReport select_best(const SharedPool& pool, const ControllerPolicy& policy, std::int64_t budget,
                            int n_candidates, const TensorDataset& val, Rng& rng,
                            std::span<const ArchitectureGenome> extra = {});

struct RetrainResult {
  CandidateNetwork net;
  ParamStore params;
  TrainResult result;
};

/// Fresh initialization from `seed` (no pool weights), then the full schedule.
RetrainResult retrain(const ArchitectureGenome& genome, const BackboneSpec& backbone, const SlotLayout& layout,
                      const TensorDataset& train, const TensorDataset* val, const TensorDataset* test,
                      const Tensor* teacher_train_logits, LossKind loss, const DistillConfig& distill,
                      const Schedule& schedule, std::uint64_t seed);

}  // namespace kdas
