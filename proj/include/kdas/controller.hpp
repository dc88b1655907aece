// Autoregressive genome policy (gated recurrent cell + softmax heads) trained
// with REINFORCE against a moving-average reward baseline.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kdas/checkpoint.hpp"
#include "kdas/optim.hpp"
#include "kdas/random.hpp"
#include "kdas/search_space.hpp"

namespace kdas {

struct ControllerOptions {
  int hidden = 64;
  double lr = 3e-3;
  double momentum = 0.9;
  int samples_per_update = 10;
  double entropy_weight = 0.0;
  double baseline_decay = 0.95;
  double init_range = 0.1;
  /// Ops the policy may choose; empty means all seven.
  std::vector<AddOnOp> vocabulary;

  void validate() const;
};

class ControllerPolicy {
 public:
  ControllerPolicy(SlotLayout layout, std::string backbone_id, ControllerOptions options, Rng& init);

  struct Sample {
    ArchitectureGenome genome;
    std::vector<int> decisions;
    double log_prob = 0.0;
  };

  const SlotLayout& layout() const { return layout_; }
  const ControllerOptions& options() const { return options_; }
  const std::string& backbone_id() const { return backbone_id_; }

  /// Stage-major: the stage's op choices, then its skip bits in (a,b) order.
  std::size_t num_decisions() const { return arity_.size(); }
  int arity(std::size_t decision) const { return arity_.at(decision); }
  std::vector<int> decisions_of(const ArchitectureGenome& genome) const;
  ArchitectureGenome genome_of(std::span<const int> decisions) const;

  Sample sample(Rng& rng) const;
  /// Most likely choice at every step.
  ArchitectureGenome argmax() const;
  /// Sum of the chosen log-softmax entries; differentiable w.r.t. params().
  Tensor log_prob(std::span<const int> decisions) const;
  /// Sum of per-step entropies along the decision path; differentiable.
  Tensor path_entropy(std::span<const int> decisions) const;
  double probability(const ArchitectureGenome& genome) const;

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  std::size_t param_size() const;
  Array flat_params() const;
  SgdState& optimizer() { return sgd_; }

  NamedTensors to_named() const;
  /// Replaces parameter values; names and shapes must match.
  void load_named(const NamedTensors& entries);

 private:
  enum Param { kStart, kOpEmbed, kSkipEmbed, kWz, kUz, kBz, kWr, kUr, kBr, kWn, kUn, kBn, kOpW, kOpB, kSkipW, kSkipB };

  Tensor walk(std::span<const int> fixed, Rng* rng, bool greedy, std::vector<int>* chosen, Tensor* entropy) const;

  SlotLayout layout_;
  std::string backbone_id_;
  ControllerOptions options_;
  std::vector<AddOnOp> vocab_;
  std::vector<int> arity_;
  std::vector<std::uint8_t> op_step_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  SgdState sgd_;
};

struct BaselineState {
  double value = 0.0;
  double decay = 0.95;
  bool initialized = false;
};

/// b <- decay * b + (1 - decay) * reward; the first call sets b = reward.
void update_baseline(BaselineState& state, double reward);

struct ScoredGenome {
  ArchitectureGenome genome;
  double reward = 0.0;
};

/// (1/N) sum_j (R_j - b) grad log pi(m_j), plus entropy_weight * grad of the
/// mean path entropy, flattened in params() order.
Array policy_gradient(const ControllerPolicy& policy, std::span<const ScoredGenome> samples, double baseline);

/// Gradient ascent step with the current baseline, then the baseline absorbs
/// each reward in order. An uninitialized baseline starts at the mean reward of
/// the first batch. Throws on an empty sample list or non-finite rewards.
void reinforce_update(ControllerPolicy& policy, std::span<const ScoredGenome> samples, BaselineState& baseline);

using RewardFn = std::function<double(const ArchitectureGenome&)>;

/// Monte-Carlo mean reward of `n` sampled genomes.
double objective_estimate(const ControllerPolicy& policy, const RewardFn& reward, int n, Rng& rng);

}  // namespace kdas
