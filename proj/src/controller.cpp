#include "kdas/controller.hpp"

#include <cmath>
#include <stdexcept>

#include "kdas/ops.hpp"

namespace kdas {

void ControllerOptions::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("controller." + field + ": " + msg);
  };
  if (hidden < 1) fail("hidden", "must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr", "must be finite and >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must be in [0, 1)");
  if (samples_per_update < 1) fail("samples_per_update", "must be >= 1");
  if (!(entropy_weight >= 0.0)) fail("entropy_weight", "must be >= 0");
  if (!(baseline_decay >= 0.0 && baseline_decay <= 1.0)) fail("baseline_decay", "must be in [0, 1]");
  if (!(init_range >= 0.0)) fail("init_range", "must be >= 0");
  for (std::size_t i = 0; i < vocabulary.size(); ++i) {
    add_on_op_from_int(static_cast<int>(vocabulary[i]));
    for (std::size_t j = 0; j < i; ++j) {
      if (vocabulary[i] == vocabulary[j]) fail("vocabulary", "duplicate op " + to_string(vocabulary[i]));
    }
  }
}

ControllerPolicy::ControllerPolicy(SlotLayout layout, std::string backbone_id, ControllerOptions options, Rng& init)
    : layout_(std::move(layout)),
      backbone_id_(std::move(backbone_id)),
      options_(std::move(options)),
      sgd_(SgdOptions{options_.lr, options_.momentum, 0.0, false}) {
  options_.validate();
  vocab_ = options_.vocabulary;
  if (vocab_.empty()) {
    for (int k = 0; k < kNumAddOnOps; ++k) vocab_.push_back(static_cast<AddOnOp>(k));
  }
  for (int slots : layout_.slots_per_stage) {
    for (int i = 0; i < slots; ++i) {
      arity_.push_back(static_cast<int>(vocab_.size()));
      op_step_.push_back(1);
    }
    for (int i = 0; i < skip_pairs(slots); ++i) {
      arity_.push_back(2);
      op_step_.push_back(0);
    }
  }
  const std::int64_t h = options_.hidden;
  const auto v = static_cast<std::int64_t>(vocab_.size());
  auto rand = [&](std::string name, Shape shape) {
    Array a(numel(shape));
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = uniform(init, -options_.init_range, options_.init_range);
    names_.push_back(std::move(name));
    params_.emplace_back(std::move(shape), std::move(a), true);
  };
  auto zero = [&](std::string name, Shape shape) {
    names_.push_back(std::move(name));
    params_.push_back(Tensor::zeros(std::move(shape), true));
  };
  rand("start", {1, h});
  rand("op_embed", {v, h});
  rand("skip_embed", {2, h});
  for (const char* gate : {"z", "r", "n"}) {
    rand(std::string("gru.w") + gate, {h, h});
    rand(std::string("gru.u") + gate, {h, h});
    zero(std::string("gru.b") + gate, {h});
  }
  zero("op_head.weight", {v, h});
  zero("op_head.bias", {v});
  zero("skip_head.weight", {2, h});
  zero("skip_head.bias", {2});
}

std::vector<int> ControllerPolicy::decisions_of(const ArchitectureGenome& genome) const {
  genome.validate(layout_);
  std::vector<int> out;
  for (const auto& s : genome.stages) {
    for (auto op : s.ops) {
      int k = 0;
      while (k < static_cast<int>(vocab_.size()) && vocab_[static_cast<std::size_t>(k)] != op) ++k;
      if (k == static_cast<int>(vocab_.size())) {
        throw std::invalid_argument("controller: op " + to_string(op) + " is outside the policy vocabulary");
      }
      out.push_back(k);
    }
    for (auto bit : s.skips) out.push_back(bit);
  }
  return out;
}

ArchitectureGenome ControllerPolicy::genome_of(std::span<const int> decisions) const {
  if (decisions.size() != arity_.size()) {
    throw std::invalid_argument("controller: " + std::to_string(decisions.size()) + " decisions, layout needs " +
                                std::to_string(arity_.size()));
  }
  ArchitectureGenome g;
  g.backbone_id = backbone_id_;
  std::size_t d = 0;
  for (int slots : layout_.slots_per_stage) {
    StageGenome sg;
    for (int i = 0; i < slots; ++i, ++d) {
      if (decisions[d] < 0 || decisions[d] >= arity_[d]) throw std::invalid_argument("controller: decision out of range");
      sg.ops.push_back(vocab_[static_cast<std::size_t>(decisions[d])]);
    }
    for (int i = 0; i < skip_pairs(slots); ++i, ++d) {
      if (decisions[d] < 0 || decisions[d] > 1) throw std::invalid_argument("controller: decision out of range");
      sg.skips.push_back(static_cast<std::uint8_t>(decisions[d]));
    }
    g.stages.push_back(std::move(sg));
  }
  return g;
}

Tensor ControllerPolicy::walk(std::span<const int> fixed, Rng* rng, bool greedy, std::vector<int>* chosen,
                              Tensor* entropy) const {
  const auto& p = params_;
  Tensor h = Tensor::zeros({1, options_.hidden});
  Tensor x = p[kStart];
  Tensor total = Tensor::scalar(0.0);
  Tensor ent = Tensor::scalar(0.0);
  for (std::size_t d = 0; d < arity_.size(); ++d) {
    const Tensor z = sigmoid(add(linear(x, p[kWz], p[kBz]), linear(h, p[kUz])));
    const Tensor r = sigmoid(add(linear(x, p[kWr], p[kBr]), linear(h, p[kUr])));
    const Tensor n = tanh(add(linear(x, p[kWn], p[kBn]), mul(r, linear(h, p[kUn]))));
    h = add(mul(add_scalar(scale(z, -1.0), 1.0), n), mul(z, h));
    const bool op_step = op_step_[d] != 0;
    const Tensor logits = op_step ? linear(h, p[kOpW], p[kOpB]) : linear(h, p[kSkipW], p[kSkipB]);
    const Tensor lp = log_softmax(logits);
    int choice;
    if (!fixed.empty()) {
      choice = fixed[d];
      if (choice < 0 || choice >= arity_[d]) throw std::invalid_argument("controller: decision out of range");
    } else if (greedy) {
      choice = 0;
      for (int k = 1; k < arity_[d]; ++k)
        if (lp[k] > lp[choice]) choice = k;
    } else {
      const double u = uniform(*rng, 0.0, 1.0);
      double acc = 0.0;
      choice = arity_[d] - 1;
      for (int k = 0; k < arity_[d]; ++k) {
        acc += std::exp(lp[k]);
        if (u < acc) {
          choice = k;
          break;
        }
      }
    }
    if (chosen != nullptr) chosen->push_back(choice);
    total = add(total, pick(lp, choice));
    if (entropy != nullptr) ent = sub(ent, sum(mul(softmax(logits), lp)));
    x = row(op_step ? p[kOpEmbed] : p[kSkipEmbed], choice);
  }
  if (entropy != nullptr) *entropy = ent;
  return total;
}

ControllerPolicy::Sample ControllerPolicy::sample(Rng& rng) const {
  Sample out;
  out.log_prob = walk({}, &rng, false, &out.decisions, nullptr).item();
  out.genome = genome_of(out.decisions);
  return out;
}

ArchitectureGenome ControllerPolicy::argmax() const {
  std::vector<int> chosen;
  walk({}, nullptr, true, &chosen, nullptr);
  return genome_of(chosen);
}

Tensor ControllerPolicy::log_prob(std::span<const int> decisions) const {
  if (decisions.size() != arity_.size()) {
    throw std::invalid_argument("controller: " + std::to_string(decisions.size()) + " decisions, layout needs " +
                                std::to_string(arity_.size()));
  }
  if (decisions.empty()) return Tensor::scalar(0.0);
  return walk(decisions, nullptr, false, nullptr, nullptr);
}

Tensor ControllerPolicy::path_entropy(std::span<const int> decisions) const {
  if (decisions.empty()) return Tensor::scalar(0.0);
  Tensor ent;
  walk(decisions, nullptr, false, nullptr, &ent);
  return ent;
}

double ControllerPolicy::probability(const ArchitectureGenome& genome) const {
  const auto d = decisions_of(genome);
  return std::exp(log_prob(d).item());
}

std::size_t ControllerPolicy::param_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
  return n;
}

Array ControllerPolicy::flat_params() const {
  Array out(static_cast<Eigen::Index>(param_size()));
  Eigen::Index at = 0;
  for (const auto& p : params_) {
    out.segment(at, p.size()) = p.values();
    at += p.size();
  }
  return out;
}

NamedTensors ControllerPolicy::to_named() const {
  NamedTensors out;
  for (std::size_t i = 0; i < params_.size(); ++i) out.emplace_back(names_[i], params_[i]);
  return out;
}

void ControllerPolicy::load_named(const NamedTensors& entries) {
  if (entries.size() != params_.size()) {
    throw std::invalid_argument("controller checkpoint: " + std::to_string(entries.size()) + " entries, expected " +
                                std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, t] = entries[i];
    if (name != names_[i] || t.shape() != params_[i].shape()) {
      throw std::invalid_argument("controller checkpoint: entry '" + name + "' " + shape_str(t.shape()) +
                                  " does not match '" + names_[i] + "' " + shape_str(params_[i].shape()));
    }
    params_[i].mutable_values() = t.values();
  }
  sgd_.velocity.clear();
}

void update_baseline(BaselineState& state, double reward) {
  if (!state.initialized) {
    state.value = reward;
    state.initialized = true;
  } else {
    state.value = state.decay * state.value + (1.0 - state.decay) * reward;
  }
}

Array policy_gradient(const ControllerPolicy& policy, std::span<const ScoredGenome> samples, double baseline) {
  if (samples.empty()) throw std::invalid_argument("policy_gradient: empty sample list");
  const double w = policy.options().entropy_weight;
  Tape tape;
  Tensor objective = Tensor::scalar(0.0);
  {
    TapeScope scope(tape);
    for (const auto& s : samples) {
      if (!std::isfinite(s.reward)) throw std::invalid_argument("policy_gradient: non-finite reward");
      const auto d = policy.decisions_of(s.genome);
      objective = add(objective, scale(policy.log_prob(d), s.reward - baseline));
      if (w > 0.0) objective = add(objective, scale(policy.path_entropy(d), w));
    }
    objective = scale(objective, 1.0 / static_cast<double>(samples.size()));
  }
  Array out = Array::Zero(static_cast<Eigen::Index>(policy.param_size()));
  if (tape.size() == 0) return out;
  const GradientMap grads = backward(tape, objective);
  Eigen::Index at = 0;
  for (const auto& p : policy.params()) {
    out.segment(at, p.size()) = grads.of(p).values();
    at += p.size();
  }
  return out;
}

void reinforce_update(ControllerPolicy& policy, std::span<const ScoredGenome> samples, BaselineState& baseline) {
  if (samples.empty()) throw std::invalid_argument("reinforce_update: empty sample list");
  if (!baseline.initialized) {
    double mean = 0.0;
    for (const auto& s : samples) mean += s.reward;
    baseline.value = mean / static_cast<double>(samples.size());
    baseline.initialized = true;
  }
  const Array g = policy_gradient(policy, samples, baseline.value);
  std::vector<Tensor> grads;
  Eigen::Index at = 0;
  for (const auto& p : policy.params()) {
    grads.emplace_back(p.shape(), Array(-g.segment(at, p.size())));  // ascent
    at += p.size();
  }
  sgd_step(policy.params(), grads, policy.optimizer());
  for (const auto& s : samples) update_baseline(baseline, s.reward);
}

double objective_estimate(const ControllerPolicy& policy, const RewardFn& reward, int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("objective_estimate: n_samples must be >= 1");
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += reward(policy.sample(rng).genome);
  return total / n;
}

}  // namespace kdas
