#include "kdas/selection.hpp"

#include <algorithm>
#include <set>

namespace kdas {

bool better_candidate(const CandidateEval& a, const CandidateEval& b) {
  if (a.reward != b.reward) return a.reward > b.reward;
  if (a.params != b.params) return a.params < b.params;
  return a.genome < b.genome;
}

void SelectionReport::validate() const {
  if (winner.params > budget) throw std::invalid_argument("selection report: winner exceeds the budget");
  for (const auto& c : candidates) {
    if (c.params > budget) throw std::invalid_argument("selection report: over-budget candidate listed as feasible");
    if (better_candidate(c, winner)) throw std::invalid_argument("selection report: winner is not the feasible argmax");
  }
  for (const auto& c : rejected) {
    if (c.params <= budget) throw std::invalid_argument("selection report: feasible candidate listed as rejected");
  }
}

namespace {

nlohmann::json eval_json(const CandidateEval& c) {
  nlohmann::json j = {{"genome", genome_to_json(c.genome)}, {"params", c.params}};
  j["reward"] = c.reward < 0.0 ? nlohmann::json(nullptr) : nlohmann::json(c.reward);
  return j;
}

CandidateEval eval_from_json(const nlohmann::json& j) {
  CandidateEval c;
  c.genome = genome_from_json(j.at("genome"));
  c.params = j.at("params").get<std::int64_t>();
  c.reward = j.at("reward").is_null() ? -1.0 : j.at("reward").get<double>();
  return c;
}

}  // namespace

nlohmann::json SelectionReport::to_json() const {
  nlohmann::json cands = nlohmann::json::array(), rej = nlohmann::json::array();
  for (const auto& c : candidates) cands.push_back(eval_json(c));
  for (const auto& c : rejected) rej.push_back(eval_json(c));
  return {{"budget", budget}, {"winner", eval_json(winner)}, {"candidates", cands}, {"rejected", rej}};
}

SelectionReport SelectionReport::from_json(const nlohmann::json& j) {
  SelectionReport r;
  try {
    r.budget = j.at("budget").get<std::int64_t>();
    r.winner = eval_from_json(j.at("winner"));
    for (const auto& c : j.at("candidates")) r.candidates.push_back(eval_from_json(c));
    for (const auto& c : j.at("rejected")) r.rejected.push_back(eval_from_json(c));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("selection report: ") + e.what());
  }
  r.validate();
  return r;
}

SelectionReport select_feasible(std::vector<CandidateEval> candidates, std::int64_t budget) {
  SelectionReport r;
  r.budget = budget;
  for (auto& c : candidates) (c.params <= budget ? r.candidates : r.rejected).push_back(std::move(c));
  if (r.candidates.empty()) {
    throw NoFeasibleModel("no-feasible-model: none of " + std::to_string(r.rejected.size()) +
                          " candidates fits the budget of " + std::to_string(budget) + " parameters");
  }
  r.winner = *std::min_element(r.candidates.begin(), r.candidates.end(), better_candidate);
  return r;
}

std::vector<ArchitectureGenome> candidate_genomes(const ControllerPolicy& policy, int n, Rng& rng,
                                                  std::span<const ArchitectureGenome> extra) {
  if (n < 1) throw std::invalid_argument("selection: n_candidates must be >= 1");
  std::vector<ArchitectureGenome> out;
  std::set<std::string> seen;
  auto push = [&](const ArchitectureGenome& g) {
    if (seen.insert(canonical_genome(g)).second) out.push_back(g);
  };
  for (int i = 0; i < n; ++i) push(policy.sample(rng).genome);
  push(policy.argmax());
  for (const auto& g : extra) push(g);
  return out;
}

SelectionReport select_best(const ControllerPolicy& policy, std::int64_t budget, int n_candidates,
                            const RewardFn& reward, const ParamCountFn& count, Rng& rng,
                            std::span<const ArchitectureGenome> extra) {
  std::vector<CandidateEval> evals;
  for (auto& g : candidate_genomes(policy, n_candidates, rng, extra)) {
    CandidateEval c;
    c.params = count(g);
    if (c.params <= budget) c.reward = reward(g);
    c.genome = std::move(g);
    evals.push_back(std::move(c));
  }
  return select_feasible(std::move(evals), budget);
}

SelectionReport select_best(const SharedPool& pool, const ControllerPolicy& policy, std::int64_t budget,
                            int n_candidates, const TensorDataset& val, Rng& rng,
                            std::span<const ArchitectureGenome> extra) {
  return select_best(
      policy, budget, n_candidates, [&](const ArchitectureGenome& g) { return split_reward(pool, g, val); },
      [&](const ArchitectureGenome& g) { return decode(g, pool.backbone, pool.layout).param_count; }, rng, extra);
}

RetrainResult retrain(const ArchitectureGenome& genome, const BackboneSpec& backbone, const SlotLayout& layout,
                      const TensorDataset& train, const TensorDataset* val, const TensorDataset* test,
                      const Tensor* teacher_train_logits, LossKind loss, const DistillConfig& distill,
                      const Schedule& schedule, std::uint64_t seed) {
  const SeedStreams streams(seed);
  RetrainResult out;
  out.net = decode(genome, backbone, layout);
  Rng init = streams.stream("init");
  out.params = init_params(out.net, init);
  TrainOptions opt;
  opt.loss = loss;
  opt.distill = distill;
  opt.teacher = teacher_train_logits;
  opt.val = val;
  opt.test = test;
  Rng order = streams.stream("order");
  out.result = train_network(out.net, out.params, train, schedule, opt, order);
  return out;
}

}  // namespace kdas
