#include "kdas/search.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace kdas {

void SearchConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("search." + field + ": " + msg);
  };
  if (epochs < 0) fail("epochs", "must be >= 0");
  if (controller_steps < 0) fail("controller_steps", "must be >= 0");
  if (reward_batch < 1) fail("reward_batch", "must be >= 1");
  if (steps_per_sample < 1) fail("steps_per_sample", "must be >= 1");
  if (leaderboard_size < 0) fail("leaderboard_size", "must be >= 0");
  if (convergence_window < 1) fail("convergence_window", "must be >= 1");
  if (!(convergence_tol >= 0.0)) fail("convergence_tol", "must be >= 0");
  if (max_updates < 0) fail("max_updates", "must be >= 0");
  if (threads < 1) fail("threads", "must be >= 1");
  distill.validate();
  shared.validate();
  controller.validate();
}

bool baseline_converged(const std::vector<CurvePoint>& curve, int window, double tol) {
  const auto w = static_cast<std::size_t>(window);
  if (curve.size() <= w) return false;
  double lo = curve.back().baseline, hi = lo;
  for (std::size_t i = curve.size() - w - 1; i < curve.size(); ++i) {
    lo = std::min(lo, curve[i].baseline);
    hi = std::max(hi, curve[i].baseline);
  }
  return hi - lo < tol;
}

void update_leaderboard(std::vector<ScoredGenome>& board, const ScoredGenome& entry, int size) {
  auto it = std::find_if(board.begin(), board.end(), [&](const ScoredGenome& s) { return s.genome == entry.genome; });
  if (it == board.end()) {
    board.push_back(entry);
  } else {
    it->reward = std::max(it->reward, entry.reward);
  }
  std::sort(board.begin(), board.end(), [](const ScoredGenome& a, const ScoredGenome& b) {
    if (a.reward != b.reward) return a.reward > b.reward;
    return a.genome < b.genome;
  });
  if (board.size() > static_cast<std::size_t>(size)) board.resize(static_cast<std::size_t>(size));
}

namespace {

std::vector<double> evaluate_rewards(const std::vector<ArchitectureGenome>& genomes, const RewardFn& reward,
                                     int threads) {
  std::vector<double> out(genomes.size());
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), genomes.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < genomes.size(); ++i) out[i] = reward(genomes[i]);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < genomes.size(); i = next++) out[i] = reward(genomes[i]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

void controller_update(SearchResult& r, const RewardFn& reward, const SearchConfig& cfg, int epoch, Rng& sampling) {
  std::vector<ArchitectureGenome> genomes;
  for (int j = 0; j < cfg.controller.samples_per_update; ++j) genomes.push_back(r.policy.sample(sampling).genome);
  const auto rewards = evaluate_rewards(genomes, reward, cfg.threads);
  std::vector<ScoredGenome> scored;
  double mean = 0.0;
  for (std::size_t j = 0; j < genomes.size(); ++j) {
    scored.push_back({genomes[j], rewards[j]});
    mean += rewards[j];
    update_leaderboard(r.leaderboard, scored.back(), cfg.leaderboard_size);
  }
  reinforce_update(r.policy, scored, r.baseline);
  r.curve.push_back({static_cast<int>(r.curve.size()), epoch, mean / static_cast<double>(genomes.size()),
                     r.baseline.value});
  r.converged = baseline_converged(r.curve, cfg.convergence_window, cfg.convergence_tol);
}

SearchResult start(const BackboneSpec& backbone, const SlotLayout& layout, const SearchConfig& cfg,
                   const SeedStreams& seeds, bool with_pool) {
  cfg.validate();
  SharedPool pool;
  pool.backbone = backbone;
  pool.layout = layout;
  if (with_pool) {
    Rng pool_init = seeds.stream("pool");
    pool = make_pool(backbone, layout, pool_init);
  }
  Rng ctrl_init = seeds.stream("controller");
  SearchResult r{std::move(pool), ControllerPolicy(layout, backbone.id, cfg.controller, ctrl_init), BaselineState{},
                 {}, {}, false, 0};
  r.baseline.decay = cfg.controller.baseline_decay;
  return r;
}

}  // namespace

SearchResult run_search(const BackboneSpec& backbone, const SlotLayout& layout, const TensorDataset& train,
                        const TensorDataset& val, const Tensor* teacher_train, const SearchConfig& cfg,
                        const SeedStreams& seeds) {
  if (cfg.loss != LossKind::kCE && teacher_train == nullptr) {
    throw std::invalid_argument("search: loss " + to_string(cfg.loss) + " needs teacher logits");
  }
  if (val.size() == 0) throw std::invalid_argument("search: empty validation split");
  SearchResult r = start(backbone, layout, cfg, seeds, true);
  Rng order = seeds.stream("order");
  Rng sampling = seeds.stream("sampling");
  Rng reward_rng = seeds.stream("reward");

  SharedStepConfig step;
  step.loss = cfg.loss;
  step.distill = cfg.distill;
  step.sgd = SgdOptions{cfg.shared.lr, cfg.shared.momentum, cfg.shared.weight_decay, cfg.shared.nesterov};
  const auto bs = static_cast<std::size_t>(cfg.shared.batch_size);
  const auto reward_bs = std::min(static_cast<std::size_t>(cfg.reward_batch), val.size());
  const Tensor no_teacher;
  std::int64_t iteration = 0;
  const int cap = cfg.update_cap();

  for (int epoch = 0; epoch < cfg.epochs && !r.converged && static_cast<int>(r.curve.size()) < cap; ++epoch) {
    const auto perm = permutation(train.size(), order);
    for (std::size_t s = 0; s < perm.size(); s += bs) {
      const std::size_t end = std::min(perm.size(), s + bs);
      if (end - s < 2) break;
      const std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(s),
                                         perm.begin() + static_cast<std::ptrdiff_t>(end));
      Tensor images = train.batch(idx);
      if (cfg.shared.augment) images = augment(images, cfg.shared.augment_padding, order);
      const auto labels = train.batch_labels(idx);
      const Tensor teacher = cfg.loss == LossKind::kCE ? no_teacher : gather_member_rows(*teacher_train, idx);
      const ArchitectureGenome g = r.policy.sample(sampling).genome;
      for (int k = 0; k < cfg.steps_per_sample; ++k) {
        step.sgd.learning_rate = cfg.shared.lr_at(epoch, iteration++);
        train_shared_step(r.pool, g, images, labels, teacher, step);
        ++r.shared_steps;
      }
    }
    for (int t = 0; t < cfg.controller_steps && !r.converged && static_cast<int>(r.curve.size()) < cap; ++t) {
      auto pick = permutation(val.size(), reward_rng);
      pick.resize(reward_bs);
      const Tensor images = val.batch(pick);
      const auto labels = val.batch_labels(pick);
      const RewardFn reward = [&](const ArchitectureGenome& g) { return batch_reward(r.pool, g, images, labels); };
      controller_update(r, reward, cfg, epoch, sampling);
    }
  }
  return r;
}

SearchResult run_surrogate_search(const BackboneSpec& backbone, const SlotLayout& layout, const RewardFn& reward,
                                  const SearchConfig& cfg, const SeedStreams& seeds) {
  SearchResult r = start(backbone, layout, cfg, seeds, false);
  Rng sampling = seeds.stream("sampling");
  const int cap = cfg.update_cap();
  while (!r.converged && static_cast<int>(r.curve.size()) < cap) {
    const int epoch = cfg.controller_steps > 0 ? static_cast<int>(r.curve.size()) / cfg.controller_steps : 0;
    controller_update(r, reward, cfg, epoch, sampling);
  }
  return r;
}

std::string reward_curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "update,epoch,mean_reward,baseline\n";
  for (const auto& p : curve) os << p.update << ',' << p.epoch << ',' << p.mean_reward << ',' << p.baseline << '\n';
  return os.str();
}

}  // namespace kdas
