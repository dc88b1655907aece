#include "kdas/supernet.hpp"

#include <cmath>
#include <stdexcept>

#include "kdas/training.hpp"

namespace kdas {

SharedPool make_pool(const BackboneSpec& backbone, const SlotLayout& layout, Rng& init) {
  SharedPool pool;
  pool.backbone = backbone;
  pool.layout = layout;
  pool.store = init_params(pool_param_specs(backbone, layout), init);
  for (const auto& n : pool_norm_specs(backbone, layout)) pool.store.add_norm(n);
  return pool;
}

CandidateView instantiate(const SharedPool& pool, const ArchitectureGenome& genome) {
  CandidateView view;
  view.net = decode(genome, pool.backbone, pool.layout);
  std::vector<std::string> names;
  names.reserve(view.net.params.size());
  for (const auto& p : view.net.params) {
    if (!pool.store.contains(p.name)) {
      throw std::invalid_argument("pool: missing entry '" + p.name + "' for genome " + canonical_genome(genome));
    }
    names.push_back(p.name);
  }
  std::vector<std::string> norms;
  for (const auto& n : view.net.norms) norms.push_back(n.name);
  view.store = pool.store.view(names, norms);
  collect_params(view.net, view.store);  // shape check
  return view;
}

double train_shared_step(SharedPool& pool, const ArchitectureGenome& genome, const Tensor& images,
                         std::span<const int> labels, const Tensor& member_logits, const SharedStepConfig& cfg) {
  CandidateView view = instantiate(pool, genome);
  std::vector<Tensor> params = collect_params(view.net, view.store);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    const Tensor logits = forward(view.net, view.store, images, NormMode::kTrain);
    loss = cfg.loss == LossKind::kCE ? cross_entropy(logits, labels)
                                     : training_loss(cfg.loss, logits, member_logits, labels, cfg.distill);
  }
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw std::runtime_error("shared training diverged: non-finite loss for genome " + canonical_genome(genome));
  }
  const GradientMap grads = backward(tape, loss);
  std::vector<Tensor> g;
  g.reserve(params.size());
  SgdState state(cfg.sgd);
  for (std::size_t i = 0; i < params.size(); ++i) {
    g.push_back(grads.of(params[i]));
    auto it = pool.velocity.find(view.net.params[i].name);
    state.velocity.push_back(it == pool.velocity.end() ? Array::Zero(params[i].size()) : it->second);
  }
  sgd_step(params, g, state);
  for (std::size_t i = 0; i < params.size(); ++i) {
    pool.velocity[view.net.params[i].name] = std::move(state.velocity[i]);
  }
  ++pool.version;
  return value;
}

double batch_reward(const SharedPool& pool, const ArchitectureGenome& genome, const Tensor& images,
                    std::span<const int> labels) {
  if (labels.empty() || images.rank() != 4 || images.dim(0) == 0) {
    throw std::invalid_argument("batch_reward: empty batch");
  }
  CandidateView view = instantiate(pool, genome);
  return accuracy(forward(view.net, view.store, images, NormMode::kBatchStats), labels);
}

double split_reward(const SharedPool& pool, const ArchitectureGenome& genome, const TensorDataset& data,
                    int batch_size) {
  if (data.size() == 0) throw std::invalid_argument("split_reward: empty split");
  CandidateView view = instantiate(pool, genome);
  std::int64_t hits = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    const auto labels = data.batch_labels(idx);
    const double acc = accuracy(forward(view.net, view.store, data.batch(idx), NormMode::kBatchStats), labels);
    hits += std::llround(acc * static_cast<double>(idx.size()));
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

void save_pool(const std::string& path, const SharedPool& pool) { save_checkpoint(path, pool.store.to_named()); }

SharedPool load_pool(const std::string& path, const BackboneSpec& backbone, const SlotLayout& layout) {
  SharedPool pool;
  pool.backbone = backbone;
  pool.layout = layout;
  pool.store = ParamStore::from_named(load_checkpoint(path));
  for (const auto& spec : pool_param_specs(backbone, layout)) {
    if (!pool.store.contains(spec.name)) throw std::runtime_error("pool checkpoint " + path + ": missing '" + spec.name + "'");
    if (pool.store.get(spec.name).shape() != spec.shape) {
      throw std::runtime_error("pool checkpoint " + path + ": shape mismatch for '" + spec.name + "'");
    }
  }
  for (const auto& n : pool_norm_specs(backbone, layout)) {
    if (!pool.store.has_norm(n.name)) throw std::runtime_error("pool checkpoint " + path + ": missing '" + n.name + "'");
  }
  return pool;
}

}  // namespace kdas
