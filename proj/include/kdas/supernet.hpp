// Weight-shared candidate pool: one persistent parameter set per backbone
// layer and per (slot, op) pair, reused by every sampled genome.
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "kdas/data.hpp"
#include "kdas/losses.hpp"
#include "kdas/network.hpp"
#include "kdas/optim.hpp"

namespace kdas {

struct SharedPool {
  BackboneSpec backbone;
  SlotLayout layout;
  ParamStore store;
  std::map<std::string, Array> velocity;  // momentum buffers by entry name
  std::uint64_t version = 0;              // number of applied updates
};

/// Eagerly initializes the backbone and the full slot x op grid.
SharedPool make_pool(const BackboneSpec& backbone, const SlotLayout& layout, Rng& init);

struct CandidateView {
  CandidateNetwork net;
  ParamStore store;  // aliases the pool entries of `net`
};

/// Throws when the genome is invalid or a pool entry is missing.
CandidateView instantiate(const SharedPool& pool, const ArchitectureGenome& genome);

struct SharedStepConfig {
  LossKind loss = LossKind::kOD;
  DistillConfig distill;
  SgdOptions sgd;
};

/// One forward/backward/SGD step of the genome's view on a batch; only the
/// view's entries change. `member_logits` [N,B,C] is ignored for CE.
/// Returns the loss; throws std::runtime_error when it is not finite.
double train_shared_step(SharedPool& pool, const ArchitectureGenome& genome, const Tensor& images,
                         std::span<const int> labels, const Tensor& member_logits, const SharedStepConfig& cfg);

/// Accuracy of the view on one batch, with batch statistics in every norm layer.
double batch_reward(const SharedPool& pool, const ArchitectureGenome& genome, const Tensor& images,
                    std::span<const int> labels);

/// batch_reward accumulated over a whole split in batches of `batch_size`.
double split_reward(const SharedPool& pool, const ArchitectureGenome& genome, const TensorDataset& data,
                    int batch_size = 200);

void save_pool(const std::string& path, const SharedPool& pool);
/// Restores entries and statistics; momentum buffers start empty.
SharedPool load_pool(const std::string& path, const BackboneSpec& backbone, const SlotLayout& layout);

}  // namespace kdas
