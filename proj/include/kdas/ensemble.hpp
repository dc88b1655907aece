// Ensemble teachers: independently seeded members, cached logits and the
// oracle / average statistics of the ensemble.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kdas/training.hpp"

namespace kdas {

struct EnsembleTeacher {
  BackboneSpec arch;
  std::vector<std::uint64_t> seeds;
  std::vector<ParamStore> members;
  std::vector<TrainResult> logs;
  // Member logits [N, |split|, C], computed with running batch-norm statistics.
  Tensor train_logits;
  Tensor val_logits;
  Tensor test_logits;

  std::size_t size() const { return members.size(); }
};

/// One member with initialization and data order drawn from `seed`.
ParamStore train_member(const BackboneSpec& arch, const TensorDataset& train, const TensorDataset* val,
                        const Schedule& schedule, std::uint64_t seed, TrainResult* log = nullptr);

/// Trains members for `seeds` on up to `threads` threads. Results do not
/// depend on the thread count.
EnsembleTeacher train_ensemble(const BackboneSpec& arch, const TensorDataset& train, const TensorDataset& val,
                               const TensorDataset& test, const Schedule& schedule,
                               const std::vector<std::uint64_t>& seeds, int threads = 1);

/// Member seeds derived from a root seed.
std::vector<std::uint64_t> member_seeds(std::uint64_t root, std::size_t n);

/// [N, |data|, C] logits of every member.
Tensor member_logits(const BackboneSpec& arch, std::vector<ParamStore>& members, const TensorDataset& data);

Tensor average_logits(const Tensor& member_logits);
double member_accuracy(const Tensor& member_logits, std::size_t member, std::span<const int> labels);
/// Fraction of examples that at least one member classifies correctly.
double oracle_accuracy(const Tensor& member_logits, std::span<const int> labels);
/// Accuracy of the argmax of the averaged logits.
double ensemble_accuracy(const Tensor& member_logits, std::span<const int> labels);

struct CorrectnessHistogram {
  std::vector<std::int64_t> counts;  // counts[k]: examples solved by exactly k members

  std::int64_t total() const;
  std::vector<double> percentages() const;
};

CorrectnessHistogram correctness_histogram(const Tensor& member_logits, std::span<const int> labels);

/// Writes member_<k>.odtw, logits.odtw and manifest.json into `dir`;
/// returns the manifest path.
std::string save_ensemble(const std::string& dir, const EnsembleTeacher& teacher, const std::string& dataset_hash);

struct LoadedEnsemble {
  EnsembleTeacher teacher;
  std::string dataset_hash;
};

/// Reads a manifest written by save_ensemble, including member checkpoints and the logit cache.
LoadedEnsemble load_ensemble(const std::string& manifest_path);

}  // namespace kdas
