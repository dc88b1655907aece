// Parameter storage and the forward pass of decoded candidate networks.
#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kdas/checkpoint.hpp"
#include "kdas/ops.hpp"
#include "kdas/random.hpp"
#include "kdas/search_space.hpp"

namespace kdas {

/// Named trainable tensors plus batch-norm running statistics. Copies alias
/// both (tensors and statistics are shared handles); clone() is deep.
class ParamStore {
 public:
  /// Initializes `spec` (He-uniform bound sqrt(6/fan_in), zeros or ones) unless present.
  void add(const ParamSpec& spec, Rng& rng);
  void insert(const std::string& name, Tensor value);
  /// Registers running statistics without affine parameters unless present.
  void add_norm(const NormSpec& spec);
  bool has_norm(const std::string& prefix) const { return norms_.count(prefix) != 0; }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  BatchNormState& norm(const std::string& prefix);
  const BatchNormState& norm(const std::string& prefix) const;

  std::size_t size() const { return params_.size(); }
  const std::map<std::string, Tensor>& params() const { return params_; }

  /// Parameters in name order, then "<bn>.running_mean" / "<bn>.running_var".
  NamedTensors to_named() const;
  static ParamStore from_named(const NamedTensors& entries);
  /// Deep copy: no tensor is shared with the source.
  ParamStore clone() const;
  /// Aliasing view over the entries `names` (and their batch-norm states)
  /// plus the parameter-free normalizers `norms`.
  ParamStore view(const std::vector<std::string>& names, const std::vector<std::string>& norms = {}) const;

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, std::shared_ptr<BatchNormState>> norms_;
};

ParamStore init_params(const std::vector<ParamSpec>& specs, Rng& rng);
/// Parameters and parameter-free normalizers of `net`.
ParamStore init_params(const CandidateNetwork& net, Rng& rng);

/// Trainable tensors of `net` in `net.params` order. Throws when one is missing.
std::vector<Tensor> collect_params(const CandidateNetwork& net, const ParamStore& store);

/// images [B,C,H,W] -> logits [B,classes].
Tensor forward(const CandidateNetwork& net, ParamStore& store, const Tensor& images, NormMode mode);

}  // namespace kdas
