// SGD with Nesterov momentum and L2 weight decay folded into the gradient.
#pragma once

#include <vector>

#include "kdas/tensor.hpp"

namespace kdas {

struct SgdOptions {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = true;
};

/// Velocity buffers aligned with a fixed parameter list.
struct SgdState {
  SgdOptions options;
  std::vector<Array> velocity;

  explicit SgdState(SgdOptions opt = {}) : options(opt) {}
};

/// One update per parameter:
///   g <- g + wd * p
///   v <- mu * v - lr * g
///   p <- p + mu * v - lr * g      (nesterov)   |   p <- p + v   (classical)
/// Buffers are created lazily on first use. The learning-rate schedule is the caller's.
void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, SgdState& state);

}  // namespace kdas
