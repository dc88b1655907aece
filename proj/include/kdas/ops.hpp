// Differentiable ops over kdas::Tensor. All ops validate shapes and throw
// std::invalid_argument naming the op and the offending shapes.
#pragma once

#include "kdas/tensor.hpp"

namespace kdas {

// Elementwise and reductions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor identity(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

/// x [B,D], w [O,D], b [O] (optional) -> x w^T + b, shape [B,O].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});
/// Row `index` of a [N,D] table as [1,D].
Tensor row(const Tensor& table, std::int64_t index);
/// Element `index` (flat) of x as a scalar.
Tensor pick(const Tensor& x, std::int64_t index);

/// Row-wise softmax / log-softmax over the last axis of a [B,C] tensor (log-sum-exp stabilized).
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;  // 1, or equal to the channel count (depthwise)
};

/// x [B,C,H,W], w [O,C/groups,K,K], b [O] (optional).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b = {}, Conv2dOptions opt = {});

struct Pool2dOptions {
  int kernel = 3;
  int stride = 1;
  int padding = 1;
};

/// Padded cells never win the max.
Tensor max_pool2d(const Tensor& x, Pool2dOptions opt = {});
/// Padded cells are excluded from the divisor.
Tensor avg_pool2d(const Tensor& x, Pool2dOptions opt = {});
/// [B,C,H,W] -> [B,C].
Tensor global_avg_pool(const Tensor& x);
/// Parameter-free residual shortcut for a downsampling block: spatial
/// subsample by `stride`, then zero-pad channels symmetrically to `out_channels`.
Tensor shortcut_pad(const Tensor& x, int stride, std::int64_t out_channels);

struct BatchNormState {
  Array running_mean;
  Array running_var;

  static BatchNormState fresh(std::int64_t channels) {
    return {Array::Zero(channels), Array::Ones(channels)};
  }
};

enum class NormMode {
  kTrain,       // batch statistics, running statistics updated
  kBatchStats,  // batch statistics, running statistics untouched
  kRunning,     // running statistics (inference)
};

struct BatchNormOptions {
  NormMode mode = NormMode::kTrain;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization over axis 1 of [B,C] or [B,C,H,W].
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  BatchNormOptions opt = {});

}  // namespace kdas
