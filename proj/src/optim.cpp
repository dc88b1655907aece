#include "kdas/optim.hpp"

#include <stdexcept>

namespace kdas {

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, SgdState& state) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("sgd_step: " + std::to_string(params.size()) + " params but " +
                                std::to_string(grads.size()) + " grads");
  }
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.push_back(Array::Zero(p.size()));
  }
  if (state.velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_step: optimizer state tracks " + std::to_string(state.velocity.size()) +
                                " params, got " + std::to_string(params.size()));
  }
  const auto& opt = state.options;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || state.velocity[i].size() != params[i].size()) {
      throw std::invalid_argument("sgd_step: shape mismatch for param " + std::to_string(i) + ": param " +
                                  shape_str(params[i].shape()) + ", grad " + shape_str(grads[i].shape()) +
                                  ", velocity size " + std::to_string(state.velocity[i].size()));
    }
    Array& p = params[i].mutable_values();
    Array& v = state.velocity[i];
    const Array g = grads[i].values() + opt.weight_decay * p;
    v = opt.momentum * v - opt.learning_rate * g;
    if (opt.nesterov) {
      p += opt.momentum * v - opt.learning_rate * g;
    } else {
      p += v;
    }
  }
}

}  // namespace kdas
