#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kdas/tensor.hpp"

namespace kdas {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// NaN anywhere yields NaN.
double grad_check(const ScalarFn& fn, const Tensor& point, double eps = 1e-5);

struct GradCase {
  std::string name;
  ScalarFn fn;
  Tensor at;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;
  double seconds = 0.0;

  bool passed() const;
  /// CSV with header check,max_rel_error,passed.
  std::string to_csv() const;
};

/// Every differentiable op, the losses at several temperatures and balances, and a
/// small conv-BN-ReLU-pool-dense-CE network, on random inputs drawn from `seed`.
std::vector<GradCase> standard_grad_cases(std::uint64_t seed = 8);

GradCheckReport run_grad_checks(const std::vector<GradCase>& cases, double tolerance = 1e-4, double eps = 1e-5);

}  // namespace kdas
