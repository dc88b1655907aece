#include "kdas/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kdas {

double grad_check(const ScalarFn& fn, const Tensor& point, double eps) {
  Tensor x = point.clone(true);
  Tape tape;
  Array analytic;
  {
    TapeScope scope(tape);
    Tensor y = fn(x);
    analytic = backward(tape, y).of(x).values();
  }
  double worst = 0.0;
  Array probe = point.values();
  for (Eigen::Index i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = fn(Tensor(point.shape(), probe)).item();
    probe[i] = orig - eps;
    const double down = fn(Tensor(point.shape(), probe)).item();
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (std::isnan(err)) return std::numeric_limits<double>::quiet_NaN();
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace kdas
