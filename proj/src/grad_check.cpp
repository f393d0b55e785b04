#include "kmax/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace kmax {

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  Tensor y = f(probe);
  if (y.numel() != 1) {
    throw ContractError("grad_check: function must return a scalar, got " +
                        shape_to_string(y.shape()));
  }
  y.backward();
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  NoGradGuard no_grad;
  Tensor work = x.detach();
  auto values = work.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = f(work).item();
    values[i] = saved - eps;
    const double down = f(work).item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace kmax
