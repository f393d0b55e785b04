#pragma once

#include <functional>

#include "kmax/tensor.hpp"

namespace kmax {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Compares the reverse-mode gradient of `f` at `x` to central finite
// differences. Returns max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8).
// Throws ContractError if f does not return a single element.
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

}  // namespace kmax
