#pragma once

#include <vector>

#include "kmax/parameters.hpp"

namespace kmax {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Decoupled weight decay (applied as p -= lr * wd * p) on tensors of rank
// >= 2; biases, norm gains and other vectors are not decayed.
class AdamW {
 public:
  AdamW(ParameterSet& params, AdamWOptions options);

  // One update from the accumulated gradients, each multiplied by
  // grad_scale first (used for norm clipping).
  void step(double lr, double grad_scale = 1.0);
  std::size_t steps() const { return t_; }

 private:
  ParameterSet& params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// L2 norm over every parameter gradient.
double global_grad_norm(const ParameterSet& params);

// Factor that brings `norm` down to max_norm; 1 when max_norm <= 0 or the
// norm is already within bounds.
double clip_scale(double norm, double max_norm);

// Linear warm-up from 0 over round(warmup_fraction * total_steps) steps,
// then constant. `step` is 0-based.
double scheduled_lr(std::size_t step, std::size_t total_steps, double warmup_fraction,
                    double base_lr);

}  // namespace kmax
