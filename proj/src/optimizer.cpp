#include "kmax/optimizer.hpp"

#include <cmath>

namespace kmax {

AdamW::AdamW(ParameterSet& params, AdamWOptions options) : params_(params), options_(options) {
  for (const auto& p : params_.entries()) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step(double lr, double grad_scale) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const auto& entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].tensor;
    const auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = t.rank() >= 2 ? lr * options_.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * grad_scale;
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double mh = m[j] / c1, vh = v[j] / c2;
      w[j] -= decay * w[j] + lr * mh / (std::sqrt(vh) + options_.eps);
    }
  }
}

double global_grad_norm(const ParameterSet& params) {
  double total = 0.0;
  for (const auto& p : params.entries())
    for (double g : p.tensor.grad()) total += g * g;
  return std::sqrt(total);
}

double clip_scale(double norm, double max_norm) {
  if (max_norm <= 0.0 || norm <= max_norm) return 1.0;
  return max_norm / norm;
}

double scheduled_lr(std::size_t step, std::size_t total_steps, double warmup_fraction,
                    double base_lr) {
  const auto warmup =
      static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
  if (step >= warmup) return base_lr;
  return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

}  // namespace kmax
