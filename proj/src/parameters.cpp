#include "kmax/parameters.hpp"

#include <cmath>

namespace kmax {

Tensor ParameterSet::add(std::string name, Tensor t) {
  if (find(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
  t.set_requires_grad(true);
  entries_.push_back({std::move(name), t});
  return t;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

const Tensor* ParameterSet::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

Tensor ParameterFactory::normal(const std::string& name, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng_);
  return registry_.add(name, Tensor(std::move(shape), std::move(v)));
}

Tensor ParameterFactory::fan_in(const std::string& name, Shape shape) {
  const std::size_t fan = shape_numel(shape) / shape.back();
  return normal(name, std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan)));
}

Tensor ParameterFactory::constant(const std::string& name, Shape shape, double value) {
  return registry_.add(name, Tensor(std::move(shape), value));
}

}  // namespace kmax
