#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "kmax/tensor.hpp"

namespace kmax {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Ordered registry of trainable tensors. Handles alias the model's tensors,
// so optimizer updates through the registry are visible to the model.
class ParameterSet {
 public:
  // Registers `t` (marked trainable) under a unique name and returns it.
  Tensor add(std::string name, Tensor t);
  const std::vector<NamedParameter>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  // Total number of scalar parameters.
  std::size_t scalar_count() const;
  const Tensor* find(const std::string& name) const;
  void zero_grad();

 private:
  std::vector<NamedParameter> entries_;
};

// Seeded parameter factory that registers what it creates.
class ParameterFactory {
 public:
  ParameterFactory(ParameterSet& registry, std::uint64_t seed) : registry_(registry), rng_(seed) {}

  Tensor normal(const std::string& name, Shape shape, double stddev);
  // N(0, 1/fan_in) weights where fan_in is the product of all but the last dim.
  Tensor fan_in(const std::string& name, Shape shape);
  Tensor constant(const std::string& name, Shape shape, double value);

 private:
  ParameterSet& registry_;
  std::mt19937_64 rng_;
};

}  // namespace kmax
