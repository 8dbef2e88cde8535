// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/parameters.hpp"

#include <algorithm>

#include "taskadapter/errors.hpp"

namespace taskadapter {

Var ParameterStore::add(std::string name, std::string group, Shape shape, std::vector<double> values,
                        bool trainable) {
  if (contains(name)) throw ContractError("duplicate parameter name: " + name);
  Var tensor = Var::leaf(std::move(shape), std::move(values), trainable);
  entries_.push_back({std::move(name), std::move(group), tensor, trainable});
  return tensor;
}

Var ParameterStore::add_normal(std::string name, std::string group, Shape shape, double stddev, Rng& rng,
                               bool trainable) {
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = rng.normal(0.0, stddev);
  return add(std::move(name), std::move(group), std::move(shape), std::move(values), trainable);
}

Var ParameterStore::add_constant(std::string name, std::string group, Shape shape, double value,
                                 bool trainable) {
  std::vector<double> values(shape_size(shape), value);
  return add(std::move(name), std::move(group), std::move(shape), std::move(values), trainable);
}

const ParameterStore::Entry& ParameterStore::find(const std::string& name) const {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
  if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
  return *it;
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

std::size_t ParameterStore::total_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.tensor.size();
  }
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

}  // namespace taskadapter
