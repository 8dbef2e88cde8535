// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "taskadapter/autograd.hpp"
#include "taskadapter/rng.hpp"

namespace taskadapter {

/// Named model tensors. Registration order is the canonical order used by
/// checkpoints, parameter reports, and the optimizer.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    std::string group;  // e.g. "visual.adapter.temporal", "text.backbone"
    Var tensor;
    bool trainable = false;
  };

  /// Registers a tensor; trainable tensors track gradients.
  Var add(std::string name, std::string group, Shape shape, std::vector<double> values, bool trainable);
  Var add_normal(std::string name, std::string group, Shape shape, double stddev, Rng& rng, bool trainable);
  Var add_constant(std::string name, std::string group, Shape shape, double value, bool trainable);

  const std::vector<Entry>& entries() const { return entries_; }
  const Entry& find(const std::string& name) const;
  Var get(const std::string& name) const { return find(name).tensor; }
  bool contains(const std::string& name) const;

  std::size_t total_count() const;
  std::size_t trainable_count() const;
  void zero_grads();

 private:
  std::vector<Entry> entries_;
};

}  // namespace taskadapter
