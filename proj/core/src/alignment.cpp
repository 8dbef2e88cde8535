// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/alignment.hpp"

#include <algorithm>
#include <string>

#include "taskadapter/errors.hpp"
#include "taskadapter/logging.hpp"

namespace taskadapter {

void AlignmentConfig::validate() const {
  if (joint_dim == 0) throw ConfigError("alignment joint dimension must be positive");
  if (heads == 0 || joint_dim % heads != 0) throw ConfigError("alignment joint dimension must divide into heads");
  if (layers == 0) throw ConfigError("alignment needs at least one cross-attention layer");
}

AlignmentModule::AlignmentModule(const AlignmentConfig& config, ParameterStore& store, Rng& rng) : config_(config) {
  config_.validate();
  for (std::size_t i = 0; i < config_.layers; ++i) {
    params_.layers.push_back(make_attention(store, "alignment.layers." + std::to_string(i), "alignment",
                                            config_.joint_dim, config_.heads, rng, true, true));
  }
}

Var AlignmentModule::adjacent_frame_align(const Var& query_joint) const {
  if (query_joint.rank() != 3 || query_joint.dim(2) != config_.joint_dim) {
    throw ContractError("alignment expects [Q, T, D_joint], got " + shape_string(query_joint.shape()));
  }
  const std::size_t q = query_joint.dim(0);
  const std::size_t t = query_joint.dim(1);
  if (t < 2) throw ContractError("alignment needs at least 2 frames");
  const std::size_t d = config_.joint_dim;
  const Var previous = reshape(slice(query_joint, 1, 0, t - 1), {q * (t - 1), 1, d});
  const Var next = reshape(slice(query_joint, 1, 1, t), {q * (t - 1), 1, d});
  Var aligned = previous;
  for (const auto& layer : params_.layers) aligned = add(multi_head_cross_attention(aligned, next, layer), aligned);
  return reshape(aligned, {q, t - 1, d});
}

std::array<std::pair<std::size_t, std::size_t>, 3> stage_ranges(std::size_t aligned_length) {
  if (aligned_length < 3) {
    throw ContractError("stage segmentation needs at least 3 aligned frames, got " + std::to_string(aligned_length));
  }
  const std::size_t step = (aligned_length - 1) / 3;
  if (step == 0) return {{{0, 0}, {1, 1}, {2, 2}}};
  std::array<std::pair<std::size_t, std::size_t>, 3> ranges{};
  for (std::size_t s = 0; s < 3; ++s) ranges[s] = {s * step, (s + 1) * step};
  return ranges;
}

Var segment_stages(const Var& aligned) {
  if (aligned.rank() < 2) throw ContractError("segment_stages expects [.., A, D]");
  const std::size_t axis = aligned.rank() - 2;
  const std::size_t length = aligned.dim(axis);
  const auto ranges = stage_ranges(length);
  std::vector<double> weights(3 * length, 0.0);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto [first, last] = ranges[s];
    const double w = 1.0 / static_cast<double>(last - first + 1);
    for (std::size_t i = first; i <= last; ++i) weights[s * length + i] = w;
  }
  return combine_along(aligned, axis, 3, weights);
}

Var stage_match(const Var& segments, const Var& semantics) {
  if (segments.rank() != 2 || segments.dim(0) != 3 || segments.shape() != semantics.shape()) {
    throw ContractError("stage_match expects two [3, D] tensors");
  }
  const std::size_t d = segments.dim(1);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto row = segments.values().subspan(s * d, d);
    if (std::all_of(row.begin(), row.end(), [](double v) { return v == 0.0; })) {
      log_warning("stage_match: zero-norm segment at stage " + std::to_string(s + 1));
    }
  }
  return mean_all(cosine_last(segments, semantics));
}

}  // namespace taskadapter
