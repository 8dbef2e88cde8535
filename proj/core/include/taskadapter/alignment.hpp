// SPDX-License-Identifier: Apache-2.0
//
// Cross-modal alignment of query features: adjacent-frame cross-attention,
// three-stage temporal segmentation, and stage-wise cosine matching.

#pragma once

#include <array>
#include <cstddef>
#include <utility>
#include <vector>

#include "taskadapter/attention.hpp"
#include "taskadapter/autograd.hpp"
#include "taskadapter/parameters.hpp"
#include "taskadapter/rng.hpp"

namespace taskadapter {

struct AlignmentConfig {
  std::size_t joint_dim = 16;
  std::size_t heads = 1;
  /// Stacked cross-attention layers; each keeps length T-1 and re-reads frame i.
  std::size_t layers = 1;

  void validate() const;
};

struct AlignmentParams {
  std::vector<MultiHeadAttentionParams> layers;  // output projections start at zero
};

class AlignmentModule {
 public:
  AlignmentModule(const AlignmentConfig& config, ParameterStore& store, Rng& rng);

  const AlignmentConfig& config() const { return config_; }
  const AlignmentParams& params() const { return params_; }

  /// [Q, T, D_joint] -> [Q, T-1, D_joint]; output i is
  /// CrossAttention(frame i-1 -> frame i) + frame i-1.
  Var adjacent_frame_align(const Var& query_joint) const;

 private:
  AlignmentConfig config_;
  AlignmentParams params_;
};

/// Zero-based inclusive frame ranges of the three stages for `aligned_length` frames.
std::array<std::pair<std::size_t, std::size_t>, 3> stage_ranges(std::size_t aligned_length);

/// [.., A, D] -> [.., 3, D]: mean of each stage's frame range.
Var segment_stages(const Var& aligned);

/// Mean over stages of cosine(segment_s, semantic_s); segments and semantics are [3, D].
Var stage_match(const Var& segments, const Var& semantics);

}  // namespace taskadapter
