// SPDX-License-Identifier: Apache-2.0
//
// Visual branch: patch embedding, frozen ViT blocks, and task adapter
// blocks (temporal, spatial, and cross-video attention with adapters) in the
// last L blocks.

#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "taskadapter/attention.hpp"
#include "taskadapter/autograd.hpp"
#include "taskadapter/episodic_data.hpp"
#include "taskadapter/parameters.hpp"
#include "taskadapter/rng.hpp"

namespace taskadapter {

/// Where the cross-video attention sits relative to temporal and spatial attention.
enum class TaskMsaPlacement { after_temporal_spatial, between_temporal_spatial, before_temporal_spatial };

/// Whether query videos attend to each other inside the adapted blocks.
enum class QueryMode { joint, independent };

struct VisualConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t width = 32;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t frames = 8;
  std::size_t adapted_layers = 2;
  std::size_t joint_dim = 16;
  std::size_t bottleneck_ratio = 4;
  std::size_t mlp_ratio = 4;
  TaskMsaPlacement placement = TaskMsaPlacement::after_temporal_spatial;
  QueryMode query_mode = QueryMode::joint;

  std::size_t patch_count() const { return (image_size / patch_size) * (image_size / patch_size); }
  void validate() const;

  /// ViT-B/16 at 224 px with a 512-wide joint space.
  static VisualConfig paper_scale(std::size_t adapted_layers);
};

/// Per-video tokens [T, N+1, D]; row 0 of each frame is the [class] token.
struct TokenGrid {
  Var tokens;
};

enum class BatchRole { support, query };

/// Cross-video batch [count, T, N+1, D] holding only one role.
struct TaskTokenBatch {
  Var tokens;
  BatchRole role = BatchRole::support;
};

/// Builds a batch from per-video grids; mixing roles is a contract violation.
TaskTokenBatch make_task_batch(const std::vector<TokenGrid>& grids, const std::vector<BatchRole>& roles);

/// Final-block [class] tokens [count, T, D] and their joint projection [count, T, D_joint].
struct FrameFeatureSet {
  Var features;
  Var joint;
};

struct TaskAdapterParams {
  AdapterParams temporal;
  AdapterParams spatial;
  AdapterParams task;
  AdapterParams mlp;
};

struct VisualBlockParams {
  LayerNormParams ln1;
  MultiHeadAttentionParams attention;
  LayerNormParams ln2;
  MlpParams mlp;
  std::optional<TaskAdapterParams> adapters;
};

/// Converts a video to a pixel tensor [T, H, W, 3]; gradients may be requested for tests.
Var video_tensor(const RawVideo& video, bool requires_grad = false);

class VisualEncoder {
 public:
  /// Registers frozen backbone tensors under "visual." and adapters in the last L blocks.
  VisualEncoder(const VisualConfig& config, ParameterStore& store, Rng& rng);

  const VisualConfig& config() const { return config_; }
  const std::vector<VisualBlockParams>& blocks() const { return blocks_; }

  TokenGrid patch_embed(const Var& pixels) const;
  TokenGrid patch_embed(const RawVideo& video) const { return patch_embed(video_tensor(video)); }

  /// Frozen block with frames as batch. Accepts any leading batch dims.
  Var standard_block(const Var& tokens, std::size_t block) const;
  TokenGrid standard_block(const TokenGrid& grid, std::size_t block) const {
    return {standard_block(grid.tokens, block)};
  }

  TaskTokenBatch task_adapter_block(const TaskTokenBatch& batch, std::size_t block) const;

  /// Runs the full stack over one role's videos (pixel tensors [T, H, W, 3]).
  FrameFeatureSet encode_batch(const std::vector<Var>& videos, BatchRole role) const;

  std::pair<FrameFeatureSet, FrameFeatureSet> encode_episode_videos(const std::vector<Var>& support,
                                                                    const std::vector<Var>& query) const;
  std::pair<FrameFeatureSet, FrameFeatureSet> encode_episode_videos(const Episode& episode) const;

  /// Frozen per-frame ViT run video by video, ignoring every adapter.
  FrameFeatureSet encode_frozen_baseline(const std::vector<Var>& videos) const;

  FrameFeatureSet readout(const Var& batch_tokens) const;

 private:
  Var attention_step(const Var& x, const VisualBlockParams& block, std::size_t axis, const AdapterParams& adapter) const;

  VisualConfig config_;
  Var patch_projection_;  // [3 P^2, D]
  Var class_token_;       // [D]
  Var positional_;        // [N+1, D]
  LayerNormParams ln_pre_;
  std::vector<VisualBlockParams> blocks_;
  LayerNormParams ln_post_;
  Var joint_projection_;  // [D, D_joint]
};

}  // namespace taskadapter
