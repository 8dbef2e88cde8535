// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/visual_encoder.hpp"

#include <cmath>
#include <string>

#include "taskadapter/errors.hpp"

namespace taskadapter {

namespace {

constexpr double kPixelMean = 0.5;
constexpr double kPixelStd = 0.25;

const std::string kBackbone = "visual.backbone";

}  // namespace

void VisualConfig::validate() const {
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch size " +
                      std::to_string(patch_size));
  }
  if (width == 0 || heads == 0 || width % heads != 0) throw ConfigError("visual width must divide into heads");
  if (depth == 0) throw ConfigError("visual depth must be positive");
  if (adapted_layers > depth) {
    throw ConfigError("visual adapter layers " + std::to_string(adapted_layers) + " exceed depth " +
                      std::to_string(depth));
  }
  if (bottleneck_ratio == 0 || width / bottleneck_ratio == 0) throw ConfigError("visual bottleneck too narrow");
  if (joint_dim == 0) throw ConfigError("joint dimension must be positive");
  if (frames == 0) throw ConfigError("frame count must be positive");
}

VisualConfig VisualConfig::paper_scale(std::size_t adapted_layers) {
  VisualConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.width = 768;
  c.depth = 12;
  c.heads = 12;
  c.frames = 8;
  c.adapted_layers = adapted_layers;
  c.joint_dim = 512;
  return c;
}

TaskTokenBatch make_task_batch(const std::vector<TokenGrid>& grids, const std::vector<BatchRole>& roles) {
  if (grids.empty() || grids.size() != roles.size()) throw ContractError("task batch needs one role per video");
  for (BatchRole r : roles) {
    if (r != roles.front()) throw ContractError("support and query videos cannot share a task batch");
  }
  std::vector<Var> parts;
  parts.reserve(grids.size());
  for (const auto& g : grids) parts.push_back(g.tokens);
  return {stack(parts), roles.front()};
}

Var video_tensor(const RawVideo& video, bool requires_grad) {
  return Var::leaf({video.frames, video.height, video.width, 3}, video.pixels, requires_grad);
}

VisualEncoder::VisualEncoder(const VisualConfig& config, ParameterStore& store, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.width;
  const std::size_t patch_dim = 3 * config_.patch_size * config_.patch_size;
  const std::size_t tokens = config_.patch_count() + 1;

  patch_projection_ = store.add_normal("visual.patch_projection", kBackbone, {patch_dim, d},
                                       1.0 / std::sqrt(static_cast<double>(patch_dim)), rng, false);
  class_token_ = store.add_normal("visual.class_token", kBackbone, {d}, 1.0, rng, false);
  positional_ = store.add_normal("visual.positional", kBackbone, {tokens, d}, 0.5, rng, false);
  ln_pre_ = make_layer_norm(store, "visual.ln_pre", kBackbone, d, false);

  const std::size_t first_adapted = config_.depth - config_.adapted_layers;
  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::string prefix = "visual.blocks." + std::to_string(i);
    VisualBlockParams block;
    block.ln1 = make_layer_norm(store, prefix + ".ln1", kBackbone, d, false);
    block.attention = make_attention(store, prefix + ".attention", kBackbone, d, config_.heads, rng, false);
    block.ln2 = make_layer_norm(store, prefix + ".ln2", kBackbone, d, false);
    block.mlp = make_mlp(store, prefix + ".mlp", kBackbone, d, d * config_.mlp_ratio, rng, false);
    blocks_.push_back(std::move(block));
  }
  ln_post_ = make_layer_norm(store, "visual.ln_post", kBackbone, d, false);
  joint_projection_ = store.add_normal("visual.joint_projection", kBackbone, {d, config_.joint_dim},
                                       1.0 / std::sqrt(static_cast<double>(d)), rng, false);
  for (std::size_t i = first_adapted; i < config_.depth; ++i) {
    const std::string prefix = "visual.blocks." + std::to_string(i);
    const std::size_t r = config_.bottleneck_ratio;
    TaskAdapterParams a;
    a.temporal = make_adapter(store, prefix + ".adapter_temporal", "visual.adapter.temporal", d, r, false, rng);
    a.spatial = make_adapter(store, prefix + ".adapter_spatial", "visual.adapter.spatial", d, r, true, rng);
    a.task = make_adapter(store, prefix + ".adapter_task", "visual.adapter.task", d, r, false, rng);
    a.mlp = make_adapter(store, prefix + ".adapter_mlp", "visual.adapter.mlp", d, r, false, rng);
    blocks_[i].adapters = std::move(a);
  }
}

TokenGrid VisualEncoder::patch_embed(const Var& pixels) const {
  if (pixels.rank() != 4 || pixels.dim(3) != 3) {
    throw ContractError("patch_embed expects pixels [T, H, W, 3], got " + shape_string(pixels.shape()));
  }
  const std::size_t t = pixels.dim(0);
  const std::size_t h = pixels.dim(1);
  const std::size_t w = pixels.dim(2);
  const std::size_t p = config_.patch_size;
  if (h % p != 0 || w % p != 0) {
    throw ConfigError("frame " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch size " +
                      std::to_string(p));
  }
  if (h != config_.image_size || w != config_.image_size) {
    throw ConfigError("frame size " + std::to_string(h) + "x" + std::to_string(w) + " does not match image size " +
                      std::to_string(config_.image_size));
  }
  const std::size_t gh = h / p;
  const std::size_t gw = w / p;
  Var patches = reshape(pixels, {t, gh, p, gw, p, 3});
  patches = permute(patches, {0, 1, 3, 2, 4, 5});
  patches = reshape(patches, {t, gh * gw, 3 * p * p});
  patches = add_broadcast(scale(patches, 1.0 / kPixelStd),
                          Var::constant({3 * p * p}, std::vector<double>(3 * p * p, -kPixelMean / kPixelStd)));
  Var embedded = matmul(patches, patch_projection_);
  Var cls = broadcast_axis(reshape(class_token_, {1, config_.width}), 0, t);
  Var tokens = concat({cls, embedded}, 1);
  tokens = add_broadcast(tokens, positional_);
  return {layer_norm(tokens, ln_pre_)};
}

Var VisualEncoder::standard_block(const Var& tokens, std::size_t block) const {
  const auto& b = blocks_.at(block);
  const std::size_t token_axis = tokens.rank() - 2;
  Var x = add(tokens, multi_head_self_attention(layer_norm(tokens, b.ln1), b.attention, token_axis));
  return add(x, mlp_block(layer_norm(x, b.ln2), b.mlp));
}

Var VisualEncoder::attention_step(const Var& x, const VisualBlockParams& block, std::size_t axis,
                                  const AdapterParams& adapter) const {
  Var attended = multi_head_self_attention(layer_norm(x, block.ln1), block.attention, axis);
  return add(x, bottleneck_adapter(attended, adapter));
}

TaskTokenBatch VisualEncoder::task_adapter_block(const TaskTokenBatch& batch, std::size_t block) const {
  const auto& b = blocks_.at(block);
  if (!b.adapters) throw ContractError("block " + std::to_string(block) + " has no adapters");
  if (batch.tokens.rank() != 4 || batch.tokens.dim(0) < 1) {
    throw ContractError("task batch must be [count, T, N+1, D], got " + shape_string(batch.tokens.shape()));
  }
  const auto& a = *b.adapters;
  constexpr std::size_t kVideoAxis = 0;
  constexpr std::size_t kFrameAxis = 1;
  constexpr std::size_t kTokenAxis = 2;

  Var x = batch.tokens;
  auto temporal = [&] { x = attention_step(x, b, kFrameAxis, a.temporal); };
  auto spatial = [&] { x = attention_step(x, b, kTokenAxis, a.spatial); };
  auto task = [&] { x = attention_step(x, b, kVideoAxis, a.task); };
  switch (config_.placement) {
    case TaskMsaPlacement::after_temporal_spatial:
      temporal();
      spatial();
      task();
      break;
    case TaskMsaPlacement::between_temporal_spatial:
      temporal();
      task();
      spatial();
      break;
    case TaskMsaPlacement::before_temporal_spatial:
      task();
      temporal();
      spatial();
      break;
  }
  const Var normed = layer_norm(x, b.ln2);
  x = add(add(x, mlp_block(normed, b.mlp)), bottleneck_adapter(normed, a.mlp));
  return {x, batch.role};
}

FrameFeatureSet VisualEncoder::readout(const Var& batch_tokens) const {
  Var features = select(batch_tokens, batch_tokens.rank() - 2, 0);
  Var joint = matmul(layer_norm(features, ln_post_), joint_projection_);
  return {features, joint};
}

FrameFeatureSet VisualEncoder::encode_batch(const std::vector<Var>& videos, BatchRole role) const {
  if (videos.empty()) throw ContractError("encode_batch needs at least one video");
  if (role == BatchRole::query && config_.query_mode == QueryMode::independent && videos.size() > 1) {
    std::vector<Var> features, joint;
    for (const auto& v : videos) {
      auto single = encode_batch({v}, role);
      features.push_back(select(single.features, 0, 0));
      joint.push_back(select(single.joint, 0, 0));
    }
    return {stack(features), stack(joint)};
  }
  std::vector<Var> grids;
  grids.reserve(videos.size());
  for (const auto& v : videos) {
    if (v.dim(0) != config_.frames) {
      throw ContractError("video has " + std::to_string(v.dim(0)) + " frames, encoder expects " +
                          std::to_string(config_.frames));
    }
    grids.push_back(patch_embed(v).tokens);
  }
  Var x = stack(grids);
  const std::size_t first_adapted = config_.depth - config_.adapted_layers;
  for (std::size_t i = 0; i < first_adapted; ++i) x = standard_block(x, i);
  TaskTokenBatch batch{x, role};
  for (std::size_t i = first_adapted; i < config_.depth; ++i) batch = task_adapter_block(batch, i);
  return readout(batch.tokens);
}

std::pair<FrameFeatureSet, FrameFeatureSet> VisualEncoder::encode_episode_videos(
    const std::vector<Var>& support, const std::vector<Var>& query) const {
  return {encode_batch(support, BatchRole::support), encode_batch(query, BatchRole::query)};
}

std::pair<FrameFeatureSet, FrameFeatureSet> VisualEncoder::encode_episode_videos(const Episode& episode) const {
  std::vector<Var> support, query;
  for (const auto& v : episode.support) support.push_back(video_tensor(v.video));
  for (const auto& v : episode.query) query.push_back(video_tensor(v.video));
  return encode_episode_videos(support, query);
}

FrameFeatureSet VisualEncoder::encode_frozen_baseline(const std::vector<Var>& videos) const {
  std::vector<Var> features, joint;
  for (const auto& v : videos) {
    Var x = patch_embed(v).tokens;
    for (std::size_t i = 0; i < config_.depth; ++i) x = standard_block(x, i);
    auto out = readout(x);
    features.push_back(out.features);
    joint.push_back(out.joint);
  }
  return {stack(features), stack(joint)};
}

}  // namespace taskadapter
