// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/model.hpp"

#include <tuple>

#include "taskadapter/errors.hpp"

namespace taskadapter {

namespace {

enum Stream : std::uint64_t { kVisualStream = 0, kTextStream = 1, kAlignmentStream = 2 };

std::vector<Var> video_tensors(const std::vector<LabeledVideo>& videos) {
  std::vector<Var> out;
  out.reserve(videos.size());
  for (const auto& v : videos) out.push_back(video_tensor(v.video));
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  visual.validate();
  text.validate();
  alignment.validate();
  if (visual.joint_dim != text.joint_dim || visual.joint_dim != alignment.joint_dim) {
    throw ConfigError("visual, text and alignment joint dimensions differ");
  }
  if (visual.frames < 4) throw ConfigError("at least 4 frames are needed for three aligned stages");
  if (!(tau_visual > 0.0) || !(tau_text > 0.0)) throw ConfigError("fusion temperatures must be positive");
}

ModelConfig resolve_vocabulary(ModelConfig config, const Vocabulary& vocab) {
  if (config.text.vocab_size == 0) config.text.vocab_size = vocab.size();
  if (config.text.vocab_size != vocab.size()) {
    throw ConfigError("text vocabulary size " + std::to_string(config.text.vocab_size) +
                      " does not match the vocabulary (" + std::to_string(vocab.size()) + ")");
  }
  return config;
}

TaskAdapterModel::TaskAdapterModel(ModelConfig config, Vocabulary vocab)
    : config_(resolve_vocabulary(std::move(config), vocab)), vocab_(std::move(vocab)) {
  config_.validate();
  Rng visual_rng = Rng::stream(config_.init_seed, kVisualStream);
  Rng text_rng = Rng::stream(config_.init_seed, kTextStream);
  Rng alignment_rng = Rng::stream(config_.init_seed, kAlignmentStream);
  visual_ = std::make_unique<VisualEncoder>(config_.visual, store_, visual_rng);
  semantic_ = std::make_unique<SemanticEncoder>(config_.text, store_, text_rng);
  alignment_ = std::make_unique<AlignmentModule>(config_.alignment, store_, alignment_rng);
}

Var TaskAdapterModel::class_semantics(const std::vector<std::string>& class_names, const Corpus& corpus) const {
  std::vector<Var> rows;
  rows.reserve(class_names.size());
  for (const auto& name : class_names) {
    auto it = corpus.find(name);
    if (it == corpus.end()) throw DataError("corpus has no sub-actions for class '" + name + "'");
    rows.push_back(semantic_->encode_class_semantics(build_prompts(name, it->second), vocab_).features);
  }
  return stack(rows);
}

EpisodeOutputs TaskAdapterModel::score(EpisodeOutputs out, const std::vector<int>& support_labels,
                                       const std::vector<int>& query_labels, std::size_t ways) const {
  if (out.semantics.dim(0) != ways) throw ContractError("one semantic row per class is required");
  out.prototypes = compute_prototypes(out.support.joint, support_labels, ways);
  out.visual = visual_scores(config_.metric, out.query.joint, out.prototypes);
  out.segments = segment_stages(out.aligned);
  out.crossmodal = crossmodal_scores(out.segments, out.semantics);
  out.fused = fuse_scores(out.visual, out.crossmodal, config_.tau_visual, config_.tau_text, config_.fusion);
  out.loss = episode_loss(out.fused, query_labels);
  return out;
}

EpisodeOutputs TaskAdapterModel::forward(const std::vector<Var>& support, const std::vector<int>& support_labels,
                                         const std::vector<Var>& query, const std::vector<int>& query_labels,
                                         const Var& semantics) const {
  EpisodeOutputs out;
  std::tie(out.support, out.query) = visual_->encode_episode_videos(support, query);
  out.aligned = alignment_->adjacent_frame_align(out.query.joint);
  out.semantics = semantics;
  return score(std::move(out), support_labels, query_labels, semantics.dim(0));
}

EpisodeOutputs TaskAdapterModel::forward(const Episode& episode, const Corpus& corpus) const {
  return forward(video_tensors(episode.support), episode.support_labels(), video_tensors(episode.query),
                 episode.query_labels(), class_semantics(episode.class_names, corpus));
}

EpisodeOutputs TaskAdapterModel::forward_frozen_baseline(const Episode& episode, const Corpus& corpus) const {
  EpisodeOutputs out;
  out.support = visual_->encode_frozen_baseline(video_tensors(episode.support));
  out.query = visual_->encode_frozen_baseline(video_tensors(episode.query));
  const std::size_t t = out.query.joint.dim(1);
  out.aligned = slice(out.query.joint, 1, 0, t - 1);
  std::vector<Var> rows;
  for (const auto& name : episode.class_names) {
    auto it = corpus.find(name);
    if (it == corpus.end()) throw DataError("corpus has no sub-actions for class '" + name + "'");
    const auto tokens = tokenize_prompts(build_prompts(name, it->second), vocab_, config_.text.context_length);
    rows.push_back(semantic_->encode_frozen_baseline(tokens).features);
  }
  out.semantics = stack(rows);
  return score(std::move(out), episode.support_labels(), episode.query_labels(),
               static_cast<std::size_t>(episode.ways()));
}

}  // namespace taskadapter
