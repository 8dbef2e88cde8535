// SPDX-License-Identifier: Apache-2.0
//
// The full few-shot model: visual and semantic encoders, query alignment,
// visual and cross-modal scoring, and fusion over one episode.

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "taskadapter/alignment.hpp"
#include "taskadapter/episodic_data.hpp"
#include "taskadapter/matching.hpp"
#include "taskadapter/parameters.hpp"
#include "taskadapter/semantic_encoder.hpp"
#include "taskadapter/visual_encoder.hpp"

namespace taskadapter {

struct ModelConfig {
  VisualConfig visual;
  TextConfig text;
  AlignmentConfig alignment;
  MetricKind metric = MetricKind::proto;
  FusionMode fusion = FusionMode::probability;
  double tau_visual = kDefaultTemperature;
  double tau_text = kDefaultTemperature;
  /// Seed of the frozen backbone and of the adapter initializations.
  std::uint64_t init_seed = 0;

  void validate() const;
};

/// Every intermediate of one forward pass.
struct EpisodeOutputs {
  FrameFeatureSet support;
  FrameFeatureSet query;
  PrototypeSet prototypes;
  ScoreMatrix visual;
  Var aligned;    // [Q, T-1, D_joint]
  Var segments;   // [Q, 3, D_joint]
  Var semantics;  // [C, 3, D_joint]
  ScoreMatrix crossmodal;
  FusedScores fused;
  Var loss;
};

class TaskAdapterModel {
 public:
  /// The text vocabulary size is taken from `vocab` when config.text.vocab_size is 0.
  TaskAdapterModel(ModelConfig config, Vocabulary vocab);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const VisualEncoder& visual() const { return *visual_; }
  const SemanticEncoder& semantic() const { return *semantic_; }
  const AlignmentModule& alignment() const { return *alignment_; }

  /// [C, 3, D_joint] stage semantics for the episode's classes.
  Var class_semantics(const std::vector<std::string>& class_names, const Corpus& corpus) const;

  /// Forward over pixel tensors; labels index into `semantics` rows.
  EpisodeOutputs forward(const std::vector<Var>& support, const std::vector<int>& support_labels,
                         const std::vector<Var>& query, const std::vector<int>& query_labels,
                         const Var& semantics) const;

  EpisodeOutputs forward(const Episode& episode, const Corpus& corpus) const;

  /// Same scoring with every adapter and the alignment layer bypassed:
  /// per-frame frozen ViT, prompts encoded one at a time, segments of the
  /// first T-1 query frames.
  EpisodeOutputs forward_frozen_baseline(const Episode& episode, const Corpus& corpus) const;

 private:
  EpisodeOutputs score(EpisodeOutputs out, const std::vector<int>& support_labels,
                       const std::vector<int>& query_labels, std::size_t ways) const;

  ModelConfig config_;
  Vocabulary vocab_;
  ParameterStore store_;
  std::unique_ptr<VisualEncoder> visual_;
  std::unique_ptr<SemanticEncoder> semantic_;
  std::unique_ptr<AlignmentModule> alignment_;
};

/// Returns the config with vocab_size filled in from the vocabulary.
ModelConfig resolve_vocabulary(ModelConfig config, const Vocabulary& vocab);

}  // namespace taskadapter
