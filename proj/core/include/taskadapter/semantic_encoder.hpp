// SPDX-License-Identifier: Apache-2.0
//
// Semantic branch: three stage prompts per class, a frozen causal text
// transformer, and order adapter blocks whose extra attention runs across
// the three stages at every token position.

#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "taskadapter/attention.hpp"
#include "taskadapter/autograd.hpp"
#include "taskadapter/episodic_data.hpp"
#include "taskadapter/parameters.hpp"
#include "taskadapter/rng.hpp"

namespace taskadapter {

inline constexpr std::size_t kStageCount = 3;

struct TextConfig {
  std::size_t vocab_size = 0;  // 0 means "take it from the vocabulary"
  std::size_t context_length = 24;
  std::size_t width = 32;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t adapted_layers = 2;
  std::size_t joint_dim = 16;
  std::size_t bottleneck_ratio = 4;
  std::size_t mlp_ratio = 4;

  void validate() const;

  /// 12-layer, 512-wide, 8-head text transformer with a 49408-token vocabulary.
  static TextConfig paper_scale(std::size_t adapted_layers);
};

/// Prompt text for the beginning, process, and end stages of one class.
struct PromptSet {
  std::string label;
  std::array<std::string, kStageCount> prompts;
};

/// "A video of action about {LABEL}: {STAGE}" for each stage.
PromptSet build_prompts(const std::string& label, const std::array<std::string, kStageCount>& stages);

/// Lowercased word/punctuation vocabulary with reserved special tokens.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;
  static constexpr int kStart = 2;
  static constexpr int kEnd = 3;

  /// Deterministic: specials first, then sorted words from every prompt.
  static Vocabulary from_corpus(const Corpus& corpus);
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  /// [start, words..., end, pad...] of exactly `context_length` ids. Long
  /// prompts are truncated so that the end marker is always kept.
  std::vector<int> tokenize(const std::string& text, std::size_t context_length) const;

  bool operator==(const Vocabulary&) const = default;

 private:
  void add(const std::string& token);
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

/// Splits lowercased text into alphanumeric words and single punctuation marks.
std::vector<std::string> split_words(const std::string& text);

/// Token ids [3, l] with the end-of-text position of each row.
struct StagePromptTokens {
  std::array<std::vector<int>, kStageCount> ids;
  std::array<std::size_t, kStageCount> end_positions{};
};

StagePromptTokens tokenize_prompts(const PromptSet& prompts, const Vocabulary& vocab, std::size_t context_length);

/// Unit-norm [3, D_joint] features ordered beginning/process/end.
struct StageSemanticFeatures {
  Var features;
};

struct OrderAdapterParams {
  AdapterParams adapter;
  Var stage_positional;  // [3, D_t]
};

struct TextBlockParams {
  LayerNormParams ln1;
  MultiHeadAttentionParams attention;
  LayerNormParams ln2;
  MlpParams mlp;
  std::optional<OrderAdapterParams> order;
};

class SemanticEncoder {
 public:
  SemanticEncoder(const TextConfig& config, ParameterStore& store, Rng& rng);

  const TextConfig& config() const { return config_; }
  const std::vector<TextBlockParams>& blocks() const { return blocks_; }

  /// Token + positional embeddings laid out [l, 3, D_t].
  Var embed(const StagePromptTokens& tokens) const;

  /// Frozen block: causal attention along the token axis (axis 0), MLP.
  Var text_block(const Var& x, std::size_t block) const;

  /// Frozen block plus order attention across the stage axis (axis 1).
  Var order_adapter_block(const Var& x, std::size_t block) const;

  StageSemanticFeatures encode_tokens(const StagePromptTokens& tokens) const;
  StageSemanticFeatures encode_class_semantics(const PromptSet& prompts, const Vocabulary& vocab) const;

  /// Each prompt run alone through the frozen transformer.
  StageSemanticFeatures encode_frozen_baseline(const StagePromptTokens& tokens) const;

 private:
  Var readout(const Var& x, const StagePromptTokens& tokens) const;

  TextConfig config_;
  Var token_embedding_;  // [V, D_t]
  Var positional_;       // [l, D_t]
  std::vector<TextBlockParams> blocks_;
  LayerNormParams ln_final_;
  Var joint_projection_;  // [D_t, D_joint]
};

}  // namespace taskadapter
