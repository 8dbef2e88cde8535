// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/semantic_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "taskadapter/errors.hpp"

namespace taskadapter {

namespace {

const std::string kBackbone = "text.backbone";

constexpr std::size_t kTokenAxis = 0;
constexpr std::size_t kStageAxis = 1;

}  // namespace

void TextConfig::validate() const {
  if (vocab_size < 4) throw ConfigError("text vocabulary must hold at least the special tokens");
  if (context_length < 2) throw ConfigError("text context length must be >= 2");
  if (width == 0 || heads == 0 || width % heads != 0) throw ConfigError("text width must divide into heads");
  if (depth == 0) throw ConfigError("text depth must be positive");
  if (adapted_layers > depth) {
    throw ConfigError("text adapter layers " + std::to_string(adapted_layers) + " exceed depth " +
                      std::to_string(depth));
  }
  if (bottleneck_ratio == 0 || width / bottleneck_ratio == 0) throw ConfigError("text bottleneck too narrow");
  if (joint_dim == 0) throw ConfigError("joint dimension must be positive");
}

TextConfig TextConfig::paper_scale(std::size_t adapted_layers) {
  TextConfig c;
  c.vocab_size = 49408;
  c.context_length = 77;
  c.width = 512;
  c.depth = 12;
  c.heads = 8;
  c.adapted_layers = adapted_layers;
  c.joint_dim = 512;
  return c;
}

PromptSet build_prompts(const std::string& label, const std::array<std::string, kStageCount>& stages) {
  PromptSet set;
  set.label = label;
  for (std::size_t i = 0; i < kStageCount; ++i) set.prompts[i] = "A video of action about " + label + ": " + stages[i];
  return set;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      current.push_back(static_cast<char>(std::tolower(ch)));
      continue;
    }
    if (!current.empty()) {
      words.push_back(current);
      current.clear();
    }
    if (!std::isspace(ch)) words.emplace_back(1, static_cast<char>(ch));
  }
  if (!current.empty()) words.push_back(current);
  return words;
}

// ---- vocabulary --------------------------------------------------------------

void Vocabulary::add(const std::string& token) {
  if (ids_.count(token)) throw DataError("duplicate vocabulary token '" + token + "'");
  ids_[token] = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
}

Vocabulary Vocabulary::from_corpus(const Corpus& corpus) {
  std::set<std::string> words;
  for (const auto& [label, stages] : corpus) {
    for (const auto& prompt : build_prompts(label, stages).prompts) {
      for (auto& w : split_words(prompt)) words.insert(std::move(w));
    }
  }
  Vocabulary vocab;
  for (const char* special : {"<pad>", "<unk>", "<start>", "<end>"}) vocab.add(special);
  for (const auto& w : words) vocab.add(w);
  return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  Vocabulary vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw DataError("malformed vocabulary line: " + line);
    const int id = std::stoi(line.substr(tab + 1));
    if (id != static_cast<int>(vocab.size())) throw DataError("vocabulary ids must be dense and ordered");
    vocab.add(line.substr(0, tab));
  }
  if (vocab.size() < 4 || vocab.id("<end>") != kEnd) throw DataError("vocabulary is missing special tokens");
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnknown : it->second;
}

std::vector<int> Vocabulary::tokenize(const std::string& text, std::size_t context_length) const {
  if (context_length < 2) throw ConfigError("context length must fit start and end markers");
  std::vector<int> ids{kStart};
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  if (ids.size() > context_length - 1) ids.resize(context_length - 1);
  ids.push_back(kEnd);
  ids.resize(context_length, kPad);
  return ids;
}

StagePromptTokens tokenize_prompts(const PromptSet& prompts, const Vocabulary& vocab, std::size_t context_length) {
  StagePromptTokens tokens;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    tokens.ids[s] = vocab.tokenize(prompts.prompts[s], context_length);
    const auto it = std::find(tokens.ids[s].begin(), tokens.ids[s].end(), Vocabulary::kEnd);
    tokens.end_positions[s] = static_cast<std::size_t>(it - tokens.ids[s].begin());
  }
  return tokens;
}

// ---- encoder -------------------------------------------------------------------

SemanticEncoder::SemanticEncoder(const TextConfig& config, ParameterStore& store, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.width;
  token_embedding_ = store.add_normal("text.token_embedding", kBackbone, {config_.vocab_size, d}, 1.0, rng, false);
  positional_ = store.add_normal("text.positional", kBackbone, {config_.context_length, d}, 0.5, rng, false);
  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::string prefix = "text.blocks." + std::to_string(i);
    TextBlockParams block;
    block.ln1 = make_layer_norm(store, prefix + ".ln1", kBackbone, d, false);
    block.attention = make_attention(store, prefix + ".attention", kBackbone, d, config_.heads, rng, false);
    block.ln2 = make_layer_norm(store, prefix + ".ln2", kBackbone, d, false);
    block.mlp = make_mlp(store, prefix + ".mlp", kBackbone, d, d * config_.mlp_ratio, rng, false);
    blocks_.push_back(std::move(block));
  }
  ln_final_ = make_layer_norm(store, "text.ln_final", kBackbone, d, false);
  joint_projection_ = store.add_normal("text.joint_projection", kBackbone, {d, config_.joint_dim},
                                       1.0 / std::sqrt(static_cast<double>(d)), rng, false);
  for (std::size_t i = config_.depth - config_.adapted_layers; i < config_.depth; ++i) {
    const std::string prefix = "text.blocks." + std::to_string(i);
    OrderAdapterParams order;
    order.adapter = make_adapter(store, prefix + ".adapter_order", "text.adapter.order", d, config_.bottleneck_ratio,
                                 false, rng);
    order.stage_positional = store.add_constant(prefix + ".stage_positional", "text.stage_positional",
                                                {kStageCount, d}, 0.0, true);
    blocks_[i].order = std::move(order);
  }
}

Var SemanticEncoder::embed(const StagePromptTokens& tokens) const {
  const std::size_t l = config_.context_length;
  std::vector<std::size_t> flat;
  flat.reserve(kStageCount * l);
  for (const auto& row : tokens.ids) {
    if (row.size() != l) throw ContractError("prompt tokens must be padded to the context length");
    for (int id : row) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw ContractError("token id " + std::to_string(id) + " outside the vocabulary");
      }
      flat.push_back(static_cast<std::size_t>(id));
    }
  }
  Var x = reshape(take(token_embedding_, 0, flat), {kStageCount, l, config_.width});
  x = add_broadcast(x, positional_);
  return permute(x, {1, 0, 2});
}

Var SemanticEncoder::text_block(const Var& x, std::size_t block) const {
  const auto& b = blocks_.at(block);
  Var h = add(x, multi_head_self_attention(layer_norm(x, b.ln1), b.attention, kTokenAxis, true));
  return add(h, mlp_block(layer_norm(h, b.ln2), b.mlp));
}

Var SemanticEncoder::order_adapter_block(const Var& x, std::size_t block) const {
  const auto& b = blocks_.at(block);
  if (!b.order) throw ContractError("text block " + std::to_string(block) + " has no order adapter");
  if (x.rank() != 3 || x.dim(kStageAxis) != kStageCount) {
    throw ContractError("order adapter block expects [l, 3, D], got " + shape_string(x.shape()));
  }
  Var h = add(x, multi_head_self_attention(layer_norm(x, b.ln1), b.attention, kTokenAxis, true));
  const Var stage_input = add_broadcast(layer_norm(h, b.ln1), b.order->stage_positional);
  h = add(h, bottleneck_adapter(multi_head_self_attention(stage_input, b.attention, kStageAxis), b.order->adapter));
  return add(h, mlp_block(layer_norm(h, b.ln2), b.mlp));
}

Var SemanticEncoder::readout(const Var& x, const StagePromptTokens& tokens) const {
  // x [l, S, D] -> rows at each stage's end-of-text position.
  const std::size_t l = x.dim(0);
  const std::size_t stages = x.dim(1);
  Var flat = reshape(permute(x, {1, 0, 2}), {stages * l, config_.width});
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s < stages; ++s) rows.push_back(s * l + tokens.end_positions[s]);
  Var picked = take(flat, 0, rows);
  return l2_normalize_last(matmul(layer_norm(picked, ln_final_), joint_projection_));
}

StageSemanticFeatures SemanticEncoder::encode_tokens(const StagePromptTokens& tokens) const {
  Var x = embed(tokens);
  for (std::size_t i = 0; i < config_.depth; ++i) x = blocks_[i].order ? order_adapter_block(x, i) : text_block(x, i);
  return {readout(x, tokens)};
}

StageSemanticFeatures SemanticEncoder::encode_class_semantics(const PromptSet& prompts, const Vocabulary& vocab) const {
  return encode_tokens(tokenize_prompts(prompts, vocab, config_.context_length));
}

StageSemanticFeatures SemanticEncoder::encode_frozen_baseline(const StagePromptTokens& tokens) const {
  const Var embedded = embed(tokens);
  std::vector<Var> rows;
  for (std::size_t s = 0; s < kStageCount; ++s) {
    Var x = take(embedded, kStageAxis, {s});
    for (std::size_t i = 0; i < config_.depth; ++i) x = text_block(x, i);
    StagePromptTokens single;
    single.end_positions[0] = tokens.end_positions[s];
    rows.push_back(select(readout(x, single), 0, 0));
  }
  return {stack(rows)};
}

}  // namespace taskadapter
