// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>

#include "taskadapter/errors.hpp"
#include "test_support.hpp"

using namespace taskadapter;
using namespace tatest;

namespace {

TextConfig small_text(const Vocabulary& vocab, std::size_t adapted = 1) {
  TextConfig c;
  c.vocab_size = vocab.size();
  c.context_length = 16;
  c.width = 8;
  c.depth = 2;
  c.heads = 2;
  c.adapted_layers = adapted;
  c.joint_dim = 4;
  return c;
}

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::from_corpus(template_corpus());
  return v;
}

PromptSet prompts_for(const std::string& label) { return build_prompts(label, template_corpus().at(label)); }

Var permuted_rows(const Var& x, const std::vector<std::size_t>& order) { return take(x, 0, order); }

}  // namespace

TEST_CASE("prompts follow the fixed template") {
  const PromptSet p = build_prompts("Long Jump", {"run", "jump", "land"});
  CHECK(p.prompts[0] == "A video of action about Long Jump: run");
  CHECK(p.prompts[2] == "A video of action about Long Jump: land");
}

TEST_CASE("tokenisation lowercases, splits punctuation and always keeps the end marker") {
  CHECK(split_words("Hello, World!") == std::vector<std::string>{"hello", ",", "world", "!"});
  const auto ids = vocab().tokenize("A video of action about Long Jump: run", 16);
  CHECK(ids.size() == 16);
  CHECK(ids.front() == Vocabulary::kStart);
  CHECK(vocab().token(ids[1]) == "a");
  CHECK(std::count(ids.begin(), ids.end(), Vocabulary::kEnd) == 1);
  const auto truncated = vocab().tokenize("a a a a a a a a a a a a a a a a a a a a", 6);
  CHECK(truncated.back() == Vocabulary::kEnd);
  CHECK(vocab().tokenize("zebra", 4)[1] == Vocabulary::kUnknown);
  CHECK(vocab().token(0) == "<pad>");
}

TEST_CASE("vocabulary files round-trip") {
  const auto path = std::filesystem::temp_directory_path() / "taskadapter_vocab_test.txt";
  vocab().save(path);
  CHECK(Vocabulary::load(path) == vocab());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(Vocabulary::load(path), DataError);
}

TEST_CASE("semantic features are unit rows in stage order") {
  Rng rng(1);
  ParameterStore store;
  SemanticEncoder enc(small_text(vocab()), store, rng);
  const Var f = enc.encode_class_semantics(prompts_for("Long Jump"), vocab()).features;
  CHECK(f.shape() == Shape{3, 4});
  for (std::size_t s = 0; s < 3; ++s) {
    double n = 0;
    for (std::size_t e = 0; e < 4; ++e) n += f.at(s * 4 + e) * f.at(s * 4 + e);
    CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("zero-initialised order adapters reproduce prompts encoded one at a time") {
  Rng rng(2);
  ParameterStore store;
  SemanticEncoder enc(small_text(vocab(), 2), store, rng);
  const auto tokens = tokenize_prompts(prompts_for("Long Jump"), vocab(), 16);
  const Var joint = enc.encode_tokens(tokens).features;
  const Var alone = enc.encode_frozen_baseline(tokens).features;
  CHECK(max_abs_diff(joint, alone) < 1e-12);
}

TEST_CASE("text blocks attend causally along tokens") {
  Rng rng(3);
  ParameterStore store;
  SemanticEncoder enc(small_text(vocab(), 1), store, rng);
  auto tokens = tokenize_prompts(prompts_for("Long Jump"), vocab(), 16);
  const Var before = enc.embed(tokens);
  const Var out1 = enc.text_block(before, 0);
  auto changed = tokens;
  for (auto& row : changed.ids) row[15] = 5;
  const Var out2 = enc.text_block(enc.embed(changed), 0);
  CHECK(max_abs_diff(slice(out1, 0, 0, 15), slice(out2, 0, 0, 15)) == 0.0);
  CHECK(max_abs_diff(out1, out2) > 0.0);
  CHECK_THROWS_AS(enc.order_adapter_block(Var::zeros({16, 2, 8}), 1), ContractError);
  CHECK_THROWS_AS(enc.order_adapter_block(Var::zeros({16, 3, 8}), 0), ContractError);
}

TEST_CASE("stage permutations permute features when the stage embedding is zero") {
  Rng rng(4);
  ParameterStore store;
  SemanticEncoder enc(small_text(vocab(), 2), store, rng);
  randomize_trainable(store, rng, 0.4);
  for (const auto& b : enc.blocks()) {
    if (b.order) for (auto& x : Var(b.order->stage_positional).mutable_values()) x = 0.0;
  }
  PromptSet p = prompts_for("Long Jump");
  const Var base = enc.encode_class_semantics(p, vocab()).features;
  PromptSet swapped = p;
  std::swap(swapped.prompts[0], swapped.prompts[2]);
  const Var perm = enc.encode_class_semantics(swapped, vocab()).features;
  CHECK(max_abs_diff(perm, permuted_rows(base, {2, 1, 0})) < 1e-12);

  for (const auto& b : enc.blocks()) {
    if (b.order) fill_random(b.order->stage_positional, rng, 0.5);
  }
  const Var base2 = enc.encode_class_semantics(p, vocab()).features;
  const Var perm2 = enc.encode_class_semantics(swapped, vocab()).features;
  CHECK(max_abs_diff(perm2, permuted_rows(base2, {2, 1, 0})) > 1e-6);
}

TEST_CASE("order adapter and stage embedding gradients match finite differences") {
  Rng rng(5);
  ParameterStore store;
  SemanticEncoder enc(small_text(vocab(), 1), store, rng);
  randomize_trainable(store, rng, 0.3);
  const auto tokens = tokenize_prompts(prompts_for("Long Jump"), vocab(), 16);
  const Var target = random_var({3, 4}, rng);
  auto loss = [&] { return sum_all(mul(enc.encode_tokens(tokens).features, target)); };
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    CAPTURE(e.name);
    CHECK(check_gradient(e.tensor, loss, &store).relative_error < 1e-5);
  }
}

TEST_CASE("paper-scale text config matches the 12-layer 512-wide transformer") {
  const TextConfig t = TextConfig::paper_scale(2);
  CHECK(t.width == 512);
  CHECK(t.depth == 12);
  CHECK(t.vocab_size == 49408);
  TextConfig bad = t;
  bad.adapted_layers = 13;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
