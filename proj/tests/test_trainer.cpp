// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "taskadapter/errors.hpp"
#include "test_support.hpp"

using namespace taskadapter;
using namespace tatest;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("taskadapter_" + name);
}

std::map<std::string, std::vector<double>> snapshot(const ParameterStore& store) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& e : store.entries()) out[e.name] = copy_values(e.tensor);
  return out;
}

}  // namespace

TEST_CASE("key = value configs parse, override and reject unknown keys") {
  const auto kv = parse_key_values("# comment\nways = 7\nvisual-adapter-layers=1 # trailing\n\nmetric = bimhm\n");
  CHECK(kv.at("ways") == "7");
  CHECK(kv.at("visual_adapter_layers") == "1");
  TrainConfig c;
  apply_key_values(c, kv);
  CHECK(c.episode.ways == 7);
  CHECK(c.model.visual.adapted_layers == 1);
  CHECK(c.model.metric == MetricKind::bimhm);
  CHECK_THROWS_AS(apply_key_values(c, {{"wayz", "5"}}), ConfigError);
  CHECK_THROWS_AS(apply_key_values(c, {{"ways", "five"}}), ConfigError);
  CHECK_THROWS_AS(apply_key_values(c, {{"fusion", "sum"}}), ConfigError);
  CHECK_THROWS_AS(parse_key_values("just words"), ConfigError);
  CHECK_THROWS_AS(load_config_file(temp_file("missing.conf")), ConfigError);
  TrainConfig bad = TrainConfig{}.normalized();
  bad.optimizer.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config text round-trips and the digest tracks every change") {
  TrainConfig c = tiny_config();
  c.optimizer.learning_rate = 0.0123456789;
  TrainConfig back;
  apply_key_values(back, parse_key_values(config_to_text(c)));
  CHECK(config_to_text(back) == config_to_text(c));
  CHECK(config_digest(back) == config_digest(c));
  CHECK(config_digest(c).size() == 16);
  std::set<std::string> digests{config_digest(c)};
  for (const auto& [key, value] : std::map<std::string, std::string>{
           {"ways", "4"}, {"seed", "8"}, {"learning_rate", "0.5"}, {"fusion", "raw"}, {"text_adapter_layers", "0"}}) {
    TrainConfig changed = c;
    apply_key_values(changed, {{key, value}});
    digests.insert(config_digest(changed));
  }
  CHECK(digests.size() == 6);
}

TEST_CASE("partition separates adapters from the frozen backbone") {
  TrainConfig c = tiny_config();
  auto model = build_model(c, template_corpus());
  const auto p = partition_parameters(*model);
  std::set<std::string> trainable(p.trainable.begin(), p.trainable.end());
  std::set<std::string> frozen(p.frozen.begin(), p.frozen.end());
  CHECK(trainable.size() + frozen.size() == model->parameters().entries().size());
  for (const auto& name : trainable) CHECK(frozen.count(name) == 0);
  for (const auto& name : trainable) {
    const bool adapter = name.find("adapter") != std::string::npos || name.find("stage_positional") != std::string::npos ||
                         name.rfind("alignment.", 0) == 0;
    CHECK(adapter);
  }

  c.model.visual.adapted_layers = 0;
  c.model.text.adapted_layers = 0;
  auto bare = build_model(c, template_corpus());
  for (const auto& name : partition_parameters(*bare).trainable) CHECK(name.rfind("alignment.", 0) == 0);
  c.model.visual.adapted_layers = 5;
  CHECK_THROWS_AS(build_model(c, template_corpus()), ConfigError);
}

TEST_CASE("analytic counts equal materialised counts") {
  for (const auto& c : {tiny_config(), TrainConfig{}.normalized()}) {
    auto model = build_model(c, template_corpus());
    const auto analytic = count_parameters(model->config());
    const auto measured = measure_parameters(model->parameters());
    CHECK(analytic.visual_backbone == measured.visual_backbone);
    CHECK(analytic.text_backbone == measured.text_backbone);
    CHECK(analytic.visual_adapters == measured.visual_adapters);
    CHECK(analytic.text_adapters == measured.text_adapters);
    CHECK(analytic.alignment == measured.alignment);
    CHECK(analytic.adapter_total() + analytic.alignment == model->parameters().trainable_count());
  }
}

TEST_CASE("paper-scale counts land near the published figures") {
  auto counts = [](std::size_t l, std::size_t m) {
    ModelConfig c;
    c.visual = VisualConfig::paper_scale(l);
    c.text = TextConfig::paper_scale(m);
    c.alignment.joint_dim = 512;
    return count_parameters(c);
  };
  auto near = [](double value, double target) { return std::abs(value - target) / target < 0.02; };
  CHECK(near(counts(12, 0).visual_adapters, 14.1e6));
  CHECK(near(counts(6, 0).visual_adapters, 7.2e6));
  CHECK(near(counts(2, 0).visual_adapters, 2.4e6));
  CHECK(near(counts(0, 2).text_adapters, 263e3));
  CHECK(near(counts(0, 6).text_adapters, 790e3));
  CHECK(near(counts(6, 2).adapter_total(), 7.5e6));
  CHECK(near(counts(2, 8).adapter_total(), 3.5e6));
  CHECK(near(counts(0, 0).backbone_total(), 149.6e6));
}

TEST_CASE("one training step moves adapters and nothing else") {
  TrainConfig c = tiny_config();
  c.train_episodes = 1;
  c.optimizer.learning_rate = 0.05;
  auto model = build_model(c, template_corpus());
  const auto before = snapshot(model->parameters());
  train(*model, c, training_dataset(c), template_corpus());
  bool any_adapter_changed = false;
  for (const auto& e : model->parameters().entries()) {
    const bool same = copy_values(e.tensor) == before.at(e.name);
    if (!e.trainable) CHECK(same);
    if (e.trainable && !same) any_adapter_changed = true;
  }
  CHECK(any_adapter_changed);
}

TEST_CASE("training on a single episode lowers its loss") {
  TrainConfig c = tiny_config();
  c.optimizer.learning_rate = 0.01;
  auto model = build_model(c, template_corpus());
  const Dataset data = training_dataset(c);
  const Episode e = sample_episode(data, template_corpus(), c.episode, 0);
  const auto r = train_on_episode(*model, c, e, template_corpus(), 50);
  CHECK(r.loss_curve.size() == 50);
  CHECK(r.loss_curve.back() < r.loss_curve.front());
}

TEST_CASE("identical configs train to identical checkpoints") {
  TrainConfig c = tiny_config();
  c.optimizer.learning_rate = 0.02;
  std::string first;
  for (int run = 0; run < 2; ++run) {
    auto model = build_model(c, template_corpus());
    train(*model, c, training_dataset(c), template_corpus());
    const auto json = checkpoint_to_json(make_checkpoint(*model, c, c.train_episodes));
    if (run == 0) first = json;
    else CHECK(json == first);
  }
}

TEST_CASE("evaluation is bounded, repeatable and independent of the worker count") {
  TrainConfig c = tiny_config();
  auto model = build_model(c, template_corpus());
  const Dataset data = evaluation_dataset(c);
  const EvalReport a = evaluate(*model, c, data, template_corpus());
  c.threads = 3;
  const EvalReport b = evaluate(*model, c, data, template_corpus());
  CHECK(a.same_results(b));
  CHECK(a.mean_accuracy >= 0.0);
  CHECK(a.mean_accuracy <= 1.0);
  CHECK(a.ci95 >= 0.0);
  CHECK(a.per_episode_accuracy.size() == c.eval_episodes);
  const EvalReport frozen = evaluate(*model, c, data, template_corpus(), EvalMode::frozen_baseline);
  CHECK(frozen.per_episode_accuracy == a.per_episode_accuracy);
}

TEST_CASE("checkpoints restore the adapted model exactly") {
  TrainConfig c = tiny_config();
  c.optimizer.learning_rate = 0.05;
  auto model = build_model(c, template_corpus());
  train(*model, c, training_dataset(c), template_corpus());
  const Dataset data = evaluation_dataset(c);
  const EvalReport before = evaluate(*model, c, data, template_corpus());
  const auto path = temp_file("checkpoint.json");
  save_checkpoint(make_checkpoint(*model, c, c.train_episodes), path);
  const CheckpointManifest m = load_checkpoint(path);
  CHECK(m.episodes_trained == c.train_episodes);
  CHECK(m.tensors.size() == partition_parameters(*model).trainable.size());
  auto restored = restore_model(m, template_corpus());
  CHECK(evaluate(*restored, m.config, data, template_corpus()).same_results(before));

  TrainConfig wider = c;
  wider.model.visual.adapted_layers = 2;
  auto other = build_model(wider, template_corpus());
  CHECK_THROWS_AS(load_trainable(*other, m), DataError);
  CheckpointManifest renamed = m;
  renamed.tensors.front().first = "visual.blocks.0.adapter_nowhere.down.w";
  CHECK_THROWS_AS(load_trainable(*model, renamed), DataError);
  std::ofstream(path) << "{ not json";
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("reports round-trip and plots render") {
  EvalReport r;
  r.config_digest = "0123456789abcdef";
  r.per_episode_accuracy = {0.2, 0.4, 1.0 / 3.0};
  std::tie(r.mean_accuracy, r.ci95) = mean_ci95(r.per_episode_accuracy);
  r.episodes = 3;
  r.loss_curve = {1.6, 1.2, 0.123456789012345678};
  const auto path = temp_file("report.json");
  const auto plot = temp_file("report.svg");
  emit_report(r, path, plot);
  CHECK(load_report(path).same_results(r));
  std::ifstream svg(plot);
  std::string text((std::istreambuf_iterator<char>(svg)), {});
  CHECK(text.find("<svg") == 0);
  CHECK(text.find("polyline") != std::string::npos);
  std::filesystem::remove(path);
  std::filesystem::remove(plot);
  CHECK_THROWS_AS(emit_report(r, "/nonexistent-dir/report.json"), IoError);
  CHECK_THROWS_AS(report_from_json("{}"), DataError);
  const auto [mean, ci] = mean_ci95({0.5});
  CHECK(mean == 0.5);
  CHECK(ci == 0.0);
}

TEST_CASE("non-finite training losses abort with a numeric error") {
  TrainConfig c = tiny_config();
  auto model = build_model(c, template_corpus());
  for (const auto& e : model->parameters().entries()) {
    if (e.name.find("adapter_mlp.up.b") != std::string::npos) {
      Var(e.tensor).mutable_values()[0] = std::numeric_limits<double>::infinity();
    }
  }
  CHECK_THROWS_AS(train(*model, c, training_dataset(c), template_corpus()), NumericError);
}
