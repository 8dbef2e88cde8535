// SPDX-License-Identifier: Apache-2.0
//
// taskadapter: train, evaluate, count parameters, sweep the way count, and
// run the temporal-attention ablation on the synthetic benchmark.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "taskadapter/errors.hpp"
#include "taskadapter/logging.hpp"
#include "taskadapter/trainer.hpp"

namespace ta = taskadapter;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonOptions {
  std::optional<int> ways, shots, queries, frames;
  std::optional<std::size_t> visual_layers, text_layers, episodes, train_episodes, threads;
  std::optional<std::uint64_t> seed;
  std::optional<double> learning_rate;
  std::optional<std::string> metric, fusion;
  std::string corpus;
  std::string config;
  bool verbose = false;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--ways", o.ways, "classes per episode");
  app->add_option("--shots", o.shots, "support videos per class");
  app->add_option("--queries", o.queries, "query videos per class");
  app->add_option("--frames", o.frames, "frames sampled per video");
  app->add_option("--visual-adapter-layers", o.visual_layers, "adapted visual blocks (L)");
  app->add_option("--text-adapter-layers", o.text_layers, "adapted text blocks (M)");
  app->add_option("--metric", o.metric, "visual metric")->check(CLI::IsMember({"proto", "bimhm"}));
  app->add_option("--fusion", o.fusion, "score fusion")->check(CLI::IsMember({"prob", "raw"}));
  app->add_option("--corpus", o.corpus, "sub-action corpus JSON (default: bundled template)");
  app->add_option("--episodes", o.episodes, "evaluation episodes");
  app->add_option("--train-episodes", o.train_episodes, "training episodes");
  app->add_option("--learning-rate", o.learning_rate, "SGD learning rate");
  app->add_option("--seed", o.seed, "experiment seed");
  app->add_option("--threads", o.threads, "evaluation workers (0 = all cores)");
  app->add_option("--config", o.config, "key = value config file; flags override it");
  app->add_flag("-v,--verbose", o.verbose, "print progress");
}

std::map<std::string, std::string> overrides(const CommonOptions& o) {
  std::map<std::string, std::string> m;
  auto put = [&m](const char* key, const auto& value) {
    if (value) {
      std::ostringstream ss;
      ss << std::setprecision(17) << *value;
      m[key] = ss.str();
    }
  };
  put("ways", o.ways);
  put("shots", o.shots);
  put("queries", o.queries);
  put("frames", o.frames);
  put("visual_adapter_layers", o.visual_layers);
  put("text_adapter_layers", o.text_layers);
  put("eval_episodes", o.episodes);
  put("train_episodes", o.train_episodes);
  put("learning_rate", o.learning_rate);
  put("seed", o.seed);
  put("threads", o.threads);
  put("metric", o.metric);
  put("fusion", o.fusion);
  return m;
}

ta::TrainConfig resolve_config(const CommonOptions& o) {
  ta::TrainConfig config = o.config.empty() ? ta::TrainConfig{}.normalized() : ta::load_config_file(o.config);
  ta::apply_key_values(config, overrides(o));
  config.validate();
  return config;
}

ta::Corpus resolve_corpus(const CommonOptions& o) {
  return o.corpus.empty() ? ta::template_corpus() : ta::load_corpus(o.corpus);
}

void print_report(const std::string& label, const ta::EvalReport& r) {
  std::cout << std::fixed << std::setprecision(4) << label << ": accuracy " << r.mean_accuracy << " +/- " << r.ci95
            << " over " << r.episodes << " episodes (" << std::setprecision(1) << r.wall_seconds << " s)\n";
}

fs::path plot_path(const fs::path& report) {
  fs::path p = report;
  return p.replace_extension(".svg");
}

// ---- subcommands -----------------------------------------------------------------

int run_train(const CommonOptions& o, const std::string& checkpoint, const std::string& report) {
  const auto config = resolve_config(o);
  const auto corpus = resolve_corpus(o);
  auto model = ta::build_model(config, corpus);
  const auto data = ta::training_dataset(config);
  const auto result = ta::train(*model, config, data, corpus, [&](const ta::TrainProgress& p) {
    if (o.verbose && (p.episode % 50 == 0 || p.episode + 1 == config.train_episodes)) {
      std::cout << "episode " << p.episode << " loss " << p.loss << '\n';
    }
  });
  ta::save_checkpoint(ta::make_checkpoint(*model, config, result.episodes), checkpoint);
  std::cout << "trained " << result.episodes << " episodes in " << std::fixed << std::setprecision(1)
            << result.wall_seconds << " s; checkpoint " << checkpoint << '\n';
  if (!report.empty()) {
    auto r = ta::evaluate(*model, config, ta::evaluation_dataset(config), corpus);
    r.loss_curve = result.loss_curve;
    ta::emit_report(r, report, plot_path(report));
    print_report("held-out", r);
  }
  return 0;
}

int run_eval(const CommonOptions& o, const std::string& checkpoint, const std::string& report, bool baseline) {
  const auto corpus = resolve_corpus(o);
  std::unique_ptr<ta::TaskAdapterModel> model;
  ta::TrainConfig config;
  if (!checkpoint.empty()) {
    const auto manifest = ta::load_checkpoint(checkpoint);
    config = manifest.config;
    std::map<std::string, std::string> episode_keys;
    for (const auto& [key, value] : overrides(o)) {
      if (key == "ways" || key == "shots" || key == "queries" || key == "eval_episodes" || key == "threads" ||
          key == "metric" || key == "fusion") {
        episode_keys[key] = value;
      } else {
        throw ta::ConfigError("--" + key + " cannot change a trained checkpoint's model");
      }
    }
    ta::apply_key_values(config, episode_keys);
    model = ta::build_model(config, corpus);
    ta::load_trainable(*model, manifest);
  } else {
    config = resolve_config(o);
    model = ta::build_model(config, corpus);
  }
  const auto mode = baseline ? ta::EvalMode::frozen_baseline : ta::EvalMode::adapted;
  const auto r = ta::evaluate(*model, config, ta::evaluation_dataset(config), corpus, mode);
  print_report(baseline ? "frozen baseline" : "adapted", r);
  if (!report.empty()) ta::emit_report(r, report, plot_path(report));
  return 0;
}

void print_counts(const std::string& label, const ta::ParameterCountReport& r) {
  std::cout << std::left << std::setw(28) << label << std::right << " visual adapters " << std::setw(11)
            << r.visual_adapters << "  text adapters " << std::setw(9) << r.text_adapters << "  total "
            << std::setw(11) << r.adapter_total() << "  alignment " << std::setw(9) << r.alignment
            << "  backbone " << r.backbone_total() << '\n';
}

int run_count(const CommonOptions& o, bool paper) {
  if (paper) {
    struct Row {
      const char* label;
      std::size_t visual, text;
    };
    const Row rows[] = {{"visual all (L=12)", 12, 0}, {"visual top-6", 6, 0},   {"visual top-2", 2, 0},
                        {"text top-2", 0, 2},         {"text top-6", 0, 6},     {"text all (M=12)", 0, 12},
                        {"L=6, M=2", 6, 2},           {"L=2, M=8", 2, 8}};
    for (const auto& row : rows) {
      ta::ModelConfig m;
      m.visual = ta::VisualConfig::paper_scale(row.visual);
      m.text = ta::TextConfig::paper_scale(row.text);
      m.alignment.joint_dim = 512;
      print_counts(row.label, ta::count_parameters(m));
    }
    return 0;
  }
  const auto config = resolve_config(o);
  auto model = ta::build_model(config, resolve_corpus(o));
  print_counts("analytic", ta::count_parameters(model->config()));
  print_counts("materialised", ta::measure_parameters(model->parameters()));
  return 0;
}

int run_sweep(const CommonOptions& o, const std::string& checkpoint, const std::string& report) {
  const auto corpus = resolve_corpus(o);
  ta::TrainConfig config = checkpoint.empty() ? resolve_config(o) : ta::load_checkpoint(checkpoint).config;
  auto model = ta::build_model(config, corpus);
  if (!checkpoint.empty()) ta::load_trainable(*model, ta::load_checkpoint(checkpoint));
  if (o.episodes) config.eval_episodes = *o.episodes;
  if (o.threads) config.threads = *o.threads;
  const auto data = ta::evaluation_dataset(config);
  nlohmann::json rows = nlohmann::json::array();
  for (int n = 5; n <= 10; ++n) {
    ta::EpisodeConfig episode = config.episode;
    episode.ways = n;
    const auto r = ta::evaluate(*model, config, episode, data, corpus);
    print_report(std::to_string(n) + "-way", r);
    rows.push_back({{"ways", n}, {"mean_accuracy", r.mean_accuracy}, {"ci95", r.ci95}, {"episodes", r.episodes}});
  }
  if (!report.empty()) {
    std::ofstream out(report);
    if (!out) throw ta::IoError("cannot write " + report);
    out << rows.dump(2) << '\n';
  }
  return 0;
}

int run_ablate(const CommonOptions& o, const std::string& report) {
  const auto base = resolve_config(o);
  const auto corpus = resolve_corpus(o);
  if (base.model.visual.adapted_layers == 0) throw ta::ConfigError("ablation needs --visual-adapter-layers >= 1");
  const auto train_data = ta::training_dataset(base);
  const auto eval_data = ta::evaluation_dataset(base);
  ta::EpisodeConfig reversal = base.episode;
  reversal.ways = 4;
  reversal.class_pool = {0, 1, 2, 3};
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t layers : {std::size_t{0}, base.model.visual.adapted_layers}) {
    ta::TrainConfig config = base;
    config.model.visual.adapted_layers = layers;
    auto model = ta::build_model(config, corpus);
    ta::train(*model, config, train_data, corpus);
    const auto r = ta::evaluate(*model, config, reversal, eval_data, corpus);
    print_report("L=" + std::to_string(layers) + " reversal pairs", r);
    rows.push_back({{"visual_adapter_layers", layers}, {"mean_accuracy", r.mean_accuracy}, {"ci95", r.ci95}});
  }
  if (!report.empty()) {
    std::ofstream out(report);
    if (!out) throw ta::IoError("cannot write " + report);
    out << rows.dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot action recognition with task adapters on a synthetic video benchmark"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string checkpoint, report;
  bool baseline = false, paper = false;

  auto* train = app.add_subcommand("train", "train adapters and write a checkpoint");
  add_common(train, common);
  train->add_option("--checkpoint", checkpoint, "output checkpoint path")->required();
  train->add_option("--report", report, "evaluate after training and write a JSON report (+ SVG plot)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (or the untrained model)");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
  eval->add_option("--report", report, "JSON report path (+ SVG plot)");
  eval->add_flag("--baseline", baseline, "score with the frozen per-frame pipeline");

  auto* count = app.add_subcommand("count-params", "report parameter counts");
  add_common(count, common);
  count->add_flag("--paper", paper, "closed-form counts at ViT-B/16 + 12-layer text scale");

  auto* sweep = app.add_subcommand("sweep-nway", "accuracy for 5..10-way episodes");
  add_common(sweep, common);
  sweep->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
  sweep->add_option("--report", report, "JSON output path");

  auto* ablate = app.add_subcommand("ablate", "L=0 versus L>=1 on reversal-pair episodes");
  add_common(ablate, common);
  ablate->add_option("--report", report, "JSON output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (common.verbose) ta::set_log_level(ta::LogLevel::info);
    if (*train) return run_train(common, checkpoint, report);
    if (*eval) return run_eval(common, checkpoint, report, baseline);
    if (*count) return run_count(common, paper);
    if (*sweep) return run_sweep(common, checkpoint, report);
    if (*ablate) return run_ablate(common, report);
  } catch (const ta::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ta::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ta::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitData;
  } catch (const ta::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
