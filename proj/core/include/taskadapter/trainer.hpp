// SPDX-License-Identifier: Apache-2.0
//
// Parameter partitioning, analytic parameter counts, the episodic training
// loop, multi-episode evaluation, checkpoints, reports, and key=value
// configuration files.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "taskadapter/episodic_data.hpp"
#include "taskadapter/model.hpp"

namespace taskadapter {

struct OptimizerConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
};

struct TrainConfig {
  EpisodeConfig episode;
  ModelConfig model;
  OptimizerConfig optimizer;
  int videos_per_class = 24;
  std::size_t train_episodes = 200;
  std::size_t eval_episodes = 500;
  std::uint64_t seed = 0;
  /// Evaluation workers; 0 picks the hardware concurrency.
  std::size_t threads = 0;

  /// Copies shared values (frames, seeds) into the nested configs.
  TrainConfig normalized() const;
  void validate() const;
};

// ---- configuration text ------------------------------------------------------

/// Parses "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> parse_key_values(const std::string& text);

/// Applies recognised keys; unknown keys and malformed values are configuration errors.
void apply_key_values(TrainConfig& config, const std::map<std::string, std::string>& values);

TrainConfig load_config_file(const std::filesystem::path& path);

/// Canonical key=value text, one key per line in sorted order.
std::string config_to_text(const TrainConfig& config);

/// FNV-1a of the canonical text, as 16 hex digits.
std::string config_digest(const TrainConfig& config);

// ---- parameters --------------------------------------------------------------

struct ParameterPartition {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
};

/// Splits the registry into trainable and frozen names and checks that
/// adapters only live in the configured blocks.
ParameterPartition partition_parameters(const TaskAdapterModel& model);

struct ParameterCountReport {
  std::size_t visual_backbone = 0;
  std::size_t text_backbone = 0;
  std::size_t visual_adapters = 0;
  std::size_t text_adapters = 0;  // order adapters plus stage positional embeddings
  std::size_t alignment = 0;

  std::size_t backbone_total() const { return visual_backbone + text_backbone; }
  /// Visual plus text adapter parameters; alignment is reported on its own.
  std::size_t adapter_total() const { return visual_adapters + text_adapters; }
};

/// Closed-form counts; nothing is allocated.
ParameterCountReport count_parameters(const ModelConfig& config);

/// Counts taken from a materialised parameter registry.
ParameterCountReport measure_parameters(const ParameterStore& store);

// ---- training ----------------------------------------------------------------

struct TrainProgress {
  std::size_t episode = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<double> loss_curve;
  std::size_t episodes = 0;
  double wall_seconds = 0.0;
};

using ProgressCallback = std::function<void(const TrainProgress&)>;

/// Builds the model for a config; the vocabulary comes from the corpus.
std::unique_ptr<TaskAdapterModel> build_model(const TrainConfig& config, const Corpus& corpus);

/// Training and evaluation splits of the synthetic benchmark.
Dataset training_dataset(const TrainConfig& config);
Dataset evaluation_dataset(const TrainConfig& config);

/// SGD with momentum on trainable tensors only, one step per episode.
TrainResult train(TaskAdapterModel& model, const TrainConfig& config, const Dataset& data, const Corpus& corpus,
                  const ProgressCallback& progress = {});

/// Trains repeatedly on a single fixed episode.
TrainResult train_on_episode(TaskAdapterModel& model, const TrainConfig& config, const Episode& episode,
                             const Corpus& corpus, std::size_t steps);

// ---- evaluation --------------------------------------------------------------

enum class EvalMode { adapted, frozen_baseline };

struct EvalReport {
  int version = 1;
  std::string config_digest;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;
  std::size_t episodes = 0;
  std::vector<double> per_episode_accuracy;
  std::vector<double> loss_curve;
  double wall_seconds = 0.0;

  /// Equality of everything except wall time.
  bool same_results(const EvalReport& other) const;
};

/// Mean and 1.96 standard errors.
std::pair<double, double> mean_ci95(const std::vector<double>& values);

/// Accuracy over `config.eval_episodes` episodes keyed by (episode seed, index).
/// `episode` overrides the episode sampling settings (for example a class pool).
EvalReport evaluate(const TaskAdapterModel& model, const TrainConfig& config, const Dataset& data,
                    const Corpus& corpus, EvalMode mode = EvalMode::adapted);
EvalReport evaluate(const TaskAdapterModel& model, const TrainConfig& config, const EpisodeConfig& episode,
                    const Dataset& data, const Corpus& corpus, EvalMode mode = EvalMode::adapted);

// ---- persistence ---------------------------------------------------------------

struct CheckpointManifest {
  int version = 1;
  TrainConfig config;
  std::uint64_t seed = 0;
  std::size_t episodes_trained = 0;
  std::vector<std::pair<std::string, Var>> tensors;  // trainable only, registry order
};

CheckpointManifest make_checkpoint(const TaskAdapterModel& model, const TrainConfig& config,
                                   std::size_t episodes_trained);
std::string checkpoint_to_json(const CheckpointManifest& checkpoint);
void save_checkpoint(const CheckpointManifest& checkpoint, const std::filesystem::path& path);
CheckpointManifest load_checkpoint(const std::filesystem::path& path);

/// Rebuilds the frozen model from the stored config and copies the trainable tensors in.
std::unique_ptr<TaskAdapterModel> restore_model(const CheckpointManifest& checkpoint, const Corpus& corpus);

/// Copies checkpoint tensors into an existing model; shape or name mismatch is a data error.
void load_trainable(TaskAdapterModel& model, const CheckpointManifest& checkpoint);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

/// Writes `path` (JSON) and, when `plot` is non-empty, an SVG of the loss and accuracy curves.
void emit_report(const EvalReport& report, const std::filesystem::path& path, const std::filesystem::path& plot = {});
EvalReport load_report(const std::filesystem::path& path);

std::string render_curves_svg(const std::vector<double>& loss_curve, const std::vector<double>& accuracy);

}  // namespace taskadapter
