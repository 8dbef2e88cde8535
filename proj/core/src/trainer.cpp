// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "taskadapter/errors.hpp"
#include "taskadapter/logging.hpp"

namespace taskadapter {

namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

constexpr int kCheckpointVersion = 1;
constexpr int kReportVersion = 1;
constexpr std::uint64_t kEvalSeedOffset = 1;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw ContractError("cannot format number");
  return std::string(buf, end);
}

template <typename T>
T parse_unsigned(const std::string& key, const std::string& value) {
  T out{};
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || end != value.data() + value.size()) {
    throw ConfigError("invalid value '" + value + "' for " + key + ": expected a non-negative integer");
  }
  return out;
}

int parse_int(const std::string& key, const std::string& value) {
  int out = 0;
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || end != value.data() + value.size()) {
    throw ConfigError("invalid value '" + value + "' for " + key + ": expected an integer");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || end != value.data() + value.size() || !std::isfinite(out)) {
    throw ConfigError("invalid value '" + value + "' for " + key + ": expected a finite number");
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_int(key, item));
  }
  return out;
}

const char* metric_name(MetricKind m) { return m == MetricKind::proto ? "proto" : "bimhm"; }
const char* fusion_name(FusionMode m) { return m == FusionMode::probability ? "prob" : "raw"; }

const char* placement_name(TaskMsaPlacement p) {
  switch (p) {
    case TaskMsaPlacement::after_temporal_spatial: return "after";
    case TaskMsaPlacement::between_temporal_spatial: return "between";
    case TaskMsaPlacement::before_temporal_spatial: return "before";
  }
  return "after";
}

std::map<std::string, std::string> config_entries(const TrainConfig& c) {
  const auto& v = c.model.visual;
  const auto& t = c.model.text;
  std::string pool;
  for (std::size_t i = 0; i < c.episode.class_pool.size(); ++i) {
    pool += (i ? "," : "") + std::to_string(c.episode.class_pool[i]);
  }
  return {
      {"ways", std::to_string(c.episode.ways)},
      {"shots", std::to_string(c.episode.shots)},
      {"queries", std::to_string(c.episode.queries_per_class)},
      {"frames", std::to_string(c.episode.frames)},
      {"class_pool", pool},
      {"seed", std::to_string(c.seed)},
      {"train_episodes", std::to_string(c.train_episodes)},
      {"eval_episodes", std::to_string(c.eval_episodes)},
      {"videos_per_class", std::to_string(c.videos_per_class)},
      {"learning_rate", format_double(c.optimizer.learning_rate)},
      {"momentum", format_double(c.optimizer.momentum)},
      {"metric", metric_name(c.model.metric)},
      {"fusion", fusion_name(c.model.fusion)},
      {"tau_visual", format_double(c.model.tau_visual)},
      {"tau_text", format_double(c.model.tau_text)},
      {"visual_adapter_layers", std::to_string(v.adapted_layers)},
      {"text_adapter_layers", std::to_string(t.adapted_layers)},
      {"alignment_layers", std::to_string(c.model.alignment.layers)},
      {"alignment_heads", std::to_string(c.model.alignment.heads)},
      {"placement", placement_name(v.placement)},
      {"query_mode", v.query_mode == QueryMode::joint ? "joint" : "independent"},
      {"image_size", std::to_string(v.image_size)},
      {"patch_size", std::to_string(v.patch_size)},
      {"visual_width", std::to_string(v.width)},
      {"visual_depth", std::to_string(v.depth)},
      {"visual_heads", std::to_string(v.heads)},
      {"joint_dim", std::to_string(v.joint_dim)},
      {"bottleneck_ratio", std::to_string(v.bottleneck_ratio)},
      {"text_context", std::to_string(t.context_length)},
      {"text_width", std::to_string(t.width)},
      {"text_depth", std::to_string(t.depth)},
      {"text_heads", std::to_string(t.heads)},
  };
}

std::string norm_report(const ParameterStore& store) {
  std::ostringstream out;
  out << std::setprecision(6);
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    double sq = 0.0;
    for (double x : e.tensor.values()) sq += x * x;
    out << "\n  " << e.name << " |w|=" << std::sqrt(sq);
  }
  return out.str();
}

json tensor_to_json(const std::string& name, const Var& tensor) {
  json shape = json::array();
  for (auto d : tensor.shape()) shape.push_back(d);
  return json{{"name", name}, {"shape", shape}, {"values", std::vector<double>(tensor.values().begin(), tensor.values().end())}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---- configuration -------------------------------------------------------------

TrainConfig TrainConfig::normalized() const {
  TrainConfig c = *this;
  c.model.visual.frames = static_cast<std::size_t>(std::max(c.episode.frames, 0));
  c.model.alignment.joint_dim = c.model.visual.joint_dim;
  c.model.text.joint_dim = c.model.visual.joint_dim;
  c.model.text.bottleneck_ratio = c.model.visual.bottleneck_ratio;
  c.model.init_seed = c.seed;
  c.episode.seed = c.seed;
  return c;
}

void TrainConfig::validate() const {
  episode.validate();
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (optimizer.momentum < 0.0 || optimizer.momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (videos_per_class < episode.shots + episode.queries_per_class) {
    throw ConfigError("videos_per_class must cover shots + queries");
  }
  if (static_cast<std::size_t>(episode.frames) != model.visual.frames) {
    throw ConfigError("episode frames and encoder frames differ");
  }
  ModelConfig m = model;
  if (m.text.vocab_size == 0) m.text.vocab_size = 4;
  m.validate();
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + " is not key = value: " + line);
    }
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '-', '_');
    if (key.empty()) throw ConfigError("config line " + std::to_string(number) + " has an empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

void apply_key_values(TrainConfig& c, const std::map<std::string, std::string>& values) {
  auto& v = c.model.visual;
  auto& t = c.model.text;
  for (const auto& [key, value] : values) {
    if (key == "ways") c.episode.ways = parse_int(key, value);
    else if (key == "shots") c.episode.shots = parse_int(key, value);
    else if (key == "queries") c.episode.queries_per_class = parse_int(key, value);
    else if (key == "frames") c.episode.frames = parse_int(key, value);
    else if (key == "class_pool") c.episode.class_pool = parse_int_list(key, value);
    else if (key == "seed") c.seed = parse_unsigned<std::uint64_t>(key, value);
    else if (key == "train_episodes") c.train_episodes = parse_unsigned<std::size_t>(key, value);
    else if (key == "eval_episodes" || key == "episodes") c.eval_episodes = parse_unsigned<std::size_t>(key, value);
    else if (key == "videos_per_class") c.videos_per_class = parse_int(key, value);
    else if (key == "threads") c.threads = parse_unsigned<std::size_t>(key, value);
    else if (key == "learning_rate") c.optimizer.learning_rate = parse_double(key, value);
    else if (key == "momentum") c.optimizer.momentum = parse_double(key, value);
    else if (key == "tau_visual") c.model.tau_visual = parse_double(key, value);
    else if (key == "tau_text") c.model.tau_text = parse_double(key, value);
    else if (key == "metric") {
      if (value == "proto") c.model.metric = MetricKind::proto;
      else if (value == "bimhm") c.model.metric = MetricKind::bimhm;
      else throw ConfigError("metric must be proto or bimhm, got '" + value + "'");
    } else if (key == "fusion") {
      if (value == "prob") c.model.fusion = FusionMode::probability;
      else if (value == "raw") c.model.fusion = FusionMode::raw;
      else throw ConfigError("fusion must be prob or raw, got '" + value + "'");
    } else if (key == "placement") {
      if (value == "after") v.placement = TaskMsaPlacement::after_temporal_spatial;
      else if (value == "between") v.placement = TaskMsaPlacement::between_temporal_spatial;
      else if (value == "before") v.placement = TaskMsaPlacement::before_temporal_spatial;
      else throw ConfigError("placement must be after, between or before, got '" + value + "'");
    } else if (key == "query_mode") {
      if (value == "joint") v.query_mode = QueryMode::joint;
      else if (value == "independent") v.query_mode = QueryMode::independent;
      else throw ConfigError("query_mode must be joint or independent, got '" + value + "'");
    }
    else if (key == "visual_adapter_layers") v.adapted_layers = parse_unsigned<std::size_t>(key, value);
    else if (key == "text_adapter_layers") t.adapted_layers = parse_unsigned<std::size_t>(key, value);
    else if (key == "alignment_layers") c.model.alignment.layers = parse_unsigned<std::size_t>(key, value);
    else if (key == "alignment_heads") c.model.alignment.heads = parse_unsigned<std::size_t>(key, value);
    else if (key == "image_size") v.image_size = parse_unsigned<std::size_t>(key, value);
    else if (key == "patch_size") v.patch_size = parse_unsigned<std::size_t>(key, value);
    else if (key == "visual_width") v.width = parse_unsigned<std::size_t>(key, value);
    else if (key == "visual_depth") v.depth = parse_unsigned<std::size_t>(key, value);
    else if (key == "visual_heads") v.heads = parse_unsigned<std::size_t>(key, value);
    else if (key == "joint_dim") v.joint_dim = parse_unsigned<std::size_t>(key, value);
    else if (key == "bottleneck_ratio") v.bottleneck_ratio = parse_unsigned<std::size_t>(key, value);
    else if (key == "text_context") t.context_length = parse_unsigned<std::size_t>(key, value);
    else if (key == "text_width") t.width = parse_unsigned<std::size_t>(key, value);
    else if (key == "text_depth") t.depth = parse_unsigned<std::size_t>(key, value);
    else if (key == "text_heads") t.heads = parse_unsigned<std::size_t>(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c = c.normalized();
}

TrainConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  TrainConfig config;
  apply_key_values(config, parse_key_values(ss.str()));
  return config;
}

std::string config_to_text(const TrainConfig& config) {
  std::string out;
  for (const auto& [key, value] : config_entries(config.normalized())) out += key + " = " + value + "\n";
  return out;
}

std::string config_digest(const TrainConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_to_text(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

// ---- parameters ------------------------------------------------------------------

ParameterPartition partition_parameters(const TaskAdapterModel& model) {
  const auto& cfg = model.config();
  if (cfg.visual.adapted_layers > cfg.visual.depth || cfg.text.adapted_layers > cfg.text.depth) {
    throw ConfigError("adapter layer count exceeds the encoder depth");
  }
  const std::size_t first_visual = cfg.visual.depth - cfg.visual.adapted_layers;
  const std::size_t first_text = cfg.text.depth - cfg.text.adapted_layers;
  auto block_of = [](const std::string& name, const std::string& prefix) -> std::size_t {
    const auto rest = name.substr(prefix.size());
    return static_cast<std::size_t>(std::stoul(rest.substr(0, rest.find('.'))));
  };
  ParameterPartition partition;
  for (const auto& e : model.parameters().entries()) {
    const bool adapter_group = e.group.rfind("visual.adapter", 0) == 0 || e.group.rfind("text.adapter", 0) == 0 ||
                               e.group == "text.stage_positional" || e.group == "alignment";
    if (e.trainable != adapter_group) {
      throw ContractError("parameter " + e.name + " has trainable=" + (e.trainable ? "true" : "false") +
                          " but belongs to group " + e.group);
    }
    if (e.group.rfind("visual.adapter", 0) == 0 && block_of(e.name, "visual.blocks.") < first_visual) {
      throw ContractError("visual adapter " + e.name + " lies outside the last L blocks");
    }
    if (e.group.rfind("text.", 0) == 0 && e.trainable && block_of(e.name, "text.blocks.") < first_text) {
      throw ContractError("text adapter " + e.name + " lies outside the last M blocks");
    }
    (e.trainable ? partition.trainable : partition.frozen).push_back(e.name);
  }
  return partition;
}

ParameterCountReport count_parameters(const ModelConfig& config) {
  ParameterCountReport r;
  const auto& v = config.visual;
  const auto& t = config.text;
  auto block = [](std::size_t d, std::size_t mlp_ratio) {
    const std::size_t attention = 4 * (d * d + d);
    const std::size_t mlp = d * d * mlp_ratio + d * mlp_ratio + d * mlp_ratio * d + d;
    return 2 * d + attention + 2 * d + mlp;
  };
  const std::size_t d = v.width;
  r.visual_backbone = 3 * v.patch_size * v.patch_size * d + d + (v.patch_count() + 1) * d + 2 * d +
                      v.depth * block(d, v.mlp_ratio) + 2 * d + d * v.joint_dim;
  const std::size_t dt = t.width;
  r.text_backbone = t.vocab_size * dt + t.context_length * dt + t.depth * block(dt, t.mlp_ratio) + 2 * dt +
                    dt * t.joint_dim;
  r.visual_adapters = v.adapted_layers * 4 * adapter_parameter_count(d, v.bottleneck_ratio);
  r.text_adapters = t.adapted_layers * (adapter_parameter_count(dt, t.bottleneck_ratio) + kStageCount * dt);
  const std::size_t dj = config.alignment.joint_dim;
  r.alignment = config.alignment.layers * 4 * (dj * dj + dj);
  return r;
}

ParameterCountReport measure_parameters(const ParameterStore& store) {
  ParameterCountReport r;
  for (const auto& e : store.entries()) {
    const std::size_t n = e.tensor.size();
    if (e.group == "visual.backbone") r.visual_backbone += n;
    else if (e.group == "text.backbone") r.text_backbone += n;
    else if (e.group.rfind("visual.adapter", 0) == 0) r.visual_adapters += n;
    else if (e.group == "text.adapter.order" || e.group == "text.stage_positional") r.text_adapters += n;
    else if (e.group == "alignment") r.alignment += n;
    else throw ContractError("parameter " + e.name + " has unknown group " + e.group);
  }
  return r;
}

// ---- training ------------------------------------------------------------------------

std::unique_ptr<TaskAdapterModel> build_model(const TrainConfig& config, const Corpus& corpus) {
  const TrainConfig c = config.normalized();
  c.validate();
  return std::make_unique<TaskAdapterModel>(c.model, Vocabulary::from_corpus(corpus));
}

Dataset training_dataset(const TrainConfig& config) {
  return generate_synthetic_dataset(default_class_specs(), config.videos_per_class, config.seed);
}

Dataset evaluation_dataset(const TrainConfig& config) {
  return generate_synthetic_dataset(default_class_specs(), config.videos_per_class, config.seed + kEvalSeedOffset);
}

namespace {

class MomentumSgd {
 public:
  MomentumSgd(ParameterStore& store, const OptimizerConfig& config) : store_(store), config_(config) {
    for (const auto& e : store.entries()) {
      if (e.trainable) velocity_.emplace_back(e.tensor.size(), 0.0);
    }
  }

  /// Returns the name of the first trainable tensor left non-finite, or empty.
  std::string step() {
    std::string bad;
    std::size_t k = 0;
    for (const auto& e : store_.entries()) {
      if (!e.trainable) continue;
      auto& vel = velocity_[k++];
      Var tensor = e.tensor;
      if (!tensor.has_grad()) {
        for (auto& x : vel) x *= config_.momentum;
      } else {
        const auto g = tensor.grad();
        for (std::size_t i = 0; i < vel.size(); ++i) vel[i] = config_.momentum * vel[i] + g[i];
      }
      auto w = tensor.mutable_values();
      for (std::size_t i = 0; i < vel.size(); ++i) {
        w[i] -= config_.learning_rate * vel[i];
        if (bad.empty() && !std::isfinite(w[i])) bad = e.name;
      }
    }
    store_.zero_grads();
    return bad;
  }

 private:
  ParameterStore& store_;
  OptimizerConfig config_;
  std::vector<std::vector<double>> velocity_;
};

double step_on(TaskAdapterModel& model, MomentumSgd& optimizer, const Episode& episode, const Corpus& corpus,
               std::uint64_t seed, std::size_t index) {
  const EpisodeOutputs out = model.forward(episode, corpus);
  const double loss = out.loss.item();
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite loss at training episode " + std::to_string(index) + " (episode seed " +
                       std::to_string(seed) + ", index " + std::to_string(index) + "); trainable norms:" +
                       norm_report(model.parameters()));
  }
  out.loss.backward();
  const std::string bad = optimizer.step();
  if (!bad.empty()) {
    throw NumericError("non-finite value in " + bad + " after training episode " + std::to_string(index) +
                       " (episode seed " + std::to_string(seed) + "); check the learning rate");
  }
  return loss;
}

}  // namespace

TrainResult train(TaskAdapterModel& model, const TrainConfig& config, const Dataset& data, const Corpus& corpus,
                  const ProgressCallback& progress) {
  const TrainConfig c = config.normalized();
  c.validate();
  const auto start = Clock::now();
  MomentumSgd optimizer(model.parameters(), c.optimizer);
  TrainResult result;
  for (std::size_t i = 0; i < c.train_episodes; ++i) {
    const Episode episode = sample_episode(data, corpus, c.episode, i);
    const double loss = step_on(model, optimizer, episode, corpus, c.episode.seed, i);
    result.loss_curve.push_back(loss);
    if (progress) progress({i, loss});
  }
  result.episodes = c.train_episodes;
  result.wall_seconds = seconds_since(start);
  return result;
}

TrainResult train_on_episode(TaskAdapterModel& model, const TrainConfig& config, const Episode& episode,
                             const Corpus& corpus, std::size_t steps) {
  const TrainConfig c = config.normalized();
  const auto start = Clock::now();
  MomentumSgd optimizer(model.parameters(), c.optimizer);
  TrainResult result;
  for (std::size_t i = 0; i < steps; ++i) {
    result.loss_curve.push_back(step_on(model, optimizer, episode, corpus, c.episode.seed, i));
  }
  result.episodes = steps;
  result.wall_seconds = seconds_since(start);
  return result;
}

// ---- evaluation ----------------------------------------------------------------------

bool EvalReport::same_results(const EvalReport& o) const {
  return version == o.version && config_digest == o.config_digest && mean_accuracy == o.mean_accuracy &&
         ci95 == o.ci95 && episodes == o.episodes && per_episode_accuracy == o.per_episode_accuracy &&
         loss_curve == o.loss_curve;
}

std::pair<double, double> mean_ci95(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / n;
  if (values.size() < 2) return {mean, 0.0};
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  const double stddev = std::sqrt(sq / (n - 1.0));
  return {mean, 1.96 * stddev / std::sqrt(n)};
}

EvalReport evaluate(const TaskAdapterModel& model, const TrainConfig& config, const Dataset& data,
                    const Corpus& corpus, EvalMode mode) {
  return evaluate(model, config, config.normalized().episode, data, corpus, mode);
}

EvalReport evaluate(const TaskAdapterModel& model, const TrainConfig& config, const EpisodeConfig& episode_config,
                    const Dataset& data, const Corpus& corpus, EvalMode mode) {
  const TrainConfig c = config.normalized();
  EpisodeConfig ec = episode_config;
  ec.seed = c.seed + kEvalSeedOffset;
  ec.validate();
  const auto start = Clock::now();
  const std::size_t count = c.eval_episodes;

  std::map<std::string, Var> semantics;
  if (mode == EvalMode::adapted) {
    NoGradGuard guard;
    std::vector<std::string> names;
    for (int id : data.class_ids()) names.push_back(data.spec(id).name);
    const Var all = model.class_semantics(names, corpus);
    for (std::size_t i = 0; i < names.size(); ++i) semantics[names[i]] = select(all, 0, i);
  }

  std::vector<double> accuracies(count, 0.0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    NoGradGuard guard;
    try {
      for (std::size_t i = next++; i < count; i = next++) {
        const Episode episode = sample_episode(data, corpus, ec, i);
        EpisodeOutputs out;
        if (mode == EvalMode::frozen_baseline) {
          out = model.forward_frozen_baseline(episode, corpus);
        } else {
          std::vector<Var> rows, support, query;
          for (const auto& name : episode.class_names) rows.push_back(semantics.at(name));
          for (const auto& v : episode.support) support.push_back(video_tensor(v.video));
          for (const auto& v : episode.query) query.push_back(video_tensor(v.video));
          out = model.forward(support, episode.support_labels(), query, episode.query_labels(), stack(rows));
        }
        accuracies[i] = accuracy(out.fused.probabilities, episode.query_labels());
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = count;
    }
  };
  std::size_t workers = c.threads ? c.threads : std::max(1u, std::thread::hardware_concurrency());
  workers = std::max<std::size_t>(1, std::min(workers, count));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);

  EvalReport report;
  report.version = kReportVersion;
  report.config_digest = config_digest(c);
  report.episodes = count;
  report.per_episode_accuracy = std::move(accuracies);
  std::tie(report.mean_accuracy, report.ci95) = mean_ci95(report.per_episode_accuracy);
  report.wall_seconds = seconds_since(start);
  return report;
}

// ---- persistence -----------------------------------------------------------------------

CheckpointManifest make_checkpoint(const TaskAdapterModel& model, const TrainConfig& config,
                                   std::size_t episodes_trained) {
  CheckpointManifest m;
  m.version = kCheckpointVersion;
  m.config = config.normalized();
  m.seed = m.config.seed;
  m.episodes_trained = episodes_trained;
  for (const auto& e : model.parameters().entries()) {
    if (e.trainable) m.tensors.emplace_back(e.name, e.tensor.detach());
  }
  return m;
}

std::string checkpoint_to_json(const CheckpointManifest& checkpoint) {
  json config = json::object();
  for (const auto& [key, value] : config_entries(checkpoint.config)) config[key] = value;
  json tensors = json::array();
  for (const auto& [name, tensor] : checkpoint.tensors) tensors.push_back(tensor_to_json(name, tensor));
  const json doc{{"version", checkpoint.version},
                 {"config", config},
                 {"seed", checkpoint.seed},
                 {"episodes_trained", checkpoint.episodes_trained},
                 {"tensors", tensors}};
  return doc.dump(1);
}

void save_checkpoint(const CheckpointManifest& checkpoint, const std::filesystem::path& path) {
  write_text(path, checkpoint_to_json(checkpoint));
}

CheckpointManifest load_checkpoint(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  try {
    CheckpointManifest m;
    m.version = doc.at("version").get<int>();
    if (m.version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(m.version));
    std::map<std::string, std::string> values;
    for (const auto& [key, value] : doc.at("config").items()) values[key] = value.get<std::string>();
    apply_key_values(m.config, values);
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.episodes_trained = doc.at("episodes_trained").get<std::size_t>();
    for (const auto& t : doc.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      auto values_vec = t.at("values").get<std::vector<double>>();
      const auto name = t.at("name").get<std::string>();
      if (values_vec.size() != shape_size(shape)) throw DataError("tensor " + name + " has the wrong value count");
      m.tensors.emplace_back(name, Var::constant(std::move(shape), std::move(values_vec)));
    }
    return m;
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

void load_trainable(TaskAdapterModel& model, const CheckpointManifest& checkpoint) {
  std::map<std::string, const Var*> stored;
  for (const auto& [name, tensor] : checkpoint.tensors) stored[name] = &tensor;
  std::size_t used = 0;
  for (const auto& e : model.parameters().entries()) {
    if (!e.trainable) continue;
    auto it = stored.find(e.name);
    if (it == stored.end()) throw DataError("checkpoint is missing tensor " + e.name);
    if (it->second->shape() != e.tensor.shape()) {
      throw DataError("checkpoint tensor " + e.name + " has shape " + shape_string(it->second->shape()) +
                      ", model expects " + shape_string(e.tensor.shape()));
    }
    Var target = e.tensor;
    std::copy(it->second->values().begin(), it->second->values().end(), target.mutable_values().begin());
    ++used;
  }
  if (used != stored.size()) {
    for (const auto& [name, tensor] : stored) {
      if (!model.parameters().contains(name) || !model.parameters().find(name).trainable) {
        throw DataError("checkpoint tensor " + name + " does not match a trainable parameter");
      }
    }
  }
}

std::unique_ptr<TaskAdapterModel> restore_model(const CheckpointManifest& checkpoint, const Corpus& corpus) {
  auto model = build_model(checkpoint.config, corpus);
  load_trainable(*model, checkpoint);
  return model;
}

std::string report_to_json(const EvalReport& r) {
  const json doc{{"version", r.version},
                 {"config_digest", r.config_digest},
                 {"mean_accuracy", r.mean_accuracy},
                 {"ci95", r.ci95},
                 {"episodes", r.episodes},
                 {"per_episode_accuracy", r.per_episode_accuracy},
                 {"loss_curve", r.loss_curve},
                 {"wall_seconds", r.wall_seconds}};
  return doc.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  try {
    const json doc = json::parse(text);
    EvalReport r;
    r.version = doc.at("version").get<int>();
    r.config_digest = doc.at("config_digest").get<std::string>();
    r.mean_accuracy = doc.at("mean_accuracy").get<double>();
    r.ci95 = doc.at("ci95").get<double>();
    r.episodes = doc.at("episodes").get<std::size_t>();
    r.per_episode_accuracy = doc.at("per_episode_accuracy").get<std::vector<double>>();
    r.loss_curve = doc.at("loss_curve").get<std::vector<double>>();
    r.wall_seconds = doc.value("wall_seconds", 0.0);
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

void emit_report(const EvalReport& report, const std::filesystem::path& path, const std::filesystem::path& plot) {
  write_text(path, report_to_json(report));
  if (!plot.empty()) write_text(plot, render_curves_svg(report.loss_curve, report.per_episode_accuracy));
}

EvalReport load_report(const std::filesystem::path& path) { return report_from_json(read_text(path)); }

std::string render_curves_svg(const std::vector<double>& loss_curve, const std::vector<double>& accuracy) {
  constexpr double kPanelWidth = 360.0;
  constexpr double kPanelHeight = 220.0;
  constexpr double kMargin = 30.0;
  std::ostringstream svg;
  svg << std::setprecision(5);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * kPanelWidth << "\" height=\""
      << kPanelHeight + 2 * kMargin << "\">\n";
  auto panel = [&](const std::vector<double>& ys, double x0, const char* title, const char* color) {
    svg << "<rect x=\"" << x0 + kMargin << "\" y=\"" << kMargin << "\" width=\"" << kPanelWidth - 2 * kMargin
        << "\" height=\"" << kPanelHeight << "\" fill=\"none\" stroke=\"#888\"/>\n";
    svg << "<text x=\"" << x0 + kMargin << "\" y=\"" << kMargin - 8 << "\" font-size=\"12\">" << title;
    if (!ys.empty()) {
      const auto [lo_it, hi_it] = std::minmax_element(ys.begin(), ys.end());
      svg << " [" << *lo_it << ", " << *hi_it << "]";
    }
    svg << "</text>\n";
    if (ys.empty()) return;
    const auto [lo_it, hi_it] = std::minmax_element(ys.begin(), ys.end());
    const double lo = *lo_it;
    const double span = std::max(*hi_it - lo, 1e-12);
    const double step = ys.size() > 1 ? (kPanelWidth - 2 * kMargin) / static_cast<double>(ys.size() - 1) : 0.0;
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1\" points=\"";
    for (std::size_t i = 0; i < ys.size(); ++i) {
      const double x = x0 + kMargin + step * static_cast<double>(i);
      const double y = kMargin + kPanelHeight * (1.0 - (ys[i] - lo) / span);
      svg << x << ',' << y << ' ';
    }
    svg << "\"/>\n";
  };
  panel(loss_curve, 0.0, "training loss", "#c0392b");
  panel(accuracy, kPanelWidth, "episode accuracy", "#2471a3");
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace taskadapter
