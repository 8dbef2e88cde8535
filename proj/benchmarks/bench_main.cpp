// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "taskadapter/logging.hpp"
#include "taskadapter/model.hpp"
#include "taskadapter/trainer.hpp"

using namespace taskadapter;

namespace {

struct Fixture {
  TrainConfig config;
  std::unique_ptr<TaskAdapterModel> model;
  Dataset data;

  explicit Fixture(std::size_t adapted_layers) {
    config.model.visual.adapted_layers = adapted_layers;
    config.train_episodes = 1;
    config = config.normalized();
    model = build_model(config, template_corpus());
    data = training_dataset(config);
  }
};

void BM_SelfAttention(benchmark::State& state) {
  const auto length = static_cast<std::size_t>(state.range(0));
  ParameterStore store;
  Rng rng(1);
  const auto params = make_attention(store, "bench", "bench", 32, 4, rng, false);
  std::vector<double> values(8 * length * 32);
  for (auto& v : values) v = rng.normal();
  const Var x = Var::leaf({8, length, 32}, values, false);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(multi_head_self_attention(x, params, 1));
}
BENCHMARK(BM_SelfAttention)->Arg(8)->Arg(17)->Arg(64);

void BM_EpisodeForward(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  const Episode e = sample_episode(f.data, template_corpus(), f.config.episode, 0);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(f.model->forward(e, template_corpus()).loss);
}
BENCHMARK(BM_EpisodeForward)->Arg(0)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  const Episode e = sample_episode(f.data, template_corpus(), f.config.episode, 0);
  for (auto _ : state) train_on_episode(*f.model, f.config, e, template_corpus(), 1);
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_FrozenBaselineForward(benchmark::State& state) {
  Fixture f(2);
  const Episode e = sample_episode(f.data, template_corpus(), f.config.episode, 0);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(f.model->forward_frozen_baseline(e, template_corpus()).loss);
}
BENCHMARK(BM_FrozenBaselineForward)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  set_log_level(LogLevel::quiet);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
