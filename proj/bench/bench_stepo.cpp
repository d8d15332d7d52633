// Serial reference vs OpenMP kernels for the batched step-level objective.
// Args: groups per batch, rollouts per group, steps per rollout.

#include <benchmark/benchmark.h>

#include "evoloop/rng.hpp"
#include "evoloop/stepo_kernels.hpp"

using namespace evoloop;
using namespace evoloop::stepo;

namespace {

std::vector<FlatGroup> make_batch(std::size_t n_groups, std::size_t G, std::size_t T) {
  Rng rng(42);
  std::vector<FlatGroup> batch;
  for (std::size_t n = 0; n < n_groups; ++n) {
    GroupRollout g;
    for (std::size_t i = 0; i < G; ++i) {
      TrajectoryLogprobs t;
      t.reward = i % 2 == 0 ? 1.0 : 0.0;
      for (std::size_t s = 0; s < T; ++s) {
        StepLogprobs st;
        const std::size_t K = 8 + rng.index(24);
        for (std::size_t k = 0; k < K; ++k) {
          const double old = -4.0 * rng.uniform01();
          st.old.push_back(old);
          st.theta.push_back(old + 0.3 * (rng.uniform01() - 0.5));
          st.ref.push_back(old + 0.3 * (rng.uniform01() - 0.5));
        }
        t.steps.push_back(std::move(st));
      }
      g.trajectories.push_back(std::move(t));
    }
    batch.push_back(flatten(g, Granularity::step));
  }
  return batch;
}

template <auto Kernel>
void run(benchmark::State& state) {
  const auto batch = make_batch(state.range(0), state.range(1), state.range(2));
  std::size_t tokens = 0;
  for (const auto& f : batch) tokens += f.logp_theta.size();
  const ClipConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(Kernel(batch, cfg));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * tokens));
}

void args(benchmark::internal::Benchmark* b) {
  b->Args({1, 8, 10})->Args({16, 8, 10})->Args({64, 16, 20})->Unit(benchmark::kMicrosecond);
}

}  // namespace

BENCHMARK(run<objective_batch_serial>)->Name("objective_batch/serial")->Apply(args);
BENCHMARK(run<objective_batch_omp>)->Name("objective_batch/omp")->Apply(args);

BENCHMARK_MAIN();
