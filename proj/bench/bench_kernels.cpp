#include <benchmark/benchmark.h>

#include "posicaic/caic.hpp"
#include "posicaic/sampler.hpp"
#include "posicaic/simulation.hpp"

using namespace posicaic;

namespace {

ConstraintSet shell_region(int dim, double rhs) {
  ConstraintSet r;
  r.dim = dim;
  QuadraticConstraint c;
  c.Q = Eigen::MatrixXd::Identity(dim, dim);
  c.Q(0, 1) = c.Q(1, 0) = 0.3;
  c.rhs = rhs;
  c.sense = Sense::greater_equal;
  r.constraints.push_back(c);
  return r;
}

SamplerConfig config(int B, SamplerMethod m) {
  SamplerConfig cfg;
  cfg.B = B;
  cfg.seed = 11;
  cfg.method = m;
  return cfg;
}

// Arg: B. Shell region with about 8% acceptance.
void BM_RejectionParallel(benchmark::State& st) {
  const ConstraintSet r = shell_region(5, 9.0);
  const SamplerConfig cfg = config(static_cast<int>(st.range(0)), SamplerMethod::rejection);
  for (auto _ : st) benchmark::DoNotOptimize(sample_truncated(r, cfg).draws.data());
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_RejectionSerial(benchmark::State& st) {
  const ConstraintSet r = shell_region(5, 9.0);
  const SamplerConfig cfg = config(static_cast<int>(st.range(0)), SamplerMethod::rejection);
  for (auto _ : st) benchmark::DoNotOptimize(sample_truncated_serial(r, cfg).draws.data());
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_ChainParallel(benchmark::State& st) {
  const ConstraintSet r = shell_region(5, 9.0);
  const SamplerConfig cfg = config(static_cast<int>(st.range(0)), SamplerMethod::chain);
  for (auto _ : st) benchmark::DoNotOptimize(sample_truncated(r, cfg).draws.data());
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_ChainSerial(benchmark::State& st) {
  const ConstraintSet r = shell_region(5, 9.0);
  const SamplerConfig cfg = config(static_cast<int>(st.range(0)), SamplerMethod::chain);
  for (auto _ : st) benchmark::DoNotOptimize(sample_truncated_serial(r, cfg).draws.data());
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

// One simulation attempt: generate, fit all eight candidates, bootstrap b.
void BM_SelectionAttempt(benchmark::State& st) {
  const SimScenario sc = SimScenario::paper("S1", static_cast<int>(st.range(0)), 5);
  const CandidateSet c = candidate_set_for("v2").candidates;
  FitOptions o;
  o.b_reps = 200;
  o.compute_K = false;
  std::uint64_t k = 0;
  for (auto _ : st) {
    auto data = std::make_shared<const ClusteredDataset>(generate_nerm(sc, ++k));
    benchmark::DoNotOptimize(select_model(data, c, o).selected);
  }
}

void BM_Underselection(benchmark::State& st) {
  const SimScenario sc = SimScenario::paper("S1", 15, 5);
  const CandidateSet c = candidate_set_for("v2").candidates;
  for (auto _ : st) benchmark::DoNotOptimize(underselection_stats(sc, c, static_cast<int>(st.range(0)), 3).rate);
}

}  // namespace

BENCHMARK(BM_RejectionParallel)->Arg(5000)->Arg(50000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RejectionSerial)->Arg(5000)->Arg(50000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ChainParallel)->Arg(5000)->Arg(50000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ChainSerial)->Arg(5000)->Arg(50000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SelectionAttempt)->Arg(15)->Arg(30)->Arg(90)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Underselection)->Arg(32)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
