// Micro and macro timings for the hot paths.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "htmdp/experiments.hpp"

using namespace htmdp;

namespace {

FiniteMdp ring(std::size_t n) {
  const std::vector<double> w{0.4, 1.0, 0.7};
  return ring_mdp(n, 0.05, 0.95, 5.0, 1.5, w);
}

ExperimentConfig config(const char* name) { return load_config(std::string(HTMDP_CONFIG_DIR) + "/" + name); }

void BM_SolveOptimal(benchmark::State& st) {
  const FiniteMdp m = ring(static_cast<std::size_t>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(solve_optimal(m));
}
BENCHMARK(BM_SolveOptimal)->Arg(20)->Arg(80);

std::vector<double> signed_measure(std::size_t n) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  std::vector<double> xi(n);
  double mean = 0.0;
  for (auto& x : xi) mean += x = g(rng);
  for (auto& x : xi) x -= mean / static_cast<double>(n);
  return xi;
}

void BM_W1DualNormRing(benchmark::State& st) {
  const std::size_t n = static_cast<std::size_t>(st.range(0));
  const auto xi = signed_measure(n);
  const GroundMetric metric = GroundMetric::unit_ring(n);
  for (auto _ : st) benchmark::DoNotOptimize(w1_dual_norm(xi, metric));
}
BENCHMARK(BM_W1DualNormRing)->Arg(20)->Arg(200);

void BM_TransportCost(benchmark::State& st) {
  const std::size_t n = static_cast<std::size_t>(st.range(0));
  const auto xi = signed_measure(n);
  const GroundMetric metric = GroundMetric::unit_ring(n);
  Eigen::MatrixXd cost(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost(i, j) = metric(i, j);
  for (auto _ : st) benchmark::DoNotOptimize(transport_cost(xi, cost));
}
BENCHMARK(BM_TransportCost)->Arg(20)->Arg(40);

void BM_MixingCertificate(benchmark::State& st) {
  const FiniteMdp m = ring(20);
  const GroundMetric metric = GroundMetric::unit_ring(20);
  for (auto _ : st) benchmark::DoNotOptimize(mixing_certificate(m, metric));
}
BENCHMARK(BM_MixingCertificate);

void BM_PathGeometry(benchmark::State& st) {
  const ExperimentConfig c = config("kink.json");
  GeometryOptions opt = c.geometry;
  opt.grid = static_cast<std::size_t>(st.range(0));
  const MdpPath p = build_path(c.path);
  for (auto _ : st) {
    PathGeometry g(p, opt);
    benchmark::DoNotOptimize(g.summary().PL);
  }
}
BENCHMARK(BM_PathGeometry)->Arg(51)->Arg(201)->Unit(benchmark::kMillisecond);

void BM_PathValueBound(benchmark::State& st) {
  const ExperimentConfig c = config("kink.json");
  const PathGeometry g(build_path(c.path), c.geometry);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto _ : st) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    benchmark::DoNotOptimize(g.path_value_bound(a, b));
  }
}
BENCHMARK(BM_PathValueBound);

void BM_UctPlan(benchmark::State& st) {
  const FiniteMdp m = ring(20);
  std::mt19937_64 rng(11);
  for (auto _ : st) benchmark::DoNotOptimize(uct_plan(m, 0, 10, static_cast<std::size_t>(st.range(0)), 4.0, rng));
}
BENCHMARK(BM_UctPlan)->Arg(64)->Arg(256);

void BM_HtQLearning(benchmark::State& st) {
  ExperimentConfig c = config("kink_rl.json");
  c.agent.T = static_cast<std::size_t>(st.range(0));
  RunContext ctx = make_context(build_path(c.path), c.agent.tau_snap, c.geometry);
  for (auto _ : st) benchmark::DoNotOptimize(ht_q_learning_run(ctx, c.process, c.scheduler, c.agent, 0).step.size());
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * c.agent.T));
}
BENCHMARK(BM_HtQLearning)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
