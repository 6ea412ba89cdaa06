#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "htmdp/geometry.hpp"
#include "htmdp/mdp.hpp"
#include "htmdp/path.hpp"
#include "htmdp/scheduler.hpp"

namespace htmdp {

// SplitMix64 finalizer; derives independent sub-seeds from (seed, stream).
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream);
// Uniform double in [0,1) from the top 53 bits.
double uniform01(std::mt19937_64& rng);
// Index drawn from a probability row by inverse CDF.
std::size_t sample_index(std::span<const double> probs, std::mt19937_64& rng);

enum class ProcessKind { linear_ramp, noisy_ramp, frozen_after };

struct PathProcessConfig {
  ProcessKind kind = ProcessKind::linear_ramp;
  double tau_start = 0.0;
  double tau_end = 1.0;
  std::size_t ramp_steps = 1000;  // steps to travel from tau_start to tau_end on average
  double noise = 0.5;             // relative half-width of noisy increments, scaled by sqrt(3)
  std::size_t T0 = 0;             // frozen_after: ramp stops at step T0
};

// tau_0 .. tau_T, nondecreasing and inside [tau_start, tau_end].
std::vector<double> generate_taus(const PathProcessConfig& config, std::size_t T, std::uint64_t seed);

enum class UpdateMode { sample, sweep };
enum class ModelKind { true_model, ema_model };

struct AgentConfig {
  std::size_t T = 4000;
  std::size_t seeds = 5;
  double epsilon_greedy = 0.1;
  std::size_t minibatch = 32;
  std::size_t buffer_capacity = 0;  // 0: 2 * W1
  std::size_t episode_length = 100;
  UpdateMode update = UpdateMode::sample;
  double q_init = 0.0;
  double tau_snap = 1e-3;
  double c_uct = 1.0;
  ModelKind model = ModelKind::true_model;
  double model_rate = 5.0;
  std::size_t static_budget = 0;  // 0: matched to the mean HT budget
  std::size_t static_depth = 0;   // 0: depth of the idle scheduler

  void validate() const;
};

struct RunTrace {
  std::vector<std::uint64_t> step;
  std::vector<double> tau;
  std::vector<double> e;
  std::vector<double> regret_inc;
  std::vector<double> geo_load;
  std::vector<HyperParams> hyper;
  std::vector<double> episode_return;
  std::vector<std::array<double, 3>> smoothed;  // scheduler triple at macro-steps (HT runs)
  std::size_t expansions = 0;                   // MCTS node expansions over the run
  std::size_t size() const { return step.size(); }
};

// Exact optimal solutions at tau snapped to a fixed grid, memoized and shareable across runs.
class OracleCache {
 public:
  struct Entry {
    FiniteMdp mdp;
    QTable q_star;
    ValueFn v_star;
  };

  OracleCache(MdpPath path, double snap);

  double snap(double tau) const;
  std::shared_ptr<const Entry> at(double tau);
  const MdpPath& path() const { return path_; }
  std::size_t solves() const;

 private:
  MdpPath path_;
  double snap_;
  mutable std::mutex mu_;
  std::map<long long, std::shared_ptr<const Entry>> cache_;
};

struct RunContext {
  std::shared_ptr<OracleCache> oracle;
  std::shared_ptr<const PathGeometry> geometry;  // optional: geo_load is 0 without it
  std::optional<std::vector<double>> d0;         // uniform when unset
};

RunContext make_context(const MdpPath& path, double tau_snap,
                        std::optional<GeometryOptions> geometry = {});

// Per-step record of the greedy policy of Q_t against the snapped oracle.
double regret_increment(const OracleCache::Entry& oracle, const Policy& pi,
                        std::span<const double> d0);

// Tabular Q-learning with replay, target table and the scheduler in the loop.
RunTrace ht_q_learning_run(RunContext& ctx, const PathProcessConfig& process,
                           const SchedulerConfig& scheduler, const AgentConfig& agent,
                           std::uint64_t seed);
// Same loop with eta = base eta, nu = nu0, lambda = lambda0.
RunTrace static_q_learning_run(RunContext& ctx, const PathProcessConfig& process,
                               const SchedulerConfig& scheduler, const AgentConfig& agent,
                               std::uint64_t seed);

// Optional per-step policy override; used to check the regret plumbing.
using PolicyOverride = std::function<std::optional<Policy>(std::size_t step, double tau)>;
RunTrace q_learning_run(RunContext& ctx, const PathProcessConfig& process,
                        const SchedulerConfig& scheduler, const AgentConfig& agent,
                        std::uint64_t seed, bool adaptive, const PolicyOverride& override = {});

struct UctResult {
  std::size_t action = 0;
  std::vector<double> root_value;  // mean return per root action
  std::vector<std::size_t> root_visits;
  std::size_t expansions = 0;
  std::size_t simulations = 0;
};

UctResult uct_plan(const FiniteMdp& model, std::size_t root, std::size_t depth,
                   std::size_t budget, double c_uct, std::mt19937_64& rng);

RunTrace ht_mcts_run(RunContext& ctx, const PathProcessConfig& process,
                     const SchedulerConfig& scheduler, const AgentConfig& agent,
                     std::uint64_t seed);
// Fixed depth and budget; with static_budget 0 the caller supplies the matched budget.
RunTrace static_mcts_run(RunContext& ctx, const PathProcessConfig& process,
                         const SchedulerConfig& scheduler, const AgentConfig& agent,
                         std::uint64_t seed, std::size_t budget);

double dynamic_regret(const RunTrace& trace);

struct TrackingFit {
  double rho = 0.0;
  double c1 = 0.0;
  double c_noise = 0.0;
  double violation_fraction = 0.0;
  double objective = 0.0;  // mean of c1 * geo_t + c_noise
};

struct TrackingAudit {
  std::vector<TrackingFit> per_rho;
  TrackingFit best;
};

// For each rho, the cheapest nonnegative (c1, c_noise) with
// e_{t+1} <= rho e_t + c1 geo_t + c_noise on at least `coverage` of the steps.
TrackingAudit tracking_recursion_audit(const RunTrace& trace, std::span<const double> rho_grid,
                                       double coverage = 0.95);

}  // namespace htmdp
