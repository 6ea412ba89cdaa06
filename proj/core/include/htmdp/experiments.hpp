#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "htmdp/agents.hpp"
#include "htmdp/geometry.hpp"
#include "htmdp/path.hpp"
#include "htmdp/scheduler.hpp"

namespace htmdp {

enum class PathFamily { length, curvature, kink, custom };

// Two explicit endpoint MDPs for the custom family.
struct CustomEndpoints {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  double gamma = 0.9;
  QTable reward0, reward1;
  std::vector<double> transition0, transition1;  // flat [(s*nA + a)*nS + s']
  MetricKind metric = MetricKind::ring;         // unit ring or unit line
};

struct PathSpec {
  PathFamily family = PathFamily::length;
  RingPathConfig ring;
  std::optional<Profile> profile;  // custom family only; ring families fix their profile
  CustomEndpoints custom;
  DerivativeMode derivatives = DerivativeMode::analytic;
  double fd_step = 1e-4;
  double fd_step2 = 1e-3;
};

struct TubeSweep {
  std::vector<double> tau0;
  std::vector<double> eps;
};

struct StabilitySweep {
  std::vector<std::size_t> H{25, 50, 100, 200};
  std::vector<double> delta_hys{0.025, 0.05, 0.1, 0.2};
  bool diagonal = true;  // pair H[i] with delta_hys[i]; otherwise the full grid
  double large_change_eps = 1e-6;
};

struct OutputSpec {
  std::string directory = "out";
  bool csv = true;
  bool json = true;
};

struct ExperimentConfig {
  PathSpec path;
  GeometryOptions geometry;
  SchedulerConfig scheduler;
  AgentConfig agent;
  PathProcessConfig process;
  TubeSweep tubes;
  StabilitySweep stability;
  OutputSpec output;

  // Blocks that appeared in the file; commands check the ones they need.
  bool has_path = false, has_geometry = false, has_scheduler = false, has_agent = false,
       has_process = false, has_tubes = false, has_stability = false, has_output = false;

  void require(std::initializer_list<std::string_view> blocks) const;
};

// Strict JSON reader: comments allowed, unknown keys and wrong types are ConfigErrors.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& file);

MdpPath build_path(const PathSpec& spec);

// Shortest round-trip decimal form; "inf", "-inf" and "nan" for non-finite values.
std::string format_number(double x);

// Linear-interpolation quantile of an unsorted sample (q in [0, 1]); nan when empty.
double quantile(std::vector<double> v, double q);

// ---- certify ----

struct AuditRow {
  double tau0 = 0.0, tau1 = 0.0;
  double true_drift = 0.0;
  BoundParts parts;
  double ratio = 0.0;  // bound / true drift on regular segments with positive drift, else nan
};

struct CertifyReport {
  GeometrySummary summary;
  std::vector<AuditRow> rows;
  std::vector<char> node_regular;
  std::size_t violations = 0;
  std::size_t regular_pairs = 0;  // rows with a finite ratio
  double median_ratio = 0.0;
  double max_ratio = 0.0;
  std::size_t kink_pairs = 0;  // rows with phi_term > 0
};

CertifyReport certify(const ExperimentConfig& config);

// ---- tubes ----

struct TubeRow {
  double tau0 = 0.0;
  double eps = 0.0;
  bool regular = true;
  std::string status = "ok";  // "ok", "violation" or the reason the base point was skipped
  TubeResult first, second;
  double first_max_dev = 0.0;   // max over grid nodes in the interval of ||Q*(tau) - Q*(tau0)||
  double second_max_dev = 0.0;
  bool second_strictly_inside = false;
  SafeRegion safe;
};

struct TubesReport {
  std::vector<TubeRow> rows;
  std::size_t violations = 0;
  std::size_t non_regular = 0;
  std::size_t strictly_tighter = 0;
};

TubesReport tubes(const ExperimentConfig& config);

// ---- run ----

enum class RunMode { ht_rl, static_rl, ht_mcts, static_mcts };
RunMode parse_mode(std::string_view name);
std::string_view mode_name(RunMode mode);

struct SeedSummary {
  std::uint64_t seed = 0;
  double cumulative_regret = 0.0;
  double auc = 0.0;  // mean over t of the cumulative regret up to t
  double final_return = 0.0;
  double final_e = 0.0;
  std::size_t total_budget = 0;  // MCTS simulations requested over the run
  ChatterStats chatter;
};

struct RunReport {
  RunMode mode = RunMode::ht_rl;
  std::size_t T = 0;
  std::vector<SeedSummary> seeds;
  std::vector<RunTrace> traces;
  double regret_median = 0.0, regret_q1 = 0.0, regret_q3 = 0.0;
  double auc_median = 0.0;
  double final_return_median = 0.0;
  double final_e_median = 0.0;
  double large_change_fraction_median = 0.0;
};

// Seeds 0 .. seeds-1 on the worker pool. Static MCTS with static_budget 0 first runs HT-MCTS
// on the same seed to match the budget.
RunReport run_experiment(const ExperimentConfig& config, RunMode mode);

// ---- scheduler stability ----

struct StabilityRun {
  std::size_t H = 0;
  double delta_hys = 0.0;
  std::uint64_t seed = 0;
  ChatterStats chatter;
  std::array<double, 5> large_fraction{};  // per hyperparameter
  std::array<double, 5> variation_bound{};
  NoChatterBound no_chatter;
  double m_K = 1.0;
  RmAudit rm;
};

struct StabilityCell {
  std::size_t H = 0;
  double delta_hys = 0.0;
  double fraction_median = 0.0;
  double bound_median = 0.0;
  std::array<double, 5> variation_median{};
  bool variation_ok = true;
  bool bound_ok = true;
  double rm_comparable_min = 1.0;
};

struct StabilityReport {
  std::vector<StabilityRun> runs;
  std::vector<StabilityCell> cells;
  bool variation_ok = true;
  bool bound_ok = true;
  bool trend_nonincreasing = true;  // along the sweep order (diagonal) or every grid row and column
};

StabilityReport scheduler_stability(const ExperimentConfig& config);

// ---- files ----

struct Written {
  std::vector<std::filesystem::path> files;
  int exit_code = 0;
};

inline constexpr std::string_view kTraceHeader =
    "step,tau,e_t,regret_inc,geo_load,eta,nu,lambda,depth,budget,return";
inline constexpr std::string_view kAuditHeader =
    "tau0,tau1,true_drift,bound,pl_term,curv_term,phi_term,ratio";
inline constexpr std::string_view kProfileHeader =
    "tau,pl_density,curv_density,speed_density,kappa_density,gap,regular";
inline constexpr std::string_view kTubesHeader =
    "tau0,eps,status,first_lo,first_hi,first_max_dev,second_lo,second_hi,second_max_dev,"
    "second_strictly_inside,safe_measured,safe_certified_lo,safe_certified_hi,safe_warning";
inline constexpr std::string_view kStabilityRunHeader =
    "H,delta_hys,seed,large_change_fraction,no_chatter_bound,C2,tv_eta,tv_nu,tv_lambda,tv_depth,"
    "tv_budget,frac_eta,frac_nu,frac_lambda,frac_depth,frac_budget,m_K,rm_comparable_fraction";
inline constexpr std::string_view kStabilityCellHeader =
    "H,delta_hys,fraction_median,bound_median,tv_eta,tv_nu,tv_lambda,tv_depth,tv_budget,"
    "tv_bound_eta,tv_bound_nu,tv_bound_lambda,tv_bound_depth,tv_bound_budget,variation_ok,bound_ok";
inline constexpr std::string_view kSnapshotHeader = "tau,state,action,reward,next_state,prob";

std::string trace_csv(const RunTrace& trace);

Written write_certify(const CertifyReport& report, const ExperimentConfig& config,
                      const std::filesystem::path& dir);
Written write_tubes(const TubesReport& report, const ExperimentConfig& config,
                    const std::filesystem::path& dir);
Written write_run(const RunReport& report, const ExperimentConfig& config,
                  const std::filesystem::path& dir);
Written write_stability(const StabilityReport& report, const ExperimentConfig& config,
                        const std::filesystem::path& dir);
// MDP snapshots at the geometry grid.
Written write_snapshots(const ExperimentConfig& config, const std::filesystem::path& dir);

}  // namespace htmdp
