#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "htmdp/experiments.hpp"

using namespace htmdp;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = HTMDP_CONFIG_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

fs::path scratch(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("htmdp_test_" + name);
  fs::remove_all(d);
  return d;
}

std::string stationary_config() {
  return R"({
    "path": {"family": "length", "epsilon_mix": 0.0, "weights0": [0.4, 1.0, 0.7], "weights1": [0.4, 1.0, 0.7]},
    "geometry": {"grid": 21},
    "process": {"kind": "frozen_after", "tau_start": 0.0, "tau_end": 0.0, "T0": 0},
    "scheduler": {"eps_gap": -1, "W1": 50, "W2": 150, "eta_schedule": "harmonic"},
    "agent": {"T": 600, "seeds": 3},
    "tubes": {"tau0": [0.3], "eps": [0.1]}
  })";
}

std::string small_kink_config() {
  return R"({
    "path": {"family": "kink", "sigma": 1.0, "weights0": [1, 0, 1], "weights1": [1, 0, 1]},
    "geometry": {"grid": 101},
    "process": {"kind": "noisy_ramp", "ramp_steps": 800, "noise": 0.5},
    "scheduler": {"W1": 100, "W2": 300, "H": 20},
    "agent": {"T": 800, "seeds": 3, "q_init": 16},
    "tubes": {"tau0": [0.2, 0.5, 0.8], "eps": [0.1, 1000]},
    "stability": {"H": [10, 20, 10], "delta_hys": [0.02, 0.04, "inf"], "pairing": "diagonal"}
  })";
}

}  // namespace

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"length", "curvature", "kink", "frozen", "kink_rl", "kink_mcts", "idle", "stability"}) {
    EXPECT_NO_THROW(load_config(kConfigs / (std::string(name) + ".json"))) << name;
  }
  ExperimentConfig c = load_config(kConfigs / "kink.json");
  EXPECT_EQ(c.path.family, PathFamily::kink);
  EXPECT_EQ(c.path.ring.sigma, 1.0);
  EXPECT_TRUE(c.has_tubes);
  EXPECT_FALSE(c.has_agent);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(parse_config(R"({"path": {"family": "length"}, "pathh": {}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"path": {"family": "length", "gama": 0.9}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"scheduler": {"H": 10, "eta": 0.1}})"), ConfigError);
  try {
    parse_config(R"({"agent": {"T": 10, "epsilon": 0.1}})");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("agent.epsilon"), std::string::npos) << msg;
    EXPECT_NE(msg.find("epsilon_greedy"), std::string::npos) << msg;
  }
}

TEST(Config, TypesRangesAndEnums) {
  EXPECT_THROW(parse_config(R"({"path": {"family": "spiral"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"path": {"n": -3}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"path": {"n": 2}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"path": {"gamma": 1.0}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"path": {"weights0": [1, 2]}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"path": {"family": "length", "profile": "scurve"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"scheduler": {"beta": 1.5}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"scheduler": {"H": "ten"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"agent": {"seeds": 0}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"process": {"tau_start": 0.8, "tau_end": 0.2}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"tubes": {"tau0": [0.5], "eps": [-1]}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"stability": {"H": [10, 20], "delta_hys": [0.1]}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"output": {"formats": ["png"]}})"), ConfigError);
  EXPECT_THROW(parse_config("{not json"), ConfigError);
  ExperimentConfig c = parse_config(R"({
    // comments are allowed
    "stability": {"H": [10, 20], "delta_hys": [0.1, "inf"], "pairing": "grid"},
    "output": {"formats": ["json"]}
  })");
  EXPECT_TRUE(std::isinf(c.stability.delta_hys[1]));
  EXPECT_FALSE(c.stability.diagonal);
  EXPECT_FALSE(c.output.csv);
  EXPECT_TRUE(c.output.json);
}

TEST(Config, MissingBlocksAreReportedPerCommand) {
  ExperimentConfig c = parse_config(R"({"path": {"family": "length"}})");
  EXPECT_NO_THROW(c.require({"path"}));
  EXPECT_THROW(tubes(c), ConfigError);
  EXPECT_THROW(run_experiment(c, RunMode::ht_rl), ConfigError);
  EXPECT_THROW(scheduler_stability(c), ConfigError);
}

TEST(Config, CustomFamilyBuildsEndpoints) {
  ExperimentConfig c = parse_config(R"({"path": {
    "family": "custom", "profile": "scurve",
    "custom": {"n_states": 2, "n_actions": 2, "gamma": 0.9, "metric": "line",
      "reward0": [[1, 0], [0, 1]], "reward1": [[0, 1], [1, 0]],
      "transition0": [[[1, 0], [0, 1]], [[1, 0], [0, 1]]],
      "transition1": [[[0.5, 0.5], [0, 1]], [[1, 0], [0.5, 0.5]]]}}})");
  MdpPath p = build_path(c.path);
  FiniteMdp m0 = p.evaluate(0.0), m1 = p.evaluate(1.0), mh = p.evaluate(0.5);
  EXPECT_EQ(m0.reward(0, 0), 1.0);
  EXPECT_EQ(m1.reward(0, 0), 0.0);
  EXPECT_EQ(m1.prob(0, 0, 1), 0.5);
  EXPECT_DOUBLE_EQ(mh.reward(0, 0), 0.5);
  EXPECT_THROW(parse_config(R"({"path": {"family": "custom"}})"), ConfigError);
  ExperimentConfig bad = parse_config(R"({"path": {"family": "custom",
    "custom": {"n_states": 2, "n_actions": 1, "metric": "line", "reward0": [[0], [0]], "reward1": [[0], [0]],
      "transition0": [[[0.7, 0.7]], [[1, 0]]], "transition1": [[[1, 0]], [[1, 0]]]}}})");
  EXPECT_THROW(build_path(bad.path), ConfigError);
}

TEST(Format, NumbersRoundTrip) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(2.0), "2");
  EXPECT_EQ(format_number(-0.0), "0");
  EXPECT_EQ(format_number(1.0 / 0.0), "inf");
  EXPECT_EQ(format_number(-1.0 / 0.0), "-inf");
  EXPECT_EQ(format_number(std::nan("")), "nan");
  for (double x : {1.0 / 3.0, 1e-300, 123456789.123456789, -2.5e17}) EXPECT_EQ(std::stod(format_number(x)), x);
}

TEST(Format, QuantileMatchesLinearInterpolation) {
  EXPECT_EQ(quantile({3, 1, 2, 4}, 0.5), 2.5);
  EXPECT_EQ(quantile({3, 1, 2, 4}, 0.25), 1.75);
  EXPECT_EQ(quantile({5, 1, 3}, 0.5), 3.0);
  EXPECT_EQ(quantile({7}, 0.75), 7.0);
  EXPECT_TRUE(std::isnan(quantile({}, 0.5)));
}

TEST(Certify, StationaryPathIsAllZero) {
  CertifyReport r = certify(parse_config(stationary_config()));
  ASSERT_EQ(r.rows.size(), 21u * 20u / 2u);
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.true_drift, 0.0);
    EXPECT_EQ(row.parts.bound, 0.0);
    EXPECT_TRUE(std::isnan(row.ratio));
  }
  EXPECT_EQ(r.violations, 0u);
  EXPECT_EQ(r.regular_pairs, 0u);
}

TEST(Certify, KinkTermOnlyOnStraddlingPairs) {
  ExperimentConfig c = parse_config(small_kink_config());
  CertifyReport r = certify(c);
  EXPECT_EQ(r.violations, 0u);
  ASSERT_EQ(r.summary.kinks.size(), 1u);
  const double ts = r.summary.kinks[0].tau_star;
  std::size_t straddling = 0;
  for (const auto& row : r.rows) {
    const bool straddles = row.tau0 <= ts && ts <= row.tau1;
    straddling += straddles;
    EXPECT_EQ(row.parts.phi_term > 0.0, straddles) << row.tau0 << " " << row.tau1;
    if (straddles) EXPECT_TRUE(std::isnan(row.ratio));
  }
  EXPECT_EQ(r.kink_pairs, straddling);
  EXPECT_GT(r.regular_pairs, 0u);
}

TEST(Certify, FilesAndExitCode) {
  ExperimentConfig c = parse_config(small_kink_config());
  CertifyReport r = certify(c);
  const fs::path dir = scratch("certify");
  Written w = write_certify(r, c, dir);
  EXPECT_EQ(w.exit_code, 0);
  ASSERT_EQ(w.files.size(), 3u);
  EXPECT_EQ(first_line(dir / "certify_audit.csv"), kAuditHeader);
  EXPECT_EQ(first_line(dir / "geometry_profile.csv"), kProfileHeader);
  const auto j = nlohmann::json::parse(slurp(dir / "geometry_summary.json"));
  EXPECT_EQ(j["audit"]["violations"].get<std::size_t>(), 0u);
  EXPECT_EQ(j["kinks"].size(), 1u);
  // The summary median is recomputable from the ratio column.
  std::ifstream in(dir / "certify_audit.csv");
  std::string line;
  std::getline(in, line);
  std::vector<double> ratios;
  while (std::getline(in, line)) {
    const std::string last = line.substr(line.rfind(',') + 1);
    if (last != "nan") ratios.push_back(std::stod(last));
  }
  EXPECT_NEAR(quantile(ratios, 0.5), j["audit"]["median_ratio"].get<double>(), 1e-9);
  // Same inputs, same bytes.
  const std::string before = slurp(dir / "certify_audit.csv");
  write_certify(certify(c), c, dir);
  EXPECT_EQ(slurp(dir / "certify_audit.csv"), before);
  CertifyReport bad = r;
  bad.violations = 1;
  EXPECT_EQ(write_certify(bad, c, scratch("certify_bad")).exit_code, 1);
}

TEST(Tubes, SweepReportsNonRegularAndCovers) {
  ExperimentConfig c = parse_config(small_kink_config());
  TubesReport r = tubes(c);
  ASSERT_EQ(r.rows.size(), 6u);
  EXPECT_EQ(r.violations, 0u);
  EXPECT_EQ(r.non_regular, 2u);  // tau0 = 0.5 sits on the switch
  for (const auto& row : r.rows) {
    if (row.tau0 == 0.5) {
      EXPECT_FALSE(row.regular);
      EXPECT_NE(row.status, "ok");
      continue;
    }
    EXPECT_EQ(row.status, "ok");
    EXPECT_LE(row.first_max_dev, row.eps);
    EXPECT_LE(row.second.interval.hi, row.first.interval.hi);
  }
  const fs::path dir = scratch("tubes");
  Written w = write_tubes(r, c, dir);
  EXPECT_EQ(w.exit_code, 0);
  EXPECT_EQ(first_line(dir / "tubes.csv"), kTubesHeader);
}

TEST(Tubes, LargeBudgetGivesWholeComponent) {
  ExperimentConfig c = parse_config(stationary_config());
  c.tubes.eps = {1e6};
  TubesReport r = tubes(c);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].first.interval.lo, 0.0);
  EXPECT_EQ(r.rows[0].first.interval.hi, 1.0);
  EXPECT_EQ(r.rows[0].second.interval.lo, 0.0);
  EXPECT_EQ(r.rows[0].second.interval.hi, 1.0);
}

TEST(Tubes, CurvatureRegimeSecondOrderIsTighter) {
  TubesReport r = tubes(load_config(kConfigs / "curvature.json"));
  EXPECT_EQ(r.violations, 0u);
  EXPECT_GE(r.strictly_tighter, 1u);
}

TEST(Run, TraceSchemaAndDeterminism) {
  ExperimentConfig c = parse_config(small_kink_config());
  RunReport a = run_experiment(c, RunMode::ht_rl);
  ASSERT_EQ(a.traces.size(), 3u);
  ASSERT_EQ(a.traces[0].size(), 800u);
  setenv("HTMDP_THREADS", "1", 1);
  RunReport b = run_experiment(c, RunMode::ht_rl);
  unsetenv("HTMDP_THREADS");
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(trace_csv(a.traces[i]), trace_csv(b.traces[i]));
  EXPECT_NE(trace_csv(a.traces[0]), trace_csv(a.traces[1]));

  const fs::path dir = scratch("run");
  Written w = write_run(a, c, dir);
  EXPECT_EQ(w.files.size(), 4u);
  EXPECT_EQ(first_line(dir / "trace_ht-rl_seed0.csv"), kTraceHeader);
  const auto j = nlohmann::json::parse(slurp(dir / "summary_ht-rl.json"));
  std::vector<double> regrets;
  for (const auto& s : j["seeds"]) regrets.push_back(s["cumulative_regret"].get<double>());
  EXPECT_EQ(j["cumulative_regret"]["median"].get<double>(), quantile(regrets, 0.5));
  EXPECT_EQ(j["cumulative_regret"]["iqr"].get<double>(), quantile(regrets, 0.75) - quantile(regrets, 0.25));
  EXPECT_EQ(a.seeds[0].cumulative_regret, dynamic_regret(a.traces[0]));
}

TEST(Run, AucAndFinalValues) {
  ExperimentConfig c = parse_config(small_kink_config());
  c.agent.seeds = 1;
  c.agent.T = 50;
  RunReport r = run_experiment(c, RunMode::static_rl);
  const RunTrace& t = r.traces[0];
  double cum = 0.0, area = 0.0;
  for (double x : t.regret_inc) area += (cum += x);
  EXPECT_DOUBLE_EQ(r.seeds[0].auc, area / 50.0);
  EXPECT_EQ(r.seeds[0].final_e, t.e.back());
  EXPECT_EQ(r.seeds[0].final_return, t.episode_return.back());
}

TEST(Run, ZeroDriftSummariesMatch) {
  ExperimentConfig c = parse_config(stationary_config());
  RunReport h = run_experiment(c, RunMode::ht_rl);
  RunReport s = run_experiment(c, RunMode::static_rl);
  for (std::size_t i = 0; i < h.traces.size(); ++i) EXPECT_EQ(trace_csv(h.traces[i]), trace_csv(s.traces[i]));
  EXPECT_EQ(h.regret_median, s.regret_median);
  EXPECT_EQ(h.auc_median, s.auc_median);
}

TEST(Run, StaticMctsMatchesMeanHtBudget) {
  ExperimentConfig c = parse_config(small_kink_config());
  c.agent.T = 60;
  c.agent.seeds = 2;
  RunReport h = run_experiment(c, RunMode::ht_mcts);
  RunReport s = run_experiment(c, RunMode::static_mcts);
  for (std::size_t i = 0; i < 2; ++i) {
    const double mean = static_cast<double>(h.seeds[i].total_budget) / 60.0;
    EXPECT_EQ(s.traces[i].hyper[0].budget, static_cast<std::size_t>(std::ceil(mean)));
    EXPECT_GE(s.seeds[i].total_budget, h.seeds[i].total_budget);
    EXPECT_LT(s.seeds[i].total_budget, h.seeds[i].total_budget + 60);
  }
  EXPECT_EQ(parse_mode("static-mcts"), RunMode::static_mcts);
  EXPECT_EQ(mode_name(RunMode::ht_rl), "ht-rl");
  EXPECT_THROW(parse_mode("ht"), ConfigError);
}

TEST(Stability, BoundsHoldAndInfiniteHysteresisIsQuiet) {
  ExperimentConfig c = parse_config(small_kink_config());
  StabilityReport r = scheduler_stability(c);
  ASSERT_EQ(r.cells.size(), 3u);
  EXPECT_TRUE(r.variation_ok);
  EXPECT_TRUE(r.bound_ok);
  for (const auto& run : r.runs) {
    EXPECT_LE(run.chatter.large_change_fraction, run.no_chatter.bound);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_LE(run.chatter.variation[i], run.variation_bound[i]);
    EXPECT_EQ(run.rm.comparable_fraction, 1.0);
    if (std::isinf(run.delta_hys)) {
      EXPECT_EQ(run.chatter.large_change_fraction, 0.0);
      EXPECT_EQ(run.no_chatter.bound, 0.0);
    }
  }
  EXPECT_EQ(r.cells[2].fraction_median, 0.0);
  EXPECT_EQ(r.trend_nonincreasing, r.cells[1].fraction_median <= r.cells[0].fraction_median);
  const fs::path dir = scratch("stability");
  Written w = write_stability(r, c, dir);
  EXPECT_EQ(w.exit_code, 0);
  EXPECT_EQ(first_line(dir / "stability_runs.csv"), kStabilityRunHeader);
  EXPECT_EQ(first_line(dir / "stability_cells.csv"), kStabilityCellHeader);
}

TEST(Snapshots, GridDump) {
  ExperimentConfig c = parse_config(stationary_config());
  const fs::path dir = scratch("snapshots");
  Written w = write_snapshots(c, dir);
  EXPECT_EQ(w.files.size(), 2u);
  EXPECT_EQ(first_line(dir / "snapshots.csv"), kSnapshotHeader);
  const auto j = nlohmann::json::parse(slurp(dir / "snapshots.json"));
  ASSERT_EQ(j["snapshots"].size(), 21u);
  EXPECT_EQ(j["snapshots"][0]["transition"].size(), 20u);
  // Deterministic ring: one nonzero successor per state-action pair.
  std::ifstream in(dir / "snapshots.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 1u + 21u * 20u * 3u);
}
