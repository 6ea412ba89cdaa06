// Batch driver: certificate audits, tubes, agent runs and scheduler sweeps.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "htmdp/experiments.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  std::size_t seeds = 0;
  std::string mode;
  std::string format;
};

htmdp::ExperimentConfig prepare(const Options& o) {
  htmdp::ExperimentConfig c = htmdp::load_config(o.config);
  if (!o.out.empty()) c.output.directory = o.out;
  if (o.seeds > 0) c.agent.seeds = o.seeds;
  if (o.format == "csv") {
    c.output.csv = true;
    c.output.json = false;
  } else if (o.format == "json") {
    c.output.csv = false;
    c.output.json = true;
  }
  return c;
}

void report(const htmdp::Written& w) {
  for (const auto& f : w.files) std::cout << "wrote " << f.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"htmdp: geometric stability certificates and scheduled learners on drifting MDPs"};
  app.require_subcommand(1);
  Options o;

  auto common = [&o](CLI::App* sub, bool seeds) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory (overrides output.directory)");
    sub->add_option("--format", o.format, "write only csv or only json artifacts")
        ->check(CLI::IsMember({"csv", "json"}));
    if (seeds) sub->add_option("--seeds", o.seeds, "number of seeds (overrides agent.seeds)")->check(CLI::PositiveNumber);
  };

  CLI::App* certify = app.add_subcommand("certify", "audit the path-value bound on every grid pair");
  common(certify, false);
  CLI::App* tubes = app.add_subcommand("tubes", "first- and second-order tubes with measured coverage");
  common(tubes, false);
  CLI::App* run = app.add_subcommand("run", "HT or static Q-learning / MCTS over seeds");
  common(run, true);
  run->add_option("--mode", o.mode, "ht-rl, static-rl, ht-mcts or static-mcts (comma list allowed)")->required();
  CLI::App* stab = app.add_subcommand("scheduler-stability", "chatter and variation over an (H, delta_hys) sweep");
  common(stab, true);
  CLI::App* gen = app.add_subcommand("gen-path", "dump MDP snapshots on the geometry grid");
  common(gen, false);

  CLI11_PARSE(app, argc, argv);

  try {
    htmdp::ExperimentConfig c = prepare(o);
    const std::filesystem::path dir = c.output.directory;
    int code = 0;
    if (*certify) {
      const auto r = htmdp::certify(c);
      const auto w = htmdp::write_certify(r, c, dir);
      report(w);
      std::cout << "pairs " << r.rows.size() << " violations " << r.violations << " median ratio "
                << htmdp::format_number(r.median_ratio) << " (regular pairs " << r.regular_pairs << ")\n";
      code = w.exit_code;
    } else if (*tubes) {
      const auto r = htmdp::tubes(c);
      const auto w = htmdp::write_tubes(r, c, dir);
      report(w);
      std::cout << "rows " << r.rows.size() << " violations " << r.violations << " non-regular " << r.non_regular
                << " second strictly inside first " << r.strictly_tighter << "\n";
      code = w.exit_code;
    } else if (*run) {
      std::vector<htmdp::RunMode> modes;
      std::size_t start = 0;
      while (start <= o.mode.size()) {
        const std::size_t end = std::min(o.mode.find(',', start), o.mode.size());
        modes.push_back(htmdp::parse_mode(std::string_view(o.mode).substr(start, end - start)));
        start = end + 1;
      }
      for (auto m : modes) {
        const auto r = htmdp::run_experiment(c, m);
        const auto w = htmdp::write_run(r, c, dir);
        report(w);
        std::cout << htmdp::mode_name(m) << ": median cumulative regret " << htmdp::format_number(r.regret_median)
                  << " IQR [" << htmdp::format_number(r.regret_q1) << ", " << htmdp::format_number(r.regret_q3)
                  << "]\n";
        code = std::max(code, w.exit_code);
      }
    } else if (*stab) {
      const auto r = htmdp::scheduler_stability(c);
      const auto w = htmdp::write_stability(r, c, dir);
      report(w);
      std::cout << "variation bound " << (r.variation_ok ? "ok" : "VIOLATED") << ", no-chatter bound "
                << (r.bound_ok ? "ok" : "VIOLATED") << ", trend "
                << (r.trend_nonincreasing ? "nonincreasing" : "not monotone") << "\n";
      code = w.exit_code;
    } else if (*gen) {
      report(htmdp::write_snapshots(c, dir));
    }
    return code;
  } catch (const htmdp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
