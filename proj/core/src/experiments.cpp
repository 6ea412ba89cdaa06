#include "htmdp/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "htmdp/parallel.hpp"

namespace htmdp {

namespace {

using json = nlohmann::json;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

// Reads one JSON object and remembers every key asked for, so leftovers can be rejected.
class Block {
 public:
  Block(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }

  const json* find(const std::string& key) {
    known_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const { return name_ + "." + key; }

  bool get(const std::string& key, double& out) {
    const json* v = find(key);
    if (!v) return false;
    out = to_double(*v, where(key));
    return true;
  }
  bool get(const std::string& key, std::size_t& out) {
    const json* v = find(key);
    if (!v) return false;
    out = to_size(*v, where(key));
    return true;
  }
  bool get(const std::string& key, bool& out) {
    const json* v = find(key);
    if (!v) return false;
    if (!v->is_boolean()) throw ConfigError(where(key) + ": expected true or false");
    out = v->get<bool>();
    return true;
  }
  bool get(const std::string& key, std::string& out) {
    const json* v = find(key);
    if (!v) return false;
    if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
    out = v->get<std::string>();
    return true;
  }
  bool get(const std::string& key, std::vector<double>& out) {
    const json* v = find(key);
    if (!v) return false;
    if (!v->is_array()) throw ConfigError(where(key) + ": expected an array of numbers");
    out.clear();
    for (const auto& x : *v) out.push_back(to_double(x, where(key)));
    return true;
  }
  template <std::size_t N>
  bool get(const std::string& key, std::array<double, N>& out) {
    std::vector<double> v;
    if (!get(key, v)) return false;
    if (v.size() != N)
      throw ConfigError(where(key) + ": expected " + std::to_string(N) + " numbers, got " +
                        std::to_string(v.size()));
    std::copy(v.begin(), v.end(), out.begin());
    return true;
  }
  bool get(const std::string& key, std::vector<std::size_t>& out) {
    const json* v = find(key);
    if (!v) return false;
    if (!v->is_array()) throw ConfigError(where(key) + ": expected an array of integers");
    out.clear();
    for (const auto& x : *v) out.push_back(to_size(x, where(key)));
    return true;
  }
  template <class E>
  bool get_enum(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
    std::string s;
    if (!get(key, s)) return false;
    std::string allowed;
    for (const auto& [n, e] : names) {
      if (s == n) {
        out = e;
        return true;
      }
      allowed += allowed.empty() ? n : std::string(", ") + n;
    }
    throw ConfigError(where(key) + ": unknown value '" + s + "' (allowed: " + allowed + ")");
  }

  // Rejects keys that no getter asked for.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (known_.count(it.key())) continue;
      std::string allowed;
      for (const auto& k : known_) allowed += allowed.empty() ? k : ", " + k;
      throw ConfigError("unknown key '" + where(it.key()) + "' (allowed: " + allowed + ")");
    }
  }

  static double to_double(const json& v, const std::string& where) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      const std::string s = v.get<std::string>();
      if (s == "inf" || s == "infinity") return kInf;
      if (s == "-inf" || s == "-infinity") return -kInf;
    }
    throw ConfigError(where + ": expected a number (or \"inf\")");
  }
  static std::size_t to_size(const json& v, const std::string& where) {
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::size_t>(v.get<long long>());
    throw ConfigError(where + ": expected a nonnegative integer");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> known_;
};

QTable read_table(const json& v, std::size_t rows, std::size_t cols, const std::string& where) {
  if (!v.is_array() || v.size() != rows)
    throw ConfigError(where + ": expected " + std::to_string(rows) + " rows");
  QTable t(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!v[i].is_array() || v[i].size() != cols)
      throw ConfigError(where + ": row " + std::to_string(i) + " needs " + std::to_string(cols) + " entries");
    for (std::size_t j = 0; j < cols; ++j) t(i, j) = Block::to_double(v[i][j], where);
  }
  return t;
}

std::vector<double> read_kernel(const json& v, std::size_t nS, std::size_t nA, const std::string& where) {
  if (!v.is_array() || v.size() != nS) throw ConfigError(where + ": expected " + std::to_string(nS) + " states");
  std::vector<double> out;
  out.reserve(nS * nA * nS);
  for (std::size_t s = 0; s < nS; ++s) {
    if (!v[s].is_array() || v[s].size() != nA)
      throw ConfigError(where + ": state " + std::to_string(s) + " needs " + std::to_string(nA) + " action rows");
    for (std::size_t a = 0; a < nA; ++a) {
      const json& row = v[s][a];
      if (!row.is_array() || row.size() != nS)
        throw ConfigError(where + ": row (" + std::to_string(s) + "," + std::to_string(a) + ") needs " +
                          std::to_string(nS) + " probabilities");
      for (const auto& p : row) out.push_back(Block::to_double(p, where));
    }
  }
  return out;
}

void parse_path(const json& j, PathSpec& p) {
  Block b(j, "path");
  b.get_enum("family", p.family,
             {{"length", PathFamily::length}, {"curvature", PathFamily::curvature},
              {"kink", PathFamily::kink}, {"custom", PathFamily::custom}});
  RingPathConfig& r = p.ring;
  b.get("n", r.n);
  b.get("gamma", r.gamma);
  b.get("epsilon_mix", r.epsilon_mix);
  b.get("c0", r.c0);
  b.get("c1", r.c1);
  b.get("sigma", r.sigma);
  b.get("weights0", r.weights0);
  b.get("weights1", r.weights1);
  b.get("alpha_profile", r.alpha_profile);
  b.get("bias0", r.bias0);
  b.get("bias1", r.bias1);
  b.get_enum("bump_motion", r.motion,
             {{"blend", BumpMotion::blend}, {"continuous", BumpMotion::continuous},
              {"floored", BumpMotion::floored}});
  Profile prof{};
  if (b.get_enum("profile", prof, {{"linear", Profile::linear}, {"scurve", Profile::scurve}})) p.profile = prof;
  b.get_enum("derivatives", p.derivatives,
             {{"analytic", DerivativeMode::analytic}, {"central_fd", DerivativeMode::central_fd}});
  b.get("fd_step", p.fd_step);
  b.get("fd_step2", p.fd_step2);
  const json* custom = b.find("custom");
  b.finish();

  if (p.family != PathFamily::custom) {
    if (custom) throw ConfigError("path.custom: only valid with family \"custom\"");
    if (p.profile) throw ConfigError("path.profile: only valid with family \"custom\" (ring families fix their profile)");
    if (r.n < 3) throw ConfigError("path.n: a ring needs at least 3 states");
    if (!(r.gamma > 0.0 && r.gamma < 1.0)) throw ConfigError("path.gamma: must lie in (0,1)");
    if (!(r.epsilon_mix >= 0.0 && r.epsilon_mix <= 1.0)) throw ConfigError("path.epsilon_mix: must lie in [0,1]");
    if (!(r.sigma > 0.0)) throw ConfigError("path.sigma: must be positive");
    for (double w : r.weights0) if (!std::isfinite(w)) throw ConfigError("path.weights0: entries must be finite");
    for (double w : r.weights1) if (!std::isfinite(w)) throw ConfigError("path.weights1: entries must be finite");
    for (double x : {r.bias0, r.bias1})
      if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("path.bias0/bias1: must lie in [0,1]");
  } else {
    if (!custom) throw ConfigError("path.custom: required with family \"custom\"");
    Block c(*custom, "path.custom");
    CustomEndpoints& e = p.custom;
    if (!c.get("n_states", e.n_states) || !c.get("n_actions", e.n_actions))
      throw ConfigError("path.custom: n_states and n_actions are required");
    if (e.n_states == 0 || e.n_actions == 0) throw ConfigError("path.custom: n_states and n_actions must be positive");
    c.get("gamma", e.gamma);
    c.get_enum("metric", e.metric, {{"ring", MetricKind::ring}, {"line", MetricKind::line}});
    const json* r0 = c.find("reward0");
    const json* r1 = c.find("reward1");
    const json* t0 = c.find("transition0");
    const json* t1 = c.find("transition1");
    c.finish();
    if (!r0 || !r1 || !t0 || !t1) throw ConfigError("path.custom: reward0, reward1, transition0 and transition1 are required");
    if (!(e.gamma > 0.0 && e.gamma < 1.0)) throw ConfigError("path.custom.gamma: must lie in (0,1)");
    if (e.metric == MetricKind::ring && e.n_states < 3) throw ConfigError("path.custom.metric: a ring needs at least 3 states");
    e.reward0 = read_table(*r0, e.n_states, e.n_actions, "path.custom.reward0");
    e.reward1 = read_table(*r1, e.n_states, e.n_actions, "path.custom.reward1");
    e.transition0 = read_kernel(*t0, e.n_states, e.n_actions, "path.custom.transition0");
    e.transition1 = read_kernel(*t1, e.n_states, e.n_actions, "path.custom.transition1");
  }
  if (!(p.fd_step > 0.0 && p.fd_step2 > 0.0)) throw ConfigError("path.fd_step/fd_step2: must be positive");
}

void parse_geometry(const json& j, GeometryOptions& g) {
  Block b(j, "geometry");
  b.get("grid", g.grid);
  double x = 0.0;
  if (b.get("delta", x)) g.delta = x;
  if (b.get("xi", x)) g.xi = x;
  if (b.get("tie_threshold", x)) g.tie_threshold = x;
  b.get("c2", g.c2);
  b.get("kink_refine", g.kink_refine);
  b.finish();
  if (g.grid < 3) throw ConfigError("geometry.grid: need at least 3 points");
  if (g.delta && !(*g.delta > 0.0)) throw ConfigError("geometry.delta: must be positive");
  if (g.xi && !(*g.xi >= 0.0)) throw ConfigError("geometry.xi: must be nonnegative");
  if (g.tie_threshold && !(*g.tie_threshold >= 0.0)) throw ConfigError("geometry.tie_threshold: must be nonnegative");
  if (!(g.c2 >= 0.0)) throw ConfigError("geometry.c2: must be nonnegative");
  if (g.kink_refine == 0) throw ConfigError("geometry.kink_refine: must be positive");
}

void parse_scheduler(const json& j, SchedulerConfig& s) {
  Block b(j, "scheduler");
  b.get("beta", s.beta);
  b.get("H", s.H);
  b.get("delta_hys", s.delta_hys);
  b.get("eps_gap", s.eps_gap);
  b.get("W1", s.W1);
  b.get("W2", s.W2);
  b.get("reward_ema", s.reward_ema);
  b.get("eta0", s.eta0);
  b.get("eta_min", s.eta_min);
  b.get("eta_max", s.eta_max);
  b.get("nu0", s.nu0);
  b.get("nu_min", s.nu_min);
  b.get("nu_max", s.nu_max);
  b.get("lambda0", s.lambda0);
  b.get("lambda_max", s.lambda_max);
  b.get("alpha1", s.alpha1);
  b.get("alpha2", s.alpha2);
  b.get("beta1", s.beta1);
  b.get("beta2", s.beta2);
  b.get("c1", s.c1);
  b.get("c2", s.c2);
  b.get("gamma1", s.gamma1);
  b.get("gamma2", s.gamma2);
  b.get("gamma3", s.gamma3);
  b.get("delta", s.delta);
  b.get("D0", s.D0);
  b.get("Dmax", s.Dmax);
  b.get("B0", s.B0);
  b.get("Bmax", s.Bmax);
  b.get_enum("eta_schedule", s.eta_schedule,
             {{"constant", EtaSchedule::constant}, {"harmonic", EtaSchedule::harmonic}});
  b.get("eta_t0", s.eta_t0);
  b.get("L_s", s.L_s);
  b.get("normalize", s.normalize);
  b.get("gap_from_target", s.gap_from_target);
  b.finish();
}

void parse_agent(const json& j, AgentConfig& a) {
  Block b(j, "agent");
  b.get("T", a.T);
  b.get("seeds", a.seeds);
  b.get("epsilon_greedy", a.epsilon_greedy);
  b.get("minibatch", a.minibatch);
  b.get("buffer_capacity", a.buffer_capacity);
  b.get("episode_length", a.episode_length);
  b.get_enum("update", a.update, {{"sample", UpdateMode::sample}, {"sweep", UpdateMode::sweep}});
  b.get("q_init", a.q_init);
  b.get("tau_snap", a.tau_snap);
  b.get("c_uct", a.c_uct);
  b.get_enum("model", a.model, {{"true", ModelKind::true_model}, {"ema", ModelKind::ema_model}});
  b.get("model_rate", a.model_rate);
  b.get("static_budget", a.static_budget);
  b.get("static_depth", a.static_depth);
  b.finish();
  if (a.seeds == 0) throw ConfigError("agent.seeds: must be at least 1");
}

void parse_process(const json& j, PathProcessConfig& p) {
  Block b(j, "process");
  b.get_enum("kind", p.kind,
             {{"linear_ramp", ProcessKind::linear_ramp}, {"noisy_ramp", ProcessKind::noisy_ramp},
              {"frozen_after", ProcessKind::frozen_after}});
  b.get("tau_start", p.tau_start);
  b.get("tau_end", p.tau_end);
  b.get("ramp_steps", p.ramp_steps);
  b.get("noise", p.noise);
  b.get("T0", p.T0);
  b.finish();
  if (!(p.tau_start >= 0.0 && p.tau_end <= 1.0 && p.tau_start <= p.tau_end))
    throw ConfigError("process: need 0 <= tau_start <= tau_end <= 1");
  if (p.ramp_steps == 0) throw ConfigError("process.ramp_steps: must be positive");
  if (!(p.noise >= 0.0 && p.noise <= 1.0)) throw ConfigError("process.noise: must lie in [0,1]");
}

void parse_tubes(const json& j, TubeSweep& t) {
  Block b(j, "tubes");
  b.get("tau0", t.tau0);
  b.get("eps", t.eps);
  b.finish();
  if (t.tau0.empty() || t.eps.empty()) throw ConfigError("tubes: tau0 and eps lists must be nonempty");
  for (double x : t.tau0)
    if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("tubes.tau0: entries must lie in [0,1]");
  for (double e : t.eps)
    if (!(e >= 0.0)) throw ConfigError("tubes.eps: entries must be nonnegative");
}

void parse_stability(const json& j, StabilitySweep& s) {
  Block b(j, "stability");
  b.get("H", s.H);
  b.get("delta_hys", s.delta_hys);
  std::string pairing = s.diagonal ? "diagonal" : "grid";
  b.get("pairing", pairing);
  b.get("large_change_eps", s.large_change_eps);
  b.finish();
  if (pairing != "diagonal" && pairing != "grid")
    throw ConfigError("stability.pairing: unknown value '" + pairing + "' (allowed: diagonal, grid)");
  s.diagonal = pairing == "diagonal";
  if (s.H.empty() || s.delta_hys.empty()) throw ConfigError("stability: H and delta_hys lists must be nonempty");
  for (std::size_t h : s.H) if (h == 0) throw ConfigError("stability.H: entries must be positive");
  for (double d : s.delta_hys) if (!(d >= 0.0)) throw ConfigError("stability.delta_hys: entries must be nonnegative");
  if (s.diagonal && s.H.size() != s.delta_hys.size())
    throw ConfigError("stability: diagonal pairing needs H and delta_hys of equal length");
  if (!(s.large_change_eps >= 0.0)) throw ConfigError("stability.large_change_eps: must be nonnegative");
}

void parse_output(const json& j, OutputSpec& o) {
  Block b(j, "output");
  b.get("directory", o.directory);
  if (const json* f = b.find("formats")) {
    if (!f->is_array()) throw ConfigError("output.formats: expected an array of \"csv\"/\"json\"");
    o.csv = o.json = false;
    for (const auto& x : *f) {
      const std::string s = x.is_string() ? x.get<std::string>() : std::string();
      if (s == "csv") o.csv = true;
      else if (s == "json") o.json = true;
      else throw ConfigError("output.formats: unknown format (allowed: csv, json)");
    }
  }
  b.finish();
  if (o.directory.empty()) throw ConfigError("output.directory: must not be empty");
}

}  // namespace

void ExperimentConfig::require(std::initializer_list<std::string_view> blocks) const {
  for (std::string_view b : blocks) {
    bool ok = true;
    if (b == "path") ok = has_path;
    else if (b == "geometry") ok = has_geometry;
    else if (b == "scheduler") ok = has_scheduler;
    else if (b == "agent") ok = has_agent;
    else if (b == "process") ok = has_process;
    else if (b == "tubes") ok = has_tubes;
    else if (b == "stability") ok = has_stability;
    else if (b == "output") ok = has_output;
    if (!ok) throw ConfigError("config is missing the '" + std::string(b) + "' block required by this command");
  }
}

ExperimentConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text.begin(), text.end(), nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Block top(j, "config");
  std::string description;
  top.get("description", description);
  if (const json* v = top.find("path")) parse_path(*v, c.path), c.has_path = true;
  if (const json* v = top.find("geometry")) parse_geometry(*v, c.geometry), c.has_geometry = true;
  if (const json* v = top.find("scheduler")) parse_scheduler(*v, c.scheduler), c.has_scheduler = true;
  if (const json* v = top.find("agent")) parse_agent(*v, c.agent), c.has_agent = true;
  if (const json* v = top.find("process")) parse_process(*v, c.process), c.has_process = true;
  if (const json* v = top.find("tubes")) parse_tubes(*v, c.tubes), c.has_tubes = true;
  if (const json* v = top.find("stability")) parse_stability(*v, c.stability), c.has_stability = true;
  if (const json* v = top.find("output")) parse_output(*v, c.output), c.has_output = true;
  top.finish();
  c.scheduler.validate();
  c.agent.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + file.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
}

MdpPath build_path(const PathSpec& spec) {
  auto finish = [&spec](MdpPath p) {
    p.set_fd_steps(spec.fd_step, spec.fd_step2);
    if (spec.derivatives == DerivativeMode::central_fd || p.has_analytic()) p.set_derivative_mode(spec.derivatives);
    return p;
  };
  switch (spec.family) {
    case PathFamily::length:
      return finish(length_dominated_path(spec.ring));
    case PathFamily::curvature:
      return finish(curvature_dominated_path(spec.ring));
    case PathFamily::kink:
      return finish(kink_prone_path(spec.ring));
    case PathFamily::custom: {
      const CustomEndpoints& e = spec.custom;
      try {
        FiniteMdp m0(e.n_states, e.n_actions, e.transition0, e.reward0, e.gamma);
        FiniteMdp m1(e.n_states, e.n_actions, e.transition1, e.reward1, e.gamma);
        GroundMetric metric = e.metric == MetricKind::ring ? GroundMetric::unit_ring(e.n_states)
                                                           : GroundMetric::unit_line(e.n_states);
        return finish(interpolated_path(m0, m1, metric, spec.profile.value_or(Profile::linear)));
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& err) {
        throw ConfigError(std::string("path.custom: ") + err.what());
      }
    }
  }
  throw ConfigError("path.family: unsupported");
}

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (x == 0.0) return "0";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return w == 0.0 ? v[lo] : v[lo] + w * (v[hi] - v[lo]);
}

// ---- certify ----

CertifyReport certify(const ExperimentConfig& config) {
  config.require({"path"});
  PathGeometry g(build_path(config.path), config.geometry);
  CertifyReport out;
  out.summary = g.summary();
  const auto& grid = out.summary.grid;
  const std::size_t N = grid.size();
  out.node_regular.resize(N);
  // irregular[k] = number of non-regular nodes among 0..k-1
  std::vector<std::size_t> irregular(N + 1, 0);
  for (std::size_t k = 0; k < N; ++k) {
    out.node_regular[k] = g.node_regular(k) ? 1 : 0;
    irregular[k + 1] = irregular[k] + (out.node_regular[k] ? 0 : 1);
  }
  std::vector<double> ratios;
  out.rows.reserve(N * (N - 1) / 2);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = i + 1; j < N; ++j) {
      AuditRow r;
      r.tau0 = grid[i];
      r.tau1 = grid[j];
      r.true_drift = sup_distance(g.q_star(i), g.q_star(j));
      r.parts = g.path_value_bound(grid[i], grid[j]);
      const bool regular = irregular[j + 1] == irregular[i];
      r.ratio = regular && r.true_drift > 0.0 ? r.parts.bound / r.true_drift : kNaN;
      if (r.true_drift > r.parts.bound + 1e-9 * std::max(1.0, r.parts.bound)) ++out.violations;
      if (r.parts.phi_term > 0.0) ++out.kink_pairs;
      if (!std::isnan(r.ratio)) ratios.push_back(r.ratio);
      out.rows.push_back(r);
    }
  }
  out.regular_pairs = ratios.size();
  out.median_ratio = quantile(ratios, 0.5);
  out.max_ratio = ratios.empty() ? kNaN : *std::max_element(ratios.begin(), ratios.end());
  return out;
}

// ---- tubes ----

TubesReport tubes(const ExperimentConfig& config) {
  config.require({"path", "tubes"});
  PathGeometry g(build_path(config.path), config.geometry);
  const auto& grid = g.summary().grid;
  TubesReport out;
  for (double tau0 : config.tubes.tau0) {
    QTable q0;
    std::string skip;
    if (!g.is_regular(tau0)) {
      skip = "non-regular base point";
    } else {
      q0 = g.solve(tau0);
    }
    for (double eps : config.tubes.eps) {
      TubeRow row;
      row.tau0 = tau0;
      row.eps = eps;
      if (skip.empty()) {
        try {
          row.first = g.tube(tau0, eps, TubeOrder::first);
          row.second = g.tube(tau0, eps, TubeOrder::second);
          row.safe = g.gap_safe_region(tau0, eps);
        } catch (const NonRegularPointError& e) {
          row.regular = false;
          row.status = std::string("non-regular base point: ") + e.what();
        }
      } else {
        row.regular = false;
        row.status = skip;
      }
      if (!row.regular) {
        row.first_max_dev = row.second_max_dev = kNaN;
        row.first.interval = row.second.interval = Interval{kNaN, kNaN};
        ++out.non_regular;
        out.rows.push_back(std::move(row));
        continue;
      }
      for (std::size_t k = 0; k < grid.size(); ++k) {
        const bool in1 = row.first.interval.contains(grid[k]);
        const bool in2 = row.second.interval.contains(grid[k]);
        if (!in1 && !in2) continue;
        const double d = sup_distance(g.q_star(k), q0);
        if (in1) row.first_max_dev = std::max(row.first_max_dev, d);
        if (in2) row.second_max_dev = std::max(row.second_max_dev, d);
      }
      const Interval a = row.first.interval, b = row.second.interval;
      row.second_strictly_inside = b.lo >= a.lo && b.hi <= a.hi && (b.lo > a.lo || b.hi < a.hi);
      const double tol = 1e-9 * std::max(1.0, eps);
      if (row.first_max_dev > eps + tol || row.second_max_dev > eps + tol) {
        row.status = "violation";
        ++out.violations;
      }
      if (row.second_strictly_inside) ++out.strictly_tighter;
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

// ---- run ----

RunMode parse_mode(std::string_view name) {
  if (name == "ht-rl") return RunMode::ht_rl;
  if (name == "static-rl") return RunMode::static_rl;
  if (name == "ht-mcts") return RunMode::ht_mcts;
  if (name == "static-mcts") return RunMode::static_mcts;
  throw ConfigError("unknown mode '" + std::string(name) + "' (allowed: ht-rl, static-rl, ht-mcts, static-mcts)");
}

std::string_view mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::ht_rl: return "ht-rl";
    case RunMode::static_rl: return "static-rl";
    case RunMode::ht_mcts: return "ht-mcts";
    case RunMode::static_mcts: return "static-mcts";
  }
  return "?";
}

namespace {

RunTrace run_one(RunContext& ctx, const ExperimentConfig& c, RunMode mode, std::uint64_t seed) {
  switch (mode) {
    case RunMode::ht_rl:
      return ht_q_learning_run(ctx, c.process, c.scheduler, c.agent, seed);
    case RunMode::static_rl:
      return static_q_learning_run(ctx, c.process, c.scheduler, c.agent, seed);
    case RunMode::ht_mcts:
      return ht_mcts_run(ctx, c.process, c.scheduler, c.agent, seed);
    case RunMode::static_mcts: {
      std::size_t budget = c.agent.static_budget;
      if (budget == 0) {
        RunTrace ht = ht_mcts_run(ctx, c.process, c.scheduler, c.agent, seed);
        double total = 0.0;
        for (const auto& h : ht.hyper) total += static_cast<double>(h.budget);
        budget = static_cast<std::size_t>(std::ceil(total / static_cast<double>(ht.size())));
      }
      return static_mcts_run(ctx, c.process, c.scheduler, c.agent, seed, budget);
    }
  }
  throw ConfigError("unsupported mode");
}

SeedSummary summarize(const RunTrace& tr, std::uint64_t seed, double eps) {
  SeedSummary s;
  s.seed = seed;
  double cum = 0.0, area = 0.0;
  for (double r : tr.regret_inc) {
    cum += r;
    area += cum;
  }
  s.cumulative_regret = cum;
  s.auc = tr.size() ? area / static_cast<double>(tr.size()) : 0.0;
  s.final_return = tr.size() ? tr.episode_return.back() : 0.0;
  s.final_e = tr.size() ? tr.e.back() : 0.0;
  for (const auto& h : tr.hyper) s.total_budget += h.budget;
  s.chatter = chatter_stats(tr.hyper, eps);
  return s;
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& config, RunMode mode) {
  config.require({"path", "process", "agent"});
  RunContext ctx = make_context(build_path(config.path), config.agent.tau_snap, config.geometry);
  RunReport out;
  out.mode = mode;
  out.T = config.agent.T;
  const std::size_t n = config.agent.seeds;
  out.traces.resize(n);
  out.seeds.resize(n);
  parallel_for(n, [&](std::size_t i) {
    RunContext local = ctx;
    out.traces[i] = run_one(local, config, mode, i);
    out.seeds[i] = summarize(out.traces[i], i, config.stability.large_change_eps);
  });
  std::vector<double> regret, auc, ret, fe, frac;
  for (const auto& s : out.seeds) {
    regret.push_back(s.cumulative_regret);
    auc.push_back(s.auc);
    ret.push_back(s.final_return);
    fe.push_back(s.final_e);
    frac.push_back(s.chatter.large_change_fraction);
  }
  out.regret_median = quantile(regret, 0.5);
  out.regret_q1 = quantile(regret, 0.25);
  out.regret_q3 = quantile(regret, 0.75);
  out.auc_median = quantile(auc, 0.5);
  out.final_return_median = quantile(ret, 0.5);
  out.final_e_median = quantile(fe, 0.5);
  out.large_change_fraction_median = quantile(frac, 0.5);
  return out;
}

// ---- scheduler stability ----

StabilityReport scheduler_stability(const ExperimentConfig& config) {
  config.require({"path", "process", "agent", "stability"});
  const StabilitySweep& sw = config.stability;
  std::vector<std::pair<std::size_t, double>> cells;
  if (sw.diagonal) {
    for (std::size_t i = 0; i < sw.H.size(); ++i) cells.emplace_back(sw.H[i], sw.delta_hys[i]);
  } else {
    for (std::size_t h : sw.H)
      for (double d : sw.delta_hys) cells.emplace_back(h, d);
  }
  const std::size_t seeds = config.agent.seeds;
  RunContext ctx = make_context(build_path(config.path), config.agent.tau_snap, config.geometry);
  StabilityReport out;
  out.runs.resize(cells.size() * seeds);
  parallel_for(out.runs.size(), [&](std::size_t task) {
    const auto [H, dh] = cells[task / seeds];
    const std::uint64_t seed = task % seeds;
    SchedulerConfig sc = config.scheduler;
    sc.H = H;
    sc.delta_hys = dh;
    RunContext local = ctx;
    const RunTrace tr = ht_q_learning_run(local, config.process, sc, config.agent, seed);
    StabilityRun& r = out.runs[task];
    r.H = H;
    r.delta_hys = dh;
    r.seed = seed;
    r.chatter = chatter_stats(tr.hyper, sw.large_change_eps);
    for (std::size_t t = 0; t + 1 < tr.size(); ++t) {
      const auto a = hyper_values(tr.hyper[t]), b = hyper_values(tr.hyper[t + 1]);
      for (std::size_t i = 0; i < 5; ++i)
        if (std::fabs(b[i] - a[i]) > sw.large_change_eps) r.large_fraction[i] += 1.0;
    }
    for (double& f : r.large_fraction) f /= static_cast<double>(tr.size());
    r.variation_bound = variation_bounds(sc, tr.size());
    r.no_chatter = no_chatter_bound(tr.smoothed, H, dh);
    double K = 0.0;
    for (const auto& x : tr.smoothed)
      K = std::max(K, sc.alpha1 * std::max(0.0, x[0]) + sc.alpha2 * std::max(0.0, x[1]));
    r.m_K = 1.0 / (1.0 + K);
    std::vector<double> eta(tr.size()), base(tr.size());
    for (std::size_t t = 0; t < tr.size(); ++t) {
      eta[t] = tr.hyper[t].eta;
      base[t] = base_eta(sc, tr.step[t]);
    }
    r.rm = robbins_monro_audit(eta, base, r.m_K);
  });
  for (std::size_t c = 0; c < cells.size(); ++c) {
    StabilityCell cell;
    cell.H = cells[c].first;
    cell.delta_hys = cells[c].second;
    std::vector<double> fr, bd;
    std::array<std::vector<double>, 5> tv;
    for (std::size_t s = 0; s < seeds; ++s) {
      const StabilityRun& r = out.runs[c * seeds + s];
      fr.push_back(r.chatter.large_change_fraction);
      bd.push_back(r.no_chatter.bound);
      for (std::size_t i = 0; i < 5; ++i) {
        tv[i].push_back(r.chatter.variation[i]);
        if (r.chatter.variation[i] > r.variation_bound[i] * (1.0 + 1e-12)) cell.variation_ok = false;
      }
      if (r.chatter.large_change_fraction > r.no_chatter.bound) cell.bound_ok = false;
      cell.rm_comparable_min = std::min(cell.rm_comparable_min, r.rm.comparable_fraction);
    }
    cell.fraction_median = quantile(fr, 0.5);
    cell.bound_median = quantile(bd, 0.5);
    for (std::size_t i = 0; i < 5; ++i) cell.variation_median[i] = quantile(tv[i], 0.5);
    out.variation_ok = out.variation_ok && cell.variation_ok;
    out.bound_ok = out.bound_ok && cell.bound_ok;
    out.cells.push_back(cell);
  }
  if (sw.diagonal) {
    for (std::size_t c = 1; c < out.cells.size(); ++c)
      if (out.cells[c].fraction_median > out.cells[c - 1].fraction_median) out.trend_nonincreasing = false;
  } else {
    const std::size_t nd = sw.delta_hys.size();
    auto at = [&](std::size_t h, std::size_t d) { return out.cells[h * nd + d].fraction_median; };
    for (std::size_t h = 0; h < sw.H.size(); ++h)
      for (std::size_t d = 0; d < nd; ++d) {
        if (h > 0 && sw.H[h] >= sw.H[h - 1] && at(h, d) > at(h - 1, d)) out.trend_nonincreasing = false;
        if (d > 0 && sw.delta_hys[d] >= sw.delta_hys[d - 1] && at(h, d) > at(h, d - 1)) out.trend_nonincreasing = false;
      }
  }
  return out;
}

// ---- files ----

namespace {

void write_file(const std::filesystem::path& p, const std::string& content, Written& w) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + p.string() + "' for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw Error("write to '" + p.string() + "' failed");
  w.files.push_back(p);
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
}

// Appends comma-separated fields and a newline.
class Row {
 public:
  explicit Row(std::string& out) : out_(out) {}
  Row& operator<<(double x) { return field(format_number(x)); }
  Row& operator<<(std::size_t x) { return field(std::to_string(x)); }
  Row& operator<<(bool x) { return field(x ? "1" : "0"); }
  Row& operator<<(const std::string& s) { return field(s); }
  ~Row() { out_ += '\n'; }

 private:
  Row& field(const std::string& s) {
    if (!first_) out_ += ',';
    out_ += s;
    first_ = false;
    return *this;
  }
  std::string& out_;
  bool first_ = true;
};

std::string header(std::string_view h) { return std::string(h) + "\n"; }

json num(double x) { return std::isfinite(x) ? json(x) : json(format_number(x)); }

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json constants_json(const GeometryConstants& c) {
  return json{{"gamma", c.gamma},           {"L_r", c.L_r},
              {"kappa", c.kappa},           {"C_mix", c.C_mix},
              {"L_s", c.L_s},               {"delta", c.delta},
              {"xi", c.xi},                 {"tie_threshold", c.tie_threshold},
              {"c2", c.c2},                 {"reward_range", c.reward_range},
              {"kink_scale", c.kink_scale}};
}

std::string_view family_name(PathFamily f) {
  switch (f) {
    case PathFamily::length: return "length";
    case PathFamily::curvature: return "curvature";
    case PathFamily::kink: return "kink";
    case PathFamily::custom: return "custom";
  }
  return "?";
}

json hyper_json(const std::array<double, 5>& v) {
  json j;
  for (std::size_t i = 0; i < 5; ++i) j[std::string(kHyperNames[i])] = num(v[i]);
  return j;
}

}  // namespace

std::string trace_csv(const RunTrace& tr) {
  std::string s = header(kTraceHeader);
  s.reserve(tr.size() * 96);
  for (std::size_t t = 0; t < tr.size(); ++t) {
    const HyperParams& h = tr.hyper[t];
    Row(s) << static_cast<std::size_t>(tr.step[t]) << tr.tau[t] << tr.e[t] << tr.regret_inc[t] << tr.geo_load[t]
           << h.eta << h.nu << h.lambda << h.depth << h.budget << tr.episode_return[t];
  }
  return s;
}

Written write_certify(const CertifyReport& r, const ExperimentConfig& config, const std::filesystem::path& dir) {
  ensure_dir(dir);
  Written w;
  const GeometrySummary& S = r.summary;
  if (config.output.csv) {
    std::string audit = header(kAuditHeader);
    audit.reserve(r.rows.size() * 120);
    for (const auto& a : r.rows)
      Row(audit) << a.tau0 << a.tau1 << a.true_drift << a.parts.bound << a.parts.pl_term << a.parts.curv_term
                 << a.parts.phi_term << a.ratio;
    write_file(dir / "certify_audit.csv", audit, w);
    std::string prof = header(kProfileHeader);
    for (std::size_t k = 0; k < S.grid.size(); ++k)
      Row(prof) << S.grid[k] << S.pl_density[k] << S.curv_density[k] << S.speed_density[k] << S.kappa_density[k]
                << S.gap_profile[k] << (r.node_regular[k] != 0);
    write_file(dir / "geometry_profile.csv", prof, w);
  }
  if (config.output.json) {
    json kinks = json::array();
    for (const auto& k : S.kinks)
      kinks.push_back({{"tau_star", k.tau_star},
                       {"window", {k.window.lo, k.window.hi}},
                       {"min_gap_in_window", k.min_gap_in_window},
                       {"local_phi", k.local_phi},
                       {"state", k.state}});
    json j{{"family", family_name(config.path.family)},
           {"grid_points", S.grid.size()},
           {"PL", S.PL},
           {"Curv", S.Curv},
           {"Phi", S.Phi},
           {"constants", constants_json(S.constants)},
           {"kinks", kinks},
           {"audit",
            {{"pairs", r.rows.size()},
             {"violations", r.violations},
             {"regular_pairs", r.regular_pairs},
             {"median_ratio", num(r.median_ratio)},
             {"max_ratio", num(r.max_ratio)},
             {"kink_pairs", r.kink_pairs}}}};
    write_file(dir / "geometry_summary.json", dump(j), w);
  }
  w.exit_code = r.violations > 0 ? 1 : 0;
  return w;
}

Written write_tubes(const TubesReport& r, const ExperimentConfig& config, const std::filesystem::path& dir) {
  ensure_dir(dir);
  Written w;
  if (config.output.csv) {
    std::string s = header(kTubesHeader);
    for (const auto& t : r.rows) {
      std::string measured;
      for (const auto& iv : t.safe.measured) {
        if (!measured.empty()) measured += ';';
        measured += format_number(iv.lo) + ":" + format_number(iv.hi);
      }
      const double clo = t.safe.certified ? t.safe.certified->lo : kNaN;
      const double chi = t.safe.certified ? t.safe.certified->hi : kNaN;
      std::string status = t.status;
      std::replace(status.begin(), status.end(), ',', ';');
      Row(s) << t.tau0 << t.eps << status << t.first.interval.lo << t.first.interval.hi << t.first_max_dev
             << t.second.interval.lo << t.second.interval.hi << t.second_max_dev << t.second_strictly_inside
             << measured << clo << chi << t.safe.warning;
    }
    write_file(dir / "tubes.csv", s, w);
  }
  if (config.output.json) {
    json rows = json::array();
    for (const auto& t : r.rows) {
      json row{{"tau0", t.tau0}, {"eps", t.eps}, {"status", t.status}};
      if (t.regular) {
        json measured = json::array();
        for (const auto& iv : t.safe.measured) measured.push_back({iv.lo, iv.hi});
        row["first"] = {{"interval", {t.first.interval.lo, t.first.interval.hi}}, {"max_dev", t.first_max_dev}};
        row["second"] = {{"interval", {t.second.interval.lo, t.second.interval.hi}}, {"max_dev", t.second_max_dev}};
        row["second_strictly_inside"] = t.second_strictly_inside;
        row["safe"] = {{"measured", measured},
                       {"certified", t.safe.certified ? json{t.safe.certified->lo, t.safe.certified->hi} : json()},
                       {"warning", t.safe.warning}};
      }
      rows.push_back(row);
    }
    json j{{"family", family_name(config.path.family)},
           {"rows", rows},
           {"violations", r.violations},
           {"non_regular", r.non_regular},
           {"strictly_tighter", r.strictly_tighter}};
    write_file(dir / "tubes_summary.json", dump(j), w);
  }
  w.exit_code = r.violations > 0 ? 1 : 0;
  return w;
}

Written write_run(const RunReport& r, const ExperimentConfig& config, const std::filesystem::path& dir) {
  ensure_dir(dir);
  Written w;
  const std::string mode(mode_name(r.mode));
  if (config.output.csv)
    for (std::size_t i = 0; i < r.traces.size(); ++i)
      write_file(dir / ("trace_" + mode + "_seed" + std::to_string(r.seeds[i].seed) + ".csv"), trace_csv(r.traces[i]), w);
  if (config.output.json) {
    json seeds = json::array();
    for (const auto& s : r.seeds)
      seeds.push_back({{"seed", s.seed},
                       {"cumulative_regret", num(s.cumulative_regret)},
                       {"auc", num(s.auc)},
                       {"final_return", num(s.final_return)},
                       {"final_e", num(s.final_e)},
                       {"total_budget", s.total_budget},
                       {"chatter",
                        {{"variation", hyper_json(s.chatter.variation)},
                         {"large_change_fraction", num(s.chatter.large_change_fraction)},
                         {"large_changes", s.chatter.large_changes},
                         {"change_steps", s.chatter.change_steps}}}});
    json j{{"mode", mode},
           {"family", family_name(config.path.family)},
           {"T", r.T},
           {"seeds", seeds},
           {"cumulative_regret",
            {{"median", num(r.regret_median)},
             {"q1", num(r.regret_q1)},
             {"q3", num(r.regret_q3)},
             {"iqr", num(r.regret_q3 - r.regret_q1)}}},
           {"auc_median", num(r.auc_median)},
           {"final_return_median", num(r.final_return_median)},
           {"final_e_median", num(r.final_e_median)},
           {"large_change_fraction_median", num(r.large_change_fraction_median)}};
    write_file(dir / ("summary_" + mode + ".json"), dump(j), w);
  }
  return w;
}

Written write_stability(const StabilityReport& r, const ExperimentConfig& config, const std::filesystem::path& dir) {
  ensure_dir(dir);
  Written w;
  if (config.output.csv) {
    std::string runs = header(kStabilityRunHeader);
    for (const auto& x : r.runs) {
      Row row(runs);
      row << x.H << x.delta_hys << static_cast<std::size_t>(x.seed) << x.chatter.large_change_fraction
          << x.no_chatter.bound << x.no_chatter.C2;
      for (double v : x.chatter.variation) row << v;
      for (double v : x.large_fraction) row << v;
      row << x.m_K << x.rm.comparable_fraction;
    }
    write_file(dir / "stability_runs.csv", runs, w);
    std::string cells = header(kStabilityCellHeader);
    for (const auto& c : r.cells) {
      SchedulerConfig sc = config.scheduler;
      sc.H = c.H;
      const auto vb = variation_bounds(sc, config.agent.T);
      Row row(cells);
      row << c.H << c.delta_hys << c.fraction_median << c.bound_median;
      for (double v : c.variation_median) row << v;
      for (double v : vb) row << v;
      row << c.variation_ok << c.bound_ok;
    }
    write_file(dir / "stability_cells.csv", cells, w);
  }
  if (config.output.json) {
    json cells = json::array();
    for (const auto& c : r.cells)
      cells.push_back({{"H", c.H},
                       {"delta_hys", num(c.delta_hys)},
                       {"fraction_median", num(c.fraction_median)},
                       {"no_chatter_bound_median", num(c.bound_median)},
                       {"variation_median", hyper_json(c.variation_median)},
                       {"variation_ok", c.variation_ok},
                       {"bound_ok", c.bound_ok},
                       {"rm_comparable_min", num(c.rm_comparable_min)}});
    json j{{"pairing", config.stability.diagonal ? "diagonal" : "grid"},
           {"T", config.agent.T},
           {"seeds", config.agent.seeds},
           {"cells", cells},
           {"variation_ok", r.variation_ok},
           {"bound_ok", r.bound_ok},
           {"trend_nonincreasing", r.trend_nonincreasing}};
    write_file(dir / "stability_summary.json", dump(j), w);
  }
  w.exit_code = r.variation_ok && r.bound_ok ? 0 : 1;
  return w;
}

Written write_snapshots(const ExperimentConfig& config, const std::filesystem::path& dir) {
  config.require({"path"});
  ensure_dir(dir);
  const MdpPath path = build_path(config.path);
  const std::vector<double> grid = uniform_grid(0.0, 1.0, config.geometry.grid);
  std::vector<FiniteMdp> snaps;
  snaps.reserve(grid.size());
  for (double t : grid) snaps.push_back(path.evaluate(t));
  Written w;
  if (config.output.csv) {
    std::string s = header(kSnapshotHeader);
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const FiniteMdp& m = snaps[k];
      for (std::size_t st = 0; st < m.n_states(); ++st)
        for (std::size_t a = 0; a < m.n_actions(); ++a)
          for (std::size_t sn = 0; sn < m.n_states(); ++sn) {
            const double p = m.prob(st, a, sn);
            if (p == 0.0) continue;
            Row(s) << grid[k] << st << a << m.reward(st, a) << sn << p;
          }
    }
    write_file(dir / "snapshots.csv", s, w);
  }
  if (config.output.json) {
    json list = json::array();
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const FiniteMdp& m = snaps[k];
      json r = json::array(), p = json::array();
      for (std::size_t st = 0; st < m.n_states(); ++st) {
        json rr = json::array(), pp = json::array();
        for (std::size_t a = 0; a < m.n_actions(); ++a) {
          rr.push_back(m.reward(st, a));
          auto row = m.row(st, a);
          pp.push_back(std::vector<double>(row.begin(), row.end()));
        }
        r.push_back(rr);
        p.push_back(pp);
      }
      list.push_back({{"tau", grid[k]}, {"reward", r}, {"transition", p}});
    }
    json j{{"family", family_name(config.path.family)},
           {"n_states", path.n_states()},
           {"n_actions", snaps.front().n_actions()},
           {"gamma", snaps.front().discount()},
           {"snapshots", list}};
    write_file(dir / "snapshots.json", dump(j), w);
  }
  return w;
}

}  // namespace htmdp
