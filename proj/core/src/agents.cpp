#include "htmdp/agents.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace htmdp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Stream ids for sub-seeds.
constexpr std::uint64_t kPathStream = 1;
constexpr std::uint64_t kEnvStream = 2;
constexpr std::uint64_t kAgentStream = 3;
constexpr std::uint64_t kPlannerStream = 4;

std::vector<double> resolve_d0(const RunContext& ctx, std::size_t n) {
  if (ctx.d0) {
    if (ctx.d0->size() != n) throw DimensionError("d0 has the wrong number of states");
    return *ctx.d0;
  }
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

std::size_t argmax_row(const QTable& q, std::size_t s) {
  std::size_t best = 0;
  for (Eigen::Index a = 1; a < q.cols(); ++a)
    if (q(static_cast<Eigen::Index>(s), a) > q(static_cast<Eigen::Index>(s), best))
      best = static_cast<std::size_t>(a);
  return best;
}

// The environment at the current tau, re-evaluated only when tau moves.
class EnvCache {
 public:
  explicit EnvCache(const MdpPath& path) : path_(path) {}
  const FiniteMdp& at(double tau) {
    if (!mdp_ || tau != tau_) {
      mdp_.emplace(path_.evaluate(tau));
      tau_ = tau;
    }
    return *mdp_;
  }

 private:
  const MdpPath& path_;
  std::optional<FiniteMdp> mdp_;
  double tau_ = 0.0;
};

// Regret of a policy on an oracle entry, reused while neither changes.
class RegretCache {
 public:
  double get(const std::shared_ptr<const OracleCache::Entry>& entry, const Policy& pi,
             std::span<const double> d0) {
    if (entry != entry_ || pi != pi_) {
      value_ = regret_increment(*entry, pi, d0);
      entry_ = entry;
      pi_ = pi;
    }
    return value_;
  }

 private:
  std::shared_ptr<const OracleCache::Entry> entry_;
  Policy pi_;
  double value_ = 0.0;
};

double geo_load(const RunContext& ctx, double t0, double t1) {
  if (!ctx.geometry || !(t1 > t0)) return 0.0;
  return ctx.geometry->path_value_bound(t0, t1, true).bound;
}

HyperParams static_hyper(const SchedulerConfig& c, std::uint64_t step) {
  return map_hyperparams(c, 0.0, 0.0, 0.0, kInf, base_eta(c, step));
}

ProxyConfig proxy_config(const SchedulerConfig& c) {
  ProxyConfig p;
  p.W1 = c.W1;
  p.W2 = c.W2;
  p.reward_ema = c.reward_ema;
  p.eps_gap = c.eps_gap;
  p.L_s = c.L_s;
  return p;
}

std::size_t buffer_capacity(const AgentConfig& a, const SchedulerConfig& c) {
  return a.buffer_capacity > 0 ? a.buffer_capacity : 2 * c.W1;
}

void push_row(RunTrace& tr, std::uint64_t step, double tau, double e, double regret, double geo,
              const HyperParams& h, double ret) {
  tr.step.push_back(step);
  tr.tau.push_back(tau);
  tr.e.push_back(e);
  tr.regret_inc.push_back(regret);
  tr.geo_load.push_back(geo);
  tr.hyper.push_back(h);
  tr.episode_return.push_back(ret);
}

// Episode bookkeeping shared by the RL and planning loops.
struct Episode {
  std::size_t steps = 0;
  double running = 0.0;
  double last = 0.0;
  // Returns true when the episode just ended.
  bool advance(double r, std::size_t length) {
    running += r;
    if (++steps < length) return false;
    last = running;
    running = 0.0;
    steps = 0;
    return true;
  }
};

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ (stream * 0xd1b54a32d192ed03ULL));
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::size_t sample_index(std::span<const double> probs, std::mt19937_64& rng) {
  if (probs.empty()) throw PreconditionError("cannot sample from an empty distribution");
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = i;
    if (u < acc) return i;
  }
  return last_positive;
}

std::vector<double> generate_taus(const PathProcessConfig& c, std::size_t T, std::uint64_t seed) {
  if (!(c.tau_start >= 0.0 && c.tau_end <= 1.0 && c.tau_start <= c.tau_end))
    throw ConfigError("path process needs 0 <= tau_start <= tau_end <= 1");
  if (c.ramp_steps == 0) throw ConfigError("ramp_steps must be positive");
  if (!(c.noise >= 0.0)) throw ConfigError("noise must be nonnegative");
  const double span = c.tau_end - c.tau_start;
  auto ramp = [&](std::size_t t) {
    if (t >= c.ramp_steps) return c.tau_end;
    return c.tau_start + span * static_cast<double>(t) / static_cast<double>(c.ramp_steps);
  };
  std::vector<double> tau(T + 1);
  switch (c.kind) {
    case ProcessKind::linear_ramp:
      for (std::size_t t = 0; t <= T; ++t) tau[t] = ramp(t);
      break;
    case ProcessKind::frozen_after:
      for (std::size_t t = 0; t <= T; ++t) tau[t] = ramp(std::min(t, c.T0));
      break;
    case ProcessKind::noisy_ramp: {
      std::mt19937_64 rng(sub_seed(seed, kPathStream));
      const double mean = span / static_cast<double>(c.ramp_steps);
      const double half = c.noise * std::sqrt(3.0);
      tau[0] = c.tau_start;
      for (std::size_t t = 1; t <= T; ++t) {
        const double inc = mean * std::max(0.0, 1.0 + half * (2.0 * uniform01(rng) - 1.0));
        tau[t] = std::min(c.tau_end, tau[t - 1] + inc);
      }
      break;
    }
  }
  return tau;
}

void AgentConfig::validate() const {
  if (T == 0) throw ConfigError("agent: T must be at least 1");
  if (!(epsilon_greedy >= 0.0 && epsilon_greedy <= 1.0))
    throw ConfigError("agent: epsilon_greedy must lie in [0,1]");
  if (minibatch == 0) throw ConfigError("agent: minibatch must be positive");
  if (episode_length == 0) throw ConfigError("agent: episode_length must be positive");
  if (!(tau_snap > 0.0 && tau_snap <= 0.1)) throw ConfigError("agent: tau_snap must lie in (0, 0.1]");
  if (!(c_uct >= 0.0)) throw ConfigError("agent: c_uct must be nonnegative");
  if (!(model_rate > 0.0)) throw ConfigError("agent: model_rate must be positive");
}

OracleCache::OracleCache(MdpPath path, double snap) : path_(std::move(path)), snap_(snap) {
  if (!(snap > 0.0)) throw PreconditionError("snap must be positive");
}

double OracleCache::snap(double tau) const {
  return std::clamp(std::round(tau / snap_) * snap_, 0.0, 1.0);
}

std::shared_ptr<const OracleCache::Entry> OracleCache::at(double tau) {
  const long long key = std::llround(tau / snap_);
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
  }
  // Solve outside the lock; a racing duplicate solve is harmless and deterministic.
  FiniteMdp m = path_.evaluate(snap(tau));
  SolveResult sol = solve_optimal(m);
  ValueFn v = max_values(sol.q);
  auto entry = std::make_shared<const Entry>(Entry{std::move(m), std::move(sol.q), std::move(v)});
  std::lock_guard<std::mutex> lock(mu_);
  return cache_.emplace(key, std::move(entry)).first->second;
}

std::size_t OracleCache::solves() const {
  std::lock_guard<std::mutex> lock(mu_);
  return cache_.size();
}

RunContext make_context(const MdpPath& path, double tau_snap,
                        std::optional<GeometryOptions> geometry) {
  RunContext ctx;
  ctx.oracle = std::make_shared<OracleCache>(path, tau_snap);
  if (geometry) ctx.geometry = std::make_shared<const PathGeometry>(path, *geometry);
  return ctx;
}

double regret_increment(const OracleCache::Entry& oracle, const Policy& pi,
                        std::span<const double> d0) {
  const QTable qpi = policy_evaluation(oracle.mdp, pi);
  double out = 0.0;
  for (std::size_t s = 0; s < pi.size(); ++s)
    out += d0[s] * (oracle.v_star(static_cast<Eigen::Index>(s)) -
                    qpi(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(pi[s])));
  return out;
}

RunTrace q_learning_run(RunContext& ctx, const PathProcessConfig& process,
                        const SchedulerConfig& scheduler, const AgentConfig& agent,
                        std::uint64_t seed, bool adaptive, const PolicyOverride& override) {
  agent.validate();
  scheduler.validate();
  if (!ctx.oracle) throw PreconditionError("run context has no oracle");
  const MdpPath& path = ctx.oracle->path();
  const std::vector<double> taus = generate_taus(process, agent.T, seed);
  std::mt19937_64 env_rng(sub_seed(seed, kEnvStream));
  std::mt19937_64 agent_rng(sub_seed(seed, kAgentStream));

  EnvCache env(path);
  const FiniteMdp& first = env.at(taus[0]);
  const std::size_t nS = first.n_states(), nA = first.n_actions();
  const double gamma = first.discount();
  const std::vector<double> d0 = resolve_d0(ctx, nS);

  QTable q = QTable::Constant(static_cast<Eigen::Index>(nS), static_cast<Eigen::Index>(nA), agent.q_init);
  QTable q_bar = q;
  ReplayBuffer buffer(buffer_capacity(agent, scheduler));
  ProxyEstimator proxies(proxy_config(scheduler));
  SchedulerState sched = scheduler_init(scheduler);
  RegretCache regret_cache;
  Episode episode;
  std::vector<StateAction> pairs;
  std::vector<std::size_t> states;

  RunTrace trace;
  std::size_t s = sample_index(d0, env_rng);
  for (std::size_t t = 0; t < agent.T; ++t) {
    const double tau = taus[t];
    const FiniteMdp& m = env.at(tau);
    const auto oracle = ctx.oracle->at(tau);

    // Measurements on Q_t before this step's update.
    Policy pi = greedy_policy(q);
    if (override)
      if (auto p = override(t, tau)) pi = std::move(*p);
    const double regret = regret_cache.get(oracle, pi, d0);
    const double err = sup_distance(q, oracle->q_star);

    std::size_t a;
    if (uniform01(agent_rng) < agent.epsilon_greedy) {
      a = std::uniform_int_distribution<std::size_t>(0, nA - 1)(agent_rng);
    } else {
      a = argmax_row(q, s);
    }
    const std::size_t sn = sample_index(m.row(s, a), env_rng);
    const double r = m.reward(s, a);
    buffer.push({s, a, r, sn, t});

    const auto batch = buffer.sample(agent.minibatch, agent_rng);
    HyperParams h;
    if (adaptive) {
      pairs.clear();
      states.clear();
      for (auto i : batch) {
        const auto& tr = buffer.at(i);
        pairs.push_back({tr.s, tr.a});
        states.push_back(tr.s);
      }
      proxies.update(buffer, pairs, states, scheduler.gap_from_target ? q_bar : q);
      sched = scheduler_step(std::move(sched), proxies.last(), t);
      if (t % scheduler.H == 0)
        trace.smoothed.push_back({sched.pl_tilde, sched.curv_tilde, sched.kink_tilde});
      h = sched.hyper;
    } else {
      h = static_hyper(scheduler, t);
    }

    const ValueFn v_bar = max_values(q_bar);
    if (agent.update == UpdateMode::sample) {
      for (auto i : batch) {
        const auto& tr = buffer.at(i);
        const auto si = static_cast<Eigen::Index>(tr.s), ai = static_cast<Eigen::Index>(tr.a);
        const double target = tr.r + gamma * v_bar(static_cast<Eigen::Index>(tr.s_next));
        q(si, ai) += h.eta * (target - q(si, ai)) - h.eta * h.lambda * (q(si, ai) - q_bar(si, ai));
      }
    } else {
      for (std::size_t ss = 0; ss < nS; ++ss)
        for (std::size_t aa = 0; aa < nA; ++aa) {
          const auto si = static_cast<Eigen::Index>(ss), ai = static_cast<Eigen::Index>(aa);
          const double target = m.reward(ss, aa) + gamma * m.expect(ss, aa, v_bar);
          q(si, ai) += h.eta * (target - q(si, ai)) - h.eta * h.lambda * (q(si, ai) - q_bar(si, ai));
        }
    }
    q_bar = (1.0 - h.nu) * q_bar + h.nu * q;

    push_row(trace, t, tau, err, regret, geo_load(ctx, tau, taus[t + 1]), h, episode.last);
    s = sn;
    if (episode.advance(r, agent.episode_length)) s = sample_index(d0, env_rng);
  }
  return trace;
}

RunTrace ht_q_learning_run(RunContext& ctx, const PathProcessConfig& process,
                           const SchedulerConfig& scheduler, const AgentConfig& agent,
                           std::uint64_t seed) {
  return q_learning_run(ctx, process, scheduler, agent, seed, true);
}

RunTrace static_q_learning_run(RunContext& ctx, const PathProcessConfig& process,
                               const SchedulerConfig& scheduler, const AgentConfig& agent,
                               std::uint64_t seed) {
  return q_learning_run(ctx, process, scheduler, agent, seed, false);
}

namespace {

struct UctNode {
  std::size_t state = 0;
  std::size_t depth_left = 0;
  std::size_t visits = 0;
  std::size_t next_untried = 0;
  std::vector<std::size_t> n;
  std::vector<double> w;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> children;  // (s', node)
};

double rollout(const FiniteMdp& m, std::size_t s, std::size_t steps, std::mt19937_64& rng) {
  double g = 0.0, disc = 1.0;
  std::uniform_int_distribution<std::size_t> pick(0, m.n_actions() - 1);
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t a = pick(rng);
    g += disc * m.reward(s, a);
    disc *= m.discount();
    s = sample_index(m.row(s, a), rng);
  }
  return g;
}

}  // namespace

UctResult uct_plan(const FiniteMdp& model, std::size_t root, std::size_t depth,
                   std::size_t budget, double c_uct, std::mt19937_64& rng) {
  const std::size_t nA = model.n_actions();
  if (depth < 1) throw PreconditionError("uct depth must be at least 1");
  if (budget < nA) throw PreconditionError("uct budget must cover every root action");
  if (root >= model.n_states()) throw DimensionError("root state out of range");
  const double gamma = model.discount();

  std::vector<UctNode> nodes;
  auto make_node = [&](std::size_t s, std::size_t d) {
    UctNode nd;
    nd.state = s;
    nd.depth_left = d;
    nd.n.assign(nA, 0);
    nd.w.assign(nA, 0.0);
    nd.children.resize(nA);
    nodes.push_back(std::move(nd));
    return nodes.size() - 1;
  };
  make_node(root, depth);

  UctResult out;
  struct Hop {
    std::size_t node, action;
    double reward;
  };
  std::vector<Hop> hops;
  for (std::size_t sim = 0; sim < budget; ++sim) {
    hops.clear();
    std::size_t cur = 0;
    double leaf = 0.0;
    while (true) {
      UctNode& nd = nodes[cur];
      std::size_t a;
      if (nd.next_untried < nA) {
        a = nd.next_untried++;
      } else {
        const double logn = std::log(static_cast<double>(nd.visits));
        double best = -kInf;
        a = 0;
        for (std::size_t b = 0; b < nA; ++b) {
          const double nb = static_cast<double>(nd.n[b]);
          const double score = nd.w[b] / nb + c_uct * std::sqrt(logn / nb);
          if (score > best) {
            best = score;
            a = b;
          }
        }
      }
      const std::size_t s = nd.state;
      const std::size_t sn = sample_index(model.row(s, a), rng);
      hops.push_back({cur, a, model.reward(s, a)});
      const std::size_t left = nd.depth_left - 1;
      if (left == 0) break;
      std::size_t child = SIZE_MAX;
      for (const auto& [st, idx] : nd.children[a])
        if (st == sn) child = idx;
      if (child != SIZE_MAX) {
        cur = child;
        continue;
      }
      // Expand one node, then finish the simulation with a random rollout from it.
      const std::size_t created = make_node(sn, left);
      nodes[cur].children[a].emplace_back(sn, created);
      ++out.expansions;
      leaf = rollout(model, sn, left, rng);
      break;
    }
    double g = leaf;
    for (auto it = hops.rbegin(); it != hops.rend(); ++it) {
      g = it->reward + gamma * g;
      UctNode& nd = nodes[it->node];
      ++nd.visits;
      ++nd.n[it->action];
      nd.w[it->action] += g;
    }
    ++out.simulations;
  }

  const UctNode& r = nodes[0];
  out.root_visits = r.n;
  out.root_value.resize(nA);
  for (std::size_t a = 0; a < nA; ++a)
    out.root_value[a] = r.n[a] > 0 ? r.w[a] / static_cast<double>(r.n[a]) : 0.0;
  out.action = 0;
  for (std::size_t a = 1; a < nA; ++a)
    if (r.n[a] > r.n[out.action]) out.action = a;
  return out;
}

namespace {

// Tabular model learned from real transitions with a shared step size.
class EmaModel {
 public:
  EmaModel(std::size_t nS, std::size_t nA, double gamma)
      : nS_(nS), nA_(nA), gamma_(gamma), p_(nS * nA * nS, 1.0 / static_cast<double>(nS)),
        r_(QTable::Zero(static_cast<Eigen::Index>(nS), static_cast<Eigen::Index>(nA))) {}

  void update(std::size_t s, std::size_t a, double r, std::size_t sn, double rate) {
    rate = std::clamp(rate, 0.0, 1.0);
    auto& rr = r_(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));
    rr += rate * (r - rr);
    double* row = p_.data() + (s * nA_ + a) * nS_;
    double total = 0.0;
    for (std::size_t k = 0; k < nS_; ++k) {
      row[k] = (1.0 - rate) * row[k] + (k == sn ? rate : 0.0);
      total += row[k];
    }
    for (std::size_t k = 0; k < nS_; ++k) row[k] /= total;
  }

  FiniteMdp mdp() const { return FiniteMdp(nS_, nA_, p_, r_, gamma_); }

 private:
  std::size_t nS_, nA_;
  double gamma_;
  std::vector<double> p_;
  QTable r_;
};

RunTrace mcts_run(RunContext& ctx, const PathProcessConfig& process,
                  const SchedulerConfig& scheduler, const AgentConfig& agent, std::uint64_t seed,
                  bool adaptive, std::size_t static_budget) {
  agent.validate();
  scheduler.validate();
  if (!ctx.oracle) throw PreconditionError("run context has no oracle");
  const MdpPath& path = ctx.oracle->path();
  const std::vector<double> taus = generate_taus(process, agent.T, seed);
  std::mt19937_64 env_rng(sub_seed(seed, kEnvStream));
  std::mt19937_64 agent_rng(sub_seed(seed, kAgentStream));
  std::mt19937_64 plan_rng(sub_seed(seed, kPlannerStream));

  EnvCache env(path);
  const FiniteMdp& first = env.at(taus[0]);
  const std::size_t nS = first.n_states(), nA = first.n_actions();
  const std::vector<double> d0 = resolve_d0(ctx, nS);

  ReplayBuffer buffer(buffer_capacity(agent, scheduler));
  ProxyEstimator proxies(proxy_config(scheduler));
  SchedulerState sched = scheduler_init(scheduler);
  EmaModel model(nS, nA, first.discount());
  Episode episode;
  QTable root_q = QTable::Zero(1, static_cast<Eigen::Index>(nA));
  std::vector<std::size_t> root_state;  // empty until the first plan
  std::vector<StateAction> pairs;

  HyperParams fixed = static_hyper(scheduler, 0);
  if (agent.static_depth > 0) fixed.depth = agent.static_depth;
  if (!adaptive) fixed.budget = static_budget;

  RunTrace trace;
  std::size_t s = sample_index(d0, env_rng);
  for (std::size_t t = 0; t < agent.T; ++t) {
    const double tau = taus[t];
    const FiniteMdp& m = env.at(tau);
    const auto oracle = ctx.oracle->at(tau);

    HyperParams h;
    if (adaptive) {
      pairs.clear();
      if (!buffer.empty())
        for (auto i : buffer.sample(agent.minibatch, agent_rng))
          pairs.push_back({buffer.at(i).s, buffer.at(i).a});
      // The gap proxy comes from the root action values of the previous plan.
      proxies.update(buffer, pairs, root_state, root_q);
      sched = scheduler_step(std::move(sched), proxies.last(), t);
      if (t % scheduler.H == 0)
        trace.smoothed.push_back({sched.pl_tilde, sched.curv_tilde, sched.kink_tilde});
      h = sched.hyper;
    } else {
      h = fixed;
      h.eta = base_eta(scheduler, t);
      h.eta = std::clamp(h.eta, scheduler.eta_min, scheduler.eta_max);
    }
    const std::size_t budget = std::max(h.budget, nA);

    UctResult plan = agent.model == ModelKind::true_model
                         ? uct_plan(m, s, h.depth, budget, agent.c_uct, plan_rng)
                         : uct_plan(model.mdp(), s, h.depth, budget, agent.c_uct, plan_rng);
    trace.expansions += plan.expansions;
    const std::size_t a = plan.action;
    for (std::size_t b = 0; b < nA; ++b) root_q(0, static_cast<Eigen::Index>(b)) = plan.root_value[b];
    root_state.assign(1, 0);

    double err = 0.0;
    for (std::size_t b = 0; b < nA; ++b)
      err = std::max(err, std::fabs(plan.root_value[b] -
                                    oracle->q_star(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(b))));
    const double regret = oracle->v_star(static_cast<Eigen::Index>(s)) -
                          oracle->q_star(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));

    const std::size_t sn = sample_index(m.row(s, a), env_rng);
    const double r = m.reward(s, a);
    buffer.push({s, a, r, sn, t});
    if (agent.model == ModelKind::ema_model) model.update(s, a, r, sn, agent.model_rate * h.eta);

    HyperParams recorded = h;
    recorded.budget = budget;
    push_row(trace, t, tau, err, regret, geo_load(ctx, tau, taus[t + 1]), recorded, episode.last);
    s = sn;
    if (episode.advance(r, agent.episode_length)) s = sample_index(d0, env_rng);
  }
  return trace;
}

}  // namespace

RunTrace ht_mcts_run(RunContext& ctx, const PathProcessConfig& process,
                     const SchedulerConfig& scheduler, const AgentConfig& agent,
                     std::uint64_t seed) {
  return mcts_run(ctx, process, scheduler, agent, seed, true, 0);
}

RunTrace static_mcts_run(RunContext& ctx, const PathProcessConfig& process,
                         const SchedulerConfig& scheduler, const AgentConfig& agent,
                         std::uint64_t seed, std::size_t budget) {
  if (budget == 0) budget = agent.static_budget > 0 ? agent.static_budget : scheduler.B0;
  return mcts_run(ctx, process, scheduler, agent, seed, false, budget);
}

double dynamic_regret(const RunTrace& trace) {
  return std::accumulate(trace.regret_inc.begin(), trace.regret_inc.end(), 0.0);
}

TrackingAudit tracking_recursion_audit(const RunTrace& trace, std::span<const double> rho_grid,
                                       double coverage) {
  if (!(coverage > 0.0 && coverage <= 1.0)) throw PreconditionError("coverage must lie in (0,1]");
  TrackingAudit out;
  const std::size_t n = trace.size() < 2 ? 0 : trace.size() - 1;
  if (n == 0 || rho_grid.empty()) return out;
  // Residual tolerance absorbs the exact solver's own error in e_t.
  constexpr double kTol = 1e-9;
  double geo_mean = 0.0;
  for (std::size_t t = 0; t < n; ++t) geo_mean += trace.geo_load[t];
  geo_mean /= static_cast<double>(n);
  const std::size_t need = static_cast<std::size_t>(std::ceil(coverage * static_cast<double>(n)));

  bool have_best = false;
  for (double rho : rho_grid) {
    std::vector<double> res(n);
    std::vector<double> slopes = {0.0};
    for (std::size_t t = 0; t < n; ++t) {
      res[t] = trace.e[t + 1] - rho * trace.e[t];
      if (trace.geo_load[t] > 0.0 && res[t] > 0.0) slopes.push_back(res[t] / trace.geo_load[t]);
    }
    std::sort(slopes.begin(), slopes.end());
    // Candidate slopes: at most 65 quantiles of the per-step ratios.
    std::vector<double> cand;
    const std::size_t k = std::min<std::size_t>(slopes.size(), 65);
    for (std::size_t i = 0; i < k; ++i)
      cand.push_back(slopes[(slopes.size() - 1) * i / std::max<std::size_t>(1, k - 1)]);
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());

    TrackingFit best;
    best.objective = kInf;
    std::vector<double> excess(n);
    for (double c1 : cand) {
      for (std::size_t t = 0; t < n; ++t) excess[t] = res[t] - c1 * trace.geo_load[t] - kTol;
      std::vector<double> sorted = excess;
      std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(need - 1), sorted.end());
      const double cn = std::max(0.0, sorted[need - 1]);
      const double obj = c1 * geo_mean + cn;
      if (obj < best.objective) {
        best.rho = rho;
        best.c1 = c1;
        best.c_noise = cn;
        best.objective = obj;
        std::size_t viol = 0;
        for (std::size_t t = 0; t < n; ++t) viol += excess[t] > cn ? 1 : 0;
        best.violation_fraction = static_cast<double>(viol) / static_cast<double>(n);
      }
    }
    out.per_rho.push_back(best);
    if (!have_best || best.objective < out.best.objective) {
      out.best = best;
      have_best = true;
    }
  }
  return out;
}

}  // namespace htmdp
