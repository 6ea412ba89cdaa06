#include "htmdp/mdp.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace htmdp {

FiniteMdp::FiniteMdp(std::size_t n_states, std::size_t n_actions, std::vector<double> transition,
                     QTable reward, double discount)
    : n_states_(n_states),
      n_actions_(n_actions),
      transition_(std::move(transition)),
      reward_(std::move(reward)),
      discount_(discount) {
  if (n_states_ == 0 || n_actions_ == 0) throw DimensionError("MDP needs at least one state and action");
  if (transition_.size() != n_states_ * n_actions_ * n_states_)
    throw DimensionError("transition tensor has " + std::to_string(transition_.size()) +
                         " entries, expected " + std::to_string(n_states_ * n_actions_ * n_states_));
  if (static_cast<std::size_t>(reward_.rows()) != n_states_ ||
      static_cast<std::size_t>(reward_.cols()) != n_actions_)
    throw DimensionError("reward table shape does not match (n_states, n_actions)");
  if (!(discount_ > 0.0 && discount_ < 1.0)) throw PreconditionError("discount must lie in (0,1)");
  if (!reward_.allFinite()) throw PreconditionError("reward table has non-finite entries");
  for (std::size_t sa = 0; sa < n_states_ * n_actions_; ++sa) {
    double sum = 0.0;
    for (std::size_t sn = 0; sn < n_states_; ++sn) {
      double p = transition_[sa * n_states_ + sn];
      if (!(p >= 0.0) || !std::isfinite(p))
        throw PreconditionError("transition row " + std::to_string(sa) + " has a negative entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw PreconditionError("transition row " + std::to_string(sa) + " sums to " +
                              std::to_string(sum));
  }
}

double FiniteMdp::expect(std::size_t s, std::size_t a, const ValueFn& f) const {
  const double* p = transition_.data() + (s * n_actions_ + a) * n_states_;
  double acc = 0.0;
  for (std::size_t sn = 0; sn < n_states_; ++sn) acc += p[sn] * f[sn];
  return acc;
}

namespace {

void check_shape(const FiniteMdp& mdp, const QTable& q) {
  if (static_cast<std::size_t>(q.rows()) != mdp.n_states() ||
      static_cast<std::size_t>(q.cols()) != mdp.n_actions())
    throw DimensionError("Q table shape does not match the MDP");
}

void check_policy(const FiniteMdp& mdp, const Policy& pi) {
  if (pi.size() != mdp.n_states()) throw DimensionError("policy size does not match the MDP");
  for (auto a : pi.action)
    if (a >= mdp.n_actions()) throw PreconditionError("policy action index out of range");
}

}  // namespace

ValueFn max_values(const QTable& q) { return q.rowwise().maxCoeff(); }

ValueFn policy_values(const QTable& q, const Policy& pi) {
  ValueFn v(q.rows());
  for (Eigen::Index s = 0; s < q.rows(); ++s) v[s] = q(s, pi[s]);
  return v;
}

QTable bellman_optimal_apply(const FiniteMdp& mdp, const QTable& q) {
  check_shape(mdp, q);
  ValueFn v = max_values(q);
  QTable out(q.rows(), q.cols());
  for (std::size_t s = 0; s < mdp.n_states(); ++s)
    for (std::size_t a = 0; a < mdp.n_actions(); ++a)
      out(s, a) = mdp.reward(s, a) + mdp.discount() * mdp.expect(s, a, v);
  return out;
}

QTable bellman_policy_apply(const FiniteMdp& mdp, const Policy& pi, const QTable& q) {
  check_shape(mdp, q);
  check_policy(mdp, pi);
  ValueFn v = policy_values(q, pi);
  QTable out(q.rows(), q.cols());
  for (std::size_t s = 0; s < mdp.n_states(); ++s)
    for (std::size_t a = 0; a < mdp.n_actions(); ++a)
      out(s, a) = mdp.reward(s, a) + mdp.discount() * mdp.expect(s, a, v);
  return out;
}

double bellman_residual(const FiniteMdp& mdp, const QTable& q) {
  return sup_distance(bellman_optimal_apply(mdp, q), q);
}

SolveResult value_iteration(const FiniteMdp& mdp, double tol, std::size_t max_iter) {
  if (!(tol > 0.0)) throw PreconditionError("value iteration tolerance must be positive");
  const double g = mdp.discount();
  QTable q = QTable::Zero(mdp.n_states(), mdp.n_actions());
  double residual = std::numeric_limits<double>::infinity();
  for (std::size_t it = 1; it <= max_iter; ++it) {
    QTable next = bellman_optimal_apply(mdp, q);
    residual = sup_distance(next, q);
    q = std::move(next);
    // q is now T q_prev, so ||T q - q|| <= g * residual.
    if (residual <= tol) {
      double r = bellman_residual(mdp, q);
      return {std::move(q), r, it, r * g / (1.0 - g)};
    }
  }
  throw IterationLimitError("value iteration did not reach tol " + std::to_string(tol), residual);
}

SolveResult solve_optimal(const FiniteMdp& mdp, double tol) {
  SolveResult vi = value_iteration(mdp, tol);
  QTable exact = policy_evaluation(mdp, greedy_policy(vi.q));
  double r = bellman_residual(mdp, exact);
  if (r <= vi.residual) {
    const double g = mdp.discount();
    return {std::move(exact), r, vi.iterations, r * g / (1.0 - g)};
  }
  return vi;
}

QTable policy_evaluation(const FiniteMdp& mdp, const Policy& pi) {
  return resolvent_apply(mdp, pi, mdp.reward());
}

Policy greedy_policy(const QTable& q) {
  Policy pi;
  pi.action.resize(q.rows());
  for (Eigen::Index s = 0; s < q.rows(); ++s) {
    std::size_t best = 0;
    for (Eigen::Index a = 1; a < q.cols(); ++a)
      if (q(s, a) > q(s, best)) best = a;
    pi.action[s] = best;
  }
  return pi;
}

GapResult action_gap(const QTable& q, std::span<const char> state_mask) {
  if (q.cols() < 2) throw GapUndefinedError("action gap needs at least two actions");
  if (!state_mask.empty() && state_mask.size() != static_cast<std::size_t>(q.rows()))
    throw DimensionError("state mask size does not match the Q table");
  GapResult out;
  out.per_state.resize(q.rows());
  out.global = std::numeric_limits<double>::infinity();
  for (Eigen::Index s = 0; s < q.rows(); ++s) {
    double first = -std::numeric_limits<double>::infinity();
    double second = first;
    for (Eigen::Index a = 0; a < q.cols(); ++a) {
      double v = q(s, a);
      if (v > first) {
        second = first;
        first = v;
      } else if (v > second) {
        second = v;
      }
    }
    out.per_state[s] = first - second;
    bool counted = state_mask.empty() || state_mask[s];
    if (counted && out.per_state[s] < out.global) {
      out.global = out.per_state[s];
      out.argmin_state = s;
    }
  }
  return out;
}

Eigen::MatrixXd policy_transition(const FiniteMdp& mdp, const Policy& pi) {
  check_policy(mdp, pi);
  const std::size_t nS = mdp.n_states(), nA = mdp.n_actions();
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(nS * nA, nS * nA);
  for (std::size_t s = 0; s < nS; ++s)
    for (std::size_t a = 0; a < nA; ++a) {
      auto p = mdp.row(s, a);
      for (std::size_t sn = 0; sn < nS; ++sn) m(s * nA + a, sn * nA + pi[sn]) = p[sn];
    }
  return m;
}

Resolvent::Resolvent(const FiniteMdp& mdp, const Policy& pi)
    : n_states_(mdp.n_states()), n_actions_(mdp.n_actions()) {
  const std::size_t n = n_states_ * n_actions_;
  system_ = Eigen::MatrixXd::Identity(n, n) - mdp.discount() * policy_transition(mdp, pi);
  lu_.compute(system_);
}

QTable Resolvent::solve(const QTable& x) const {
  if (static_cast<std::size_t>(x.rows()) != n_states_ ||
      static_cast<std::size_t>(x.cols()) != n_actions_)
    throw DimensionError("resolvent input shape does not match the MDP");
  if (!x.allFinite()) throw PreconditionError("resolvent input has non-finite entries");
  const Eigen::Index n = system_.rows();
  Eigen::Map<const Eigen::VectorXd> rhs(x.data(), n);
  Eigen::VectorXd y = lu_.solve(rhs);
  double scale = std::max(1.0, rhs.lpNorm<Eigen::Infinity>());
  double res = (system_ * y - rhs).lpNorm<Eigen::Infinity>();
  if (!(res < 1e-10 * scale)) throw SolverError("resolvent solve residual " + std::to_string(res));
  QTable out(n_states_, n_actions_);
  Eigen::Map<Eigen::VectorXd>(out.data(), n) = y;
  return out;
}

QTable resolvent_apply(const FiniteMdp& mdp, const Policy& pi, const QTable& x) {
  return Resolvent(mdp, pi).solve(x);
}

double sup_norm(const QTable& q) { return q.size() == 0 ? 0.0 : q.cwiseAbs().maxCoeff(); }

double sup_distance(const QTable& a, const QTable& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("Q tables differ in shape");
  return sup_norm(a - b);
}

}  // namespace htmdp
