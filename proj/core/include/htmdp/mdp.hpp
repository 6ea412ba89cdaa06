#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "htmdp/errors.hpp"

namespace htmdp {

// Row-major so that the flat state-action index is s * n_actions + a.
using QTable = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ValueFn = Eigen::VectorXd;

struct Policy {
  std::vector<std::size_t> action;

  std::size_t size() const { return action.size(); }
  std::size_t operator[](std::size_t s) const { return action[s]; }
  bool operator==(const Policy&) const = default;
};

// Tabular discounted MDP. transition is stored flat as [(s*nA + a)*nS + s'].
class FiniteMdp {
 public:
  FiniteMdp(std::size_t n_states, std::size_t n_actions, std::vector<double> transition,
            QTable reward, double discount);

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  double discount() const { return discount_; }
  const QTable& reward() const { return reward_; }
  double reward(std::size_t s, std::size_t a) const { return reward_(s, a); }
  const std::vector<double>& transition() const { return transition_; }

  std::span<const double> row(std::size_t s, std::size_t a) const {
    return {transition_.data() + (s * n_actions_ + a) * n_states_, n_states_};
  }
  double prob(std::size_t s, std::size_t a, std::size_t sn) const {
    return transition_[(s * n_actions_ + a) * n_states_ + sn];
  }

  // E_{s' ~ P(.|s,a)} f(s')
  double expect(std::size_t s, std::size_t a, const ValueFn& f) const;

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<double> transition_;
  QTable reward_;
  double discount_;
};

struct SolveResult {
  QTable q;
  double residual = 0.0;     // ||T q - q||_inf
  std::size_t iterations = 0;
  double error_bound = 0.0;  // a posteriori bound on ||q - Q*||_inf
};

struct GapResult {
  std::vector<double> per_state;
  double global = 0.0;
  std::size_t argmin_state = 0;
};

ValueFn max_values(const QTable& q);
ValueFn policy_values(const QTable& q, const Policy& pi);

QTable bellman_optimal_apply(const FiniteMdp& mdp, const QTable& q);
QTable bellman_policy_apply(const FiniteMdp& mdp, const Policy& pi, const QTable& q);
double bellman_residual(const FiniteMdp& mdp, const QTable& q);

SolveResult value_iteration(const FiniteMdp& mdp, double tol = 1e-10,
                            std::size_t max_iter = 1000000);

// Value iteration followed by exact evaluation of the greedy policy, which is
// kept when its Bellman residual is no worse. On small MDPs this returns Q*
// to machine precision.
SolveResult solve_optimal(const FiniteMdp& mdp, double tol = 1e-10);

QTable policy_evaluation(const FiniteMdp& mdp, const Policy& pi);
Policy greedy_policy(const QTable& q);

// Per-state best minus second best. An optional mask restricts the global
// minimum to a subset of states.
GapResult action_gap(const QTable& q, std::span<const char> state_mask = {});

Eigen::MatrixXd policy_transition(const FiniteMdp& mdp, const Policy& pi);

// Factorizes (I - gamma P^pi) once; solve() can then be called repeatedly.
class Resolvent {
 public:
  Resolvent(const FiniteMdp& mdp, const Policy& pi);
  QTable solve(const QTable& x) const;

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  Eigen::MatrixXd system_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
};

QTable resolvent_apply(const FiniteMdp& mdp, const Policy& pi, const QTable& x);

double sup_norm(const QTable& q);
double sup_distance(const QTable& a, const QTable& b);

}  // namespace htmdp
