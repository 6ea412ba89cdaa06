#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "htmdp/errors.hpp"
#include "htmdp/mdp.hpp"

namespace htmdp {

struct Transition {
  std::size_t s = 0;
  std::size_t a = 0;
  double r = 0.0;
  std::size_t s_next = 0;
  std::uint64_t step = 0;
};

struct StateAction {
  std::size_t s = 0;
  std::size_t a = 0;
  bool operator==(const StateAction&) const = default;
};

// Fixed-capacity ring of transitions, oldest first. Steps must strictly increase.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(const Transition& t);
  std::size_t size() const { return size_; }
  std::size_t capacity() const { return data_.size(); }
  bool empty() const { return size_ == 0; }
  // i = 0 is the oldest entry.
  const Transition& at(std::size_t i) const;
  std::uint64_t first_step() const;
  std::uint64_t last_step() const;
  // Number of steps covered, last - first + 1 (0 when empty).
  std::uint64_t span_steps() const;
  // First logical index whose step is >= step (size() if none).
  std::size_t lower_index(std::uint64_t step) const;
  // Uniform sample of n entries with replacement.
  std::vector<std::size_t> sample(std::size_t n, std::mt19937_64& rng) const;
  void clear();

 private:
  std::vector<Transition> data_;
  std::size_t head_ = 0;  // physical slot of the oldest entry
  std::size_t size_ = 0;
};

// Largest |r_hat_t - r_hat_{t-W1}| over the batch pairs, with r_hat an EMA of observed
// rewards per pair. nullopt until the buffer covers 2*W1 steps.
std::optional<double> reward_drift(const ReplayBuffer& buffer, std::size_t W1,
                                   std::span<const StateAction> batch, double ema = 0.1);

// Largest ||mu_t - mu_{t-W1}||_2 over the batch pairs, mu being the mean next-state feature over
// the windows [t-W1+1, t] and [t-2W1+1, t-W1]. An empty feature matrix means one-hot features.
// A pair missing from either window contributes 0.
std::optional<double> feature_mean_drift(const ReplayBuffer& buffer, std::size_t W1,
                                         std::span<const StateAction> batch,
                                         const Eigen::MatrixXd& features = {});

// min over states of best minus second best entry of q; +inf for an empty set.
double minibatch_gap(const QTable& q, std::span<const std::size_t> states);

struct ProxySignals {
  double delta_r_inf = 0.0;
  double delta_p_phi = 0.0;
  double delta_pl_hat = 0.0;
  double delta_curv_hat = 0.0;
  double gap_hat = 0.0;
  int kink = 0;
  bool ready = false;  // drift terms came from a full history rather than being carried over
};

ProxySignals combine_proxies(double delta_r, double delta_p, double L_s,
                             std::optional<double> pl_lagged, double gap_hat, double eps_gap);

struct ProxyConfig {
  std::size_t W1 = 500;
  std::size_t W2 = 1500;
  double reward_ema = 0.1;
  double eps_gap = 0.02;
  double L_s = 1.0;
  Eigen::MatrixXd features;  // empty: one-hot
};

// Stateful wrapper that keeps the PL history needed for the curvature proxy and carries the
// last drift values forward while the buffer is too short.
class ProxyEstimator {
 public:
  explicit ProxyEstimator(ProxyConfig config);

  const ProxySignals& update(const ReplayBuffer& buffer, std::span<const StateAction> batch,
                             std::span<const std::size_t> gap_states, const QTable& q);
  const ProxySignals& last() const { return last_; }
  const ProxyConfig& config() const { return config_; }

 private:
  ProxyConfig config_;
  ProxySignals last_;
  std::deque<std::pair<std::uint64_t, double>> pl_history_;
};

enum class EtaSchedule { constant, harmonic };

struct SchedulerConfig {
  double beta = 0.9;
  std::size_t H = 50;
  double delta_hys = 0.05;
  double eps_gap = 0.02;
  std::size_t W1 = 500;
  std::size_t W2 = 1500;
  double reward_ema = 0.1;
  double eta0 = 0.2, eta_min = 1e-5, eta_max = 0.5;
  double nu0 = 0.05, nu_min = 1e-4, nu_max = 0.5;
  double lambda0 = 0.05, lambda_max = 1.0;
  double alpha1 = 1.0, alpha2 = 1.0;
  double beta1 = 1.0, beta2 = 0.01;
  double c1 = 1.0, c2 = 1.0;
  double gamma1 = 2.0, gamma2 = 1.0, gamma3 = 4.0;
  double delta = 1e-3;
  std::size_t D0 = 8, Dmax = 40;
  std::size_t B0 = 64, Bmax = 512;
  // Base learning-rate schedule evaluated at the macro-time H*floor(t/H).
  EtaSchedule eta_schedule = EtaSchedule::constant;
  double eta_t0 = 1000.0;
  double L_s = 1.0;
  bool normalize = false;
  bool gap_from_target = false;

  void validate() const;
};

struct HyperParams {
  double eta = 0.0;
  double nu = 0.0;
  double lambda = 0.0;
  std::size_t depth = 0;
  std::size_t budget = 0;
  bool operator==(const HyperParams&) const = default;
};

inline constexpr std::array<std::string_view, 5> kHyperNames = {"eta", "nu", "lambda", "depth",
                                                               "budget"};
std::array<double, 5> hyper_values(const HyperParams& h);

struct SchedulerState {
  double pl_tilde = 0.0;
  double curv_tilde = 0.0;
  double kink_tilde = 0.0;
  std::uint64_t last_update_step = 0;
  std::size_t updates = 0;
  HyperParams hyper;
  SchedulerConfig config;
  double eta_factor = 1.0;  // 1/(1 + a1 PL + a2 Curv) at the last update
  // Running moments for the optional z-scoring of the raw proxies.
  std::array<double, 3> norm_mean{};
  std::array<double, 3> norm_var{};
  bool norm_started = false;
};

double base_eta(const SchedulerConfig& config, std::uint64_t step);

// Clipped hyperparameters for given smoothed proxies and gap estimate. Depth and budget come
// from the ceil formulas capped at Dmax and Bmax.
HyperParams map_hyperparams(const SchedulerConfig& config, double pl, double curv, double kink,
                            double gap, double eta_base);
double eta_factor(const SchedulerConfig& config, double pl, double curv);

// Hyperparameters at zero proxies and an infinite gap.
SchedulerState scheduler_init(const SchedulerConfig& config);

// One step of EMA smoothing and hysteresis. Only steps that are multiples of H can change
// anything; there the base learning rate also advances to the new macro-time.
SchedulerState scheduler_step(SchedulerState state, const ProxySignals& raw, std::uint64_t step);

// Attainable interval of each hyperparameter, in kHyperNames order.
std::array<std::pair<double, double>, 5> hyper_ranges(const SchedulerConfig& config);
// ceil(T/H) * (hi - lo) per hyperparameter.
std::array<double, 5> variation_bounds(const SchedulerConfig& config, std::size_t T);

struct ChatterStats {
  std::array<double, 5> variation{};
  double large_change_fraction = 0.0;
  std::size_t large_changes = 0;
  std::size_t change_steps = 0;
};

// Changes are counted over transitions t -> t+1; the fraction divides by the trace length.
ChatterStats chatter_stats(std::span<const HyperParams> trace, double eps);

// Fraction of steps with c * base_t <= eta_t <= base_t, plus partial sums.
struct RmAudit {
  double comparable_fraction = 0.0;
  double sum_eta = 0.0;
  double sum_eta_sq = 0.0;
  double sum_base = 0.0;
  double sum_base_sq = 0.0;
};

RmAudit robbins_monro_audit(std::span<const double> eta, std::span<const double> base, double c);

// Chebyshev bound 2 C2 / (H dhys^2) with C2 = 4 max ||X~||^2 over the given smoothed triples.
struct NoChatterBound {
  double C2 = 0.0;
  double bound = 0.0;
};
NoChatterBound no_chatter_bound(std::span<const std::array<double, 3>> smoothed, std::size_t H,
                                double delta_hys);

}  // namespace htmdp
