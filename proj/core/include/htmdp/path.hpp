#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "htmdp/mdp.hpp"
#include "htmdp/metric.hpp"

namespace htmdp {

enum class DerivativeMode { analytic, central_fd };

// First and second tau-derivatives of rewards and kernels. Kernel rows use
// the same flat layout as FiniteMdp::transition().
struct PathDerivatives {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  QTable dr, ddr;
  std::vector<double> dP, ddP;

  std::span<const double> dP_row(std::size_t s, std::size_t a) const {
    return {dP.data() + (s * n_actions + a) * n_states, n_states};
  }
  std::span<const double> ddP_row(std::size_t s, std::size_t a) const {
    return {ddP.data() + (s * n_actions + a) * n_states, n_states};
  }
};

struct SpeedTerms {
  double dr_inf = 0.0;
  double dP_w1 = 0.0;
  double ddr_inf = 0.0;
  double ddP_w1 = 0.0;
};

class MdpPath {
 public:
  using Evaluator = std::function<FiniteMdp(double)>;
  using Differentiator = std::function<PathDerivatives(double)>;

  MdpPath(Evaluator evaluate, GroundMetric metric, Differentiator analytic = {});

  FiniteMdp evaluate(double tau) const;
  const GroundMetric& metric() const { return metric_; }
  std::size_t n_states() const { return metric_.size(); }

  DerivativeMode derivative_mode() const { return mode_; }
  bool has_analytic() const { return static_cast<bool>(analytic_); }
  void set_derivative_mode(DerivativeMode mode);

  double fd_step() const { return fd_step_; }
  double fd_step2() const { return fd_step2_; }
  void set_fd_steps(double first, double second);

  // Value-scale constant for kernel terms; unset means "use C_mix".
  std::optional<double> scale_L_s() const { return scale_L_s_; }
  void set_scale_L_s(std::optional<double> v) { scale_L_s_ = v; }

  const Differentiator& analytic() const { return analytic_; }

 private:
  Evaluator evaluate_;
  GroundMetric metric_;
  Differentiator analytic_;
  DerivativeMode mode_;
  double fd_step_ = 1e-4;
  double fd_step2_ = 1e-3;
  std::optional<double> scale_L_s_;
};

PathDerivatives path_derivatives(const MdpPath& path, double tau);
PathDerivatives finite_difference_derivatives(const MdpPath& path, double tau, double h1, double h2);
SpeedTerms path_speed_terms(const MdpPath& path, double tau);
SpeedTerms speed_terms(const PathDerivatives& d, const GroundMetric& metric);

// Smoothstep 3t^2 - 2t^3 and its derivatives.
double s_curve(double t);
double s_curve_d1(double t);
double s_curve_d2(double t);

enum class Profile { linear, scurve };
enum class BumpMotion { blend, continuous, floored };

// Signed wrap-around displacement s - c on a ring of n states, in (-n/2, n/2].
double ring_displacement(std::size_t n, double s, double c);
double ring_bump(std::size_t n, double s, double c, double sigma);

// Ring with actions L, N, R (indices 0, 1, 2). The deterministic successor is
// mixed with uniform noise; a fraction `bias` of the deterministic mass lands
// one state further clockwise.
FiniteMdp ring_mdp(std::size_t n, double epsilon_mix, double gamma, double bump_center,
                   double bump_width, std::span<const double> action_weights, double bias = 0.0);
std::vector<double> ring_kernel(std::size_t n, double epsilon_mix, double bias);

struct RingPathConfig {
  std::size_t n = 20;
  double gamma = 0.95;
  double epsilon_mix = 0.05;
  double sigma = 1.5;
  double c0 = 5.0;
  double c1 = 5.0;
  std::array<double, 3> weights0{0.4, 1.0, 0.7};
  std::array<double, 3> weights1{0.8, 2.0, 1.4};
  double bias0 = 0.0;
  double bias1 = 0.0;
  std::array<double, 2> alpha_profile{0.2, 0.8};
  BumpMotion motion = BumpMotion::blend;
};

// M(tau) = (1 - u) M0 + u M1 with u = profile(tau). Exact analytic derivatives.
MdpPath interpolated_path(const FiniteMdp& m0, const FiniteMdp& m1, GroundMetric metric,
                          Profile profile = Profile::linear);
MdpPath stationary_path(const FiniteMdp& m, GroundMetric metric);

MdpPath length_dominated_path(const RingPathConfig& cfg);
MdpPath curvature_dominated_path(const RingPathConfig& cfg);
MdpPath kink_prone_path(const RingPathConfig& cfg);

}  // namespace htmdp
