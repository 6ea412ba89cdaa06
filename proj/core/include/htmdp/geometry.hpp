#pragma once

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "htmdp/mdp.hpp"
#include "htmdp/metric.hpp"
#include "htmdp/path.hpp"

namespace htmdp {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double t) const { return t >= lo && t <= hi; }
};

struct KinkRecord {
  double tau_star = 0.0;
  Interval window;
  double min_gap_in_window = 0.0;
  double local_phi = 0.0;     // raw integral of 1 / max(g, delta) over the window
  std::size_t state = 0;      // a state whose greedy action switches
  std::vector<double> taus;   // refined gap samples across the window
  std::vector<double> gaps;
};

enum class TubeOrder { first, second };

struct TubeResult {
  double tau0 = 0.0;
  double budget_eps = 0.0;
  Interval interval;
  TubeOrder order = TubeOrder::first;
};

struct SafeRegion {
  TubeResult tube;
  std::vector<Interval> measured;     // runs of tube grid nodes with g >= xi
  std::optional<Interval> certified;  // g(tau0) - 2 * cumulative drift >= xi
  bool warning = false;               // g(tau0) < xi + 2 eps
};

struct BoundParts {
  double bound = 0.0;
  double pl_term = 0.0;
  double curv_term = 0.0;
  double phi_term = 0.0;
};

struct GeometryConstants {
  double gamma = 0.0;
  double L_r = 0.0;
  double kappa = 0.0;
  double C_mix = 0.0;
  double L_s = 0.0;
  double delta = 0.0;
  double xi = 0.0;
  double tie_threshold = 0.0;
  double c2 = 2.0;
  double reward_range = 0.0;
  double kink_scale = 0.0;  // constant multiplying the raw kink penalty in the value bound
};

struct GeometrySummary {
  std::vector<double> grid;
  std::vector<double> pl_density;
  std::vector<double> curv_density;
  std::vector<double> speed_density;
  std::vector<double> kappa_density;
  std::vector<double> gap_profile;
  double PL = 0.0;
  double Curv = 0.0;
  double Phi = 0.0;
  std::vector<KinkRecord> kinks;
  GeometryConstants constants;
};

struct GeometryOptions {
  std::size_t grid = 201;
  std::optional<double> delta;
  std::optional<double> xi;
  std::optional<double> tie_threshold;
  double c2 = 2.0;
  std::size_t kink_refine = 10;
  std::vector<char> state_mask;
  std::optional<MixingCertificate> certificate;
};

std::vector<double> uniform_grid(double lo, double hi, std::size_t points);
double trapezoid(const std::vector<double>& x, const std::vector<double>& y);

// Worst-case mixing certificate over the grid nodes of a path.
MixingCertificate path_certificate(const MdpPath& path, std::size_t grid = 201);
double scale_L_s(const MdpPath& path, const MixingCertificate& cert);

double pl_density(const MdpPath& path, double tau, double L_s);
double curv_density(const MdpPath& path, double tau, double L_s);
double speed_density(const MdpPath& path, double tau, const MixingCertificate& cert);
double curvature_density(const MdpPath& path, double tau, const MixingCertificate& cert, double c2 = 2.0);

double path_length(const MdpPath& path, double tau0, double tau1, std::size_t grid, double L_s);
double curvature(const MdpPath& path, double tau0, double tau1, std::size_t grid, double L_s);

std::vector<double> gap_profile(const MdpPath& path, const std::vector<double>& grid,
                                std::span<const char> state_mask = {});

// Greedy-policy switches between adjacent grid nodes, bisected to 1e-6, kept
// when the bracketing gap is below tie_threshold. Windows extend to where the
// gap recovers and are truncated at midpoints to stay disjoint.
std::vector<KinkRecord> detect_kinks(const MdpPath& path, const std::vector<double>& grid,
                                     double tie_threshold, std::span<const char> state_mask = {});

// Fills taus/gaps of each record with a grid refine-times denser than `spacing`.
void sample_kink_windows(const MdpPath& path, std::vector<KinkRecord>& kinks, double spacing,
                         std::size_t refine, std::span<const char> state_mask = {});

// Sum over kinks of the trapezoid integral of 1 / max(g, delta) over the window samples.
double kink_penalty(const std::vector<KinkRecord>& kinks, double delta);
// Same, with the gap given on a shared grid (linearly interpolated at window ends).
double kink_penalty(const std::vector<KinkRecord>& kinks, const std::vector<double>& grid,
                    const std::vector<double>& gaps, double delta);

struct QDerivative {
  QTable dq;
  double bound = 0.0;  // speed density at tau
};

// dQ*/dtau = R(dr + gamma * dP V*). Throws NonRegularPointError when g(tau) < xi.
QDerivative q_path_derivative(const MdpPath& path, double tau, double xi, const MixingCertificate& cert);

// Assembled certificate for one path: grid solves, densities, kinks and
// cumulative integrals for constant-time interval queries.
class PathGeometry {
 public:
  PathGeometry(const MdpPath& path, GeometryOptions options = {});

  const GeometrySummary& summary() const { return summary_; }
  const GeometryConstants& constants() const { return summary_.constants; }
  const MdpPath& path() const { return path_; }
  const QTable& q_star(std::size_t k) const { return q_grid_[k]; }
  const std::vector<QTable>& q_grid() const { return q_grid_; }
  QTable solve(double tau) const;
  double gap_at(double tau) const;

  double pl(double tau0, double tau1) const;
  double curv(double tau0, double tau1) const;
  double speed_integral(double tau0, double tau1) const;
  double kappa_integral(double tau0, double tau1) const;

  // Raw kink penalty of kinks whose tau_star lies in [tau0, tau1], or in
  // (tau0, tau1] when half_open.
  double phi(double tau0, double tau1, bool half_open = false) const;
  BoundParts path_value_bound(double tau0, double tau1, bool half_open = false) const;

  bool node_regular(std::size_t k) const { return regular_[k]; }
  bool is_regular(double tau) const;
  const KinkRecord* kink_containing(double tau) const;

  TubeResult tube(double tau0, double eps, TubeOrder order) const;
  TubeResult tube_first_order(double tau0, double eps) const { return tube(tau0, eps, TubeOrder::first); }
  TubeResult tube_second_order(double tau0, double eps) const { return tube(tau0, eps, TubeOrder::second); }
  SafeRegion gap_safe_region(double tau0, double eps, std::optional<double> xi = {},
                             TubeOrder order = TubeOrder::first) const;

 private:
  double cumulative(const std::vector<double>& cum, const std::vector<double>& dens, double tau) const;
  double tube_cost(double tau0, double x, TubeOrder order) const;

  MdpPath path_;
  GeometryOptions options_;
  GeometrySummary summary_;
  std::vector<QTable> q_grid_;
  std::vector<char> regular_;
  std::vector<double> cum_pl_, cum_curv_, cum_speed_, cum_kappa_;
  double spacing_ = 0.0;
};

// Parameter families theta -> MDP for the multi-parameter tools.
struct ParamFamily {
  std::size_t dim = 0;
  std::function<FiniteMdp(const Eigen::VectorXd&)> evaluate;
  double fd_step = 1e-5;
};

// J_theta u via the fixed-point identity with central differences of r and P along u.
QTable jacobian_vector_product(const ParamFamily& family, const Eigen::VectorXd& theta,
                               const Eigen::VectorXd& u, double xi = 1e-9);
Eigen::MatrixXd pullback_metric(const ParamFamily& family, const Eigen::VectorXd& theta, double xi = 1e-9);
bool ellipsoid_contains(const Eigen::MatrixXd& G, const Eigen::VectorXd& dtheta, double eps);

struct ParamConstraint {
  std::string name;
  std::function<double(const Eigen::VectorXd& theta, const QTable& q)> h;
};

struct ConeResult {
  bool accepted = true;
  std::vector<std::size_t> active;
  std::vector<Eigen::VectorXd> gradients;  // chain-rule gradient per active constraint
  std::vector<double> inner;               // <gradient, direction>
};

ConeResult feasible_cone(const ParamFamily& family, const Eigen::VectorXd& theta,
                         const std::vector<ParamConstraint>& constraints, double tol_active,
                         const Eigen::VectorXd& direction, double xi = 1e-9);

}  // namespace htmdp
