#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

#include "htmdp/mdp.hpp"

namespace htmdp {

enum class MetricKind { line, ring, general };

// Distance on a finite state space. Line and ring metrics carry their
// structure so that W1 dual norms have exact closed forms.
class GroundMetric {
 public:
  // States placed at the given coordinates (any order, no duplicates).
  static GroundMetric line(std::vector<double> positions);
  static GroundMetric unit_line(std::size_t n);
  // Cycle 0-1-...-(n-1)-0; edge i joins state i and i+1 (mod n).
  static GroundMetric ring(std::vector<double> edge_lengths);
  static GroundMetric unit_ring(std::size_t n);
  // Arbitrary matrix; validated for symmetry, zero diagonal and triangle inequality.
  static GroundMetric general(Eigen::MatrixXd dist);

  MetricKind kind() const { return kind_; }
  std::size_t size() const { return static_cast<std::size_t>(dist_.rows()); }
  double operator()(std::size_t i, std::size_t j) const { return dist_(i, j); }
  const Eigen::MatrixXd& matrix() const { return dist_; }
  double diameter() const { return diameter_; }

  const std::vector<double>& positions() const { return positions_; }
  const std::vector<std::size_t>& order() const { return order_; }
  const std::vector<double>& edge_lengths() const { return edges_; }

 private:
  GroundMetric() = default;
  void finish();

  MetricKind kind_ = MetricKind::general;
  Eigen::MatrixXd dist_;
  double diameter_ = 0.0;
  std::vector<double> positions_;  // line only
  std::vector<std::size_t> order_;  // line only: state indices sorted by position
  std::vector<double> edges_;       // ring only
};

// Lipschitz-only dual norm sup_{||f||_Lip <= 1} |sum_i f_i xi_i| of a
// zero-mass signed measure (the Kantorovich-Rubinstein W1 norm).
double w1_dual_norm(std::span<const double> xi, const GroundMetric& metric);

// Min-cost transport of xi+ onto xi- under a cost matrix. Works for any metric.
double transport_cost(std::span<const double> xi, const Eigen::MatrixXd& cost);

double w1_distance(std::span<const double> p, std::span<const double> q, const GroundMetric& metric);

// (diameter / 2) * ||xi||_1, an upper bound on the dual norm.
double l1_surrogate_norm(std::span<const double> xi, const GroundMetric& metric);

double lipschitz_seminorm(std::span<const double> f, const GroundMetric& metric);
inline double lipschitz_seminorm(const ValueFn& f, const GroundMetric& metric) {
  return lipschitz_seminorm(std::span<const double>(f.data(), f.size()), metric);
}

struct MixingCertificate {
  double L_r = 0.0;
  double kappa = 0.0;
  double gamma = 0.0;
  double C_mix = 0.0;
};

MixingCertificate mixing_certificate(const FiniteMdp& mdp, const GroundMetric& metric);

// Worst case of L_r and kappa over several MDPs sharing a metric and discount.
MixingCertificate combine_certificates(std::span<const MixingCertificate> certs);

}  // namespace htmdp
