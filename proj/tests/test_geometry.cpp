#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "htmdp/geometry.hpp"
#include "regimes.hpp"

using namespace htmdp;

namespace {

FiniteMdp base_mdp() { return ring_mdp(10, 0.1, 0.9, 3.0, 1.5, std::vector<double>{0.3, 1.0, 0.6}); }

MdpPath reward_only_path(QTable& delta) {
  FiniteMdp m0 = base_mdp();
  delta = QTable(10, 3);
  for (int s = 0; s < 10; ++s)
    for (int a = 0; a < 3; ++a) delta(s, a) = 0.05 * ((s * 7 + a * 3) % 5) - 0.1;
  FiniteMdp m1(10, 3, m0.transition(), m0.reward() + delta, 0.9);
  return interpolated_path(m0, m1, GroundMetric::unit_ring(10));
}

const PathGeometry& moving_geometry() {
  static const PathGeometry g(curvature_dominated_path(regimes::moving_config()), GeometryOptions{.grid = 101});
  return g;
}

}  // namespace

TEST(SpeedDensity, StationaryAndRewardOnly) {
  MdpPath st = stationary_path(base_mdp(), GroundMetric::unit_ring(10));
  MixingCertificate cert = path_certificate(st, 5);
  EXPECT_EQ(speed_density(st, 0.4, cert), 0.0);
  EXPECT_EQ(curvature_density(st, 0.4, cert), 0.0);
  QTable delta;
  MdpPath p = reward_only_path(delta);
  MixingCertificate c2 = path_certificate(p, 5);
  EXPECT_NEAR(speed_density(p, 0.4, c2), 10.0 * sup_norm(delta), 1e-12);
  // Linear path: only the first-order c2 term remains.
  EXPECT_NEAR(curvature_density(p, 0.4, c2), 2.0 * 1000.0 * sup_norm(delta), 1e-8);
}

TEST(SpeedDensity, DominatesFixedPointDerivative) {
  const PathGeometry& g = moving_geometry();
  MixingCertificate cert{g.constants().L_r, g.constants().kappa, g.constants().gamma, g.constants().C_mix};
  int checked = 0;
  for (std::size_t k = 0; k < g.summary().grid.size(); k += 5) {
    if (!g.node_regular(k)) continue;
    double tau = g.summary().grid[k];
    QDerivative d = q_path_derivative(g.path(), tau, g.constants().xi, cert);
    EXPECT_LE(sup_norm(d.dq), d.bound * (1 + 1e-12) + 1e-15);
    EXPECT_NEAR(d.bound, g.summary().speed_density[k], 1e-12 * (1 + d.bound));
    ++checked;
  }
  EXPECT_GE(checked, 10);
}

TEST(CurvatureDensity, DominatesSecondDifferences) {
  const PathGeometry& g = moving_geometry();
  const double h = 1e-3;
  int checked = 0;
  for (std::size_t k = 2; k + 2 < g.summary().grid.size(); k += 6) {
    double tau = g.summary().grid[k];
    if (!g.node_regular(k - 1) || !g.node_regular(k + 1)) continue;
    QTable dd = (g.solve(tau + h) - 2.0 * g.solve(tau) + g.solve(tau - h)) / (h * h);
    EXPECT_LE(sup_norm(dd), g.summary().kappa_density[k]);
    ++checked;
  }
  EXPECT_GE(checked, 10);
}

TEST(PathLength, BasicsAndAdditivity) {
  MdpPath st = stationary_path(base_mdp(), GroundMetric::unit_ring(10));
  EXPECT_EQ(path_length(st, 0, 1, 11, 3.0), 0.0);
  EXPECT_EQ(curvature(st, 0, 1, 11, 3.0), 0.0);
  QTable delta;
  MdpPath p = reward_only_path(delta);
  EXPECT_NEAR(path_length(p, 0.2, 0.7, 21, 3.0), 0.5 * sup_norm(delta), 1e-14);
  EXPECT_THROW(path_length(p, 0.0, 1.0, 1, 3.0), PreconditionError);
  MdpPath m = curvature_dominated_path(regimes::moving_config());
  double whole = path_length(m, 0, 1, 201, 5.0);
  double parts = path_length(m, 0, 0.5, 101, 5.0) + path_length(m, 0.5, 1, 101, 5.0);
  EXPECT_NEAR(whole, parts, 1e-10);
  double cw = curvature(m, 0, 1, 201, 5.0);
  EXPECT_NEAR(cw, curvature(m, 0, 0.5, 101, 5.0) + curvature(m, 0.5, 1, 101, 5.0), 1e-10);
}

TEST(PathGeometry, SummaryInvariants) {
  const PathGeometry& g = moving_geometry();
  const auto& S = g.summary();
  EXPECT_NEAR(S.PL, trapezoid(S.grid, S.pl_density), 1e-12);
  EXPECT_NEAR(S.Curv, trapezoid(S.grid, S.curv_density), 1e-12);
  EXPECT_GE(S.PL, 0.0);
  EXPECT_GE(S.Curv, 0.0);
  EXPECT_GE(S.Phi, 0.0);
  EXPECT_NEAR(g.pl(0.0, 1.0), S.PL, 1e-12);
  EXPECT_NEAR(g.pl(0.0, 0.37) + g.pl(0.37, 1.0), S.PL, 1e-12);
}

TEST(GapProfile, DominantActionPositive) {
  FiniteMdp m = base_mdp();
  QTable r = m.reward();
  r.col(1).array() += 5.0;
  FiniteMdp m1(10, 3, m.transition(), r, 0.9);
  std::vector<double> g = gap_profile(interpolated_path(m, m1, GroundMetric::unit_ring(10)), uniform_grid(0, 1, 11));
  for (double x : g) EXPECT_GT(x, 0.0);
}

TEST(GapProfile, KinkTouchesZeroAndIsContinuous) {
  MdpPath p = kink_prone_path(regimes::kink_config());
  PathGeometry g(p);
  const auto& S = g.summary();
  EXPECT_LE(*std::min_element(S.gap_profile.begin(), S.gap_profile.end()), 1e-12);
  for (std::size_t k = 0; k + 1 < S.grid.size(); ++k)
    EXPECT_LE(std::abs(S.gap_profile[k + 1] - S.gap_profile[k]),
              2.0 * sup_distance(g.q_star(k + 1), g.q_star(k)) + 1e-12);
}

TEST(DetectKinks, LengthPathHasNone) {
  MdpPath p = length_dominated_path(regimes::length_config());
  std::vector<double> grid = uniform_grid(0, 1, 101);
  std::vector<double> gaps = gap_profile(p, grid);
  EXPECT_TRUE(detect_kinks(p, grid, 0.05 * *std::max_element(gaps.begin(), gaps.end())).empty());
}

TEST(DetectKinks, KinkPathHasOneSwitch) {
  MdpPath p = kink_prone_path(regimes::kink_config());
  std::vector<double> grid = uniform_grid(0, 1, 101);
  auto kinks = detect_kinks(p, grid, 0.01);
  ASSERT_EQ(kinks.size(), 1u);
  const KinkRecord& k = kinks[0];
  EXPECT_NEAR(k.tau_star, 0.5, 1e-5);
  EXPECT_LT(k.window.lo, k.tau_star);
  EXPECT_GT(k.window.hi, k.tau_star);
  Policy lo = greedy_policy(solve_optimal(p.evaluate(k.window.lo)).q);
  Policy hi = greedy_policy(solve_optimal(p.evaluate(k.window.hi)).q);
  EXPECT_NE(lo[k.state], hi[k.state]);
  EXPECT_THROW(detect_kinks(p, grid, 0.0), PreconditionError);
}

TEST(KinkPenalty, ClosedForms) {
  EXPECT_EQ(kink_penalty({}, 1e-3), 0.0);
  KinkRecord k;
  k.tau_star = 0.5;
  k.window = {0.4, 0.6};
  k.taus = uniform_grid(0.4, 0.6, 9);
  k.gaps.assign(9, 0.0);
  EXPECT_NEAR(kink_penalty({k}, 0.01), 0.2 / 0.01, 1e-9);
  std::vector<double> grid = uniform_grid(0, 1, 11), gaps(11, 0.0);
  EXPECT_NEAR(kink_penalty({k}, grid, gaps, 0.01), 0.2 / 0.01, 1e-9);
  KinkRecord k2 = k;
  k2.tau_star = 0.55;
  k2.window = {0.5, 0.7};
  EXPECT_THROW(kink_penalty({k, k2}, 0.01), PreconditionError);
  EXPECT_THROW(kink_penalty({k}, 0.0), PreconditionError);
}

TEST(KinkPenalty, NonincreasingInDelta) {
  PathGeometry g(kink_prone_path(regimes::kink_config()));
  const auto& kinks = g.summary().kinks;
  double prev = std::numeric_limits<double>::infinity();
  for (double d : {1e-4, 1e-3, 1e-2, 1e-1, 1.0}) {
    double phi = kink_penalty(kinks, d);
    EXPECT_LE(phi, prev);
    prev = phi;
  }
}

TEST(QPathDerivative, StationaryAndNonRegular) {
  MdpPath st = stationary_path(base_mdp(), GroundMetric::unit_ring(10));
  MixingCertificate cert = path_certificate(st, 3);
  EXPECT_EQ(sup_norm(q_path_derivative(st, 0.5, 0.0, cert).dq), 0.0);
  MdpPath kp = kink_prone_path(regimes::kink_config());
  EXPECT_THROW(q_path_derivative(kp, 0.5, 1e-3, path_certificate(kp, 11)), NonRegularPointError);
}

TEST(QPathDerivative, MatchesFiniteDifferences) {
  const PathGeometry& g = moving_geometry();
  MixingCertificate cert{g.constants().L_r, g.constants().kappa, g.constants().gamma, g.constants().C_mix};
  const double h = 1e-4;
  for (double tau : {0.2, 0.45, 0.8}) {
    QTable dq = q_path_derivative(g.path(), tau, g.constants().xi, cert).dq;
    QTable fd = (g.solve(tau + h) - g.solve(tau - h)) / (2 * h);
    EXPECT_LE(sup_distance(dq, fd), std::max(1e-6, 10 * h * h));
  }
}

TEST(PathValueBound, StationaryIsZero) {
  PathGeometry g(stationary_path(base_mdp(), GroundMetric::unit_ring(10)), GeometryOptions{.grid = 11});
  BoundParts b = g.path_value_bound(0.1, 0.9);
  EXPECT_EQ(b.bound, 0.0);
  EXPECT_EQ(sup_distance(g.q_star(1), g.q_star(9)), 0.0);
}

TEST(PathValueBound, DominatesOnAllPairs) {
  std::vector<MdpPath> paths{length_dominated_path(regimes::length_config()),
                             curvature_dominated_path(regimes::length_config()),
                             kink_prone_path(regimes::kink_config()),
                             curvature_dominated_path(regimes::moving_config())};
  for (const auto& p : paths) {
    PathGeometry g(p, GeometryOptions{.grid = 51});
    const auto& grid = g.summary().grid;
    for (std::size_t i = 0; i < grid.size(); ++i)
      for (std::size_t j = i + 1; j < grid.size(); ++j)
        EXPECT_GE(g.path_value_bound(grid[i], grid[j]).bound, sup_distance(g.q_star(i), g.q_star(j)));
  }
}

TEST(PathValueBound, LengthRegimeTerms) {
  PathGeometry g(length_dominated_path(regimes::length_config()), GeometryOptions{.grid = 51});
  BoundParts b = g.path_value_bound(0.0, 1.0);
  EXPECT_EQ(b.phi_term, 0.0);
  EXPECT_LT(b.curv_term, 1e-6 / std::pow(0.05, 3));
}

TEST(PathValueBound, KinkTermOnlyOnStraddlingPairs) {
  PathGeometry g(kink_prone_path(regimes::kink_config()));
  EXPECT_GT(g.path_value_bound(0.4, 0.6).phi_term, 0.0);
  EXPECT_EQ(g.path_value_bound(0.1, 0.4).phi_term, 0.0);
  EXPECT_EQ(g.path_value_bound(0.6, 0.9).phi_term, 0.0);
  EXPECT_EQ(g.path_value_bound(0.3, 0.5, true).phi_term, g.path_value_bound(0.3, 0.5).phi_term);
  const double ts = g.summary().kinks.at(0).tau_star;
  EXPECT_EQ(g.path_value_bound(ts, 0.7, true).phi_term, 0.0);
  EXPECT_GT(g.path_value_bound(0.3, ts, true).phi_term, 0.0);
}

TEST(Tubes, StationaryAndDegenerate) {
  PathGeometry st(stationary_path(base_mdp(), GroundMetric::unit_ring(10)), GeometryOptions{.grid = 21});
  TubeResult t = st.tube_first_order(0.3, 0.1);
  EXPECT_EQ(t.interval.lo, 0.0);
  EXPECT_EQ(t.interval.hi, 1.0);
  const PathGeometry& g = moving_geometry();
  TubeResult z = g.tube_first_order(0.5, 0.0);
  EXPECT_EQ(z.interval.lo, 0.5);
  EXPECT_EQ(z.interval.hi, 0.5);
  EXPECT_THROW(g.tube_first_order(0.5, -1.0), PreconditionError);
}

TEST(Tubes, NonRegularBasePointThrows) {
  PathGeometry g(kink_prone_path(regimes::kink_config()));
  EXPECT_THROW(g.tube_first_order(0.5, 0.1), NonRegularPointError);
  TubeResult t = g.tube_first_order(0.3, 100.0);
  EXPECT_LE(t.interval.hi, g.summary().kinks[0].window.lo);
}

TEST(Tubes, CoverageAndNesting) {
  for (const PathGeometry* g : {&moving_geometry()}) {
    const auto& grid = g->summary().grid;
    for (double tau0 : {0.1, 0.33, 0.5, 0.77}) {
      QTable q0 = g->solve(tau0);
      for (double eps : {0.05, 0.2, 1.0}) {
        TubeResult t1 = g->tube_first_order(tau0, eps);
        TubeResult t2 = g->tube_second_order(tau0, eps);
        EXPECT_LE(t1.interval.lo, tau0);
        EXPECT_GE(t1.interval.hi, tau0);
        EXPECT_GE(t2.interval.lo, t1.interval.lo);
        EXPECT_LE(t2.interval.hi, t1.interval.hi);
        for (std::size_t k = 0; k < grid.size(); ++k)
          if (t1.interval.contains(grid[k])) EXPECT_LE(sup_distance(g->q_star(k), q0), eps);
      }
    }
  }
}

TEST(Tubes, ZeroCurvatureDensityGivesEqualTubes) {
  QTable delta;
  MdpPath p = reward_only_path(delta);
  PathGeometry g(p, GeometryOptions{.grid = 41, .c2 = 0.0});
  for (double eps : {0.01, 0.1}) {
    TubeResult a = g.tube_first_order(0.4, eps), b = g.tube_second_order(0.4, eps);
    EXPECT_EQ(a.interval.lo, b.interval.lo);
    EXPECT_EQ(a.interval.hi, b.interval.hi);
  }
}

TEST(GapSafeRegion, DominantPathEqualsTube) {
  FiniteMdp m = base_mdp();
  QTable r = m.reward();
  r.col(1).array() += 2.0;
  FiniteMdp m0(10, 3, m.transition(), r, 0.9);
  r.col(1).array() += 0.5;
  FiniteMdp m1(10, 3, m.transition(), r, 0.9);
  PathGeometry g(interpolated_path(m0, m1, GroundMetric::unit_ring(10)), GeometryOptions{.grid = 41});
  SafeRegion s = g.gap_safe_region(0.5, 0.05);
  ASSERT_EQ(s.measured.size(), 1u);
  // Every tube node is in the region.
  const auto& grid = g.summary().grid;
  for (double t : grid)
    EXPECT_EQ(s.tube.interval.contains(t), s.measured[0].contains(t)) << t;
  EXPECT_EQ(s.warning, g.gap_at(0.5) < g.constants().xi + 0.1);
  ASSERT_TRUE(s.certified.has_value());
}

TEST(GapSafeRegion, ExcludesKinkWindowAndCertifiedInsideMeasured) {
  PathGeometry g(kink_prone_path(regimes::kink_config()));
  const KinkRecord& k = g.summary().kinks.at(0);
  const auto& grid = g.summary().grid;
  for (double tau0 : {0.2, 0.4, 0.46, 0.6, 0.9}) {
    for (double eps : {0.01, 0.1, 10.0}) {
      SafeRegion s = g.gap_safe_region(tau0, eps);
      for (const auto& iv : s.measured) EXPECT_TRUE(iv.hi <= k.window.lo || iv.lo >= k.window.hi);
      if (!s.certified) continue;
      for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!s.certified->contains(grid[i])) continue;
        bool inside = false;
        for (const auto& iv : s.measured) inside = inside || iv.contains(grid[i]);
        EXPECT_TRUE(inside) << "tau0 " << tau0 << " eps " << eps << " node " << grid[i];
      }
    }
  }
}

namespace {

ParamFamily test_family() {
  ParamFamily f;
  f.dim = 3;
  f.evaluate = [](const Eigen::VectorXd& th) {
    std::vector<double> w{0.4 + th[0], 1.0, 0.7 + th[1]};
    return ring_mdp(12, 0.1, 0.9, 4.0, 1.5, w, 0.2 + 0.5 * th[2]);
  };
  return f;
}

ParamFamily stationary_family() {
  ParamFamily f;
  f.dim = 2;
  f.evaluate = [](const Eigen::VectorXd&) { return base_mdp(); };
  return f;
}

}  // namespace

TEST(ParamGeometry, JvpBasics) {
  ParamFamily f = test_family();
  Eigen::VectorXd th = Eigen::VectorXd::Zero(3);
  EXPECT_EQ(sup_norm(jacobian_vector_product(f, th, Eigen::VectorXd::Zero(3))), 0.0);
  Eigen::VectorXd u(3);
  u << 0.3, -0.2, 0.5;
  QTable j = jacobian_vector_product(f, th, u);
  const double h = 1e-4;
  QTable fd = (solve_optimal(f.evaluate(th + h * u)).q - solve_optimal(f.evaluate(th - h * u)).q) / (2 * h);
  EXPECT_LE(sup_distance(j, fd), std::max(1e-6, 10 * h * h));
}

TEST(ParamGeometry, ScalarFamilyMatchesPathDerivative) {
  MdpPath p = curvature_dominated_path(regimes::moving_config());
  ParamFamily f;
  f.dim = 1;
  f.evaluate = [&p](const Eigen::VectorXd& th) { return p.evaluate(th[0]); };
  MixingCertificate cert = path_certificate(p, 11);
  Eigen::VectorXd th(1), u(1);
  th << 0.4;
  u << 1.0;
  QTable a = jacobian_vector_product(f, th, u);
  QTable b = q_path_derivative(p, 0.4, 0.0, cert).dq;
  EXPECT_LE(sup_distance(a, b), 1e-6);
}

TEST(ParamGeometry, PullbackMetric) {
  Eigen::MatrixXd z = pullback_metric(stationary_family(), Eigen::VectorXd::Zero(2));
  EXPECT_EQ(z.norm(), 0.0);
  ParamFamily f = test_family();
  Eigen::VectorXd th = Eigen::VectorXd::Zero(3);
  Eigen::MatrixXd G = pullback_metric(f, th);
  EXPECT_LE((G - G.transpose()).norm(), 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 10; ++t) {
    Eigen::VectorXd d(3);
    for (int i = 0; i < 3; ++i) d[i] = n(rng);
    QTable j = jacobian_vector_product(f, th, d);
    double sq = Eigen::Map<const Eigen::VectorXd>(j.data(), j.size()).squaredNorm();
    EXPECT_NEAR(d.dot(G * d), sq, 1e-8 * (1 + sq));
  }
}

TEST(ParamGeometry, Ellipsoid) {
  Eigen::MatrixXd G(2, 2);
  G << 4, 1, 1, 2;
  EXPECT_TRUE(ellipsoid_contains(G, Eigen::VectorXd::Zero(2), 0.1));
  Eigen::VectorXd d(2);
  d << 1, 0;
  double eps = std::sqrt(d.dot(G * d));
  EXPECT_TRUE(ellipsoid_contains(G, d, eps));
  EXPECT_FALSE(ellipsoid_contains(G, 2 * d, eps));
  EXPECT_THROW(ellipsoid_contains(G, d, 0.0), PreconditionError);

  ParamFamily f = test_family();
  Eigen::VectorXd th = Eigen::VectorXd::Zero(3);
  Eigen::MatrixXd P = pullback_metric(f, th);
  QTable q0 = solve_optimal(f.evaluate(th)).q;
  Eigen::VectorXd dir(3);
  dir << 1.0, -0.5, 0.3;
  for (double s : {1e-2, 1e-3}) {
    Eigen::VectorXd step = s * dir;
    double eps2 = std::sqrt(step.dot(P * step)) * 1.0000001;
    ASSERT_TRUE(ellipsoid_contains(P, step, eps2));
    QTable dq = solve_optimal(f.evaluate(th + step)).q - q0;
    double actual = Eigen::Map<const Eigen::VectorXd>(dq.data(), dq.size()).norm();
    EXPECT_LE(actual, eps2 + 50.0 * s * s);
  }
}

TEST(ParamGeometry, FeasibleCone) {
  ParamFamily f = test_family();
  Eigen::VectorXd th = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd dir(3);
  dir << 1.0, 0.0, 0.0;
  ConeResult none = feasible_cone(f, th, {}, 1e-6, dir);
  EXPECT_TRUE(none.accepted);
  EXPECT_TRUE(none.active.empty());

  double g0 = action_gap(solve_optimal(f.evaluate(th)).q).global;
  ParamConstraint gap{"gap", [g0](const Eigen::VectorXd&, const QTable& q) { return action_gap(q).global - g0; }};
  ParamConstraint far{"far", [](const Eigen::VectorXd& t, const QTable&) { return 1.0 + t.squaredNorm(); }};
  ConeResult probe = feasible_cone(f, th, {gap, far}, 1e-9, dir);
  ASSERT_EQ(probe.active.size(), 1u);
  EXPECT_EQ(probe.active[0], 0u);
  Eigen::VectorXd grad = probe.gradients[0];
  ASSERT_GT(grad.norm(), 0.0);

  Eigen::VectorXd up = grad.normalized();
  EXPECT_TRUE(feasible_cone(f, th, {gap}, 1e-9, up).accepted);
  EXPECT_FALSE(feasible_cone(f, th, {gap}, 1e-9, -up).accepted);
  // Small steps along an accepted direction do not decrease H to first order.
  for (double s : {1e-3, 1e-4}) {
    double H = action_gap(solve_optimal(f.evaluate(th + s * up)).q).global - g0;
    EXPECT_GE(H, -10.0 * s * s);
    EXPECT_NEAR(H / s, grad.norm(), 1e-2 * grad.norm() + 20 * s);
  }
  // A direction and its negation are both accepted only on the tangent plane.
  Eigen::VectorXd any(3);
  any << 0.2, 0.7, -0.4;
  ConeResult a = feasible_cone(f, th, {gap}, 1e-9, any), b = feasible_cone(f, th, {gap}, 1e-9, -any);
  if (a.accepted && b.accepted) EXPECT_EQ(a.inner[0], 0.0);
}
