#include "htmdp/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "htmdp/parallel.hpp"

namespace htmdp {

std::vector<double> uniform_grid(double lo, double hi, std::size_t points) {
  if (points < 2) throw PreconditionError("a quadrature grid needs at least two points");
  if (!(lo < hi)) throw PreconditionError("grid interval must satisfy lo < hi");
  std::vector<double> g(points);
  const double h = (hi - lo) / static_cast<double>(points - 1);
  for (std::size_t k = 0; k < points; ++k) g[k] = lo + h * static_cast<double>(k);
  g.back() = hi;
  return g;
}

double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("trapezoid abscissae and values differ in size");
  double acc = 0.0;
  for (std::size_t k = 0; k + 1 < x.size(); ++k) acc += 0.5 * (y[k] + y[k + 1]) * (x[k + 1] - x[k]);
  return acc;
}

MixingCertificate path_certificate(const MdpPath& path, std::size_t grid) {
  std::vector<double> taus = uniform_grid(0.0, 1.0, grid);
  std::vector<MixingCertificate> certs(taus.size());
  parallel_for(taus.size(), [&](std::size_t k) { certs[k] = mixing_certificate(path.evaluate(taus[k]), path.metric()); });
  return combine_certificates(certs);
}

double scale_L_s(const MdpPath& path, const MixingCertificate& cert) {
  return path.scale_L_s().value_or(cert.C_mix);
}

namespace {

double pl_of(const SpeedTerms& t, double L_s) { return t.dr_inf + L_s * t.dP_w1; }
double curv_of(const SpeedTerms& t, double L_s) { return t.ddr_inf + L_s * t.ddP_w1; }

double speed_of(const SpeedTerms& t, const MixingCertificate& c) {
  const double g = c.gamma;
  return t.dr_inf / (1.0 - g) + g * c.C_mix / ((1.0 - g) * (1.0 - g)) * t.dP_w1;
}

double kappa_of(const SpeedTerms& t, const MixingCertificate& c, double L_s, double c2) {
  const double g = c.gamma, k = 1.0 - g;
  return t.ddr_inf / k + g * c.C_mix * L_s / (k * k) * t.ddP_w1 + c2 / (k * k * k) * (t.dr_inf + L_s * t.dP_w1);
}

double masked_gap(const QTable& q, std::span<const char> mask) { return action_gap(q, mask).global; }

bool same_policy(const Policy& a, const Policy& b, std::span<const char> mask) {
  for (std::size_t s = 0; s < a.size(); ++s)
    if ((mask.empty() || mask[s]) && a[s] != b[s]) return false;
  return true;
}

}  // namespace

double pl_density(const MdpPath& path, double tau, double L_s) { return pl_of(path_speed_terms(path, tau), L_s); }

double curv_density(const MdpPath& path, double tau, double L_s) {
  return curv_of(path_speed_terms(path, tau), L_s);
}

double speed_density(const MdpPath& path, double tau, const MixingCertificate& cert) {
  return speed_of(path_speed_terms(path, tau), cert);
}

double curvature_density(const MdpPath& path, double tau, const MixingCertificate& cert, double c2) {
  return kappa_of(path_speed_terms(path, tau), cert, scale_L_s(path, cert), c2);
}

double path_length(const MdpPath& path, double tau0, double tau1, std::size_t grid, double L_s) {
  std::vector<double> x = uniform_grid(tau0, tau1, grid), y(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) y[k] = pl_density(path, x[k], L_s);
  return trapezoid(x, y);
}

double curvature(const MdpPath& path, double tau0, double tau1, std::size_t grid, double L_s) {
  std::vector<double> x = uniform_grid(tau0, tau1, grid), y(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) y[k] = curv_density(path, x[k], L_s);
  return trapezoid(x, y);
}

std::vector<double> gap_profile(const MdpPath& path, const std::vector<double>& grid, std::span<const char> mask) {
  std::vector<double> g(grid.size());
  parallel_for(grid.size(), [&](std::size_t k) { g[k] = masked_gap(solve_optimal(path.evaluate(grid[k])).q, mask); });
  return g;
}

namespace {

std::vector<KinkRecord> detect_from(const MdpPath& path, const std::vector<double>& grid,
                                    const std::vector<Policy>& policies, const std::vector<double>& gaps,
                                    double tie_threshold, std::span<const char> mask) {
  if (!(tie_threshold > 0.0)) throw PreconditionError("tie_threshold must be positive");
  const std::size_t N = grid.size();
  std::vector<KinkRecord> found;
  for (std::size_t k = 0; k + 1 < N; ++k) {
    if (same_policy(policies[k], policies[k + 1], mask)) continue;
    double lo = grid[k], hi = grid[k + 1];
    Policy plo = policies[k], phi = policies[k + 1];
    QTable qlo = solve_optimal(path.evaluate(lo)).q;
    QTable qhi = solve_optimal(path.evaluate(hi)).q;
    while (hi - lo > 1e-6) {
      double mid = 0.5 * (lo + hi);
      QTable q = solve_optimal(path.evaluate(mid)).q;
      Policy p = greedy_policy(q);
      if (same_policy(p, plo, mask)) {
        lo = mid;
        qlo = std::move(q);
      } else {
        hi = mid;
        qhi = std::move(q);
        phi = std::move(p);
      }
    }
    double g = std::min(masked_gap(qlo, mask), masked_gap(qhi, mask));
    if (!(g < tie_threshold)) continue;
    KinkRecord rec;
    rec.tau_star = 0.5 * (lo + hi);
    rec.min_gap_in_window = g;
    for (std::size_t s = 0; s < plo.size(); ++s)
      if ((mask.empty() || mask[s]) && plo[s] != phi[s]) {
        rec.state = s;
        break;
      }
    // Two switches a few bisection tolerances apart are one crossing seen
    // from both sides of a grid node (a rounding-level tie at the node).
    if (!found.empty() && rec.tau_star - found.back().tau_star <= 1e-5) {
      if (g < found.back().min_gap_in_window) found.back() = rec;
      continue;
    }
    found.push_back(rec);
  }
  for (auto& rec : found) {
    std::size_t k = 0;
    while (k + 2 < N && grid[k + 1] <= rec.tau_star) ++k;
    std::size_t j = k;
    while (j > 0 && gaps[j] < tie_threshold) --j;
    std::size_t m = k + 1;
    while (m + 1 < N && gaps[m] < tie_threshold) ++m;
    rec.window = {grid[j], grid[m]};
  }
  for (std::size_t i = 0; i + 1 < found.size(); ++i) {
    if (found[i].window.hi > found[i + 1].window.lo) {
      double mid = 0.5 * (found[i].tau_star + found[i + 1].tau_star);
      found[i].window.hi = mid;
      found[i + 1].window.lo = mid;
    }
  }
  return found;
}

}  // namespace

std::vector<KinkRecord> detect_kinks(const MdpPath& path, const std::vector<double>& grid, double tie_threshold,
                                     std::span<const char> mask) {
  std::vector<Policy> pols(grid.size());
  std::vector<double> gaps(grid.size());
  parallel_for(grid.size(), [&](std::size_t k) {
    QTable q = solve_optimal(path.evaluate(grid[k])).q;
    pols[k] = greedy_policy(q);
    gaps[k] = masked_gap(q, mask);
  });
  return detect_from(path, grid, pols, gaps, tie_threshold, mask);
}

void sample_kink_windows(const MdpPath& path, std::vector<KinkRecord>& kinks, double spacing, std::size_t refine,
                         std::span<const char> mask) {
  for (auto& k : kinks) {
    const double width = k.window.hi - k.window.lo;
    std::size_t pts = std::max<std::size_t>(
        3, static_cast<std::size_t>(std::ceil(width / spacing * static_cast<double>(std::max<std::size_t>(refine, 1)))) + 1);
    std::vector<double> taus = uniform_grid(k.window.lo, k.window.hi, pts);
    auto at = std::lower_bound(taus.begin(), taus.end(), k.tau_star);
    if (at == taus.end() || *at != k.tau_star) taus.insert(at, k.tau_star);
    std::vector<double> gaps(taus.size());
    parallel_for(taus.size(), [&](std::size_t i) { gaps[i] = masked_gap(solve_optimal(path.evaluate(taus[i])).q, mask); });
    k.min_gap_in_window = std::min(k.min_gap_in_window, *std::min_element(gaps.begin(), gaps.end()));
    k.taus = std::move(taus);
    k.gaps = std::move(gaps);
  }
}

namespace {

void require_disjoint(const std::vector<KinkRecord>& kinks) {
  for (std::size_t i = 0; i + 1 < kinks.size(); ++i)
    if (kinks[i].window.hi > kinks[i + 1].window.lo || kinks[i].tau_star > kinks[i + 1].tau_star)
      throw PreconditionError("kink windows overlap or are out of order");
}

}  // namespace

double kink_penalty(const std::vector<KinkRecord>& kinks, double delta) {
  if (!(delta > 0.0)) throw PreconditionError("kink penalty floor delta must be positive");
  require_disjoint(kinks);
  double phi = 0.0;
  for (const auto& k : kinks) {
    if (k.taus.size() < 2) throw PreconditionError("kink window has no gap samples");
    std::vector<double> inv(k.gaps.size());
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 / std::max(k.gaps[i], delta);
    phi += trapezoid(k.taus, inv);
  }
  return phi;
}

double kink_penalty(const std::vector<KinkRecord>& kinks, const std::vector<double>& grid,
                    const std::vector<double>& gaps, double delta) {
  if (!(delta > 0.0)) throw PreconditionError("kink penalty floor delta must be positive");
  if (grid.size() != gaps.size() || grid.size() < 2) throw DimensionError("gap profile does not match its grid");
  require_disjoint(kinks);
  auto interp = [&](double t) {
    std::size_t k = std::upper_bound(grid.begin(), grid.end(), t) - grid.begin();
    k = std::clamp<std::size_t>(k, 1, grid.size() - 1);
    double w = (t - grid[k - 1]) / (grid[k] - grid[k - 1]);
    return (1.0 - w) * gaps[k - 1] + w * gaps[k];
  };
  double phi = 0.0;
  for (const auto& k : kinks) {
    std::vector<double> x{k.window.lo}, y{interp(k.window.lo)};
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (grid[i] > k.window.lo && grid[i] < k.window.hi) {
        x.push_back(grid[i]);
        y.push_back(gaps[i]);
      }
    x.push_back(k.window.hi);
    y.push_back(interp(k.window.hi));
    for (double& v : y) v = 1.0 / std::max(v, delta);
    phi += trapezoid(x, y);
  }
  return phi;
}

QDerivative q_path_derivative(const MdpPath& path, double tau, double xi, const MixingCertificate& cert) {
  FiniteMdp m = path.evaluate(tau);
  QTable q = solve_optimal(m).q;
  double g = action_gap(q).global;
  if (g < xi)
    throw NonRegularPointError("tau = " + std::to_string(tau) + " has gap " + std::to_string(g) +
                               " below the regularity margin " + std::to_string(xi));
  PathDerivatives d = path_derivatives(path, tau);
  ValueFn v = max_values(q);
  QTable x = d.dr;
  for (std::size_t s = 0; s < m.n_states(); ++s)
    for (std::size_t a = 0; a < m.n_actions(); ++a) {
      auto row = d.dP_row(s, a);
      double acc = 0.0;
      for (std::size_t sn = 0; sn < m.n_states(); ++sn) acc += row[sn] * v[sn];
      x(s, a) += m.discount() * acc;
    }
  QDerivative out;
  out.dq = Resolvent(m, greedy_policy(q)).solve(x);
  out.bound = speed_of(speed_terms(d, path.metric()), cert);
  return out;
}

PathGeometry::PathGeometry(const MdpPath& path, GeometryOptions options) : path_(path), options_(std::move(options)) {
  const std::size_t N = options_.grid;
  auto& S = summary_;
  S.grid = uniform_grid(0.0, 1.0, N);
  spacing_ = 1.0 / static_cast<double>(N - 1);
  MixingCertificate cert = options_.certificate ? *options_.certificate : path_certificate(path_, N);
  auto& C = S.constants;
  C.gamma = cert.gamma;
  C.L_r = cert.L_r;
  C.kappa = cert.kappa;
  C.C_mix = cert.C_mix;
  C.L_s = scale_L_s(path_, cert);
  C.c2 = options_.c2;
  const std::span<const char> mask(options_.state_mask);

  q_grid_.resize(N);
  S.pl_density.resize(N);
  S.curv_density.resize(N);
  S.speed_density.resize(N);
  S.kappa_density.resize(N);
  S.gap_profile.resize(N);
  std::vector<Policy> pols(N);
  std::vector<double> rmin(N), rmax(N);
  parallel_for(N, [&](std::size_t k) {
    FiniteMdp m = path_.evaluate(S.grid[k]);
    if (m.discount() != cert.gamma) throw ConfigError("path discount differs from the certificate discount");
    q_grid_[k] = solve_optimal(m).q;
    pols[k] = greedy_policy(q_grid_[k]);
    S.gap_profile[k] = masked_gap(q_grid_[k], mask);
    SpeedTerms t = path_speed_terms(path_, S.grid[k]);
    S.pl_density[k] = pl_of(t, C.L_s);
    S.curv_density[k] = curv_of(t, C.L_s);
    S.speed_density[k] = speed_of(t, cert);
    S.kappa_density[k] = kappa_of(t, cert, C.L_s, C.c2);
    rmin[k] = m.reward().minCoeff();
    rmax[k] = m.reward().maxCoeff();
  });
  C.reward_range = *std::max_element(rmax.begin(), rmax.end()) - *std::min_element(rmin.begin(), rmin.end());
  const double k1 = 1.0 - C.gamma;
  C.delta = options_.delta.value_or(1e-3 * C.reward_range / k1);
  if (!(C.delta > 0.0)) C.delta = 1e-12;  // constant rewards: any positive floor works
  double max_gap = *std::max_element(S.gap_profile.begin(), S.gap_profile.end());
  C.xi = options_.xi.value_or(0.05 * max_gap);
  C.tie_threshold = options_.tie_threshold.value_or(C.xi);
  C.kink_scale = 2.0 * C.reward_range / k1;

  if (C.tie_threshold > 0.0) {
    S.kinks = detect_from(path_, S.grid, pols, S.gap_profile, C.tie_threshold, mask);
    sample_kink_windows(path_, S.kinks, spacing_, options_.kink_refine, mask);
    for (auto& k : S.kinks) k.local_phi = kink_penalty(std::vector<KinkRecord>{k}, C.delta);
  }
  S.Phi = 0.0;
  for (const auto& k : S.kinks) S.Phi += k.local_phi;

  regular_.assign(N, 1);
  for (std::size_t k = 0; k < N; ++k) {
    if (S.gap_profile[k] < C.xi) regular_[k] = 0;
    for (const auto& kr : S.kinks)
      if (S.grid[k] > kr.window.lo && S.grid[k] < kr.window.hi) regular_[k] = 0;
  }

  auto cum = [&](const std::vector<double>& d) {
    std::vector<double> c(N, 0.0);
    for (std::size_t k = 1; k < N; ++k) c[k] = c[k - 1] + 0.5 * (d[k - 1] + d[k]) * (S.grid[k] - S.grid[k - 1]);
    return c;
  };
  cum_pl_ = cum(S.pl_density);
  cum_curv_ = cum(S.curv_density);
  cum_speed_ = cum(S.speed_density);
  cum_kappa_ = cum(S.kappa_density);
  S.PL = cum_pl_.back();
  S.Curv = cum_curv_.back();
}

QTable PathGeometry::solve(double tau) const { return solve_optimal(path_.evaluate(tau)).q; }

double PathGeometry::gap_at(double tau) const { return masked_gap(solve(tau), options_.state_mask); }

double PathGeometry::cumulative(const std::vector<double>& cum, const std::vector<double>& dens, double tau) const {
  tau = std::clamp(tau, 0.0, 1.0);
  const std::size_t N = summary_.grid.size();
  std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(tau / spacing_), N - 2);
  double x = tau - summary_.grid[k];
  if (x < 0.0 && k > 0) {
    --k;
    x = tau - summary_.grid[k];
  }
  double h = summary_.grid[k + 1] - summary_.grid[k];
  return cum[k] + dens[k] * x + (dens[k + 1] - dens[k]) * x * x / (2.0 * h);
}

double PathGeometry::pl(double a, double b) const {
  return std::abs(cumulative(cum_pl_, summary_.pl_density, b) - cumulative(cum_pl_, summary_.pl_density, a));
}
double PathGeometry::curv(double a, double b) const {
  return std::abs(cumulative(cum_curv_, summary_.curv_density, b) - cumulative(cum_curv_, summary_.curv_density, a));
}
double PathGeometry::speed_integral(double a, double b) const {
  return std::abs(cumulative(cum_speed_, summary_.speed_density, b) -
                  cumulative(cum_speed_, summary_.speed_density, a));
}
double PathGeometry::kappa_integral(double a, double b) const {
  return std::abs(cumulative(cum_kappa_, summary_.kappa_density, b) -
                  cumulative(cum_kappa_, summary_.kappa_density, a));
}

double PathGeometry::phi(double a, double b, bool half_open) const {
  if (a > b) std::swap(a, b);
  double out = 0.0;
  for (const auto& k : summary_.kinks) {
    bool lower = half_open ? k.tau_star > a : k.tau_star >= a;
    if (lower && k.tau_star <= b) out += k.local_phi;
  }
  return out;
}

BoundParts PathGeometry::path_value_bound(double a, double b, bool half_open) const {
  const double k1 = 1.0 - summary_.constants.gamma;
  BoundParts p;
  p.pl_term = pl(a, b) / (k1 * k1);
  p.curv_term = curv(a, b) / (k1 * k1 * k1);
  p.phi_term = summary_.constants.kink_scale * phi(a, b, half_open);
  p.bound = p.pl_term + p.curv_term + p.phi_term;
  return p;
}

const KinkRecord* PathGeometry::kink_containing(double tau) const {
  for (const auto& k : summary_.kinks)
    if (tau > k.window.lo && tau < k.window.hi) return &k;
  return nullptr;
}

bool PathGeometry::is_regular(double tau) const {
  if (kink_containing(tau)) return false;
  return gap_at(tau) >= summary_.constants.xi;
}

double PathGeometry::tube_cost(double tau0, double x, TubeOrder order) const {
  double c = speed_integral(tau0, x);
  if (order == TubeOrder::second) c += 0.5 * std::abs(x - tau0) * kappa_integral(tau0, x);
  return c;
}

TubeResult PathGeometry::tube(double tau0, double eps, TubeOrder order) const {
  if (!(eps >= 0.0)) throw PreconditionError("tube budget must be nonnegative");
  if (!(tau0 >= 0.0 && tau0 <= 1.0)) throw PreconditionError("tau0 must lie in [0,1]");
  if (!is_regular(tau0))
    throw NonRegularPointError("tau0 = " + std::to_string(tau0) + " is not a regular point of the path");
  const auto& grid = summary_.grid;
  const std::size_t N = grid.size();

  double right = tau0;
  for (std::size_t k = 0; k < N; ++k) {
    if (grid[k] <= tau0) continue;
    if (!regular_[k]) break;
    right = grid[k];
  }
  double left = tau0;
  for (std::size_t k = N; k-- > 0;) {
    if (grid[k] >= tau0) continue;
    if (!regular_[k]) break;
    left = grid[k];
  }
  for (const auto& kr : summary_.kinks) {
    if (kr.tau_star > tau0) right = std::min(right, std::max(kr.window.lo, tau0));
    if (kr.tau_star < tau0) left = std::max(left, std::min(kr.window.hi, tau0));
  }

  auto extend = [&](double limit, int dir) {
    if (tube_cost(tau0, limit, order) <= eps) return limit;
    // First node (or the limit) past which the budget is exceeded.
    double feasible = tau0, infeasible = limit;
    for (std::size_t i = 0; i < N; ++i) {
      std::size_t k = dir > 0 ? i : N - 1 - i;
      double t = grid[k];
      if (dir > 0 ? (t <= tau0 || t >= limit) : (t >= tau0 || t <= limit)) continue;
      if (tube_cost(tau0, t, order) <= eps) {
        feasible = t;
      } else {
        infeasible = t;
        break;
      }
    }
    for (int it = 0; it < 100; ++it) {
      double mid = 0.5 * (feasible + infeasible);
      if (mid == feasible || mid == infeasible) break;
      if (tube_cost(tau0, mid, order) <= eps) feasible = mid;
      else infeasible = mid;
    }
    return feasible;
  };
  TubeResult r;
  r.tau0 = tau0;
  r.budget_eps = eps;
  r.order = order;
  r.interval = {extend(left, -1), extend(right, +1)};
  return r;
}

SafeRegion PathGeometry::gap_safe_region(double tau0, double eps, std::optional<double> xi_opt, TubeOrder order) const {
  const double xi = xi_opt.value_or(summary_.constants.xi);
  SafeRegion out;
  out.tube = tube(tau0, eps, order);
  const auto& grid = summary_.grid;
  const auto& gap = summary_.gap_profile;
  std::optional<Interval> run;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    bool in = out.tube.interval.contains(grid[k]) && gap[k] >= xi;
    if (in) {
      if (run) run->hi = grid[k];
      else run = Interval{grid[k], grid[k]};
    } else if (run) {
      out.measured.push_back(*run);
      run.reset();
    }
  }
  if (run) out.measured.push_back(*run);
  double g0 = gap_at(tau0);
  out.warning = g0 < xi + 2.0 * eps;
  if (g0 >= xi) out.certified = tube(tau0, std::min(eps, 0.5 * (g0 - xi)), order).interval;
  return out;
}

namespace {

struct ParamPoint {
  FiniteMdp mdp;
  QTable q;
  Policy pi;
};

ParamPoint regular_point(const ParamFamily& f, const Eigen::VectorXd& theta, double xi) {
  if (static_cast<std::size_t>(theta.size()) != f.dim) throw DimensionError("theta has the wrong dimension");
  FiniteMdp m = f.evaluate(theta);
  QTable q = solve_optimal(m).q;
  double g = action_gap(q).global;
  if (g < xi) throw NonRegularPointError("theta is not regular: gap " + std::to_string(g));
  Policy pi = greedy_policy(q);
  return {std::move(m), std::move(q), std::move(pi)};
}

QTable jvp_at(const ParamFamily& f, const ParamPoint& p, const Eigen::VectorXd& theta, const Eigen::VectorXd& u) {
  const double n = u.norm();
  const std::size_t nS = p.mdp.n_states(), nA = p.mdp.n_actions();
  if (n == 0.0) return QTable::Zero(nS, nA);
  const double h = f.fd_step;
  Eigen::VectorXd e = u / n;
  FiniteMdp mp = f.evaluate(theta + h * e), mm = f.evaluate(theta - h * e);
  ValueFn v = max_values(p.q);
  QTable x = (mp.reward() - mm.reward()) / (2.0 * h);
  for (std::size_t s = 0; s < nS; ++s)
    for (std::size_t a = 0; a < nA; ++a) {
      auto rp = mp.row(s, a), rm = mm.row(s, a);
      double acc = 0.0;
      for (std::size_t sn = 0; sn < nS; ++sn) acc += (rp[sn] - rm[sn]) / (2.0 * h) * v[sn];
      x(s, a) += p.mdp.discount() * acc;
    }
  return n * Resolvent(p.mdp, p.pi).solve(x);
}

Eigen::MatrixXd jacobian(const ParamFamily& f, const ParamPoint& p, const Eigen::VectorXd& theta) {
  const Eigen::Index m = static_cast<Eigen::Index>(p.mdp.n_states() * p.mdp.n_actions());
  Eigen::MatrixXd J(m, static_cast<Eigen::Index>(f.dim));
  for (std::size_t i = 0; i < f.dim; ++i) {
    QTable col = jvp_at(f, p, theta, Eigen::VectorXd::Unit(f.dim, i));
    J.col(i) = Eigen::Map<const Eigen::VectorXd>(col.data(), m);
  }
  return J;
}

}  // namespace

QTable jacobian_vector_product(const ParamFamily& family, const Eigen::VectorXd& theta, const Eigen::VectorXd& u,
                               double xi) {
  if (static_cast<std::size_t>(u.size()) != family.dim) throw DimensionError("direction has the wrong dimension");
  ParamPoint p = regular_point(family, theta, xi);
  return jvp_at(family, p, theta, u);
}

Eigen::MatrixXd pullback_metric(const ParamFamily& family, const Eigen::VectorXd& theta, double xi) {
  ParamPoint p = regular_point(family, theta, xi);
  Eigen::MatrixXd J = jacobian(family, p, theta);
  Eigen::MatrixXd G = J.transpose() * J;
  return 0.5 * (G + G.transpose());
}

bool ellipsoid_contains(const Eigen::MatrixXd& G, const Eigen::VectorXd& dtheta, double eps) {
  if (!(eps > 0.0)) throw PreconditionError("ellipsoid radius must be positive");
  if (G.rows() != dtheta.size() || G.cols() != dtheta.size()) throw DimensionError("metric and step differ in size");
  return dtheta.dot(G * dtheta) <= eps * eps;
}

ConeResult feasible_cone(const ParamFamily& family, const Eigen::VectorXd& theta,
                         const std::vector<ParamConstraint>& constraints, double tol_active,
                         const Eigen::VectorXd& direction, double xi) {
  if (static_cast<std::size_t>(direction.size()) != family.dim)
    throw DimensionError("direction has the wrong dimension");
  ParamPoint p = regular_point(family, theta, xi);
  ConeResult out;
  Eigen::MatrixXd J;
  const double ht = 1e-6, hq = 1e-6;
  for (std::size_t j = 0; j < constraints.size(); ++j) {
    const auto& h = constraints[j].h;
    if (std::abs(h(theta, p.q)) > tol_active) continue;
    if (J.size() == 0) J = jacobian(family, p, theta);
    Eigen::VectorXd grad(family.dim);
    for (std::size_t i = 0; i < family.dim; ++i) {
      Eigen::VectorXd e = Eigen::VectorXd::Unit(family.dim, i);
      grad[i] = (h(theta + ht * e, p.q) - h(theta - ht * e, p.q)) / (2.0 * ht);
    }
    Eigen::VectorXd gq(p.q.size());
    QTable q = p.q;
    for (Eigen::Index k = 0; k < q.size(); ++k) {
      double keep = q.data()[k];
      q.data()[k] = keep + hq;
      double up = h(theta, q);
      q.data()[k] = keep - hq;
      double dn = h(theta, q);
      q.data()[k] = keep;
      gq[k] = (up - dn) / (2.0 * hq);
    }
    grad += J.transpose() * gq;
    double ip = grad.dot(direction);
    out.active.push_back(j);
    out.gradients.push_back(grad);
    out.inner.push_back(ip);
    if (ip < 0.0) out.accepted = false;
  }
  return out;
}

}  // namespace htmdp
