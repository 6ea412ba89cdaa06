#include "htmdp/path.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace htmdp {

MdpPath::MdpPath(Evaluator evaluate, GroundMetric metric, Differentiator analytic)
    : evaluate_(std::move(evaluate)),
      metric_(std::move(metric)),
      analytic_(std::move(analytic)),
      mode_(analytic_ ? DerivativeMode::analytic : DerivativeMode::central_fd) {}

FiniteMdp MdpPath::evaluate(double tau) const {
  if (!(tau >= 0.0 && tau <= 1.0)) throw PreconditionError("tau must lie in [0,1], got " + std::to_string(tau));
  FiniteMdp m = evaluate_(tau);
  if (m.n_states() != metric_.size()) throw DimensionError("path MDP size does not match its metric");
  return m;
}

void MdpPath::set_derivative_mode(DerivativeMode mode) {
  if (mode == DerivativeMode::analytic && !analytic_)
    throw ConfigError("this path has no analytic derivatives");
  mode_ = mode;
}

void MdpPath::set_fd_steps(double first, double second) {
  if (!(first > 0.0 && first < 0.1) || !(second > 0.0 && second < 0.1))
    throw ConfigError("finite-difference steps must lie in (0, 0.1)");
  fd_step_ = first;
  fd_step2_ = second;
}

PathDerivatives finite_difference_derivatives(const MdpPath& path, double tau, double h1, double h2) {
  double t1 = std::clamp(tau, h1, 1.0 - h1);
  double t2 = std::clamp(tau, h2, 1.0 - h2);
  FiniteMdp p = path.evaluate(t1 + h1), m = path.evaluate(t1 - h1);
  FiniteMdp p2 = path.evaluate(t2 + h2), c2 = path.evaluate(t2), m2 = path.evaluate(t2 - h2);
  PathDerivatives d;
  d.n_states = p.n_states();
  d.n_actions = p.n_actions();
  d.dr = (p.reward() - m.reward()) / (2.0 * h1);
  d.ddr = (p2.reward() - 2.0 * c2.reward() + m2.reward()) / (h2 * h2);
  const std::size_t n = p.transition().size();
  d.dP.resize(n);
  d.ddP.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.dP[i] = (p.transition()[i] - m.transition()[i]) / (2.0 * h1);
    d.ddP[i] = (p2.transition()[i] - 2.0 * c2.transition()[i] + m2.transition()[i]) / (h2 * h2);
  }
  return d;
}

PathDerivatives path_derivatives(const MdpPath& path, double tau) {
  if (path.derivative_mode() == DerivativeMode::analytic) return path.analytic()(tau);
  return finite_difference_derivatives(path, tau, path.fd_step(), path.fd_step2());
}

SpeedTerms speed_terms(const PathDerivatives& d, const GroundMetric& metric) {
  SpeedTerms t;
  t.dr_inf = sup_norm(d.dr);
  t.ddr_inf = sup_norm(d.ddr);
  for (std::size_t s = 0; s < d.n_states; ++s)
    for (std::size_t a = 0; a < d.n_actions; ++a) {
      t.dP_w1 = std::max(t.dP_w1, w1_dual_norm(d.dP_row(s, a), metric));
      t.ddP_w1 = std::max(t.ddP_w1, w1_dual_norm(d.ddP_row(s, a), metric));
    }
  return t;
}

SpeedTerms path_speed_terms(const MdpPath& path, double tau) {
  return speed_terms(path_derivatives(path, tau), path.metric());
}

double s_curve(double t) { return t * t * (3.0 - 2.0 * t); }
double s_curve_d1(double t) { return 6.0 * t * (1.0 - t); }
double s_curve_d2(double t) { return 6.0 - 12.0 * t; }

double ring_displacement(std::size_t n, double s, double c) {
  const double len = static_cast<double>(n);
  double d = std::fmod(s - c, len);
  if (d < 0) d += len;
  if (d > 0.5 * len) d -= len;
  return d;
}

double ring_bump(std::size_t n, double s, double c, double sigma) {
  double d = ring_displacement(n, s, c);
  return std::exp(-d * d / (2.0 * sigma * sigma));
}

std::vector<double> ring_kernel(std::size_t n, double epsilon_mix, double bias) {
  if (n < 3) throw ConfigError("ring needs n >= 3");
  if (!(epsilon_mix >= 0.0 && epsilon_mix <= 1.0)) throw ConfigError("epsilon_mix must lie in [0,1]");
  if (!(bias >= 0.0 && bias <= 1.0)) throw ConfigError("kernel bias must lie in [0,1]");
  std::vector<double> P(n * 3 * n, epsilon_mix / static_cast<double>(n));
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t a = 0; a < 3; ++a) {
      std::size_t det = (s + n + a - 1) % n;
      double* row = P.data() + (s * 3 + a) * n;
      row[det] += (1.0 - epsilon_mix) * (1.0 - bias);
      row[(det + 1) % n] += (1.0 - epsilon_mix) * bias;
    }
  return P;
}

FiniteMdp ring_mdp(std::size_t n, double epsilon_mix, double gamma, double bump_center, double bump_width,
                   std::span<const double> action_weights, double bias) {
  if (!(bump_width > 0.0)) throw ConfigError("bump width must be positive");
  if (action_weights.size() != 3) throw ConfigError("ring MDP needs three action weights (L, N, R)");
  QTable r(n, 3);
  for (std::size_t s = 0; s < n; ++s) {
    double g = ring_bump(n, static_cast<double>(s), bump_center, bump_width);
    for (std::size_t a = 0; a < 3; ++a) r(s, a) = action_weights[a] * g;
  }
  return FiniteMdp(n, 3, ring_kernel(n, epsilon_mix, bias), std::move(r), gamma);
}

namespace {

struct ProfileFns {
  double (*u)(double);
  double (*u1)(double);
  double (*u2)(double);
};

double id(double t) { return t; }
double one(double) { return 1.0; }
double zero(double) { return 0.0; }

ProfileFns profile_fns(Profile p) {
  if (p == Profile::scurve) return {s_curve, s_curve_d1, s_curve_d2};
  return {id, one, zero};
}

}  // namespace

MdpPath interpolated_path(const FiniteMdp& m0, const FiniteMdp& m1, GroundMetric metric, Profile profile) {
  if (m0.n_states() != m1.n_states() || m0.n_actions() != m1.n_actions())
    throw DimensionError("endpoint MDPs differ in shape");
  if (m0.discount() != m1.discount()) throw ConfigError("endpoint MDPs differ in discount");
  ProfileFns f = profile_fns(profile);
  QTable dR = m1.reward() - m0.reward();
  std::vector<double> dT(m0.transition().size());
  for (std::size_t i = 0; i < dT.size(); ++i) dT[i] = m1.transition()[i] - m0.transition()[i];
  // m0 + u * (m1 - m0) keeps a stationary path exactly constant.
  auto eval = [m0, m1, dR, dT, f](double tau) {
    double u = f.u(tau);
    if (u == 0.0) return m0;
    if (u == 1.0) return m1;
    QTable r = m0.reward() + u * dR;
    std::vector<double> P(dT.size());
    for (std::size_t i = 0; i < P.size(); ++i) P[i] = m0.transition()[i] + u * dT[i];
    return FiniteMdp(m0.n_states(), m0.n_actions(), std::move(P), std::move(r), m0.discount());
  };
  auto diff = [dR, dT, f, nS = m0.n_states(), nA = m0.n_actions()](double tau) {
    double u1 = f.u1(tau), u2 = f.u2(tau);
    PathDerivatives d;
    d.n_states = nS;
    d.n_actions = nA;
    d.dr = u1 * dR;
    d.ddr = u2 * dR;
    d.dP.resize(dT.size());
    d.ddP.resize(dT.size());
    for (std::size_t i = 0; i < dT.size(); ++i) {
      d.dP[i] = u1 * dT[i];
      d.ddP[i] = u2 * dT[i];
    }
    return d;
  };
  return MdpPath(eval, std::move(metric), diff);
}

MdpPath stationary_path(const FiniteMdp& m, GroundMetric metric) {
  return interpolated_path(m, m, std::move(metric));
}

namespace {

MdpPath moving_bump_path(const RingPathConfig& cfg, Profile profile) {
  ProfileFns f = profile_fns(profile);
  const std::size_t n = cfg.n;
  auto params = [cfg](double u, std::array<double, 3>& w, double& c, double& b) {
    for (int a = 0; a < 3; ++a) w[a] = (1.0 - u) * cfg.weights0[a] + u * cfg.weights1[a];
    c = (1.0 - u) * cfg.c0 + u * cfg.c1;
    if (cfg.motion == BumpMotion::floored) c = std::floor(c);
    b = (1.0 - u) * cfg.bias0 + u * cfg.bias1;
  };
  auto eval = [cfg, f, params](double tau) {
    std::array<double, 3> w;
    double c, b;
    params(f.u(tau), w, c, b);
    return ring_mdp(cfg.n, cfg.epsilon_mix, cfg.gamma, c, cfg.sigma, w, b);
  };
  MdpPath::Differentiator diff;
  if (cfg.motion == BumpMotion::continuous) {
    diff = [cfg, f, params, n](double tau) {
      double u = f.u(tau), u1 = f.u1(tau), u2 = f.u2(tau);
      std::array<double, 3> w;
      double c, b;
      params(u, w, c, b);
      const double dc = cfg.c1 - cfg.c0;
      const double s2 = cfg.sigma * cfg.sigma;
      PathDerivatives d;
      d.n_states = n;
      d.n_actions = 3;
      d.dr.resize(n, 3);
      d.ddr.resize(n, 3);
      for (std::size_t s = 0; s < n; ++s) {
        double disp = ring_displacement(n, static_cast<double>(s), c);
        double G = std::exp(-disp * disp / (2.0 * s2));
        double Gc = G * disp / s2;
        double Gcc = G * (disp * disp / (s2 * s2) - 1.0 / s2);
        for (int a = 0; a < 3; ++a) {
          double dw = cfg.weights1[a] - cfg.weights0[a];
          double ru = dw * G + w[a] * Gc * dc;
          double ruu = 2.0 * dw * Gc * dc + w[a] * Gcc * dc * dc;
          d.dr(s, a) = ru * u1;
          d.ddr(s, a) = ruu * u1 * u1 + ru * u2;
        }
      }
      std::vector<double> K0 = ring_kernel(n, cfg.epsilon_mix, cfg.bias0);
      std::vector<double> K1 = ring_kernel(n, cfg.epsilon_mix, cfg.bias1);
      d.dP.resize(K0.size());
      d.ddP.resize(K0.size());
      for (std::size_t i = 0; i < K0.size(); ++i) {
        d.dP[i] = (K1[i] - K0[i]) * u1;
        d.ddP[i] = (K1[i] - K0[i]) * u2;
      }
      return d;
    };
  }
  return MdpPath(eval, GroundMetric::unit_ring(n), diff);
}

MdpPath ring_path(const RingPathConfig& cfg, Profile profile) {
  if (cfg.n < 3) throw ConfigError("ring needs n >= 3");
  if (cfg.motion != BumpMotion::blend) return moving_bump_path(cfg, profile);
  FiniteMdp m0 = ring_mdp(cfg.n, cfg.epsilon_mix, cfg.gamma, cfg.c0, cfg.sigma, cfg.weights0, cfg.bias0);
  FiniteMdp m1 = ring_mdp(cfg.n, cfg.epsilon_mix, cfg.gamma, cfg.c1, cfg.sigma, cfg.weights1, cfg.bias1);
  return interpolated_path(m0, m1, GroundMetric::unit_ring(cfg.n), profile);
}

}  // namespace

MdpPath length_dominated_path(const RingPathConfig& cfg) { return ring_path(cfg, Profile::linear); }

MdpPath curvature_dominated_path(const RingPathConfig& cfg) { return ring_path(cfg, Profile::scurve); }

MdpPath kink_prone_path(const RingPathConfig& cfg) {
  // r(s,L) = alpha * wL * G(c0), r(s,N) = wN * G(c0), r(s,R) = (1 - alpha) * wR * G(c1),
  // alpha linear in tau; rewards are affine in tau so the blend is exact.
  if (cfg.n < 3) throw ConfigError("ring needs n >= 3");
  auto endpoint = [&cfg](double alpha, double bias) {
    QTable r(cfg.n, 3);
    for (std::size_t s = 0; s < cfg.n; ++s) {
      double gL = ring_bump(cfg.n, static_cast<double>(s), cfg.c0, cfg.sigma);
      double gR = ring_bump(cfg.n, static_cast<double>(s), cfg.c1, cfg.sigma);
      r(s, 0) = alpha * cfg.weights0[0] * gL;
      r(s, 1) = cfg.weights0[1] * gL;
      r(s, 2) = (1.0 - alpha) * cfg.weights0[2] * gR;
    }
    return FiniteMdp(cfg.n, 3, ring_kernel(cfg.n, cfg.epsilon_mix, bias), std::move(r), cfg.gamma);
  };
  return interpolated_path(endpoint(cfg.alpha_profile[0], cfg.bias0), endpoint(cfg.alpha_profile[1], cfg.bias1),
                           GroundMetric::unit_ring(cfg.n), Profile::linear);
}

}  // namespace htmdp
