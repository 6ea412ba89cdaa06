#include "htmdp/metric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace htmdp {

GroundMetric GroundMetric::line(std::vector<double> positions) {
  GroundMetric m;
  m.kind_ = MetricKind::line;
  const std::size_t n = positions.size();
  if (n == 0) throw DimensionError("line metric needs at least one point");
  m.order_.resize(n);
  std::iota(m.order_.begin(), m.order_.end(), 0);
  std::stable_sort(m.order_.begin(), m.order_.end(),
                   [&](std::size_t a, std::size_t b) { return positions[a] < positions[b]; });
  for (std::size_t k = 1; k < n; ++k)
    if (!(positions[m.order_[k]] > positions[m.order_[k - 1]]))
      throw PreconditionError("line metric positions must be distinct");
  m.dist_.resize(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m.dist_(i, j) = std::abs(positions[i] - positions[j]);
  m.positions_ = std::move(positions);
  m.finish();
  return m;
}

GroundMetric GroundMetric::unit_line(std::size_t n) {
  std::vector<double> p(n);
  std::iota(p.begin(), p.end(), 0.0);
  return line(std::move(p));
}

GroundMetric GroundMetric::ring(std::vector<double> edge_lengths) {
  GroundMetric m;
  m.kind_ = MetricKind::ring;
  const std::size_t n = edge_lengths.size();
  if (n < 3) throw DimensionError("ring metric needs at least three states");
  for (double e : edge_lengths)
    if (!(e > 0.0)) throw PreconditionError("ring edge lengths must be positive");
  std::vector<double> cum(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) cum[i + 1] = cum[i] + edge_lengths[i];
  const double total = cum[n];
  m.dist_.resize(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double d = std::abs(cum[j] - cum[i]);
      m.dist_(i, j) = std::min(d, total - d);
    }
  m.edges_ = std::move(edge_lengths);
  m.finish();
  return m;
}

GroundMetric GroundMetric::unit_ring(std::size_t n) { return ring(std::vector<double>(n, 1.0)); }

GroundMetric GroundMetric::general(Eigen::MatrixXd dist) {
  const Eigen::Index n = dist.rows();
  if (n == 0 || dist.cols() != n) throw DimensionError("metric matrix must be square and nonempty");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (dist(i, i) != 0.0) throw PreconditionError("metric diagonal must be zero");
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!(dist(i, j) >= 0.0) || !std::isfinite(dist(i, j)))
        throw PreconditionError("metric entries must be finite and nonnegative");
      if (std::abs(dist(i, j) - dist(j, i)) > 1e-12) throw PreconditionError("metric must be symmetric");
    }
  }
  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (dist(i, j) > dist(i, k) + dist(k, j) + 1e-9)
          throw PreconditionError("metric violates the triangle inequality at (" + std::to_string(i) +
                                  "," + std::to_string(j) + ") via " + std::to_string(k));
  GroundMetric m;
  m.kind_ = MetricKind::general;
  m.dist_ = std::move(dist);
  m.finish();
  return m;
}

void GroundMetric::finish() { diameter_ = dist_.size() ? dist_.maxCoeff() : 0.0; }

namespace {

void require_zero_mass(std::span<const double> xi) {
  double sum = 0.0, l1 = 0.0;
  for (double x : xi) {
    if (!std::isfinite(x)) throw PreconditionError("signed measure has non-finite entries");
    sum += x;
    l1 += std::abs(x);
  }
  if (std::abs(sum) > 1e-8 * std::max(1.0, l1))
    throw PreconditionError("W1 dual norm needs a zero-mass measure, total mass " + std::to_string(sum));
}

}  // namespace

double transport_cost(std::span<const double> xi, const Eigen::MatrixXd& cost) {
  // Successive shortest paths on the bipartite graph supply -> demand with
  // unbounded arc capacities. Each augmentation saturates a supply, a demand
  // or a reverse arc, so the loop is finite.
  const std::size_t n = xi.size();
  std::vector<std::size_t> src, dst;
  std::vector<double> supply, demand;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (xi[i] > 0) {
      src.push_back(i);
      supply.push_back(xi[i]);
      total += xi[i];
    } else if (xi[i] < 0) {
      dst.push_back(i);
      demand.push_back(-xi[i]);
    }
  }
  if (src.empty() || dst.empty()) return 0.0;
  const std::size_t ns = src.size(), nd = dst.size();
  // flow[i][j] on arc src i -> dst j; reverse residual capacity equals the flow.
  std::vector<double> flow(ns * nd, 0.0);
  const double stop = 1e-15 * total;
  double moved = 0.0, value = 0.0;
  const double inf = std::numeric_limits<double>::infinity();
  // Node ids: 0..ns-1 sources, ns..ns+nd-1 sinks, plus a super source.
  const std::size_t N = ns + nd;
  for (std::size_t guard = 0; total - moved > stop; ++guard) {
    if (guard > 4 * (ns + nd) * (ns * nd + 1)) throw SolverError("transport solver did not terminate");
    std::vector<double> distv(N, inf);
    std::vector<long> prev(N, -1);
    for (std::size_t i = 0; i < ns; ++i)
      if (supply[i] > stop) distv[i] = 0.0;
    // Bellman-Ford; residual arcs are src->dst (cost c) and dst->src (cost -c, if flow>0).
    for (std::size_t round = 0; round < N; ++round) {
      bool changed = false;
      for (std::size_t i = 0; i < ns; ++i) {
        if (distv[i] == inf) continue;
        for (std::size_t j = 0; j < nd; ++j) {
          double c = distv[i] + cost(src[i], dst[j]);
          if (c < distv[ns + j] - 1e-15) {
            distv[ns + j] = c;
            prev[ns + j] = static_cast<long>(i);
            changed = true;
          }
        }
      }
      for (std::size_t j = 0; j < nd; ++j) {
        if (distv[ns + j] == inf) continue;
        for (std::size_t i = 0; i < ns; ++i) {
          if (flow[i * nd + j] <= 0.0) continue;
          double c = distv[ns + j] - cost(src[i], dst[j]);
          if (c < distv[i] - 1e-15) {
            distv[i] = c;
            prev[i] = static_cast<long>(ns + j);
            changed = true;
          }
        }
      }
      if (!changed) break;
    }
    std::size_t best = N;
    for (std::size_t j = 0; j < nd; ++j)
      if (demand[j] > stop && distv[ns + j] < inf && (best == N || distv[ns + j] < distv[best]))
        best = ns + j;
    if (best == N) throw SolverError("transport solver found no augmenting path");
    // Walk back to a source to find the bottleneck.
    double amount = demand[best - ns];
    std::size_t v = best;
    while (prev[v] >= 0) {
      std::size_t u = static_cast<std::size_t>(prev[v]);
      if (v < ns) amount = std::min(amount, flow[v * nd + (u - ns)]);  // reverse arc
      v = u;
    }
    amount = std::min(amount, supply[v]);
    supply[v] -= amount;
    demand[best - ns] -= amount;
    v = best;
    while (prev[v] >= 0) {
      std::size_t u = static_cast<std::size_t>(prev[v]);
      if (v >= ns) flow[u * nd + (v - ns)] += amount;
      else flow[v * nd + (u - ns)] -= amount;
      v = u;
    }
    moved += amount;
  }
  for (std::size_t i = 0; i < ns; ++i)
    for (std::size_t j = 0; j < nd; ++j) value += flow[i * nd + j] * cost(src[i], dst[j]);
  return value;
}

double w1_dual_norm(std::span<const double> xi, const GroundMetric& metric) {
  if (xi.size() != metric.size()) throw DimensionError("measure size does not match the metric");
  require_zero_mass(xi);
  const std::size_t n = xi.size();
  switch (metric.kind()) {
    case MetricKind::line: {
      const auto& ord = metric.order();
      const auto& pos = metric.positions();
      double F = 0.0, acc = 0.0;
      for (std::size_t k = 0; k + 1 < n; ++k) {
        F += xi[ord[k]];
        acc += std::abs(F) * (pos[ord[k + 1]] - pos[ord[k]]);
      }
      return acc;
    }
    case MetricKind::ring: {
      // min_c sum_i w_i |F_i - c|, attained at a weighted median of F.
      const auto& w = metric.edge_lengths();
      std::vector<std::pair<double, double>> fw(n);
      double F = 0.0, wsum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        F += xi[i];
        fw[i] = {F, w[i]};
        wsum += w[i];
      }
      std::vector<std::pair<double, double>> sorted = fw;
      std::sort(sorted.begin(), sorted.end());
      double half = 0.5 * wsum, run = 0.0, c = sorted.back().first;
      for (auto& [f, wi] : sorted) {
        run += wi;
        if (run >= half) {
          c = f;
          break;
        }
      }
      double acc = 0.0;
      for (auto& [f, wi] : fw) acc += wi * std::abs(f - c);
      return acc;
    }
    case MetricKind::general:
      return transport_cost(xi, metric.matrix());
  }
  return 0.0;
}

double w1_distance(std::span<const double> p, std::span<const double> q, const GroundMetric& metric) {
  if (p.size() != q.size()) throw DimensionError("distributions differ in size");
  std::vector<double> d(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) d[i] = p[i] - q[i];
  return w1_dual_norm(d, metric);
}

double l1_surrogate_norm(std::span<const double> xi, const GroundMetric& metric) {
  if (xi.size() != metric.size()) throw DimensionError("measure size does not match the metric");
  double l1 = 0.0;
  for (double x : xi) l1 += std::abs(x);
  return 0.5 * metric.diameter() * l1;
}

double lipschitz_seminorm(std::span<const double> f, const GroundMetric& metric) {
  if (f.size() != metric.size()) throw DimensionError("function size does not match the metric");
  double best = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t j = i + 1; j < f.size(); ++j) {
      double df = std::abs(f[i] - f[j]);
      double d = metric(i, j);
      if (d == 0.0) {
        if (df != 0.0) throw PreconditionError("states at distance 0 carry different values");
        continue;
      }
      best = std::max(best, df / d);
    }
  return best;
}

MixingCertificate mixing_certificate(const FiniteMdp& mdp, const GroundMetric& metric) {
  const std::size_t nS = mdp.n_states(), nA = mdp.n_actions();
  if (metric.size() != nS) throw DimensionError("metric size does not match the MDP");
  for (std::size_t i = 0; i < nS; ++i)
    for (std::size_t j = i + 1; j < nS; ++j)
      if (!(metric(i, j) > 0.0)) throw PreconditionError("metric must separate distinct states");
  MixingCertificate c;
  c.gamma = mdp.discount();
  std::vector<double> col(nS);
  for (std::size_t a = 0; a < nA; ++a) {
    for (std::size_t s = 0; s < nS; ++s) col[s] = mdp.reward(s, a);
    c.L_r = std::max(c.L_r, lipschitz_seminorm(col, metric));
    for (std::size_t s = 0; s < nS; ++s)
      for (std::size_t t = s + 1; t < nS; ++t)
        c.kappa = std::max(c.kappa, w1_distance(mdp.row(s, a), mdp.row(t, a), metric) / metric(s, t));
  }
  if (!(c.gamma * c.kappa < 1.0))
    throw NoCertificateError("gamma * kappa = " + std::to_string(c.gamma * c.kappa) +
                             " >= 1, mixing scale cannot be certified");
  c.C_mix = c.L_r / (1.0 - c.gamma * c.kappa);
  return c;
}

MixingCertificate combine_certificates(std::span<const MixingCertificate> certs) {
  if (certs.empty()) throw PreconditionError("no certificates to combine");
  MixingCertificate out = certs.front();
  for (const auto& c : certs) {
    out.L_r = std::max(out.L_r, c.L_r);
    out.kappa = std::max(out.kappa, c.kappa);
  }
  if (!(out.gamma * out.kappa < 1.0)) throw NoCertificateError("path-uniform gamma * kappa >= 1");
  out.C_mix = out.L_r / (1.0 - out.gamma * out.kappa);
  return out;
}

}  // namespace htmdp
