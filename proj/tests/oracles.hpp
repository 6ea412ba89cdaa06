#pragma once

// Brute-force reference computations used only by the tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "htmdp/mdp.hpp"

namespace oracle {

inline htmdp::FiniteMdp random_mdp(std::size_t nS, std::size_t nA, double gamma, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> P(nS * nA * nS);
  for (std::size_t sa = 0; sa < nS * nA; ++sa) {
    double sum = 0.0;
    for (std::size_t k = 0; k < nS; ++k) sum += P[sa * nS + k] = u(rng) + 0.01;
    for (std::size_t k = 0; k < nS; ++k) P[sa * nS + k] /= sum;
    // Renormalize the last entry so the row sums to one to rounding.
    double rest = 0.0;
    for (std::size_t k = 0; k + 1 < nS; ++k) rest += P[sa * nS + k];
    P[sa * nS + nS - 1] = 1.0 - rest;
  }
  htmdp::QTable r(nS, nA);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = 2.0 * u(rng) - 1.0;
  return htmdp::FiniteMdp(nS, nA, std::move(P), std::move(r), gamma);
}

inline htmdp::QTable plain_sweeps(const htmdp::FiniteMdp& m, std::size_t sweeps) {
  htmdp::QTable q = htmdp::QTable::Zero(m.n_states(), m.n_actions());
  for (std::size_t i = 0; i < sweeps; ++i) {
    htmdp::QTable next(q.rows(), q.cols());
    for (std::size_t s = 0; s < m.n_states(); ++s)
      for (std::size_t a = 0; a < m.n_actions(); ++a) {
        double acc = 0.0;
        for (std::size_t t = 0; t < m.n_states(); ++t) acc += m.prob(s, a, t) * q.row(t).maxCoeff();
        next(s, a) = m.reward(s, a) + m.discount() * acc;
      }
    q = next;
  }
  return q;
}

// sum_{k<=K} gamma^k (P^pi)^k x on the flat state-action vector.
inline Eigen::VectorXd neumann(const Eigen::MatrixXd& Ppi, double gamma, const Eigen::VectorXd& x, int K) {
  Eigen::VectorXd term = x, acc = x;
  for (int k = 1; k <= K; ++k) {
    term = gamma * (Ppi * term);
    acc += term;
  }
  return acc;
}

// Every labelled spanning tree on n nodes, as edge lists, via Pruefer codes.
inline std::vector<std::vector<std::pair<int, int>>> spanning_trees(int n) {
  std::vector<std::vector<std::pair<int, int>>> out;
  if (n == 1) return {{}};
  if (n == 2) return {{{0, 1}}};
  std::vector<int> code(n - 2, 0);
  while (true) {
    std::vector<int> degree(n, 1);
    for (int c : code) ++degree[c];
    std::vector<std::pair<int, int>> edges;
    for (int c : code) {
      for (int leaf = 0; leaf < n; ++leaf)
        if (degree[leaf] == 1) {
          edges.push_back({leaf, c});
          --degree[leaf];
          --degree[c];
          break;
        }
    }
    int u = -1, v = -1;
    for (int i = 0; i < n; ++i)
      if (degree[i] == 1) (u < 0 ? u : v) = i;
    edges.push_back({u, v});
    out.push_back(edges);
    int pos = n - 3;
    while (pos >= 0 && ++code[pos] == n) code[pos--] = 0;
    if (pos < 0) break;
  }
  return out;
}

// Max of sum f_i xi_i over 1-Lipschitz f by enumerating dual LP vertices:
// each vertex is fixed by a spanning tree of tight constraints with f_0 = 0.
inline double w1_dual_vertices(const std::vector<double>& xi, const Eigen::MatrixXd& d) {
  const int n = static_cast<int>(xi.size());
  double best = 0.0;
  for (const auto& tree : spanning_trees(n)) {
    const int m = static_cast<int>(tree.size());
    for (int signs = 0; signs < (1 << m); ++signs) {
      std::vector<double> f(n, 0.0);
      std::vector<char> known(n, 0);
      known[0] = 1;
      for (int pass = 0; pass < n; ++pass)
        for (int e = 0; e < m; ++e) {
          auto [a, b] = tree[e];
          double step = ((signs >> e) & 1 ? 1.0 : -1.0) * d(a, b);
          if (known[a] && !known[b]) f[b] = f[a] + step, known[b] = 1;
          else if (known[b] && !known[a]) f[a] = f[b] - step, known[a] = 1;
        }
      bool feasible = true;
      for (int i = 0; i < n && feasible; ++i)
        for (int j = 0; j < n; ++j)
          if (std::abs(f[i] - f[j]) > d(i, j) + 1e-9) {
            feasible = false;
            break;
          }
      if (!feasible) continue;
      double v = 0.0;
      for (int i = 0; i < n; ++i) v += f[i] * xi[i];
      best = std::max(best, std::abs(v));
    }
  }
  return best;
}

// On a line, 1-Lipschitz vertex functions move by +-gap between neighbours.
inline double w1_line_signs(const std::vector<double>& xi_sorted, const std::vector<double>& gaps) {
  const int m = static_cast<int>(gaps.size());
  double best = 0.0;
  for (int signs = 0; signs < (1 << m); ++signs) {
    double f = 0.0, v = 0.0;
    v += f * xi_sorted[0];
    for (int i = 0; i < m; ++i) {
      f += ((signs >> i) & 1 ? 1.0 : -1.0) * gaps[i];
      v += f * xi_sorted[i + 1];
    }
    best = std::max(best, std::abs(v));
  }
  return best;
}

inline std::vector<double> random_zero_mass(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> xi(n);
  double sum = 0.0;
  for (auto& x : xi) sum += x = g(rng);
  for (auto& x : xi) x -= sum / static_cast<double>(n);
  return xi;
}

}  // namespace oracle
