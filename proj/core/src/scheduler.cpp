#include "htmdp/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace htmdp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Distinct pairs of the batch in first-seen order.
std::vector<StateAction> unique_pairs(std::span<const StateAction> batch) {
  std::vector<StateAction> out;
  for (const auto& p : batch)
    if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
  return out;
}

std::ptrdiff_t pair_index(const std::vector<StateAction>& pairs, std::size_t s, std::size_t a) {
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (pairs[i].s == s && pairs[i].a == a) return static_cast<std::ptrdiff_t>(i);
  return -1;
}

bool history_ready(const ReplayBuffer& buffer, std::size_t W1) {
  return !buffer.empty() && buffer.span_steps() >= 2 * static_cast<std::uint64_t>(W1);
}

double clip(double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); }

// Ceil that ignores rounding noise just above an integer.
std::size_t safe_ceil(double x, std::size_t cap) {
  if (!(x < static_cast<double>(cap))) return cap;
  const double c = std::ceil(x - 1e-12 * std::max(1.0, std::fabs(x)));
  return std::min(cap, static_cast<std::size_t>(std::max(0.0, c)));
}

}  // namespace

ReplayBuffer::ReplayBuffer(std::size_t capacity) : data_(capacity) {
  if (capacity == 0) throw PreconditionError("replay buffer capacity must be positive");
}

void ReplayBuffer::push(const Transition& t) {
  if (size_ > 0 && t.step <= last_step())
    throw PreconditionError("replay buffer steps must strictly increase");
  if (size_ < data_.size()) {
    data_[(head_ + size_) % data_.size()] = t;
    ++size_;
  } else {
    data_[head_] = t;
    head_ = (head_ + 1) % data_.size();
  }
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= size_) throw PreconditionError("replay buffer index out of range");
  return data_[(head_ + i) % data_.size()];
}

std::uint64_t ReplayBuffer::first_step() const { return at(0).step; }
std::uint64_t ReplayBuffer::last_step() const { return at(size_ - 1).step; }

std::uint64_t ReplayBuffer::span_steps() const {
  return size_ == 0 ? 0 : last_step() - first_step() + 1;
}

std::size_t ReplayBuffer::lower_index(std::uint64_t step) const {
  std::size_t lo = 0, hi = size_;
  while (lo < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (at(mid).step < step)
      lo = mid + 1;
    else
      hi = mid;
  }
  return lo;
}

std::vector<std::size_t> ReplayBuffer::sample(std::size_t n, std::mt19937_64& rng) const {
  if (size_ == 0) throw PreconditionError("cannot sample an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, size_ - 1);
  std::vector<std::size_t> out(n);
  for (auto& i : out) i = pick(rng);
  return out;
}

void ReplayBuffer::clear() {
  head_ = 0;
  size_ = 0;
}

std::optional<double> reward_drift(const ReplayBuffer& buffer, std::size_t W1,
                                   std::span<const StateAction> batch, double ema) {
  if (W1 == 0) throw PreconditionError("W1 must be positive");
  if (!(ema > 0.0 && ema <= 1.0)) throw PreconditionError("reward EMA rate must lie in (0,1]");
  if (!history_ready(buffer, W1)) return std::nullopt;
  const auto pairs = unique_pairs(batch);
  if (pairs.empty()) return 0.0;
  const std::uint64_t cut = buffer.last_step() - W1;

  std::vector<double> now(pairs.size(), 0.0), then(pairs.size(), 0.0);
  std::vector<char> seen(pairs.size(), 0), seen_then(pairs.size(), 0);
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const auto& tr = buffer.at(i);
    const auto k = pair_index(pairs, tr.s, tr.a);
    if (k < 0) continue;
    if (!seen[k]) {
      now[k] = tr.r;
      seen[k] = 1;
    } else {
      now[k] += ema * (tr.r - now[k]);
    }
    if (tr.step <= cut) {
      then[k] = now[k];
      seen_then[k] = 1;
    }
  }
  double out = 0.0;
  for (std::size_t k = 0; k < pairs.size(); ++k)
    if (seen_then[k]) out = std::max(out, std::fabs(now[k] - then[k]));
  return out;
}

std::optional<double> feature_mean_drift(const ReplayBuffer& buffer, std::size_t W1,
                                         std::span<const StateAction> batch,
                                         const Eigen::MatrixXd& features) {
  if (W1 == 0) throw PreconditionError("W1 must be positive");
  if (!history_ready(buffer, W1)) return std::nullopt;
  const auto pairs = unique_pairs(batch);
  if (pairs.empty()) return 0.0;
  const std::uint64_t t = buffer.last_step();
  const std::uint64_t recent_lo = t - W1 + 1;
  const std::uint64_t old_lo = t + 1 - 2 * static_cast<std::uint64_t>(W1);

  // Next states per pair for the old (0) and recent (1) windows.
  std::vector<std::array<std::vector<std::size_t>, 2>> next(pairs.size());
  for (std::size_t i = buffer.lower_index(old_lo); i < buffer.size(); ++i) {
    const auto& tr = buffer.at(i);
    const auto k = pair_index(pairs, tr.s, tr.a);
    if (k < 0) continue;
    next[k][tr.step >= recent_lo ? 1 : 0].push_back(tr.s_next);
  }

  double out = 0.0;
  for (auto& w : next) {
    if (w[0].empty() || w[1].empty()) continue;
    double sq = 0.0;
    if (features.size() == 0) {
      const double n0 = static_cast<double>(w[0].size()), n1 = static_cast<double>(w[1].size());
      std::sort(w[0].begin(), w[0].end());
      std::sort(w[1].begin(), w[1].end());
      // Merge the sorted successor lists to get per-state frequency differences.
      std::size_t i = 0, j = 0;
      while (i < w[0].size() || j < w[1].size()) {
        std::size_t s;
        if (j == w[1].size() || (i < w[0].size() && w[0][i] <= w[1][j]))
          s = w[0][i];
        else
          s = w[1][j];
        std::size_t c0 = 0, c1 = 0;
        while (i < w[0].size() && w[0][i] == s) ++c0, ++i;
        while (j < w[1].size() && w[1][j] == s) ++c1, ++j;
        const double d = static_cast<double>(c1) / n1 - static_cast<double>(c0) / n0;
        sq += d * d;
      }
    } else {
      Eigen::VectorXd m0 = Eigen::VectorXd::Zero(features.cols());
      Eigen::VectorXd m1 = m0;
      for (auto s : w[0]) {
        if (s >= static_cast<std::size_t>(features.rows()))
          throw DimensionError("feature map has fewer rows than states");
        m0 += features.row(static_cast<Eigen::Index>(s)).transpose();
      }
      for (auto s : w[1]) {
        if (s >= static_cast<std::size_t>(features.rows()))
          throw DimensionError("feature map has fewer rows than states");
        m1 += features.row(static_cast<Eigen::Index>(s)).transpose();
      }
      m0 /= static_cast<double>(w[0].size());
      m1 /= static_cast<double>(w[1].size());
      sq = (m1 - m0).squaredNorm();
    }
    out = std::max(out, std::sqrt(sq));
  }
  return out;
}

double minibatch_gap(const QTable& q, std::span<const std::size_t> states) {
  double g = kInf;
  if (q.cols() < 2) return g;
  for (auto s : states) {
    if (s >= static_cast<std::size_t>(q.rows())) throw DimensionError("state out of range");
    double best = -kInf, second = -kInf;
    for (Eigen::Index a = 0; a < q.cols(); ++a) {
      const double v = q(static_cast<Eigen::Index>(s), a);
      if (v > best) {
        second = best;
        best = v;
      } else if (v > second) {
        second = v;
      }
    }
    g = std::min(g, best - second);
  }
  return g;
}

ProxySignals combine_proxies(double delta_r, double delta_p, double L_s,
                             std::optional<double> pl_lagged, double gap_hat, double eps_gap) {
  ProxySignals p;
  p.delta_r_inf = delta_r;
  p.delta_p_phi = delta_p;
  p.delta_pl_hat = delta_r + L_s * delta_p;
  p.delta_curv_hat = pl_lagged ? std::fabs(p.delta_pl_hat - *pl_lagged) : 0.0;
  p.gap_hat = gap_hat;
  p.kink = gap_hat <= eps_gap ? 1 : 0;
  return p;
}

ProxyEstimator::ProxyEstimator(ProxyConfig config) : config_(std::move(config)) {
  if (config_.W1 == 0 || config_.W2 == 0) throw ConfigError("W1 and W2 must be positive");
  if (!(config_.L_s >= 0.0)) throw ConfigError("L_s must be nonnegative");
  last_.gap_hat = kInf;
}

const ProxySignals& ProxyEstimator::update(const ReplayBuffer& buffer,
                                           std::span<const StateAction> batch,
                                           std::span<const std::size_t> gap_states,
                                           const QTable& q) {
  const double gap = minibatch_gap(q, gap_states);
  const auto dr = reward_drift(buffer, config_.W1, batch, config_.reward_ema);
  const auto dp = dr ? feature_mean_drift(buffer, config_.W1, batch, config_.features)
                     : std::optional<double>{};
  if (!dr || !dp || buffer.empty()) {
    last_.gap_hat = gap;
    last_.kink = gap <= config_.eps_gap ? 1 : 0;
    last_.ready = false;
    return last_;
  }
  const std::uint64_t t = buffer.last_step();
  std::optional<double> lagged;
  if (t >= config_.W2) {
    const std::uint64_t target = t - config_.W2;
    while (pl_history_.size() > 1 && pl_history_[1].first <= target) pl_history_.pop_front();
    if (!pl_history_.empty() && pl_history_.front().first <= target)
      lagged = pl_history_.front().second;
  }
  last_ = combine_proxies(*dr, *dp, config_.L_s, lagged, gap, config_.eps_gap);
  last_.ready = true;
  pl_history_.emplace_back(t, last_.delta_pl_hat);
  return last_;
}

void SchedulerConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("scheduler: ") + what);
  };
  need(beta >= 0.0 && beta < 1.0, "beta must lie in [0,1)");
  need(H >= 1, "H must be at least 1");
  need(delta_hys >= 0.0, "delta_hys must be nonnegative");
  need(W1 >= 1 && W2 >= 1, "W1 and W2 must be positive");
  need(reward_ema > 0.0 && reward_ema <= 1.0, "reward_ema must lie in (0,1]");
  need(eta_min >= 0.0 && eta_min <= eta_max, "need 0 <= eta_min <= eta_max");
  need(nu_min >= 0.0 && nu_min <= nu_max && nu_max <= 1.0, "need 0 <= nu_min <= nu_max <= 1");
  need(eta0 > 0.0 && nu0 > 0.0, "eta0 and nu0 must be positive");
  need(lambda0 >= 0.0 && lambda_max >= lambda0, "need 0 <= lambda0 <= lambda_max");
  for (double c : {alpha1, alpha2, beta1, beta2, c1, c2, gamma1, gamma2, gamma3})
    need(c >= 0.0, "mapping coefficients must be nonnegative");
  need(delta > 0.0, "delta must be positive");
  need(Dmax >= 1 && Bmax >= 1, "Dmax and Bmax must be positive");
  need(eta_t0 > 0.0, "eta_t0 must be positive");
  need(L_s >= 0.0, "L_s must be nonnegative");
}

std::array<double, 5> hyper_values(const HyperParams& h) {
  return {h.eta, h.nu, h.lambda, static_cast<double>(h.depth), static_cast<double>(h.budget)};
}

double base_eta(const SchedulerConfig& config, std::uint64_t step) {
  if (config.eta_schedule == EtaSchedule::constant) return config.eta0;
  const double macro = static_cast<double>(step - step % config.H);
  return config.eta0 * config.eta_t0 / (config.eta_t0 + macro);
}

double eta_factor(const SchedulerConfig& config, double pl, double curv) {
  return 1.0 / (1.0 + config.alpha1 * std::max(0.0, pl) + config.alpha2 * std::max(0.0, curv));
}

HyperParams map_hyperparams(const SchedulerConfig& c, double pl, double curv, double kink,
                            double gap, double eta_base) {
  pl = std::max(0.0, pl);
  curv = std::max(0.0, curv);
  kink = std::max(0.0, kink);
  const double inv_gap = kink > 0.0 ? kink / std::max(gap, c.delta) : 0.0;
  HyperParams h;
  h.eta = clip(eta_base * eta_factor(c, pl, curv), c.eta_min, c.eta_max);
  h.nu = clip(c.nu0 / (1.0 + c.beta1 * kink * (1.0 + c.beta2 / std::max(gap, c.delta))),
              c.nu_min, c.nu_max);
  h.lambda = std::min(c.lambda_max, c.lambda0 * (1.0 + c.c1 * pl + c.c2 * std::sqrt(curv)));
  h.depth = safe_ceil(static_cast<double>(c.D0) + c.gamma1 * (1.0 + pl) +
                          c.gamma2 * std::sqrt(1.0 + curv) + c.gamma3 * inv_gap,
                      c.Dmax);
  h.budget = safe_ceil(static_cast<double>(c.B0) * (1.0 + c.gamma1 * pl + c.gamma2 * curv), c.Bmax);
  return h;
}

SchedulerState scheduler_init(const SchedulerConfig& config) {
  config.validate();
  SchedulerState st;
  st.config = config;
  st.hyper = map_hyperparams(config, 0.0, 0.0, 0.0, kInf, base_eta(config, 0));
  st.eta_factor = 1.0;
  return st;
}

SchedulerState scheduler_step(SchedulerState st, const ProxySignals& raw, std::uint64_t step) {
  const auto& c = st.config;
  if (step % c.H != 0) return st;
  std::array<double, 3> x = {raw.delta_pl_hat, raw.delta_curv_hat, static_cast<double>(raw.kink)};
  if (c.normalize) {
    for (int i = 0; i < 3; ++i) {
      double z = 0.0;
      if (!st.norm_started) {
        st.norm_mean[i] = x[i];
        st.norm_var[i] = 0.0;
      } else {
        const double diff = x[i] - st.norm_mean[i];
        if (st.norm_var[i] > 1e-24) z = diff / std::sqrt(st.norm_var[i]);
        st.norm_mean[i] += (1.0 - c.beta) * diff;
        st.norm_var[i] = c.beta * (st.norm_var[i] + (1.0 - c.beta) * diff * diff);
      }
      x[i] = z;
    }
    st.norm_started = true;
  }
  const double p0 = st.pl_tilde, q0 = st.curv_tilde, k0 = st.kink_tilde;
  st.pl_tilde = c.beta * p0 + (1.0 - c.beta) * x[0];
  st.curv_tilde = c.beta * q0 + (1.0 - c.beta) * x[1];
  st.kink_tilde = c.beta * k0 + (1.0 - c.beta) * x[2];
  const double change = std::hypot(st.pl_tilde - p0, st.curv_tilde - q0, st.kink_tilde - k0);
  const double eta_base = base_eta(c, step);
  if (change >= c.delta_hys) {
    st.hyper = map_hyperparams(c, st.pl_tilde, st.curv_tilde, st.kink_tilde, raw.gap_hat, eta_base);
    st.eta_factor = eta_factor(c, st.pl_tilde, st.curv_tilde);
    st.last_update_step = step;
    ++st.updates;
  } else {
    st.hyper.eta = clip(eta_base * st.eta_factor, c.eta_min, c.eta_max);
  }
  return st;
}

std::array<std::pair<double, double>, 5> hyper_ranges(const SchedulerConfig& c) {
  const double dmin = static_cast<double>(
      safe_ceil(static_cast<double>(c.D0) + c.gamma1 + c.gamma2, c.Dmax));
  const double bmin = static_cast<double>(std::min(c.B0, c.Bmax));
  return {{{c.eta_min, c.eta_max},
           {c.nu_min, c.nu_max},
           {c.lambda0, c.lambda_max},
           {dmin, static_cast<double>(c.Dmax)},
           {bmin, static_cast<double>(c.Bmax)}}};
}

std::array<double, 5> variation_bounds(const SchedulerConfig& c, std::size_t T) {
  const auto r = hyper_ranges(c);
  const double macros = std::ceil(static_cast<double>(T) / static_cast<double>(c.H));
  std::array<double, 5> out{};
  for (std::size_t i = 0; i < 5; ++i) out[i] = macros * (r[i].second - r[i].first);
  return out;
}

ChatterStats chatter_stats(std::span<const HyperParams> trace, double eps) {
  if (trace.empty()) throw PreconditionError("chatter_stats needs a nonempty trace");
  ChatterStats out;
  for (std::size_t t = 0; t + 1 < trace.size(); ++t) {
    const auto a = hyper_values(trace[t]), b = hyper_values(trace[t + 1]);
    bool large = false, any = false;
    for (std::size_t i = 0; i < 5; ++i) {
      const double d = std::fabs(b[i] - a[i]);
      out.variation[i] += d;
      any = any || d > 0.0;
      large = large || d > eps;
    }
    out.large_changes += large ? 1 : 0;
    out.change_steps += any ? 1 : 0;
  }
  out.large_change_fraction =
      static_cast<double>(out.large_changes) / static_cast<double>(trace.size());
  return out;
}

RmAudit robbins_monro_audit(std::span<const double> eta, std::span<const double> base, double c) {
  if (eta.size() != base.size()) throw DimensionError("eta and base traces must be aligned");
  RmAudit out;
  if (eta.empty()) return out;
  std::size_t ok = 0;
  for (std::size_t t = 0; t < eta.size(); ++t) {
    const double slack = 1e-12 * base[t];
    if (eta[t] >= c * base[t] - slack && eta[t] <= base[t] + slack) ++ok;
    out.sum_eta += eta[t];
    out.sum_eta_sq += eta[t] * eta[t];
    out.sum_base += base[t];
    out.sum_base_sq += base[t] * base[t];
  }
  out.comparable_fraction = static_cast<double>(ok) / static_cast<double>(eta.size());
  return out;
}

NoChatterBound no_chatter_bound(std::span<const std::array<double, 3>> smoothed, std::size_t H,
                                double delta_hys) {
  NoChatterBound out;
  double m = 0.0;
  for (const auto& x : smoothed) m = std::max(m, x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
  out.C2 = 4.0 * m;
  out.bound = std::isinf(delta_hys) ? 0.0
                                    : 2.0 * out.C2 / (static_cast<double>(H) * delta_hys * delta_hys);
  return out;
}

}  // namespace htmdp
