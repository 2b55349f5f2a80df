#pragma once

// Convergence and fit diagnostics over stored chains: potential scale
// reduction, effective sample size, autocorrelation, posterior summaries,
// block acceptance rates and the deviance information criterion.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mels/dataset.hpp"
#include "mels/error.hpp"
#include "mels/likelihood.hpp"
#include "mels/sampler.hpp"

namespace mels {

inline double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

inline double variance_of(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

/// Linear-interpolation empirical quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double prob) {
  if (sorted.empty()) throw Error("quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Sample autocorrelations rho_0..rho_max_lag (1/n autocovariance).
inline std::vector<double> autocorrelation(std::span<const double> x, std::size_t max_lag) {
  const std::size_t n = x.size();
  std::vector<double> rho;
  if (n == 0) return rho;
  const double m = mean_of(x);
  std::vector<double> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = x[i] - m;
  double c0 = 0.0;
  for (double v : c) c0 += v * v;
  max_lag = std::min(max_lag, n - 1);
  rho.reserve(max_lag + 1);
  for (std::size_t k = 0; k <= max_lag; ++k) {
    if (c0 == 0.0) {
      rho.push_back(k == 0 ? 1.0 : 0.0);
      continue;
    }
    double s = 0.0;
    for (std::size_t i = 0; i + k < n; ++i) s += c[i] * c[i + k];
    rho.push_back(s / c0);
  }
  return rho;
}

/// n / (1 + 2 sum rho_k) with Geyer's initial positive sequence truncation:
/// lag pairs are summed until a pair sum turns non-positive.
inline double effective_sample_size(std::span<const double> draws) {
  const std::size_t n = draws.size();
  if (n < 100) throw Error("effective sample size needs at least 100 draws");
  const double m = mean_of(draws);
  std::vector<double> c(n);
  double c0 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    c[i] = draws[i] - m;
    c0 += c[i] * c[i];
  }
  if (c0 == 0.0) return 0.0;
  auto rho = [&](std::size_t k) {
    double s = 0.0;
    for (std::size_t i = 0; i + k < n; ++i) s += c[i] * c[i + k];
    return s / c0;
  };
  double tau = -1.0;
  for (std::size_t k = 0; k + 1 < n; k += 2) {
    const double pair = rho(k) + rho(k + 1);
    if (pair <= 0.0) break;
    tau += 2.0 * pair;
  }
  if (!(tau > 0.0)) return static_cast<double>(n);
  return std::min(static_cast<double>(n), static_cast<double>(n) / tau);
}

/// Potential scale reduction sqrt((n-1)/n + B/(n W)). A single chain is
/// split into halves. Returns 1 when the between-chain variance is zero.
inline double gelman_rubin(const std::vector<std::vector<double>>& chains) {
  if (chains.empty()) throw Error("gelman_rubin needs at least one chain");
  std::vector<std::vector<double>> parts;
  if (chains.size() == 1) {
    const auto& c = chains.front();
    const std::size_t half = c.size() / 2;
    parts.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(half));
    parts.emplace_back(c.end() - static_cast<std::ptrdiff_t>(half), c.end());
  } else {
    parts = chains;
  }
  const std::size_t n = parts.front().size();
  for (const auto& c : parts)
    if (c.size() != n) throw Error("gelman_rubin needs chains of equal length");
  if (n < 10) throw Error("gelman_rubin needs at least 10 draws per chain");
  const auto m = static_cast<double>(parts.size());
  const auto nn = static_cast<double>(n);
  std::vector<double> means;
  double W = 0.0;
  for (const auto& c : parts) {
    means.push_back(mean_of(c));
    W += variance_of(c);
  }
  W /= m;
  const double B = nn * variance_of(means);
  if (B == 0.0) return 1.0;
  if (W == 0.0) return std::numeric_limits<double>::infinity();
  return std::sqrt((nn - 1.0) / nn + B / (nn * W));
}

struct ParameterSummary {
  std::string name;
  bool fixed = false;
  double mean = 0.0, sd = 0.0, mcse = 0.0, median = 0.0, lo = 0.0, hi = 0.0;
  double rhat = std::numeric_limits<double>::quiet_NaN();
  double ess = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> autocorr;  // lags 1..50, averaged over chains
};

/// Mean, SD, median and equal-tailed interval of pooled draws.
struct Summary {
  double mean = 0.0, sd = 0.0, median = 0.0, lo = 0.0, hi = 0.0;
};

inline Summary summarize_draws(std::vector<double> pooled, double level = 0.95) {
  Summary s;
  if (pooled.empty()) throw Error("cannot summarize an empty sample");
  s.mean = mean_of(pooled);
  s.sd = std::sqrt(variance_of(pooled));
  std::sort(pooled.begin(), pooled.end());
  s.median = quantile_sorted(pooled, 0.5);
  s.lo = quantile_sorted(pooled, 0.5 * (1.0 - level));
  s.hi = quantile_sorted(pooled, 1.0 - 0.5 * (1.0 - level));
  return s;
}

/// ESS of several chains: the sum of per-chain estimates.
inline double multi_chain_ess(const std::vector<std::vector<double>>& chains) {
  double total = 0.0;
  for (const auto& c : chains) total += effective_sample_size(c);
  return total;
}

inline ParameterSummary summarize_parameter(const ChainSet& set, std::size_t k) {
  ParameterSummary out;
  out.name = set.parameter_names[k];
  out.fixed = set.parameter_fixed[k];
  const auto chains = set.parameter_draws(k);
  std::vector<double> pooled;
  for (const auto& c : chains) pooled.insert(pooled.end(), c.begin(), c.end());
  const auto s = summarize_draws(pooled);
  out.mean = s.mean, out.sd = s.sd, out.median = s.median, out.lo = s.lo, out.hi = s.hi;
  if (out.fixed) return out;
  const std::size_t n = set.draws_per_chain();
  if (chains.size() == 1 ? n >= 20 : n >= 10) out.rhat = gelman_rubin(chains);
  if (n >= 100) {
    out.ess = multi_chain_ess(chains);
    out.mcse = out.ess > 0.0 ? out.sd / std::sqrt(out.ess) : 0.0;
    std::vector<double> ac(50, 0.0);
    for (const auto& c : chains) {
      const auto rho = autocorrelation(c, 50);
      for (std::size_t lag = 1; lag < rho.size(); ++lag) ac[lag - 1] += rho[lag] / static_cast<double>(chains.size());
    }
    out.autocorr = std::move(ac);
  } else {
    out.mcse = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

/// Acceptance rates per block, pooled over chains, monitoring phase only.
inline std::vector<BlockAcceptance> acceptance_report(const ChainSet& set) {
  std::vector<BlockAcceptance> out;
  for (const auto& ch : set.chains)
    for (const auto& a : ch.acceptance) {
      auto it = std::find_if(out.begin(), out.end(), [&](const auto& b) { return b.block == a.block; });
      if (it == out.end()) {
        out.push_back(a);
      } else {
        it->proposed += a.proposed;
        it->accepted += a.accepted;
      }
    }
  return out;
}

struct DicResult {
  double dbar = 0.0;
  double d_at_mean = 0.0;
  double pd = 0.0;
  double dic = 0.0;
};

/// DIC from the conditional deviance given the school effects, with the
/// plug-in taken at the posterior means of all parameters and effects.
inline DicResult dic(const ChainSet& set, const DesignSet& design) {
  if (set.total_draws() == 0) throw Error("chain set holds no draws");
  if (set.d > 0 && set.chains.front().effects.cols() != static_cast<Eigen::Index>(set.schools()) * set.d)
    throw Error("chain set does not store school effects");
  DicResult r;
  double acc = 0.0;
  for (std::size_t c = 0; c < set.chains.size(); ++c)
    for (std::size_t t = 0; t < set.draws_per_chain(); ++t) acc += conditional_deviance(design, set.state(c, t));
  r.dbar = acc / static_cast<double>(set.total_draws());
  r.d_at_mean = conditional_deviance(design, set.posterior_mean_state());
  r.pd = r.dbar - r.d_at_mean;
  r.dic = r.dbar + r.pd;
  return r;
}

struct DiagnosticsReport {
  std::vector<ParameterSummary> parameters;
  std::vector<BlockAcceptance> acceptance;
  DicResult dic;
  bool has_dic = false;

  double max_rhat() const {
    double m = 0.0;
    for (const auto& p : parameters)
      if (!p.fixed && !std::isnan(p.rhat)) m = std::max(m, p.rhat);
    return m;
  }

  double min_ess() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& p : parameters)
      if (!p.fixed && !std::isnan(p.ess)) m = std::min(m, p.ess);
    return m;
  }

  bool converged(double rhat_threshold = 1.1) const { return max_rhat() < rhat_threshold; }
};

inline DiagnosticsReport diagnose(const ChainSet& set, const DesignSet* design = nullptr) {
  DiagnosticsReport rep;
  for (std::size_t k = 0; k < set.parameter_names.size(); ++k) rep.parameters.push_back(summarize_parameter(set, k));
  rep.acceptance = acceptance_report(set);
  if (design) {
    rep.dic = dic(set, *design);
    rep.has_dic = true;
  }
  return rep;
}

}  // namespace mels
