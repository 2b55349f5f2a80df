#pragma once

// Quantities derived from fitted chains: shrunken school effects,
// intake-adjusted school variances, interdecile ranges, variance
// partitions, separability counts and residual exports.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mels/dataset.hpp"
#include "mels/diagnostics.hpp"
#include "mels/error.hpp"
#include "mels/sampler.hpp"

namespace mels {

inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("probability must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

namespace detail {
inline void check_idr_prob(double p) {
  if (!(p > 0.5 && p < 1.0)) throw ConfigError("interdecile probability must lie in (0.5, 1)");
}
}  // namespace detail

/// beta0 -/+ Phi^{-1}(p) sqrt(sigma_u2): the p and 1-p quantiles of school means.
inline std::pair<double, double> idr_mean(double beta0, double sigma_u2, double p = 0.90) {
  detail::check_idr_prob(p);
  if (!(sigma_u2 >= 0.0)) throw ConfigError("variance must be non-negative");
  const double half = normal_quantile(p) * std::sqrt(sigma_u2);
  return {beta0 - half, beta0 + half};
}

/// exp(eta0 -/+ Phi^{-1}(p) sqrt(sigma_v2)) for log-normally distributed school variances.
inline std::pair<double, double> idr_variance(double eta0, double sigma_v2, double p = 0.90) {
  const auto [lo, hi] = idr_mean(eta0, sigma_v2, p);
  return {std::exp(lo), std::exp(hi)};
}

/// E[exp(eta0 + v)] for v ~ N(0, sigma_v2).
inline double population_avg_residual_variance(double eta0, double sigma_v2) {
  return std::exp(eta0 + 0.5 * sigma_v2);
}

/// Gap between the p and 1-p quantiles of a normal with variance sigma2.
inline double progress_spread(double sigma2, double p = 0.90) {
  if (!(sigma2 >= 0.0)) throw ConfigError("variance must be non-negative");
  return 2.0 * normal_quantile(p) * std::sqrt(sigma2);
}

inline double vpc(double sigma_u2, double sigma_e2) {
  if (!(sigma_u2 >= 0.0 && sigma_e2 >= 0.0)) throw ConfigError("variances must be non-negative");
  if (sigma_u2 + sigma_e2 == 0.0) throw ConfigError("vpc undefined when both variances are zero");
  return sigma_u2 / (sigma_u2 + sigma_e2);
}

/// Covariate profile at which school variances are compared.
struct ReferenceProfile {
  Eigen::VectorXd w_bar;  // variance covariates, intercept first
  Eigen::VectorXd z_bar;  // random-effect covariates, intercept first
  Eigen::MatrixXd z_var;  // covariance of random-effect covariates
  // Evaluate each school at its own mean variance covariates instead of w_bar.
  bool per_school_w = false;

  /// Global covariate means; z_var is the average of the within-school
  /// covariance matrices.
  static ReferenceProfile defaults(const DesignSet& design) {
    ReferenceProfile ref;
    ref.w_bar = design.w_mean;
    ref.z_bar = design.z_mean;
    const Eigen::Index r = design.Z.cols();
    ref.z_var = Eigen::MatrixXd::Zero(r, r);
    for (const auto& c : design.school_z_cov) ref.z_var += c;
    if (!design.school_z_cov.empty()) ref.z_var /= static_cast<double>(design.school_z_cov.size());
    return ref;
  }
};

struct EffectSummary {
  double mean = 0.0, sd = 0.0, median = 0.0, lo = 0.0, hi = 0.0;
};

inline EffectSummary summarize_effect(std::vector<double> draws, double level = 0.95) {
  const auto s = summarize_draws(std::move(draws), level);
  return {s.mean, s.sd, s.median, s.lo, s.hi};
}

namespace detail {
inline void require_variance_effect(const ChainSet& set) {
  if (!set.spec.random_residual_variance)
    throw UnsupportedModel("model has no school effect in the residual variance");
}
}  // namespace detail

/// Per-school posterior summaries of sigma^2_{e,j} = exp(w' alpha + v_j).
inline std::vector<EffectSummary> school_variance_at(const ChainSet& set, const DesignSet& design,
                                                     const ReferenceProfile& reference, double level = 0.95) {
  detail::require_variance_effect(set);
  if (!reference.per_school_w && reference.w_bar.size() != set.q)
    throw DimensionError("reference w_bar has wrong length");
  const auto J = set.schools();
  std::vector<EffectSummary> out;
  out.reserve(J);
  for (std::size_t j = 0; j < J; ++j) {
    const Eigen::VectorXd w =
        reference.per_school_w ? Eigen::VectorXd(design.school_w_mean.row(static_cast<Eigen::Index>(j)).transpose())
                               : reference.w_bar;
    std::vector<double> draws;
    draws.reserve(set.total_draws());
    const auto vcol = static_cast<Eigen::Index>(j) * set.d + set.r;
    for (const auto& ch : set.chains)
      for (Eigen::Index t = 0; t < ch.scalars.rows(); ++t)
        draws.push_back(std::exp(ch.scalars.row(t).segment(set.p, set.q).dot(w.transpose()) + ch.effects(t, vcol)));
    out.push_back(summarize_effect(std::move(draws), level));
  }
  return out;
}

/// Ascending ranks 1..n; ties go to the lower index first.
inline std::vector<std::size_t> rank_values(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<std::size_t> rank(v.size());
  for (std::size_t k = 0; k < order.size(); ++k) rank[order[k]] = k + 1;
  return rank;
}

struct SchoolEffectSummary {
  std::string school;
  std::size_t n = 0;
  std::vector<EffectSummary> mean_effects;  // u_0j, u_1j, ...
  std::optional<EffectSummary> variance_effect;   // v_j
  std::optional<EffectSummary> school_variance;   // sigma^2_{e,j} at the reference
  std::size_t mean_rank = 0;
  std::optional<std::size_t> variance_rank;
};

inline std::vector<SchoolEffectSummary> school_summaries(const ChainSet& set, const DesignSet& design,
                                                         const ReferenceProfile& reference, double level = 0.95) {
  const auto J = set.schools();
  std::vector<SchoolEffectSummary> out(J);
  std::optional<std::vector<EffectSummary>> variances;
  if (set.spec.random_residual_variance) variances = school_variance_at(set, design, reference, level);
  std::vector<double> mean_key(J, 0.0), var_key(J, 0.0);
  for (std::size_t j = 0; j < J; ++j) {
    auto& s = out[j];
    s.school = set.school_labels[j];
    s.n = design.school_size(j);
    for (Eigen::Index k = 0; k < set.r; ++k) s.mean_effects.push_back(summarize_effect(set.effect_draws(j, k), level));
    if (set.spec.random_residual_variance) {
      s.variance_effect = summarize_effect(set.effect_draws(j, set.r), level);
      s.school_variance = (*variances)[j];
      var_key[j] = s.variance_effect->mean;
    }
    if (set.r > 0) mean_key[j] = s.mean_effects.front().mean;
  }
  const auto mr = rank_values(mean_key);
  const auto vr = rank_values(var_key);
  for (std::size_t j = 0; j < J; ++j) {
    out[j].mean_rank = mr[j];
    if (set.spec.random_residual_variance) out[j].variance_rank = vr[j];
  }
  return out;
}

struct SlopeVarianceComponents {
  double interaction = 0.0;  // u' Var(z) u
  double residual = 0.0;     // exp(w' alpha + v)
};

/// Split a school's conditional outcome variance into the part due to its
/// random slopes and the residual part. `mean_effects` is (u_0j, u_1j, ...),
/// matching the columns of reference.z_var.
inline SlopeVarianceComponents slope_variance_decomposition(const Eigen::VectorXd& mean_effects, double v,
                                                            const Eigen::VectorXd& alpha,
                                                            const ReferenceProfile& reference) {
  if (mean_effects.size() < 2) throw UnsupportedModel("no random slope fitted");
  if (reference.z_var.rows() != mean_effects.size() || reference.z_var.cols() != mean_effects.size())
    throw DimensionError("reference z_var does not match the random effects");
  if (reference.w_bar.size() != alpha.size()) throw DimensionError("reference w_bar does not match alpha");
  SlopeVarianceComponents c;
  c.interaction = std::max(0.0, mean_effects.dot(reference.z_var * mean_effects));
  c.residual = std::exp(reference.w_bar.dot(alpha) + v);
  return c;
}

/// Single-slope convenience form: u1^2 * var_z + exp(eta + v).
inline SlopeVarianceComponents slope_variance_decomposition(double u1, double var_z, double v, double eta) {
  SlopeVarianceComponents c;
  c.interaction = u1 * u1 * var_z;
  c.residual = std::exp(eta + v);
  return c;
}

/// Per-school posterior means of both components.
inline std::vector<SlopeVarianceComponents> slope_variance_decomposition(const ChainSet& set,
                                                                         const ReferenceProfile& reference) {
  if (set.r < 2) throw UnsupportedModel("no random slope fitted");
  const auto J = set.schools();
  std::vector<SlopeVarianceComponents> out(J);
  const double n = static_cast<double>(set.total_draws());
  for (const auto& ch : set.chains)
    for (Eigen::Index t = 0; t < ch.scalars.rows(); ++t) {
      const Eigen::VectorXd alpha = ch.scalars.row(t).segment(set.p, set.q).transpose();
      for (std::size_t j = 0; j < J; ++j) {
        const auto base = static_cast<Eigen::Index>(j) * set.d;
        const Eigen::VectorXd u = ch.effects.row(t).segment(base, set.r).transpose();
        const double v = set.spec.random_residual_variance ? ch.effects(t, base + set.r) : 0.0;
        const auto c = slope_variance_decomposition(u, v, alpha, reference);
        out[j].interaction += c.interaction / n;
        out[j].residual += c.residual / n;
      }
    }
  return out;
}

struct Interval {
  double lo = 0.0, hi = 0.0;
};

/// Number of intervals that exclude `reference_value`.
inline std::size_t separability_count(const std::vector<Interval>& intervals, double reference_value) {
  return static_cast<std::size_t>(std::count_if(intervals.begin(), intervals.end(), [&](const Interval& i) {
    return reference_value < i.lo || reference_value > i.hi;
  }));
}

inline std::size_t separability_count(const std::vector<EffectSummary>& summaries, double reference_value) {
  std::vector<Interval> iv;
  for (const auto& s : summaries) iv.push_back({s.lo, s.hi});
  return separability_count(iv, reference_value);
}

enum class CorrelationMethod { Pearson, Spearman };

namespace detail {
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t k = 0; k < order.size();) {
    std::size_t e = k;
    while (e + 1 < order.size() && v[order[e + 1]] == v[order[k]]) ++e;
    const double avg = 0.5 * static_cast<double>(k + e) + 1.0;
    for (std::size_t m = k; m <= e; ++m) rank[order[m]] = avg;
    k = e + 1;
  }
  return rank;
}
}  // namespace detail

inline double effect_correlation(const std::vector<double>& a, const std::vector<double>& b,
                                 CorrelationMethod method = CorrelationMethod::Pearson) {
  if (a.size() != b.size()) throw DimensionError("correlation inputs differ in length");
  if (a.size() < 3) throw Error("correlation needs at least three values");
  const auto x = method == CorrelationMethod::Spearman ? detail::average_ranks(a) : a;
  const auto y = method == CorrelationMethod::Spearman ? detail::average_ranks(b) : b;
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("correlation undefined for zero-variance input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct StudentResidual {
  std::string school;
  std::size_t row = 0;
  double y = 0.0;
  double fitted = 0.0;
  double residual = 0.0;
};

struct ResidualExport {
  std::vector<StudentResidual> students;
  Eigen::MatrixXd school_effect_means;  // J x d
};

/// e_ij = y_ij - x'beta_hat - z'u_hat_j at posterior means.
inline ResidualExport export_residuals_and_effects(const ChainSet& set, const DesignSet& design) {
  const auto m = set.posterior_mean_state();
  ResidualExport out;
  out.school_effect_means = m.school_effects;
  const Eigen::VectorXd xb = design.X * m.beta;
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    const auto j = design.group[static_cast<std::size_t>(i)];
    double fitted = xb[i];
    if (set.r > 0) fitted += design.Z.row(i).dot(m.school_effects.row(static_cast<Eigen::Index>(j)).head(set.r));
    out.students.push_back({design.school_labels[j], static_cast<std::size_t>(i), design.y[i], fitted,
                            design.y[i] - fitted});
  }
  return out;
}

/// School means of y - x'beta_hat: the unshrunken counterpart of u_hat_j.
inline std::vector<double> raw_school_residuals(const ChainSet& set, const DesignSet& design) {
  const auto m = set.posterior_mean_state();
  const Eigen::VectorXd res = design.y - design.X * m.beta;
  std::vector<double> out(design.schools(), 0.0);
  for (std::size_t j = 0; j < design.schools(); ++j) {
    for (auto i : design.rows_of_school[j]) out[j] += res[static_cast<Eigen::Index>(i)];
    out[j] /= static_cast<double>(design.school_size(j));
  }
  return out;
}

/// Population-level quantities at posterior means of the parameters.
struct PopulationReport {
  double beta0 = 0.0;
  double sigma_u2 = 0.0;
  double eta0 = 0.0;  // w_bar' alpha
  double sigma_v2 = std::numeric_limits<double>::quiet_NaN();
  double sigma_e2 = 0.0;  // constant, or population-averaged when v_j is present
  double vpc = 0.0;
  std::pair<double, double> idr_mean{0.0, 0.0};
  std::optional<std::pair<double, double>> idr_variance;
  std::optional<std::pair<double, double>> spread_at_idr;  // progress spread in least / most variable schools
  double spread = 0.0;                                     // at sigma_e2
  std::size_t separable_means = 0;
  std::optional<std::size_t> separable_variances;
  std::optional<double> mean_variance_correlation;
  std::optional<std::pair<double, double>> interaction_idr;  // 10th/90th percentile over schools
  std::optional<std::pair<double, double>> residual_idr;
};

inline double sample_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, p);
}

inline PopulationReport population_report(const ChainSet& set,
                                          const ReferenceProfile& reference,
                                          const std::vector<SchoolEffectSummary>& schools) {
  PopulationReport rep;
  const auto m = set.posterior_mean_state();
  rep.beta0 = m.beta[0];
  rep.eta0 = reference.w_bar.dot(m.alpha);
  if (set.r > 0) rep.sigma_u2 = m.omega(0, 0);
  if (set.spec.random_residual_variance) {
    rep.sigma_v2 = m.omega(set.r, set.r);
    rep.sigma_e2 = population_avg_residual_variance(rep.eta0, rep.sigma_v2);
    rep.idr_variance = idr_variance(rep.eta0, rep.sigma_v2);
    rep.spread_at_idr = std::pair{progress_spread(rep.idr_variance->first), progress_spread(rep.idr_variance->second)};
  } else {
    rep.sigma_e2 = std::exp(rep.eta0);
  }
  rep.vpc = vpc(rep.sigma_u2, rep.sigma_e2);
  rep.idr_mean = idr_mean(rep.beta0, rep.sigma_u2);
  rep.spread = progress_spread(rep.sigma_e2);
  if (set.r > 0) {
    std::vector<EffectSummary> u;
    for (const auto& s : schools) u.push_back(s.mean_effects.front());
    rep.separable_means = separability_count(u, 0.0);
  }
  if (set.spec.random_residual_variance) {
    std::vector<EffectSummary> v;
    std::vector<double> um, vm;
    for (const auto& s : schools) {
      v.push_back(*s.school_variance);
      if (set.r > 0) um.push_back(s.mean_effects.front().mean);
      vm.push_back(s.variance_effect->mean);
    }
    rep.separable_variances = separability_count(v, rep.sigma_e2);
    if (set.r > 0 && um.size() >= 3) {
      try {
        rep.mean_variance_correlation = effect_correlation(um, vm);
      } catch (const Error&) {
      }
    }
  }
  if (set.r >= 2) {
    const auto comps = slope_variance_decomposition(set, reference);
    std::vector<double> a, b;
    for (const auto& c : comps) a.push_back(c.interaction), b.push_back(c.residual);
    rep.interaction_idr = std::pair{sample_quantile(a, 0.1), sample_quantile(a, 0.9)};
    rep.residual_idr = std::pair{sample_quantile(b, 0.1), sample_quantile(b, 0.9)};
  }
  return rep;
}

}  // namespace mels
