#pragma once

// Log-density components: the heteroscedastic normal likelihood, the
// multivariate normal density of the school effects, and the priors.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>

#include "mels/dataset.hpp"
#include "mels/error.hpp"

namespace mels {

/// log sigma^2 outside this range is treated as an invalid state.
inline constexpr double kMinLogVariance = -30.0;
inline constexpr double kMaxLogVariance = 30.0;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// One point in parameter space. School effects are stored uncentred:
/// row j is (u_0j, u_1j, ..., v_j) with the mean effects first.
struct ParameterState {
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  Eigen::MatrixXd omega;
  Eigen::MatrixXd school_effects;

  bool operator==(const ParameterState& o) const {
    auto same = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
    };
    return same(beta, o.beta) && same(alpha, o.alpha) && same(omega, o.omega) &&
           same(school_effects, o.school_effects);
  }
};

inline void check_state(const DesignSet& design, const ParameterState& params) {
  const auto& spec = design.spec;
  const Eigen::Index d = spec.effect_dim();
  if (params.beta.size() != design.X.cols()) throw DimensionError("beta has wrong length");
  if (params.alpha.size() != design.W.cols()) throw DimensionError("alpha has wrong length");
  if (params.omega.rows() != d || params.omega.cols() != d) throw DimensionError("omega has wrong shape");
  if (params.school_effects.cols() != d || params.school_effects.rows() != static_cast<Eigen::Index>(design.schools()))
    throw DimensionError("school_effects has wrong shape");
}

inline double log_residual_variance(const Eigen::Ref<const Eigen::VectorXd>& w,
                                    const Eigen::Ref<const Eigen::VectorXd>& alpha, double v) {
  if (w.size() != alpha.size())
    throw DimensionError("variance covariates have length " + std::to_string(w.size()) + " but alpha has " +
                         std::to_string(alpha.size()));
  return w.dot(alpha) + v;
}

inline double student_log_density(double y, double mu, double ln_sigma2) {
  if (!std::isfinite(y) || !std::isfinite(mu) || !std::isfinite(ln_sigma2))
    throw DataError("non-finite input to student log density");
  const double r = y - mu;
  return -0.5 * (kLog2Pi + ln_sigma2 + r * r * std::exp(-ln_sigma2));
}

/// -2 times the conditional log likelihood given the school effects.
inline double conditional_deviance(const DesignSet& design, const ParameterState& params) {
  check_state(design, params);
  const Eigen::Index r = design.Z.cols();
  const bool has_v = design.spec.random_residual_variance;
  const Eigen::VectorXd xb = design.X * params.beta;
  const Eigen::VectorXd wa = design.W * params.alpha;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    const auto j = static_cast<Eigen::Index>(design.group[static_cast<std::size_t>(i)]);
    double mu = xb[i];
    if (r > 0) mu += design.Z.row(i).dot(params.school_effects.row(j).head(r));
    const double ls = wa[i] + (has_v ? params.school_effects(j, r) : 0.0);
    ll += student_log_density(design.y[i], mu, ls);
  }
  const double dev = -2.0 * ll;
  if (!std::isfinite(dev)) throw DataError("non-finite conditional deviance");
  return dev;
}

inline Eigen::LLT<Eigen::MatrixXd> factor_covariance(const Eigen::MatrixXd& omega) {
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  if (llt.info() != Eigen::Success || !omega.allFinite())
    throw NotPositiveDefinite("covariance matrix is not positive definite");
  const Eigen::MatrixXd l = llt.matrixL();
  if ((l.diagonal().array() <= 0.0).any()) throw NotPositiveDefinite("covariance matrix is not positive definite");
  return llt;
}

inline double log_det_from_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

/// Sum over rows of log N(row; 0, omega).
inline double log_random_effects_density(const Eigen::MatrixXd& school_effects, const Eigen::MatrixXd& omega) {
  const Eigen::Index d = omega.rows();
  if (omega.cols() != d) throw DimensionError("omega must be square");
  if (d == 0) return 0.0;
  if (school_effects.cols() != d) throw DimensionError("school effect width does not match omega");
  const auto llt = factor_covariance(omega);
  const double log_det = log_det_from_llt(llt);
  const Eigen::MatrixXd solved = llt.matrixL().solve(school_effects.transpose());
  const double quad = solved.squaredNorm();
  const auto J = static_cast<double>(school_effects.rows());
  return -0.5 * (J * (static_cast<double>(d) * kLog2Pi + log_det) + quad);
}

inline double log_multivariate_gamma(double a, Eigen::Index dim) {
  double out = static_cast<double>(dim * (dim - 1)) / 4.0 * std::log(std::numbers::pi);
  for (Eigen::Index i = 1; i <= dim; ++i) out += std::lgamma(a + (1.0 - static_cast<double>(i)) / 2.0);
  return out;
}

/// log IW(omega; df, scale) with density proportional to
/// |omega|^{-(df+d+1)/2} exp(-tr(scale omega^{-1}) / 2).
inline double log_inverse_wishart_density(const Eigen::MatrixXd& omega, double df, const Eigen::MatrixXd& scale) {
  const Eigen::Index d = omega.rows();
  if (scale.rows() != d || scale.cols() != d) throw DimensionError("inverse-Wishart scale has wrong shape");
  const auto llt = factor_covariance(omega);
  const auto scale_llt = factor_covariance(scale);
  const double dd = static_cast<double>(d);
  const double trace = llt.solve(scale).trace();
  return 0.5 * df * log_det_from_llt(scale_llt) - 0.5 * df * dd * std::numbers::ln2 -
         log_multivariate_gamma(0.5 * df, d) - 0.5 * (df + dd + 1.0) * log_det_from_llt(llt) - 0.5 * trace;
}

inline double log_normal_prior(const Eigen::VectorXd& coef, double variance) {
  return -0.5 * (static_cast<double>(coef.size()) * (kLog2Pi + std::log(variance)) + coef.squaredNorm() / variance);
}

inline double log_prior(const ParameterState& params, const PriorConfig& prior) {
  const Eigen::Index d = params.omega.rows();
  prior.validate(d);
  double lp = log_normal_prior(params.beta, prior.coef_prior_variance) +
              log_normal_prior(params.alpha, prior.coef_prior_variance);
  if (d > 0) lp += log_inverse_wishart_density(params.omega, prior.df(d), prior.scale(d));
  return lp;
}

inline double log_posterior(const DesignSet& design, const ParameterState& params, const PriorConfig& prior) {
  return -0.5 * conditional_deviance(design, params) +
         log_random_effects_density(params.school_effects, params.omega) + log_prior(params, prior);
}

inline double log_posterior(const DesignSet& design, const ParameterState& params) {
  return log_posterior(design, params, design.spec.prior);
}

}  // namespace mels
