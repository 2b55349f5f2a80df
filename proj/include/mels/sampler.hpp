#pragma once

// Adaptive random-walk Metropolis-Hastings within Gibbs for the
// mixed-effects location-scale model.
//
// One sweep updates, in order: the beta block, the alpha block, each
// school's effect vector (u_j..., v_j) as its own block, then omega by an
// exact inverse-Wishart draw. With hierarchical centring the sampler works
// internally with b_j = (beta_0 + u_0j, u_1j, ..., alpha_0 + v_j); stored
// draws are always uncentred.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mels/dataset.hpp"
#include "mels/error.hpp"
#include "mels/likelihood.hpp"
#include "mels/random.hpp"

namespace mels {

struct McmcConfig {
  int n_chains = 4;
  long burn_in = 5000;
  long monitor = 10000;
  long thin = 1;
  std::uint64_t seed = 20240101;
  double target_accept_scalar = 0.44;
  double target_accept_block = 0.234;
  long adapt_interval = 50;
  double init_dispersion = 2.0;
  double initial_proposal_scale = 0.1;
  bool hierarchical_centring = true;
  // Replace each block's identity proposal shape by the empirical
  // covariance of its draws from the second quarter of burn-in.
  bool empirical_proposal_covariance = false;
  // Hold these at known values instead of sampling them.
  std::optional<Eigen::VectorXd> fixed_alpha;
  std::optional<Eigen::MatrixXd> fixed_omega;
  // 0: MELS_THREADS or the hardware concurrency.
  unsigned threads = 0;

  void validate() const {
    if (n_chains < 1) throw ConfigError("n_chains must be at least 1");
    if (monitor < 1) throw ConfigError("monitor must be at least 1");
    if (burn_in < 0) throw ConfigError("burn_in must be non-negative");
    if (thin < 1) throw ConfigError("thin must be at least 1");
    if (adapt_interval < 1) throw ConfigError("adapt_interval must be at least 1");
    if (!(target_accept_scalar > 0.0 && target_accept_scalar < 1.0) ||
        !(target_accept_block > 0.0 && target_accept_block < 1.0))
      throw ConfigError("acceptance targets must lie in (0, 1)");
    if (!(init_dispersion >= 0.0)) throw ConfigError("init_dispersion must be non-negative");
    if (!(initial_proposal_scale > 0.0)) throw ConfigError("initial_proposal_scale must be positive");
  }
};

struct BlockAcceptance {
  std::string block;
  std::uint64_t proposed = 0;
  std::uint64_t accepted = 0;
  double rate() const { return proposed == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(proposed); }
  bool operator==(const BlockAcceptance&) const = default;
};

struct Chain {
  std::uint64_t seed = 0;
  Eigen::MatrixXd scalars;  // draws x parameters
  Eigen::MatrixXd effects;  // draws x (J * d), school-major
  std::vector<BlockAcceptance> acceptance;  // monitoring phase only
  std::vector<double> final_scales;         // beta, alpha, mean school scale
  double seconds = 0.0;

  bool operator==(const Chain& o) const {
    auto same = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
    };
    return seed == o.seed && same(scalars, o.scalars) && same(effects, o.effects) && acceptance == o.acceptance &&
           final_scales == o.final_scales;
  }
};

/// Posterior draws from several chains plus the metadata needed to
/// interpret them.
struct ChainSet {
  ModelSpec spec;
  McmcConfig config;
  std::vector<std::string> parameter_names;
  std::vector<bool> parameter_fixed;
  std::vector<std::string> school_labels;
  std::vector<std::string> x_names, w_names, z_names;
  Eigen::Index p = 0, q = 0, r = 0, d = 0;
  std::vector<Chain> chains;

  std::size_t schools() const { return school_labels.size(); }
  std::size_t draws_per_chain() const {
    return chains.empty() ? 0 : static_cast<std::size_t>(chains.front().scalars.rows());
  }
  std::size_t total_draws() const { return chains.size() * draws_per_chain(); }

  std::size_t parameter_index(const std::string& name) const {
    auto it = std::find(parameter_names.begin(), parameter_names.end(), name);
    if (it == parameter_names.end()) throw Error("unknown parameter '" + name + "'");
    return static_cast<std::size_t>(it - parameter_names.begin());
  }

  std::vector<double> parameter_draws(std::size_t chain, std::size_t k) const {
    const auto& m = chains[chain].scalars;
    std::vector<double> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index t = 0; t < m.rows(); ++t) out[static_cast<std::size_t>(t)] = m(t, static_cast<Eigen::Index>(k));
    return out;
  }

  std::vector<std::vector<double>> parameter_draws(std::size_t k) const {
    std::vector<std::vector<double>> out;
    for (std::size_t c = 0; c < chains.size(); ++c) out.push_back(parameter_draws(c, k));
    return out;
  }

  /// Draws of one school's effect component pooled over chains.
  std::vector<double> effect_draws(std::size_t school, Eigen::Index component) const {
    std::vector<double> out;
    out.reserve(total_draws());
    const auto col = static_cast<Eigen::Index>(school) * d + component;
    for (const auto& ch : chains)
      for (Eigen::Index t = 0; t < ch.effects.rows(); ++t) out.push_back(ch.effects(t, col));
    return out;
  }

  ParameterState state(std::size_t chain, std::size_t draw) const {
    const auto& ch = chains[chain];
    const auto t = static_cast<Eigen::Index>(draw);
    ParameterState s;
    s.beta = ch.scalars.row(t).segment(0, p).transpose();
    s.alpha = ch.scalars.row(t).segment(p, q).transpose();
    s.omega.resize(d, d);
    Eigen::Index k = p + q;
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) {
        s.omega(i, j) = s.omega(j, i) = ch.scalars(t, k++);
      }
    const auto J = static_cast<Eigen::Index>(schools());
    s.school_effects.resize(J, d);
    for (Eigen::Index j = 0; j < J; ++j)
      for (Eigen::Index c = 0; c < d; ++c) s.school_effects(j, c) = ch.effects(t, j * d + c);
    return s;
  }

  /// Elementwise posterior mean of every parameter, school effects included.
  ParameterState posterior_mean_state() const {
    if (total_draws() == 0) throw Error("chain set holds no draws");
    Eigen::RowVectorXd sm = Eigen::RowVectorXd::Zero(chains.front().scalars.cols());
    Eigen::RowVectorXd em = Eigen::RowVectorXd::Zero(chains.front().effects.cols());
    for (const auto& ch : chains) {
      sm += ch.scalars.colwise().sum();
      em += ch.effects.colwise().sum();
    }
    const double n = static_cast<double>(total_draws());
    ChainSet tmp;
    tmp.p = p, tmp.q = q, tmp.r = r, tmp.d = d;
    tmp.school_labels = school_labels;
    Chain one;
    one.scalars = sm / n;
    one.effects = em / n;
    tmp.chains.push_back(std::move(one));
    return tmp.state(0, 0);
  }

  bool operator==(const ChainSet& o) const {
    return parameter_names == o.parameter_names && parameter_fixed == o.parameter_fixed &&
           school_labels == o.school_labels && p == o.p && q == o.q && r == o.r && d == o.d && chains == o.chains;
  }
};

inline std::vector<std::string> parameter_names_for(const std::vector<std::string>& x_names,
                                                    const std::vector<std::string>& w_names, Eigen::Index d) {
  std::vector<std::string> names;
  for (const auto& n : x_names) names.push_back("beta:" + n);
  for (const auto& n : w_names) names.push_back("alpha:" + n);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j <= i; ++j)
      names.push_back("omega_" + std::to_string(i + 1) + "_" + std::to_string(j + 1));
  return names;
}

/// Robbins-Monro style log-scale update; a fixed point when the observed
/// rate equals the target.
inline double adapt_scale(double scale, double recent_accept_rate, double target, bool adapting = true) {
  constexpr double kGain = 1.0;
  if (!adapting) return scale;
  return scale * std::exp(kGain * (recent_accept_rate - target));
}

struct MhResult {
  Eigen::VectorXd value;
  double log_target = 0.0;
  bool accepted = false;
};

/// Gaussian random-walk step on one block. `log_target` may return -inf or
/// throw NotPositiveDefinite/DataError for invalid proposals; both reject.
template <class LogTarget>
MhResult mh_update_block(const Eigen::VectorXd& current, double current_log_target, LogTarget&& log_target,
                         double proposal_scale, const Eigen::MatrixXd& proposal_chol, Rng& rng) {
  if (!(proposal_scale > 0.0)) throw ConfigError("proposal scale must be positive");
  Eigen::VectorXd proposal = current + proposal_scale * (proposal_chol * rng.normal_vector(current.size()));
  double lt = -std::numeric_limits<double>::infinity();
  try {
    lt = log_target(proposal);
  } catch (const NotPositiveDefinite&) {
  } catch (const DataError&) {
  }
  const double log_u = std::log(rng.uniform());
  if (std::isfinite(lt) && log_u < lt - current_log_target) return {std::move(proposal), lt, true};
  return {current, current_log_target, false};
}

/// Scalar-parameter blocks of a full state, addressed by name.
enum class BlockId { Beta, Alpha };

/// MH step on the beta or alpha block of a full parameter state, scored by
/// the complete log posterior.
inline std::pair<ParameterState, bool> mh_update_block(const DesignSet& design, const ParameterState& state,
                                                       BlockId block, double proposal_scale, Rng& rng) {
  auto target = [&](const ParameterState& s) {
    const Eigen::VectorXd wa = design.W * s.alpha;
    const Eigen::Index r = design.Z.cols();
    for (Eigen::Index i = 0; i < design.rows(); ++i) {
      double ls = wa[i];
      if (design.spec.random_residual_variance)
        ls += s.school_effects(static_cast<Eigen::Index>(design.group[static_cast<std::size_t>(i)]), r);
      if (ls < kMinLogVariance || ls > kMaxLogVariance) return -std::numeric_limits<double>::infinity();
    }
    return log_posterior(design, s);
  };
  const Eigen::VectorXd& cur = block == BlockId::Beta ? state.beta : state.alpha;
  const Eigen::MatrixXd chol = Eigen::MatrixXd::Identity(cur.size(), cur.size());
  auto res = mh_update_block(
      cur, target(state),
      [&](const Eigen::VectorXd& v) {
        ParameterState s = state;
        (block == BlockId::Beta ? s.beta : s.alpha) = v;
        return target(s);
      },
      proposal_scale, chol, rng);
  ParameterState out = state;
  (block == BlockId::Beta ? out.beta : out.alpha) = res.value;
  return {std::move(out), res.accepted};
}

/// Exact draw from the inverse-Wishart full conditional of omega given
/// zero-mean effects (rows of `school_effects`).
inline Eigen::MatrixXd gibbs_update_omega(const Eigen::MatrixXd& school_effects, const PriorConfig& prior,
                                          Eigen::Index dim, Rng& rng) {
  if (school_effects.cols() != dim)
    throw DimensionError("school effects have width " + std::to_string(school_effects.cols()) + ", expected " +
                         std::to_string(dim));
  prior.validate(dim);
  Eigen::MatrixXd scale = prior.scale(dim);
  if (school_effects.rows() > 0) scale.noalias() += school_effects.transpose() * school_effects;
  return draw_inverse_wishart(prior.df(dim) + static_cast<double>(school_effects.rows()), scale, rng);
}

namespace detail {

struct OlsFit {
  Eigen::VectorXd coef;
  Eigen::VectorXd se;
  double residual_variance = 1.0;
};

inline OlsFit ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  OlsFit f;
  const Eigen::MatrixXd xtx = X.transpose() * X;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
  f.coef = X.colPivHouseholderQr().solve(y);
  const Eigen::VectorXd res = y - X * f.coef;
  const auto n = static_cast<double>(X.rows());
  const auto p = static_cast<double>(X.cols());
  f.residual_variance = n > p ? res.squaredNorm() / (n - p) : std::max(res.squaredNorm() / n, 1e-8);
  if (!(f.residual_variance > 0.0)) f.residual_variance = 1e-8;
  const Eigen::MatrixXd inv = ldlt.solve(Eigen::MatrixXd::Identity(X.cols(), X.cols()));
  f.se = (f.residual_variance * inv.diagonal().array()).max(0.0).sqrt();
  return f;
}

struct Block {
  std::string name;
  Eigen::Index dim = 0;
  double scale = 0.1;
  Eigen::MatrixXd chol;
  std::uint64_t window_proposed = 0, window_accepted = 0;
  std::uint64_t proposed = 0, accepted = 0;
  // Running sums for the empirical proposal covariance.
  Eigen::VectorXd sum;
  Eigen::MatrixXd outer;
  std::uint64_t count = 0;

  Block() = default;
  Block(std::string n, Eigen::Index k, double s)
      : name(std::move(n)), dim(k), scale(s), chol(Eigen::MatrixXd::Identity(k, k)),
        sum(Eigen::VectorXd::Zero(k)), outer(Eigen::MatrixXd::Zero(k, k)) {}

  void record(bool acc, bool monitoring) {
    ++window_proposed;
    window_accepted += acc ? 1 : 0;
    if (monitoring) {
      ++proposed;
      accepted += acc ? 1 : 0;
    }
  }

  void adapt(const McmcConfig& cfg) {
    if (window_proposed == 0) return;
    const double rate = static_cast<double>(window_accepted) / static_cast<double>(window_proposed);
    const double target = dim == 1 ? cfg.target_accept_scalar : cfg.target_accept_block;
    scale = std::clamp(adapt_scale(scale, rate, target), 1e-8, 1e3);
    window_proposed = window_accepted = 0;
  }

  void accumulate(const Eigen::VectorXd& x) {
    sum += x;
    outer.noalias() += x * x.transpose();
    ++count;
  }

  void adopt_empirical_covariance() {
    if (count < static_cast<std::uint64_t>(std::max<Eigen::Index>(20, 4 * dim))) return;
    const double n = static_cast<double>(count);
    const Eigen::VectorXd mean = sum / n;
    Eigen::MatrixXd cov = (outer - n * mean * mean.transpose()) / (n - 1.0);
    cov = 0.5 * (cov + cov.transpose());
    const double ridge = 1e-10 * std::max(cov.trace() / static_cast<double>(dim), 1e-12);
    cov.diagonal().array() += ridge;
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success || !cov.allFinite() || !(cov.trace() > 0.0)) return;
    chol = llt.matrixL();
    scale = 2.38 / std::sqrt(static_cast<double>(dim));
  }
};

}  // namespace detail

/// Overdispersed starting point: OLS coefficients plus scaled noise.
inline ParameterState initialize_state(const DesignSet& design, const McmcConfig& config, Rng& rng) {
  const auto& spec = design.spec;
  const Eigen::Index d = spec.effect_dim();
  const auto J = static_cast<Eigen::Index>(design.schools());
  const auto fit = detail::ols(design.X, design.y);
  const double disp = config.init_dispersion;
  for (int attempt = 0; attempt < 100; ++attempt) {
    ParameterState s;
    s.beta = fit.coef;
    for (Eigen::Index k = 0; k < s.beta.size(); ++k) s.beta[k] += disp * fit.se[k] * rng.normal();
    if (config.fixed_alpha) {
      s.alpha = *config.fixed_alpha;
    } else {
      s.alpha = Eigen::VectorXd::Zero(design.W.cols());
      s.alpha[0] = std::log(fit.residual_variance);
      for (Eigen::Index k = 0; k < s.alpha.size(); ++k) s.alpha[k] += 0.1 * disp * rng.normal();
    }
    s.omega = config.fixed_omega ? *config.fixed_omega : Eigen::MatrixXd(0.1 * Eigen::MatrixXd::Identity(d, d));
    s.school_effects.resize(J, d);
    for (Eigen::Index j = 0; j < J; ++j)
      for (Eigen::Index c = 0; c < d; ++c) s.school_effects(j, c) = 0.01 * disp * rng.normal();
    try {
      const Eigen::VectorXd wa = design.W * s.alpha;
      bool in_range = true;
      for (Eigen::Index i = 0; i < design.rows() && in_range; ++i) {
        double ls = wa[i];
        if (spec.random_residual_variance)
          ls += s.school_effects(static_cast<Eigen::Index>(design.group[static_cast<std::size_t>(i)]), d - 1);
        in_range = ls >= kMinLogVariance && ls <= kMaxLogVariance;
      }
      if (in_range && std::isfinite(log_posterior(design, s))) return s;
    } catch (const Error&) {
    }
  }
  throw InitializationError("no finite log posterior after 100 initial draws");
}

/// Runs one chain. Holds the centred internal state and the cached per-school
/// log likelihoods.
class ChainSampler {
 public:
  ChainSampler(const DesignSet& design, const McmcConfig& config, std::uint64_t seed)
      : design_(design), spec_(design.spec), config_(config), rng_(seed) {
    p_ = design.X.cols();
    q_ = design.W.cols();
    r_ = spec_.mean_effect_dim();
    d_ = spec_.effect_dim();
    J_ = static_cast<Eigen::Index>(design.schools());
    centre_mean_ = config.hierarchical_centring && r_ > 0;
    centre_var_ = config.hierarchical_centring && spec_.random_residual_variance;
    if (config.fixed_alpha && config.fixed_alpha->size() != q_) throw DimensionError("fixed_alpha has wrong length");
    if (config.fixed_omega && (config.fixed_omega->rows() != d_ || config.fixed_omega->cols() != d_))
      throw DimensionError("fixed_omega has wrong shape");
    if (centre_var_ && config.fixed_alpha) centre_var_ = false;
    spec_.prior.validate(d_);
    beta_block_ = detail::Block("beta", p_, config.initial_proposal_scale);
    alpha_block_ = detail::Block("alpha", q_, config.initial_proposal_scale);
    school_blocks_.assign(static_cast<std::size_t>(J_), detail::Block("school_effects", d_, config.initial_proposal_scale));
  }

  void set_state(const ParameterState& s) {
    check_state(design_, s);
    beta_ = s.beta;
    alpha_ = s.alpha;
    omega_ = s.omega;
    if (d_ > 0) refresh_precision();
    b_ = s.school_effects;
    for (Eigen::Index j = 0; j < J_; ++j) b_.row(j) += centre().transpose();
    xb_ = linear_mean(beta_);
    wa_ = linear_var(alpha_);
    school_ll_.resize(J_);
    for (Eigen::Index j = 0; j < J_; ++j) school_ll_[j] = school_loglik(j, xb_, wa_, b_.row(j).data());
  }

  ParameterState state() const {
    ParameterState s;
    s.beta = beta_;
    s.alpha = alpha_;
    s.omega = omega_;
    s.school_effects = b_;
    for (Eigen::Index j = 0; j < J_; ++j) s.school_effects.row(j) -= centre().transpose();
    return s;
  }

  Rng& rng() { return rng_; }

  Chain run() {
    const auto t0 = std::chrono::steady_clock::now();
    set_state(initialize_state(design_, config_, rng_));
    const long burn = config_.burn_in;
    const long empirical_from = burn / 4, empirical_at = burn / 2;
    for (long t = 0; t < burn; ++t) {
      sweep(false);
      if (config_.empirical_proposal_covariance && t >= empirical_from && t < empirical_at) accumulate();
      if ((t + 1) % config_.adapt_interval == 0) adapt();
      if (config_.empirical_proposal_covariance && t + 1 == empirical_at) adopt_empirical();
    }
    Chain chain;
    const long n_draws = config_.monitor / config_.thin;
    const Eigen::Index n_scalar = p_ + q_ + d_ * (d_ + 1) / 2;
    chain.scalars.resize(n_draws, n_scalar);
    chain.effects.resize(n_draws, J_ * d_);
    long stored = 0;
    for (long t = 0; t < config_.monitor; ++t) {
      sweep(true);
      if ((t + 1) % config_.thin == 0 && stored < n_draws) record(chain, stored++);
    }
    auto add = [&](const std::string& name, std::uint64_t prop, std::uint64_t acc) {
      chain.acceptance.push_back({name, prop, acc});
    };
    add("beta", beta_block_.proposed, beta_block_.accepted);
    if (!config_.fixed_alpha) add("alpha", alpha_block_.proposed, alpha_block_.accepted);
    if (d_ > 0) {
      std::uint64_t prop = 0, acc = 0;
      for (const auto& b : school_blocks_) prop += b.proposed, acc += b.accepted;
      add("school_effects", prop, acc);
    }
    chain.final_scales.push_back(beta_block_.scale);
    chain.final_scales.push_back(alpha_block_.scale);
    double ms = 0.0;
    for (const auto& b : school_blocks_) ms += b.scale;
    chain.final_scales.push_back(J_ > 0 ? ms / static_cast<double>(J_) : 0.0);
    chain.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return chain;
  }

  void sweep(bool monitoring) {
    update_beta(monitoring);
    if (!config_.fixed_alpha) update_alpha(monitoring);
    if (d_ > 0)
      for (Eigen::Index j = 0; j < J_; ++j) update_school(j, monitoring);
    if (d_ > 0 && !config_.fixed_omega) update_omega();
  }

 private:
  static constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  Eigen::VectorXd centre() const { return centre_for(beta_, alpha_); }

  Eigen::VectorXd centre_for(const Eigen::VectorXd& beta, const Eigen::VectorXd& alpha) const {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(d_);
    if (centre_mean_) c[0] = beta[0];
    if (centre_var_) c[r_] = alpha[0];
    return c;
  }

  Eigen::VectorXd linear_mean(const Eigen::VectorXd& beta) const {
    Eigen::VectorXd xb = design_.X * beta;
    if (centre_mean_) xb.array() -= beta[0];
    return xb;
  }

  Eigen::VectorXd linear_var(const Eigen::VectorXd& alpha) const {
    Eigen::VectorXd wa = design_.W * alpha;
    if (centre_var_) wa.array() -= alpha[0];
    return wa;
  }

  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  double school_loglik(Eigen::Index j, const Eigen::VectorXd& xb, const Eigen::VectorXd& wa,
                       const double* b) const {
    const auto& rows = design_.rows_of_school[static_cast<std::size_t>(j)];
    const double v = spec_.random_residual_variance ? b[r_] : 0.0;
    double acc = 0.0;
    for (auto ii : rows) {
      const auto i = static_cast<Eigen::Index>(ii);
      double mu = xb[i];
      if (r_ >= 1) mu += b[0];
      for (Eigen::Index k = 1; k < r_; ++k) mu += design_.Z(i, k) * b[k];
      const double ls = wa[i] + v;
      if (ls < kMinLogVariance || ls > kMaxLogVariance) return kNegInf;
      const double res = design_.y[i] - mu;
      acc += ls + res * res * std::exp(-ls);
    }
    return -0.5 * (acc + static_cast<double>(rows.size()) * kLog2Pi);
  }

  double total_loglik(const Eigen::VectorXd& xb, const Eigen::VectorXd& wa) const {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < J_; ++j) {
      const double l = school_loglik(j, xb, wa, b_.row(j).data());
      if (!std::isfinite(l)) return kNegInf;
      acc += l;
    }
    return acc;
  }

  // (b - c)' precision (b - c)
  double quad_form(const double* b, const Eigen::VectorXd& c) const {
    double acc = 0.0;
    for (Eigen::Index m = 0; m < d_; ++m) {
      const double dm = b[m] - c[m];
      double row = 0.0;
      for (Eigen::Index k = 0; k < d_; ++k) row += precision_(m, k) * (b[k] - c[k]);
      acc += dm * row;
    }
    return acc;
  }

  double re_log_kernel(const Eigen::VectorXd& c) const {
    if (d_ == 0) return 0.0;
    double acc = 0.0;
    for (Eigen::Index j = 0; j < J_; ++j) acc += quad_form(b_.row(j).data(), c);
    return -0.5 * acc;
  }

  double coef_log_prior(const Eigen::VectorXd& v) const {
    return -0.5 * v.squaredNorm() / spec_.prior.coef_prior_variance;
  }

  void update_beta(bool monitoring) {
    const bool in_re = centre_mean_;
    auto target = [&](const Eigen::VectorXd& beta) {
      const double ll = total_loglik(linear_mean(beta), wa_);
      if (!std::isfinite(ll)) return kNegInf;
      return ll + (in_re ? re_log_kernel(centre_for(beta, alpha_)) : 0.0) + coef_log_prior(beta);
    };
    const double current = school_ll_.sum() + (in_re ? re_log_kernel(centre()) : 0.0) + coef_log_prior(beta_);
    auto res = mh_update_block(beta_, current, target, beta_block_.scale, beta_block_.chol, rng_);
    beta_block_.record(res.accepted, monitoring);
    if (res.accepted) {
      beta_ = res.value;
      xb_ = linear_mean(beta_);
      for (Eigen::Index j = 0; j < J_; ++j) school_ll_[j] = school_loglik(j, xb_, wa_, b_.row(j).data());
    }
  }

  void update_alpha(bool monitoring) {
    const bool in_re = centre_var_;
    auto target = [&](const Eigen::VectorXd& alpha) {
      const double ll = total_loglik(xb_, linear_var(alpha));
      if (!std::isfinite(ll)) return kNegInf;
      return ll + (in_re ? re_log_kernel(centre_for(beta_, alpha)) : 0.0) + coef_log_prior(alpha);
    };
    const double current = school_ll_.sum() + (in_re ? re_log_kernel(centre()) : 0.0) + coef_log_prior(alpha_);
    auto res = mh_update_block(alpha_, current, target, alpha_block_.scale, alpha_block_.chol, rng_);
    alpha_block_.record(res.accepted, monitoring);
    if (res.accepted) {
      alpha_ = res.value;
      wa_ = linear_var(alpha_);
      for (Eigen::Index j = 0; j < J_; ++j) school_ll_[j] = school_loglik(j, xb_, wa_, b_.row(j).data());
    }
  }

  void update_school(Eigen::Index j, bool monitoring) {
    auto& blk = school_blocks_[static_cast<std::size_t>(j)];
    const Eigen::VectorXd c = centre();
    const Eigen::VectorXd cur = b_.row(j).transpose();
    const double current = school_ll_[j] - 0.5 * quad_form(cur.data(), c);
    auto target = [&](const Eigen::VectorXd& b) {
      const double ll = school_loglik(j, xb_, wa_, b.data());
      if (!std::isfinite(ll)) return kNegInf;
      return ll - 0.5 * quad_form(b.data(), c);
    };
    auto res = mh_update_block(cur, current, target, blk.scale, blk.chol, rng_);
    blk.record(res.accepted, monitoring);
    if (res.accepted) {
      b_.row(j) = res.value.transpose();
      school_ll_[j] = school_loglik(j, xb_, wa_, res.value.data());
    }
  }

  void update_omega() {
    Eigen::MatrixXd dev = b_;
    const Eigen::VectorXd c = centre();
    for (Eigen::Index j = 0; j < J_; ++j) dev.row(j) -= c.transpose();
    omega_ = gibbs_update_omega(dev, spec_.prior, d_, rng_);
    refresh_precision();
  }

  void refresh_precision() {
    const auto llt = factor_covariance(omega_);
    precision_ = llt.solve(Eigen::MatrixXd::Identity(d_, d_));
  }

  void adapt() {
    beta_block_.adapt(config_);
    alpha_block_.adapt(config_);
    for (auto& b : school_blocks_) b.adapt(config_);
  }

  void accumulate() {
    beta_block_.accumulate(beta_);
    alpha_block_.accumulate(alpha_);
    for (Eigen::Index j = 0; j < J_; ++j) school_blocks_[static_cast<std::size_t>(j)].accumulate(b_.row(j).transpose());
  }

  void adopt_empirical() {
    beta_block_.adopt_empirical_covariance();
    alpha_block_.adopt_empirical_covariance();
    for (auto& b : school_blocks_) b.adopt_empirical_covariance();
  }

  void record(Chain& chain, long row) const {
    const auto t = static_cast<Eigen::Index>(row);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < p_; ++i) chain.scalars(t, k++) = beta_[i];
    for (Eigen::Index i = 0; i < q_; ++i) chain.scalars(t, k++) = alpha_[i];
    for (Eigen::Index i = 0; i < d_; ++i)
      for (Eigen::Index c = 0; c <= i; ++c) chain.scalars(t, k++) = omega_(i, c);
    const Eigen::VectorXd c = centre();
    for (Eigen::Index j = 0; j < J_; ++j)
      for (Eigen::Index m = 0; m < d_; ++m) chain.effects(t, j * d_ + m) = b_(j, m) - c[m];
  }

  const DesignSet& design_;
  ModelSpec spec_;
  McmcConfig config_;
  Rng rng_;
  Eigen::Index p_ = 0, q_ = 0, r_ = 0, d_ = 0, J_ = 0;
  bool centre_mean_ = false, centre_var_ = false;

  Eigen::VectorXd beta_, alpha_;
  Eigen::MatrixXd omega_, precision_;
  RowMatrix b_;  // internal (centred) school effects
  Eigen::VectorXd xb_, wa_, school_ll_;

  detail::Block beta_block_, alpha_block_;
  std::vector<detail::Block> school_blocks_;
};

inline unsigned default_thread_count() {
  if (const char* env = std::getenv("MELS_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs `config.n_chains` independent chains; chain c uses the substream
/// derive_seed(config.seed, c), so results do not depend on thread count.
inline ChainSet fit(const DesignSet& design, const McmcConfig& config) {
  config.validate();
  const auto& spec = design.spec;
  ChainSet set;
  set.spec = spec;
  set.config = config;
  set.p = design.X.cols();
  set.q = design.W.cols();
  set.r = spec.mean_effect_dim();
  set.d = spec.effect_dim();
  set.x_names = design.x_names;
  set.w_names = design.w_names;
  set.z_names = design.z_names;
  set.school_labels = design.school_labels;
  set.parameter_names = parameter_names_for(design.x_names, design.w_names, set.d);
  set.parameter_fixed.assign(set.parameter_names.size(), false);
  if (config.fixed_alpha)
    for (Eigen::Index k = 0; k < set.q; ++k) set.parameter_fixed[static_cast<std::size_t>(set.p + k)] = true;
  if (config.fixed_omega)
    for (std::size_t k = static_cast<std::size_t>(set.p + set.q); k < set.parameter_names.size(); ++k)
      set.parameter_fixed[k] = true;

  const auto n = static_cast<std::size_t>(config.n_chains);
  set.chains.resize(n);
  std::vector<std::exception_ptr> errors(n);
  auto run_one = [&](std::size_t c) {
    try {
      const auto seed = derive_seed(config.seed, c);
      ChainSampler sampler(design, config, seed);
      set.chains[c] = sampler.run();
      set.chains[c].seed = seed;
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  const unsigned threads = std::min<unsigned>(config.threads ? config.threads : default_thread_count(),
                                              static_cast<unsigned>(n));
  if (threads <= 1) {
    for (std::size_t c = 0; c < n; ++c) run_one(c);
  } else {
    std::vector<std::jthread> pool;
    std::atomic<std::size_t> next{0};
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < n; c = next++) run_one(c);
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return set;
}

/// Convenience overload taking the model separately; it must match the design's.
inline ChainSet fit(const DesignSet& design, const ModelSpec& spec, const McmcConfig& config) {
  if (spec.mean_covariates != design.spec.mean_covariates ||
      spec.variance_covariates != design.spec.variance_covariates ||
      spec.random_slope_covariates != design.spec.random_slope_covariates ||
      spec.random_residual_variance != design.spec.random_residual_variance ||
      spec.random_intercept != design.spec.random_intercept)
    throw ConfigError("model spec does not match the design");
  DesignSet with_prior = design;
  with_prior.spec.prior = spec.prior;
  return fit(with_prior, config);
}

}  // namespace mels
