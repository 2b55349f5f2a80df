#pragma once

// Synthetic data from the full location-scale model, and a replication
// harness that refits simulated datasets and scores bias and coverage.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "mels/dataset.hpp"
#include "mels/diagnostics.hpp"
#include "mels/error.hpp"
#include "mels/random.hpp"
#include "mels/sampler.hpp"

namespace mels {

struct TrueParameters {
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  Eigen::MatrixXd omega;  // over (u_0, u_1..., v)
  std::map<std::string, double> covariate_icc;
  double default_icc = 0.2;

  double icc_for(const std::string& name) const {
    auto it = covariate_icc.find(name);
    return it == covariate_icc.end() ? default_icc : it->second;
  }

  /// Flattened in ChainSet parameter order: beta, alpha, lower triangle of omega.
  Eigen::VectorXd as_vector() const {
    const Eigen::Index d = omega.rows();
    Eigen::VectorXd v(beta.size() + alpha.size() + d * (d + 1) / 2);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < beta.size(); ++i) v[k++] = beta[i];
    for (Eigen::Index i = 0; i < alpha.size(); ++i) v[k++] = alpha[i];
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) v[k++] = omega(i, j);
    return v;
  }

  /// Random intercept, random residual variance, one covariate x with
  /// within-school correlation 0.2 entering both functions.
  static TrueParameters supplement() {
    TrueParameters t;
    t.beta = Eigen::Vector2d(0.0, 0.7);
    t.alpha = Eigen::Vector2d(-0.8, 0.05);
    t.omega.resize(2, 2);
    t.omega << 0.05, 0.025, 0.025, 0.05;
    t.default_icc = 0.2;
    return t;
  }
};

/// The model the supplement data are generated from (mean and log-variance
/// both linear in x, random school effects in each).
inline ModelSpec supplement_spec() {
  ModelSpec s;
  s.mean_covariates = {"x"};
  s.variance_covariates = {"x"};
  s.random_residual_variance = true;
  return s;
}

/// x_ij = sqrt(icc) a_j + sqrt(1 - icc) b_ij with a_j, b_ij iid N(0, 1).
inline std::vector<double> generate_icc_covariate(const std::vector<std::size_t>& sizes, double icc, Rng& rng) {
  if (!(icc >= 0.0 && icc <= 1.0)) throw ConfigError("icc must lie in [0, 1]");
  const double between = std::sqrt(icc), within = std::sqrt(1.0 - icc);
  std::vector<double> out;
  for (auto nj : sizes) {
    const double a = rng.normal();
    for (std::size_t i = 0; i < nj; ++i) out.push_back(between * a + within * rng.normal());
  }
  return out;
}

inline std::vector<double> generate_icc_covariate(std::size_t J, std::size_t n_per_school, double icc, Rng& rng) {
  return generate_icc_covariate(std::vector<std::size_t>(J, n_per_school), icc, rng);
}

/// J rows drawn from MVN(0, omega). A singular omega (e.g. a zero
/// variance) is allowed and handled through its eigen square root.
inline Eigen::MatrixXd draw_school_effects(const Eigen::MatrixXd& omega, std::size_t J, Rng& rng) {
  const Eigen::Index d = omega.rows();
  if (omega.cols() != d) throw DimensionError("omega must be square");
  Eigen::MatrixXd root;
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  if (llt.info() == Eigen::Success) {
    root = llt.matrixL();
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(omega);
    const double tol = 1e-12 * std::max(1.0, omega.cwiseAbs().maxCoeff());
    if (eig.eigenvalues().minCoeff() < -tol) throw NotPositiveDefinite("omega is not positive semi-definite");
    root = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(J), d);
  for (std::size_t j = 0; j < J; ++j) out.row(static_cast<Eigen::Index>(j)) = (root * rng.normal_vector(d)).transpose();
  return out;
}

inline std::string school_label(std::size_t j) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%04zu", j + 1);
  return buf;
}

/// Dataset with columns school_id, y and every covariate the model
/// references. Schools are contiguous blocks of rows.
inline Dataset simulate_dataset(const ModelSpec& spec, const TrueParameters& truth,
                                const std::vector<std::size_t>& sizes, std::uint64_t seed) {
  if (auto errs = spec.structural_errors(); !errs.empty()) throw ConfigError(errs.front());
  const Eigen::Index p = spec.mean_dim(), q = spec.variance_dim();
  const Eigen::Index r = spec.mean_effect_dim(), d = spec.effect_dim();
  if (truth.beta.size() != p) throw DimensionError("true beta has length " + std::to_string(truth.beta.size()) +
                                                   ", model needs " + std::to_string(p));
  if (truth.alpha.size() != q) throw DimensionError("true alpha has length " + std::to_string(truth.alpha.size()) +
                                                    ", model needs " + std::to_string(q));
  if (truth.omega.rows() != d || truth.omega.cols() != d)
    throw DimensionError("true omega must be " + std::to_string(d) + "x" + std::to_string(d));
  for (auto nj : sizes)
    if (nj == 0) throw ConfigError("every school needs at least one student");

  const auto names = spec.referenced_columns();
  std::vector<std::vector<double>> cols;
  for (std::size_t k = 0; k < names.size(); ++k) {
    Rng rng(seed, 100 + k);
    cols.push_back(generate_icc_covariate(sizes, truth.icc_for(names[k]), rng));
  }
  auto column = [&](const std::string& name) -> const std::vector<double>& {
    for (std::size_t k = 0; k < names.size(); ++k)
      if (names[k] == name) return cols[k];
    throw DataError("unknown column '" + name + "'");
  };

  const std::size_t J = sizes.size();
  Eigen::MatrixXd effects = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(J), d);
  if (d > 0) {
    Rng rng(seed, 1);
    effects = draw_school_effects(truth.omega, J, rng);
  }

  Rng noise(seed, 2);
  std::vector<std::string> ids;
  std::vector<double> y;
  std::size_t row = 0;
  for (std::size_t j = 0; j < J; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    for (std::size_t i = 0; i < sizes[j]; ++i, ++row) {
      double mu = truth.beta[0];
      for (std::size_t k = 0; k < spec.mean_covariates.size(); ++k)
        mu += truth.beta[static_cast<Eigen::Index>(k) + 1] * column(spec.mean_covariates[k])[row];
      if (r > 0) {
        mu += effects(jj, 0);
        for (std::size_t k = 0; k < spec.random_slope_covariates.size(); ++k)
          mu += effects(jj, static_cast<Eigen::Index>(k) + 1) * column(spec.random_slope_covariates[k])[row];
      }
      double ls = truth.alpha[0];
      for (std::size_t k = 0; k < spec.variance_covariates.size(); ++k)
        ls += truth.alpha[static_cast<Eigen::Index>(k) + 1] * column(spec.variance_covariates[k])[row];
      if (spec.random_residual_variance) ls += effects(jj, r);
      ids.push_back(school_label(j));
      y.push_back(mu + std::exp(0.5 * ls) * noise.normal());
    }
  }
  std::vector<std::string> all_names{"y"};
  all_names.insert(all_names.end(), names.begin(), names.end());
  std::vector<std::vector<double>> all_cols{std::move(y)};
  for (auto& c : cols) all_cols.push_back(std::move(c));
  return Dataset(std::move(ids), "y", std::move(all_names), std::move(all_cols));
}

inline Dataset simulate_dataset(const ModelSpec& spec, const TrueParameters& truth, std::size_t J,
                                std::size_t n_per_school, std::uint64_t seed) {
  return simulate_dataset(spec, truth, std::vector<std::size_t>(J, n_per_school), seed);
}

struct ReplicationFit {
  std::size_t index = 0;
  bool ok = false;
  std::string error;
  std::vector<ParameterSummary> parameters;
  double max_rhat = 0.0;
  double min_ess = 0.0;
};

struct ReplicationRow {
  std::string parameter;
  double truth = 0.0;
  double mean_estimate = 0.0;  // mean over replications of the posterior mean
  double bias = 0.0;
  double coverage = 0.0;       // share of 95% intervals containing the truth
  std::size_t fits = 0;
};

struct ReplicationStudy {
  std::vector<ReplicationFit> fits;
  std::vector<ReplicationRow> table;

  const ReplicationRow& row(const std::string& name) const {
    for (const auto& r : table)
      if (r.parameter == name) return r;
    throw Error("no replication row for '" + name + "'");
  }
};

/// Replication r simulates with seed derive_seed(seed, 2r) and fits with
/// derive_seed(seed, 2r + 1). Failed fits are recorded and skipped.
inline ReplicationStudy replicate_study(const ModelSpec& spec, const TrueParameters& truth, std::size_t R,
                                        const std::vector<std::size_t>& sizes, McmcConfig config,
                                        std::uint64_t seed) {
  if (R < 1) throw ConfigError("replicate_study needs at least one replication");
  ReplicationStudy study;
  const Eigen::VectorXd tv = truth.as_vector();
  for (std::size_t rep = 0; rep < R; ++rep) {
    ReplicationFit f;
    f.index = rep;
    try {
      const auto data = simulate_dataset(spec, truth, sizes, derive_seed(seed, 2 * rep));
      const auto design = build_design(data, spec);
      config.seed = derive_seed(seed, 2 * rep + 1);
      const auto chains = fit(design, config);
      const auto report = diagnose(chains);
      f.parameters = report.parameters;
      f.max_rhat = report.max_rhat();
      f.min_ess = report.min_ess();
      f.ok = true;
    } catch (const std::exception& e) {
      f.error = e.what();
    }
    study.fits.push_back(std::move(f));
  }
  const auto names = parameter_names_for(
      [&] {
        std::vector<std::string> n{"_cons"};
        n.insert(n.end(), spec.mean_covariates.begin(), spec.mean_covariates.end());
        return n;
      }(),
      [&] {
        std::vector<std::string> n{"_cons"};
        n.insert(n.end(), spec.variance_covariates.begin(), spec.variance_covariates.end());
        return n;
      }(),
      spec.effect_dim());
  for (std::size_t k = 0; k < names.size(); ++k) {
    ReplicationRow row;
    row.parameter = names[k];
    row.truth = tv[static_cast<Eigen::Index>(k)];
    std::size_t covered = 0;
    for (const auto& f : study.fits) {
      if (!f.ok) continue;
      const auto& p = f.parameters[k];
      row.mean_estimate += p.mean;
      covered += (p.lo <= row.truth && row.truth <= p.hi) ? 1 : 0;
      ++row.fits;
    }
    if (row.fits > 0) {
      row.mean_estimate /= static_cast<double>(row.fits);
      row.bias = row.mean_estimate - row.truth;
      row.coverage = static_cast<double>(covered) / static_cast<double>(row.fits);
    }
    study.table.push_back(row);
  }
  return study;
}

}  // namespace mels
