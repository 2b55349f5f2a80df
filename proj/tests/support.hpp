#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mels/mels.hpp"

namespace mels::test {

/// Two-sided Kolmogorov-Smirnov distance between a sample and a CDF.
inline double ks_distance(std::vector<double> sample, const std::function<double(double)>& cdf) {
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double f = cdf(sample[i]);
    d = std::max({d, std::abs(static_cast<double>(i + 1) / n - f), std::abs(f - static_cast<double>(i) / n)});
  }
  return d;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Dataset from school ids and named numeric columns; outcome is "y".
inline Dataset make_dataset(std::vector<std::string> ids, std::vector<std::string> names,
                            std::vector<std::vector<double>> cols) {
  return Dataset(std::move(ids), "y", std::move(names), std::move(cols));
}

/// A ChainSet with the layout the sampler would produce, filled from
/// explicit draw matrices (one per chain).
inline ChainSet make_chainset(const DesignSet& design, const std::vector<Eigen::MatrixXd>& scalars,
                              const std::vector<Eigen::MatrixXd>& effects) {
  ChainSet set;
  set.spec = design.spec;
  set.x_names = design.x_names;
  set.w_names = design.w_names;
  set.z_names = design.z_names;
  set.p = design.X.cols();
  set.q = design.W.cols();
  set.r = design.spec.mean_effect_dim();
  set.d = design.spec.effect_dim();
  set.parameter_names = parameter_names_for(design.x_names, design.w_names, set.d);
  set.parameter_fixed.assign(set.parameter_names.size(), false);
  set.school_labels = design.school_labels;
  for (std::size_t c = 0; c < scalars.size(); ++c) {
    Chain ch;
    ch.seed = c;
    ch.scalars = scalars[c];
    ch.effects = effects[c];
    set.chains.push_back(std::move(ch));
  }
  return set;
}

}  // namespace mels::test

namespace mels::test {

/// Normal-mean regression with known residual variance and no school
/// effects; posterior for beta under N(0, tau I) is available in closed form.
struct ConjugateToy {
  Dataset data;
  ModelSpec spec;
  double sigma2 = 0.5;
  Eigen::VectorXd post_mean;
  Eigen::VectorXd post_sd;
};

inline ConjugateToy conjugate_toy(std::size_t n, std::uint64_t seed, double sigma2 = 0.5) {
  Rng rng(seed);
  std::vector<std::string> ids;
  std::vector<double> y, x;
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back("s" + std::to_string(i % 10));
    x.push_back(rng.normal());
  }
  const double xm = mean_of(x);
  for (auto& v : x) v -= xm;
  for (std::size_t i = 0; i < n; ++i) y.push_back(0.3 + 0.7 * x[i] + std::sqrt(sigma2) * rng.normal());
  ConjugateToy toy{Dataset(ids, "y", {"y", "x"}, {y, x}), {}, sigma2, {}, {}};
  toy.spec.mean_covariates = {"x"};
  toy.spec.random_intercept = false;
  const double tau = toy.spec.prior.coef_prior_variance;
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), 2);
  Eigen::VectorXd Y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    X(static_cast<Eigen::Index>(i), 0) = 1.0;
    X(static_cast<Eigen::Index>(i), 1) = x[i];
    Y[static_cast<Eigen::Index>(i)] = y[i];
  }
  const Eigen::MatrixXd precision = X.transpose() * X / sigma2 + Eigen::MatrixXd::Identity(2, 2) / tau;
  const Eigen::MatrixXd cov = precision.inverse();
  toy.post_mean = cov * X.transpose() * Y / sigma2;
  toy.post_sd = cov.diagonal().cwiseSqrt();
  return toy;
}

}  // namespace mels::test

namespace mels::test {

inline double log_sum_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Marginal posterior CDF of the slope in a random-intercept model with
/// known residual variance and known intercept variance, by quadrature over
/// (intercept, slope, u_1..u_J). The school integrals factorize given the
/// coefficients, so the grid cost is linear in J.
struct GridCdf {
  std::vector<double> x, cdf;

  double operator()(double v) const {
    if (v <= x.front()) return 0.0;
    if (v >= x.back()) return 1.0;
    const auto it = std::upper_bound(x.begin(), x.end(), v);
    const auto k = static_cast<std::size_t>(it - x.begin());
    const double t = (v - x[k - 1]) / (x[k] - x[k - 1]);
    return cdf[k - 1] + t * (cdf[k] - cdf[k - 1]);
  }
};

inline GridCdf slope_posterior_by_quadrature(const DesignSet& d, double sigma2, double sigma_u2, double prior_var,
                                             std::size_t grid = 301) {
  const auto fit = detail::ols(d.X, d.y);
  const double sd1 = std::sqrt(sigma2 / ((d.X.col(1).array() - d.X.col(1).mean()).square().sum()));
  const double sd0 = std::sqrt(sigma_u2 + sigma2);
  const double su = std::sqrt(sigma_u2);
  auto linspace = [&](double lo, double hi) {
    std::vector<double> g(grid);
    for (std::size_t k = 0; k < grid; ++k) g[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(grid - 1);
    return g;
  };
  const auto b1 = linspace(fit.coef[1] - 12 * sd1, fit.coef[1] + 12 * sd1);
  const auto b0 = linspace(fit.coef[0] - 12 * sd0, fit.coef[0] + 12 * sd0);
  const auto ug = linspace(-10 * su, 10 * su);
  const double du = ug[1] - ug[0];
  const double ls = std::log(sigma2);

  std::vector<double> log_marg(grid);
  std::vector<double> over_b0(grid), over_u(grid);
  for (std::size_t a = 0; a < grid; ++a) {
    for (std::size_t b = 0; b < grid; ++b) {
      double lp = -0.5 * (b0[b] * b0[b] + b1[a] * b1[a]) / prior_var;
      for (std::size_t j = 0; j < d.schools(); ++j) {
        for (std::size_t k = 0; k < grid; ++k) {
          double l = -0.5 * ug[k] * ug[k] / sigma_u2;
          for (auto i : d.rows_of_school[j]) {
            const auto ii = static_cast<Eigen::Index>(i);
            l += student_log_density(d.y[ii], b0[b] + b1[a] * d.X(ii, 1) + ug[k], ls);
          }
          over_u[k] = l;
        }
        lp += log_sum_exp(over_u) + std::log(du);
      }
      over_b0[b] = lp;
    }
    log_marg[a] = log_sum_exp(over_b0);
  }
  const double m = *std::max_element(log_marg.begin(), log_marg.end());
  GridCdf out;
  out.x = b1;
  out.cdf.assign(grid, 0.0);
  for (std::size_t a = 1; a < grid; ++a)
    out.cdf[a] = out.cdf[a - 1] + 0.5 * (std::exp(log_marg[a - 1] - m) + std::exp(log_marg[a] - m)) * (b1[a] - b1[a - 1]);
  for (auto& c : out.cdf) c /= out.cdf.back();
  return out;
}

}  // namespace mels::test

namespace mels::test {

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("mels_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

}  // namespace mels::test
