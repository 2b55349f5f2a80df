#pragma once

// Data model: student rows grouped into schools, the declarative model
// description, and the design matrices derived from the two.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mels/error.hpp"

namespace mels {

/// Student-level table. Every column (the outcome included) is addressable
/// by name; schools are indexed densely in order of first appearance.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<std::string> school_ids, std::string outcome_name,
          std::vector<std::string> column_names, std::vector<std::vector<double>> columns)
      : school_ids_(std::move(school_ids)),
        outcome_name_(std::move(outcome_name)),
        names_(std::move(column_names)),
        columns_(std::move(columns)) {
    if (names_.size() != columns_.size())
      throw DataError("column name count does not match column count");
    for (std::size_t c = 0; c < names_.size(); ++c) {
      if (columns_[c].size() != school_ids_.size())
        throw DataError("column '" + names_[c] + "' has " + std::to_string(columns_[c].size()) +
                        " values, expected " + std::to_string(school_ids_.size()));
      if (!lookup_.emplace(names_[c], c).second)
        throw DataError("duplicate column '" + names_[c] + "'");
    }
    if (!lookup_.contains(outcome_name_))
      throw DataError("outcome column '" + outcome_name_ + "' not present");
    index_schools();
  }

  std::size_t rows() const { return school_ids_.size(); }
  std::size_t school_count() const { return schools_.size(); }

  const std::string& outcome_name() const { return outcome_name_; }
  const std::vector<double>& outcome() const { return column(outcome_name_); }

  /// Row-level school labels.
  const std::vector<std::string>& school_ids() const { return school_ids_; }
  /// Dense index -> label.
  const std::vector<std::string>& schools() const { return schools_; }
  /// Row -> dense school index (0-based).
  const std::vector<std::size_t>& school_index() const { return school_index_; }

  std::vector<std::size_t> school_sizes() const {
    std::vector<std::size_t> n(schools_.size(), 0);
    for (auto j : school_index_) ++n[j];
    return n;
  }

  const std::vector<std::string>& column_names() const { return names_; }
  bool has_column(const std::string& name) const { return lookup_.contains(name); }

  const std::vector<double>& column(const std::string& name) const {
    auto it = lookup_.find(name);
    if (it == lookup_.end()) throw DataError("unknown column '" + name + "'");
    return columns_[it->second];
  }

  /// Copy with one column's values replaced.
  Dataset with_column(const std::string& name, std::vector<double> values) const {
    auto it = lookup_.find(name);
    if (it == lookup_.end()) throw DataError("unknown column '" + name + "'");
    if (values.size() != rows()) throw DataError("replacement column '" + name + "' has wrong length");
    Dataset out = *this;
    out.columns_[it->second] = std::move(values);
    return out;
  }

  bool operator==(const Dataset& other) const {
    return school_ids_ == other.school_ids_ && outcome_name_ == other.outcome_name_ &&
           names_ == other.names_ && columns_ == other.columns_;
  }

 private:
  void index_schools() {
    std::unordered_map<std::string, std::size_t> dense;
    school_index_.reserve(school_ids_.size());
    for (const auto& id : school_ids_) {
      auto [it, inserted] = dense.emplace(id, schools_.size());
      if (inserted) schools_.push_back(id);
      school_index_.push_back(it->second);
    }
  }

  std::vector<std::string> school_ids_;
  std::string outcome_name_ = "y";
  std::vector<std::string> names_;
  std::vector<std::vector<double>> columns_;
  std::unordered_map<std::string, std::size_t> lookup_;
  std::vector<std::string> schools_;
  std::vector<std::size_t> school_index_;
};

/// Normal priors on regression coefficients and an inverse-Wishart prior on
/// the random-effects covariance. Unset df/scale resolve to dim+1 and I.
struct PriorConfig {
  double coef_prior_variance = 10000.0;
  std::optional<double> iw_df;
  std::optional<Eigen::MatrixXd> iw_scale;

  double df(Eigen::Index dim) const { return iw_df ? *iw_df : static_cast<double>(dim) + 1.0; }

  Eigen::MatrixXd scale(Eigen::Index dim) const {
    return iw_scale ? *iw_scale : Eigen::MatrixXd::Identity(dim, dim);
  }

  void validate(Eigen::Index dim) const {
    if (!(coef_prior_variance > 0.0) || !std::isfinite(coef_prior_variance))
      throw ConfigError("coef_prior_variance must be positive and finite");
    if (dim == 0) return;
    if (!(df(dim) > static_cast<double>(dim) - 1.0))
      throw ConfigError("inverse-Wishart df must exceed dim - 1");
    const Eigen::MatrixXd s = scale(dim);
    if (s.rows() != dim || s.cols() != dim)
      throw DimensionError("inverse-Wishart scale must be " + std::to_string(dim) + "x" +
                           std::to_string(dim));
    if (!s.isApprox(s.transpose(), 1e-12)) throw ConfigError("inverse-Wishart scale must be symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) throw NotPositiveDefinite("inverse-Wishart scale is not positive definite");
  }
};

/// Which columns enter the mean and log-variance functions, which mean
/// covariates get school-level random slopes, and whether the residual
/// variance carries a school random effect. Intercepts are implicit.
struct ModelSpec {
  std::vector<std::string> mean_covariates;
  std::vector<std::string> variance_covariates;
  std::vector<std::string> random_slope_covariates;
  bool random_residual_variance = false;
  // Off only for fixed-effects-only fits (no school mean effects at all).
  bool random_intercept = true;
  PriorConfig prior;

  Eigen::Index mean_dim() const { return 1 + static_cast<Eigen::Index>(mean_covariates.size()); }
  Eigen::Index variance_dim() const { return 1 + static_cast<Eigen::Index>(variance_covariates.size()); }
  /// r: random mean effects, intercept included.
  Eigen::Index mean_effect_dim() const {
    return random_intercept ? 1 + static_cast<Eigen::Index>(random_slope_covariates.size()) : 0;
  }
  /// s: 1 when the residual variance has a school effect.
  Eigen::Index variance_effect_dim() const { return random_residual_variance ? 1 : 0; }
  Eigen::Index effect_dim() const { return mean_effect_dim() + variance_effect_dim(); }

  /// Every column the model reads, in first-reference order.
  std::vector<std::string> referenced_columns() const {
    std::vector<std::string> out;
    auto add = [&](const std::vector<std::string>& names) {
      for (const auto& n : names)
        if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
    };
    add(mean_covariates);
    add(variance_covariates);
    add(random_slope_covariates);
    return out;
  }

  /// Structural problems, one message each.
  std::vector<std::string> structural_errors() const {
    std::vector<std::string> errs;
    for (const auto& s : random_slope_covariates)
      if (std::find(mean_covariates.begin(), mean_covariates.end(), s) == mean_covariates.end())
        errs.push_back("random slope covariate '" + s + "' is not a mean covariate");
    if (!random_intercept && !random_slope_covariates.empty())
      errs.push_back("random slopes require a random intercept");
    auto dupes = [&](const std::vector<std::string>& v, const char* what) {
      for (std::size_t i = 0; i < v.size(); ++i)
        for (std::size_t k = i + 1; k < v.size(); ++k)
          if (v[i] == v[k]) errs.push_back(std::string("duplicate ") + what + " covariate '" + v[i] + "'");
    };
    dupes(mean_covariates, "mean");
    dupes(variance_covariates, "variance");
    dupes(random_slope_covariates, "random slope");
    return errs;
  }
};

struct ValidationReport {
  std::vector<std::string> errors;
  std::vector<std::string> warnings;
  bool ok() const { return errors.empty(); }
};

inline ValidationReport validate_dataset(const Dataset& data, const ModelSpec& spec) {
  ValidationReport report;
  report.errors = spec.structural_errors();
  if (data.rows() == 0) {
    report.errors.push_back("empty dataset");
    return report;
  }
  const auto& y = data.outcome();
  for (std::size_t i = 0; i < y.size(); ++i)
    if (!std::isfinite(y[i])) report.errors.push_back("non-finite outcome at row " + std::to_string(i + 1));
  for (const auto& name : spec.referenced_columns()) {
    if (!data.has_column(name)) {
      report.errors.push_back("unknown covariate '" + name + "'");
      continue;
    }
    if (name == data.outcome_name()) continue;
    const auto& col = data.column(name);
    for (std::size_t i = 0; i < col.size(); ++i)
      if (!std::isfinite(col[i]))
        report.errors.push_back("non-finite value in column '" + name + "' at row " + std::to_string(i + 1));
  }
  const auto sizes = data.school_sizes();
  for (std::size_t j = 0; j < sizes.size(); ++j)
    if (sizes[j] < 5)
      report.warnings.push_back("school '" + data.schools()[j] + "' has n_j = " + std::to_string(sizes[j]) +
                                " (< 5)");
  if (sizes.size() < 10)
    report.warnings.push_back("only " + std::to_string(sizes.size()) + " schools (< 10)");
  return report;
}

/// Design matrices with leading intercept columns plus the covariate
/// summaries used for reference profiles.
struct DesignSet {
  ModelSpec spec;
  Eigen::VectorXd y;
  Eigen::MatrixXd X;  // n x p, mean function
  Eigen::MatrixXd W;  // n x q, log-variance function
  Eigen::MatrixXd Z;  // n x r, random mean effects (empty when r == 0)
  std::vector<std::size_t> group;
  std::vector<std::vector<std::size_t>> rows_of_school;
  std::vector<std::string> school_labels;
  std::vector<std::string> x_names, w_names, z_names;
  Eigen::VectorXd x_mean, w_mean, z_mean;
  Eigen::MatrixXd school_w_mean;              // J x q
  Eigen::MatrixXd school_z_mean;              // J x r
  std::vector<Eigen::MatrixXd> school_z_cov;  // J of r x r, (n_j - 1) denominator

  Eigen::Index rows() const { return y.size(); }
  std::size_t schools() const { return rows_of_school.size(); }
  std::size_t school_size(std::size_t j) const { return rows_of_school[j].size(); }

  bool operator==(const DesignSet& o) const {
    auto same = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
    };
    if (school_z_cov.size() != o.school_z_cov.size()) return false;
    for (std::size_t j = 0; j < school_z_cov.size(); ++j)
      if (!same(school_z_cov[j], o.school_z_cov[j])) return false;
    return same(y, o.y) && same(X, o.X) && same(W, o.W) && same(Z, o.Z) && group == o.group &&
           school_labels == o.school_labels && x_names == o.x_names && w_names == o.w_names &&
           z_names == o.z_names && same(x_mean, o.x_mean) && same(w_mean, o.w_mean) &&
           same(z_mean, o.z_mean) && same(school_w_mean, o.school_w_mean) &&
           same(school_z_mean, o.school_z_mean);
  }
};

namespace detail {

inline Eigen::MatrixXd assemble(const Dataset& data, const std::vector<std::string>& names, bool intercept,
                                std::vector<std::string>& labels) {
  const auto n = static_cast<Eigen::Index>(data.rows());
  const Eigen::Index lead = intercept ? 1 : 0;
  Eigen::MatrixXd m(n, lead + static_cast<Eigen::Index>(names.size()));
  labels.clear();
  if (intercept) {
    m.col(0).setOnes();
    labels.emplace_back("_cons");
  }
  for (std::size_t c = 0; c < names.size(); ++c) {
    if (!data.has_column(names[c])) throw DesignError("unknown covariate '" + names[c] + "'");
    const auto& col = data.column(names[c]);
    m.col(lead + static_cast<Eigen::Index>(c)) = Eigen::Map<const Eigen::VectorXd>(col.data(), n);
    labels.push_back(names[c]);
  }
  return m;
}

}  // namespace detail

inline DesignSet build_design(const Dataset& data, const ModelSpec& spec) {
  if (auto errs = spec.structural_errors(); !errs.empty()) throw DesignError(errs.front());
  for (const auto& name : spec.referenced_columns())
    if (!data.has_column(name)) throw DesignError("unknown covariate '" + name + "'");
  if (auto report = validate_dataset(data, spec); !report.ok()) throw DataError(report.errors.front());

  DesignSet d;
  d.spec = spec;
  const auto n = static_cast<Eigen::Index>(data.rows());
  d.y = Eigen::Map<const Eigen::VectorXd>(data.outcome().data(), n);
  d.X = detail::assemble(data, spec.mean_covariates, true, d.x_names);
  d.W = detail::assemble(data, spec.variance_covariates, true, d.w_names);
  d.Z = detail::assemble(data, spec.random_slope_covariates, spec.random_intercept, d.z_names);
  d.group = data.school_index();
  d.school_labels = data.schools();
  const std::size_t J = data.school_count();
  d.rows_of_school.assign(J, {});
  for (std::size_t i = 0; i < d.group.size(); ++i) d.rows_of_school[d.group[i]].push_back(i);

  d.x_mean = d.X.colwise().mean().transpose();
  d.w_mean = d.W.colwise().mean().transpose();
  d.z_mean = d.Z.cols() > 0 ? Eigen::VectorXd(d.Z.colwise().mean().transpose()) : Eigen::VectorXd();

  const Eigen::Index q = d.W.cols();
  const Eigen::Index r = d.Z.cols();
  d.school_w_mean = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(J), q);
  d.school_z_mean = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(J), r);
  d.school_z_cov.assign(J, Eigen::MatrixXd::Zero(r, r));
  for (std::size_t j = 0; j < J; ++j) {
    const auto& rows = d.rows_of_school[j];
    const double nj = static_cast<double>(rows.size());
    const auto jj = static_cast<Eigen::Index>(j);
    for (auto i : rows) {
      d.school_w_mean.row(jj) += d.W.row(static_cast<Eigen::Index>(i));
      d.school_z_mean.row(jj) += d.Z.row(static_cast<Eigen::Index>(i));
    }
    d.school_w_mean.row(jj) /= nj;
    d.school_z_mean.row(jj) /= nj;
    if (rows.size() < 2 || r == 0) continue;
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(r, r);
    for (auto i : rows) {
      const Eigen::RowVectorXd dev = d.Z.row(static_cast<Eigen::Index>(i)) - d.school_z_mean.row(jj);
      acc.noalias() += dev.transpose() * dev;
    }
    d.school_z_cov[j] = acc / (nj - 1.0);
  }
  return d;
}

struct ColumnScaling {
  std::string name;
  double mean = 0.0;
  double sd = 1.0;
};

/// Per-column affine map applied by standardize; invertible.
struct ScalingRecord {
  std::vector<ColumnScaling> columns;

  Dataset invert(const Dataset& data) const {
    Dataset out = data;
    for (const auto& c : columns) {
      auto v = out.column(c.name);
      for (auto& x : v) x = x * c.sd + c.mean;
      out = out.with_column(c.name, std::move(v));
    }
    return out;
  }
};

/// Centre each named column to mean 0 and scale to sample SD 1 (n - 1 denominator).
inline std::pair<Dataset, ScalingRecord> standardize(const Dataset& data, const std::vector<std::string>& columns) {
  Dataset out = data;
  ScalingRecord record;
  for (const auto& name : columns) {
    auto v = data.column(name);
    if (v.size() < 2) throw DataError("column '" + name + "' needs at least two values to standardize");
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    if (!(sd > 0.0) || !std::isfinite(sd)) throw DataError("zero variance column '" + name + "'");
    for (auto& x : v) x = (x - mean) / sd;
    out = out.with_column(name, std::move(v));
    record.columns.push_back({name, mean, sd});
  }
  return {std::move(out), std::move(record)};
}

inline Dataset destandardize(const Dataset& data, const ScalingRecord& record) { return record.invert(data); }

}  // namespace mels
