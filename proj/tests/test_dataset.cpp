#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace mels;
using mels::test::make_dataset;

namespace {

Dataset two_by_three() {
  return make_dataset({"a", "a", "a", "b", "b", "b"}, {"y", "x"},
                      {{0.1, -0.3, 0.5, 1.2, 0.7, -0.4}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0}});
}

ModelSpec model1() {
  ModelSpec s;
  s.mean_covariates = {"x"};
  return s;
}

bool contains(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(Dataset, SchoolsIndexedByFirstAppearance) {
  auto d = make_dataset({"z", "a", "z", "m", "a"}, {"y"}, {{1, 2, 3, 4, 5}});
  EXPECT_EQ(d.school_count(), 3u);
  EXPECT_EQ(d.schools(), (std::vector<std::string>{"z", "a", "m"}));
  EXPECT_EQ(d.school_index(), (std::vector<std::size_t>{0, 1, 0, 2, 1}));
  EXPECT_EQ(d.school_sizes(), (std::vector<std::size_t>{2, 2, 1}));
}

TEST(Dataset, MissingOutcomeColumnThrows) {
  EXPECT_THROW(Dataset({"a"}, "y", {"x"}, {{1.0}}), DataError);
}

TEST(ValidateDataset, WellFormedHasNoErrors) {
  const auto rep = validate_dataset(two_by_three(), model1());
  EXPECT_TRUE(rep.errors.empty());
  EXPECT_TRUE(rep.ok());
}

TEST(ValidateDataset, NonFiniteOutcomeReportsRow) {
  auto d = make_dataset({"a", "a", "b"}, {"y", "x"}, {{0.0, NAN, 1.0}, {1, 2, 3}});
  const auto rep = validate_dataset(d, model1());
  ASSERT_EQ(rep.errors.size(), 1u);
  EXPECT_EQ(rep.errors.front(), "non-finite outcome at row 2");
}

TEST(ValidateDataset, SingletonSchoolWarnsWithoutErrors) {
  auto d = make_dataset({"a", "a", "a", "a", "a", "b"}, {"y", "x"}, {{0, 1, 2, 3, 4, 5}, {1, 2, 3, 4, 5, 6}});
  const auto rep = validate_dataset(d, model1());
  EXPECT_TRUE(rep.errors.empty());
  EXPECT_TRUE(contains(rep.warnings, "school 'b' has n_j = 1"));
}

TEST(ValidateDataset, FewSchoolsWarns) {
  const auto rep = validate_dataset(two_by_three(), model1());
  EXPECT_TRUE(contains(rep.warnings, "only 2 schools"));
}

TEST(ValidateDataset, EmptyAndUnknownAndNonFiniteCovariate) {
  auto empty = make_dataset({}, {"y", "x"}, {{}, {}});
  EXPECT_TRUE(contains(validate_dataset(empty, model1()).errors, "empty dataset"));

  ModelSpec s = model1();
  s.variance_covariates = {"ks3"};
  EXPECT_TRUE(contains(validate_dataset(two_by_three(), s).errors, "unknown covariate 'ks3'"));

  auto bad = make_dataset({"a", "b"}, {"y", "x"}, {{0, 1}, {1, INFINITY}});
  EXPECT_TRUE(contains(validate_dataset(bad, model1()).errors, "non-finite value in column 'x' at row 2"));
}

TEST(ValidateDataset, SlopeMustBeMeanCovariate) {
  ModelSpec s = model1();
  s.random_slope_covariates = {"w"};
  EXPECT_FALSE(validate_dataset(two_by_three(), s).ok());
  EXPECT_THROW(build_design(two_by_three(), s), DesignError);
}

TEST(BuildDesign, Model1Shapes) {
  const auto d = build_design(two_by_three(), model1());
  EXPECT_EQ(d.X.cols(), 2);
  EXPECT_EQ(d.W.cols(), 1);
  EXPECT_EQ(d.Z.cols(), 1);
  EXPECT_EQ(d.rows(), 6);
  EXPECT_EQ(d.schools(), 2u);
  EXPECT_EQ(d.x_names, (std::vector<std::string>{"_cons", "x"}));
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    EXPECT_EQ(d.X(i, 0), 1.0);
    EXPECT_EQ(d.W(i, 0), 1.0);
    EXPECT_EQ(d.Z(i, 0), 1.0);
  }
  EXPECT_EQ(d.X(2, 1), 0.5);
}

TEST(BuildDesign, Model3AddsVarianceColumn) {
  ModelSpec s = model1();
  s.variance_covariates = {"x"};
  s.random_residual_variance = true;
  const auto d = build_design(two_by_three(), s);
  EXPECT_EQ(d.W.cols(), 2);
  EXPECT_EQ(s.effect_dim(), 2);
}

TEST(BuildDesign, UnknownColumnNamesIt) {
  ModelSpec s;
  s.mean_covariates = {"ks3"};
  try {
    build_design(two_by_three(), s);
    FAIL() << "expected DesignError";
  } catch (const DesignError& e) {
    EXPECT_NE(std::string(e.what()).find("ks3"), std::string::npos);
  }
}

TEST(BuildDesign, GroupIndexTotal) {
  const auto d = build_design(two_by_three(), model1());
  ASSERT_EQ(d.group.size(), 6u);
  for (auto g : d.group) EXPECT_LT(g, d.schools());
}

TEST(BuildDesign, PureFunction) {
  ModelSpec s = model1();
  s.random_slope_covariates = {"x"};
  s.variance_covariates = {"x"};
  s.random_residual_variance = true;
  EXPECT_TRUE(build_design(two_by_three(), s) == build_design(two_by_three(), s));
}

TEST(BuildDesign, InterceptColumnStatsPerSchool) {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::string> ids;
    std::vector<double> y, x;
    for (int j = 0; j < 7; ++j)
      for (int i = 0; i <= j; ++i) {
        ids.push_back("s" + std::to_string(j));
        y.push_back(nd(gen));
        x.push_back(nd(gen));
      }
    ModelSpec s = model1();
    s.random_slope_covariates = {"x"};
    const auto d = build_design(make_dataset(ids, {"y", "x"}, {y, x}), s);
    for (std::size_t j = 0; j < d.schools(); ++j) {
      EXPECT_EQ(d.school_z_mean(static_cast<Eigen::Index>(j), 0), 1.0);
      EXPECT_EQ(d.school_z_cov[j](0, 0), 0.0);
    }
    EXPECT_EQ(d.school_z_cov[0](1, 1), 0.0);  // n_j = 1
  }
}

TEST(BuildDesign, SchoolCovarianceUsesNMinusOne) {
  auto data = make_dataset({"a", "a", "a"}, {"y", "x"}, {{0, 0, 0}, {1, 2, 6}});
  ModelSpec s = model1();
  s.random_slope_covariates = {"x"};
  const auto d = build_design(data, s);
  EXPECT_NEAR(d.school_z_cov[0](1, 1), 7.0, 1e-12);  // mean 3, ss 14
  EXPECT_NEAR(d.z_mean[1], 3.0, 1e-12);
}

TEST(BuildDesign, NoRandomInterceptGivesEmptyZ) {
  ModelSpec s = model1();
  s.random_intercept = false;
  const auto d = build_design(two_by_three(), s);
  EXPECT_EQ(d.Z.cols(), 0);
  EXPECT_EQ(s.effect_dim(), 0);
}

TEST(Standardize, MeanZeroSdOne) {
  auto data = make_dataset({"a", "b", "c"}, {"y"}, {{1, 3, 5}});
  auto [out, rec] = standardize(data, {"y"});
  const auto& v = out.column("y");
  EXPECT_NEAR(v[0], -1.0, 1e-12);
  EXPECT_NEAR(v[1], 0.0, 1e-12);
  EXPECT_NEAR(v[2], 1.0, 1e-12);
  ASSERT_EQ(rec.columns.size(), 1u);
  EXPECT_DOUBLE_EQ(rec.columns[0].mean, 3.0);
  EXPECT_DOUBLE_EQ(rec.columns[0].sd, 2.0);
}

TEST(Standardize, IdempotentOnStandardizedColumn) {
  auto data = make_dataset({"a", "b", "c"}, {"y"}, {{-1, 0, 1}});
  auto [out, rec] = standardize(data, {"y"});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out.column("y")[i], data.column("y")[i], 1e-10);
}

TEST(Standardize, ConstantColumnThrows) {
  auto data = make_dataset({"a", "b", "c"}, {"y"}, {{2, 2, 2}});
  try {
    standardize(data, {"y"});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("zero variance column"), std::string::npos);
  }
}

TEST(Standardize, InverseRecoversOriginal) {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> nd(50.0, 12.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> ids;
    std::vector<double> y, x;
    for (int i = 0; i < 40; ++i) {
      ids.push_back("s" + std::to_string(i % 4));
      y.push_back(nd(gen));
      x.push_back(nd(gen) * 1e-3);
    }
    auto data = make_dataset(ids, {"y", "x"}, {y, x});
    auto [scaled, rec] = standardize(data, {"y", "x"});
    EXPECT_NEAR(mean_of(scaled.column("x")), 0.0, 1e-10);
    EXPECT_NEAR(std::sqrt(variance_of(scaled.column("x"))), 1.0, 1e-10);
    const auto back = destandardize(scaled, rec);
    for (const auto* name : {"y", "x"})
      for (std::size_t i = 0; i < data.rows(); ++i) {
        const double a = data.column(name)[i], b = back.column(name)[i];
        EXPECT_LE(std::abs(a - b), 1e-12 * std::abs(a) + 1e-15);
      }
  }
}

TEST(PriorConfig, DefaultsAndValidation) {
  PriorConfig p;
  EXPECT_EQ(p.coef_prior_variance, 10000.0);
  EXPECT_EQ(p.df(2), 3.0);
  EXPECT_EQ(p.df(3), 4.0);
  EXPECT_TRUE(p.scale(2).isIdentity());
  p.iw_df = 0.5;
  EXPECT_THROW(p.validate(2), ConfigError);
  p.iw_df.reset();
  Eigen::MatrixXd bad(2, 2);
  bad << 1, 2, 2, 1;
  p.iw_scale = bad;
  EXPECT_THROW(p.validate(2), NotPositiveDefinite);
}
