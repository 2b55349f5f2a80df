#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace mels;

namespace {

std::vector<double> iid_normal(std::size_t n, std::uint64_t seed, double mean = 0.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = mean + rng.normal();
  return v;
}

std::vector<double> ar1(std::size_t n, double rho, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  double x = rng.normal() / std::sqrt(1 - rho * rho);
  for (auto& e : v) {
    x = rho * x + rng.normal();
    e = x;
  }
  return v;
}

std::vector<double> affine(std::vector<double> v, double a, double b) {
  for (auto& x : v) x = a * x + b;
  return v;
}

/// Small fitted chain set on simulated supplement data.
struct Fitted {
  Dataset data;
  DesignSet design;
  ChainSet set;
};

Fitted small_fit() {
  auto data = simulate_dataset(supplement_spec(), TrueParameters::supplement(), 12, 8, 31);
  auto design = build_design(data, supplement_spec());
  McmcConfig cfg;
  cfg.n_chains = 2;
  cfg.burn_in = 200;
  cfg.monitor = 300;
  cfg.seed = 5;
  cfg.threads = 1;
  auto set = fit(design, cfg);
  return {std::move(data), std::move(design), std::move(set)};
}

}  // namespace

TEST(GelmanRubin, IidChainsNearOne) {
  const double r = gelman_rubin({iid_normal(10000, 1), iid_normal(10000, 2)});
  EXPECT_GE(r, 0.99);
  EXPECT_LE(r, 1.02);
}

TEST(GelmanRubin, SeparatedChainsFlagged) {
  EXPECT_GT(gelman_rubin({iid_normal(1000, 1, 0.0), iid_normal(1000, 2, 100.0)}), 1.5);
}

TEST(GelmanRubin, IdenticalChainsGiveOne) {
  const auto c = iid_normal(500, 3);
  EXPECT_EQ(gelman_rubin({c, c}), 1.0);
}

TEST(GelmanRubin, ErrorsAndSplitChain) {
  EXPECT_THROW(gelman_rubin({iid_normal(100, 1), iid_normal(101, 2)}), Error);
  EXPECT_THROW(gelman_rubin({iid_normal(5, 1), iid_normal(5, 2)}), Error);
  // One chain: split halves. A trending chain is flagged.
  std::vector<double> trend(2000);
  for (std::size_t i = 0; i < trend.size(); ++i) trend[i] = static_cast<double>(i) / 100.0;
  EXPECT_GT(gelman_rubin({trend}), 1.5);
  EXPECT_LT(gelman_rubin({iid_normal(4000, 9)}), 1.02);
}

TEST(GelmanRubin, AffineInvariant) {
  const std::vector<std::vector<double>> chains{ar1(2000, 0.5, 1), ar1(2000, 0.5, 2), ar1(2000, 0.5, 3)};
  const double base = gelman_rubin(chains);
  for (auto [a, b] : {std::pair{2.5, -3.0}, std::pair{-0.1, 7.0}}) {
    std::vector<std::vector<double>> t;
    for (const auto& c : chains) t.push_back(affine(c, a, b));
    EXPECT_NEAR(gelman_rubin(t), base, 1e-9);
  }
}

TEST(EffectiveSampleSize, IidNearN) {
  const double ess = effective_sample_size(iid_normal(10000, 4));
  EXPECT_GE(ess, 8500.0);
  EXPECT_LE(ess, 10000.0);
}

TEST(EffectiveSampleSize, Ar1MatchesAnalytic) {
  const double rho = 0.9, n = 10000.0;
  const double expect = n * (1 - rho) / (1 + rho);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const double ess = effective_sample_size(ar1(10000, rho, seed));
    EXPECT_NEAR(ess, expect, 0.25 * expect) << "seed " << seed;
  }
}

TEST(EffectiveSampleSize, ConstantChainIsZeroAndShortChainThrows) {
  EXPECT_EQ(effective_sample_size(std::vector<double>(500, 3.0)), 0.0);
  EXPECT_THROW(effective_sample_size(std::vector<double>(99, 1.0)), Error);
}

TEST(EffectiveSampleSize, AffineInvariantAndCapped) {
  const auto c = ar1(3000, 0.6, 8);
  const double base = effective_sample_size(c);
  EXPECT_NEAR(effective_sample_size(affine(c, -4.0, 2.0)), base, 1e-6 * base);
  // Antithetic chain: raw estimate would exceed n.
  std::vector<double> alt(1000);
  Rng rng(2);
  for (std::size_t i = 0; i < alt.size(); ++i) alt[i] = (i % 2 ? 1.0 : -1.0) + 0.01 * rng.normal();
  EXPECT_LE(effective_sample_size(alt), 1000.0);
  EXPECT_EQ(multi_chain_ess({c, c}), 2 * base);
}

TEST(Autocorrelation, Ar1LagOne) {
  const auto rho = autocorrelation(ar1(20000, 0.9, 3), 50);
  ASSERT_EQ(rho.size(), 51u);
  EXPECT_EQ(rho[0], 1.0);
  EXPECT_NEAR(rho[1], 0.9, 0.02);
  EXPECT_NEAR(rho[2], 0.81, 0.03);
}

TEST(Quantiles, LinearInterpolation) {
  const std::vector<double> v{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.25), 1.75);
  const auto s = summarize_draws({4, 1, 3, 2});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_NEAR(s.sd, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_DOUBLE_EQ(s.lo, 1.075);
  EXPECT_DOUBLE_EQ(s.hi, 3.925);
}

TEST(AcceptanceReport, Counting) {
  ChainSet set;
  Chain a, b;
  a.acceptance = {{"beta", 10, 10}, {"alpha", 10, 0}, {"school_effects", 6, 2}};
  b.acceptance = {{"beta", 10, 10}, {"alpha", 10, 0}, {"school_effects", 4, 1}};
  set.chains = {a, b};
  const auto rep = acceptance_report(set);
  ASSERT_EQ(rep.size(), 3u);
  EXPECT_EQ(rep[0].rate(), 1.0);
  EXPECT_EQ(rep[1].rate(), 0.0);
  EXPECT_DOUBLE_EQ(rep[2].rate(), 0.3);
}

TEST(Dic, DegenerateChainHasZeroPd) {
  const auto f = small_fit();
  const auto theta = f.set.state(0, 10);
  ChainSet degenerate = f.set;
  for (auto& ch : degenerate.chains)
    for (Eigen::Index t = 0; t < ch.scalars.rows(); ++t) {
      ch.scalars.row(t) = f.set.chains[0].scalars.row(10);
      ch.effects.row(t) = f.set.chains[0].effects.row(10);
    }
  const auto r = dic(degenerate, f.design);
  EXPECT_NEAR(r.pd, 0.0, 1e-9);
  EXPECT_NEAR(r.dic, conditional_deviance(f.design, theta), 1e-9);
}

TEST(Dic, IdentitiesHoldExactly) {
  const auto f = small_fit();
  const auto r = dic(f.set, f.design);
  EXPECT_EQ(r.pd, r.dbar - r.d_at_mean);
  EXPECT_EQ(r.dic, r.dbar + r.pd);
  EXPECT_EQ(r.dic - r.dbar - r.pd, 0.0);
  const auto rep = diagnose(f.set, &f.design);
  ASSERT_TRUE(rep.has_dic);
  EXPECT_EQ(rep.dic.dic, r.dic);
}

TEST(Dic, InvariantToSchoolRelabeling) {
  const auto f = small_fit();
  std::vector<std::string> ids;
  for (const auto& s : f.data.school_ids()) ids.push_back("renamed_" + s);
  std::vector<std::vector<double>> cols;
  for (const auto& n : f.data.column_names()) cols.push_back(f.data.column(n));
  const auto design2 = build_design(Dataset(ids, "y", f.data.column_names(), cols), supplement_spec());
  EXPECT_EQ(dic(f.set, f.design).dic, dic(f.set, design2).dic);
}

TEST(Dic, MissingEffectsIsError) {
  auto f = small_fit();
  for (auto& ch : f.set.chains) ch.effects.resize(ch.effects.rows(), 0);
  EXPECT_THROW(dic(f.set, f.design), Error);
}

TEST(Diagnose, ReportFieldsConsistent) {
  const auto f = small_fit();
  const auto rep = diagnose(f.set);
  ASSERT_EQ(rep.parameters.size(), f.set.parameter_names.size());
  for (const auto& p : rep.parameters) {
    EXPECT_LE(p.lo, p.median);
    EXPECT_LE(p.median, p.hi);
    EXPECT_LE(p.ess, static_cast<double>(f.set.total_draws()));
    EXPECT_EQ(p.autocorr.size(), 50u);
    EXPECT_TRUE(std::isfinite(p.rhat));
  }
  EXPECT_FALSE(rep.has_dic);
  EXPECT_GE(rep.max_rhat(), 1.0 - 1e-3);
}

TEST(Diagnose, FixedParametersSkipConvergenceStats) {
  auto f = small_fit();
  f.set.parameter_fixed[2] = true;
  const auto p = summarize_parameter(f.set, 2);
  EXPECT_TRUE(std::isnan(p.rhat));
  EXPECT_TRUE(std::isnan(p.ess));
}
