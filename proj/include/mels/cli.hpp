#pragma once

// Command-line front end: simulate, fit, diagnose, summarize, compare.
//
// Exit codes: 0 success, 1 error, 2 usage error, 3 finished but some
// parameter has R-hat above 1.1.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mels/dataset.hpp"
#include "mels/diagnostics.hpp"
#include "mels/io.hpp"
#include "mels/postestimation.hpp"
#include "mels/sampler.hpp"
#include "mels/simulator.hpp"

namespace mels {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNotConverged = 3;
inline constexpr double kRhatThreshold = 1.1;

namespace detail {

struct LoadedFit {
  ChainSet set;
  Dataset data;
  DesignSet design;
  ReferenceProfile reference;
};

inline LoadedFit load_fit(const fs::path& fit_dir) {
  const fs::path archive = fs::exists(fit_dir / "chains" / "meta.json") ? fit_dir / "chains" : fit_dir;
  auto set = read_chain_archive(archive);
  auto data = read_archive_dataset(archive);
  if (!data) throw ArchiveError("archive '" + archive.string() + "' does not store its dataset");
  auto design = build_design(*data, set.spec);
  ReferenceOverrides overrides;
  if (fs::exists(archive / "reference.json")) overrides = ReferenceOverrides::from_json(load_json(archive / "reference.json"));
  auto reference = overrides.apply(design);
  return {std::move(set), std::move(*data), std::move(design), std::move(reference)};
}

inline int convergence_exit(const DiagnosticsReport& rep, std::ostream& err) {
  if (rep.max_rhat() > kRhatThreshold) {
    err << "warning: max R-hat " << format_double(rep.max_rhat()) << " exceeds " << kRhatThreshold << '\n';
    return kExitNotConverged;
  }
  return kExitOk;
}

inline void print_summary(const DiagnosticsReport& rep, std::ostream& out) {
  char line[256];
  std::snprintf(line, sizeof line, "%-18s %12s %12s %12s %12s %8s %10s\n", "parameter", "mean", "sd", "lo95", "hi95",
                "rhat", "ess");
  out << line;
  for (const auto& p : rep.parameters) {
    std::snprintf(line, sizeof line, "%-18s %12.5g %12.5g %12.5g %12.5g %8.4f %10.1f\n", p.name.c_str(), p.mean, p.sd,
                  p.lo, p.hi, p.rhat, p.ess);
    out << line;
  }
  for (const auto& a : rep.acceptance) {
    std::snprintf(line, sizeof line, "acceptance %-12s %.3f\n", a.block.c_str(), a.rate());
    out << line;
  }
  if (rep.has_dic) {
    std::snprintf(line, sizeof line, "DIC %.4f (pD %.4f, conditional deviance)\n", rep.dic.dic, rep.dic.pd);
    out << line;
  }
}

inline int cmd_simulate(const std::string& config, std::optional<std::uint64_t> seed, const fs::path& out_dir,
                        std::ostream& out) {
  SimulationConfig sim;
  if (!config.empty()) sim = simulation_config_from_json(load_json(config));
  if (seed) sim.seed = *seed;
  const auto data = simulate_dataset(sim.spec, sim.truth, sim.school_sizes, sim.seed);
  fs::create_directories(out_dir);
  write_dataset_csv(data, out_dir / "data.csv");
  json truth;
  truth["beta"] = to_json(sim.truth.beta);
  truth["alpha"] = to_json(sim.truth.alpha);
  truth["omega"] = to_json(sim.truth.omega);
  truth["seed"] = sim.seed;
  std::ofstream(out_dir / "truth.json") << truth.dump(2) << '\n';
  out << "wrote " << data.rows() << " rows in " << data.school_count() << " schools to "
      << (out_dir / "data.csv").string() << '\n';
  return kExitOk;
}

struct FitOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> chains, burnin, monitor;
  std::optional<unsigned> threads;
  std::optional<std::string> out;
};

inline int cmd_fit(const std::string& config_path, const FitOverrides& ov, std::ostream& out, std::ostream& err) {
  auto cfg = parse_run_config(config_path);
  if (ov.seed) cfg.mcmc.seed = *ov.seed;
  if (ov.chains) cfg.mcmc.n_chains = *ov.chains;
  if (ov.burnin) cfg.mcmc.burn_in = *ov.burnin;
  if (ov.monitor) cfg.mcmc.monitor = *ov.monitor;
  if (ov.threads) cfg.mcmc.threads = *ov.threads;
  if (ov.out) cfg.output_dir = *ov.out;
  cfg.mcmc.validate();
  if (cfg.input.empty()) throw ConfigError("run config needs 'input'");

  auto data = read_dataset_csv(cfg.input, cfg.outcome);
  const auto report = validate_dataset(data, cfg.spec);
  for (const auto& w : report.warnings) err << "warning: " << w << '\n';
  if (!report.errors.empty()) throw DataError(report.errors.front());
  std::optional<ScalingRecord> scaling;
  if (!cfg.standardize.empty()) {
    auto [scaled, rec] = standardize(data, cfg.standardize);
    data = std::move(scaled);
    scaling = std::move(rec);
  }
  const auto design = build_design(data, cfg.spec);
  const auto reference = cfg.reference.apply(design);

  const auto set = fit(design, cfg.mcmc);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  write_chain_archive(set, dir / "chains", &data);
  std::ofstream(dir / "chains" / "reference.json") << cfg.reference.to_json().dump(2) << '\n';
  if (scaling) {
    json s = json::array();
    for (const auto& c : scaling->columns) s.push_back({{"column", c.name}, {"mean", c.mean}, {"sd", c.sd}});
    std::ofstream(dir / "scaling.json") << s.dump(2) << '\n';
  }

  const auto rep = diagnose(set, &design);
  write_summary_csv(set, rep, dir / "summary.csv");
  write_diagnostics_csv(rep, dir);
  write_school_tables(set, design, reference, dir);
  print_summary(rep, out);
  return convergence_exit(rep, err);
}

inline int cmd_diagnose(const fs::path& fit_dir, const std::optional<std::string>& out_dir, std::ostream& out,
                        std::ostream& err) {
  const auto f = load_fit(fit_dir);
  const auto rep = diagnose(f.set, &f.design);
  const fs::path dir = out_dir ? fs::path(*out_dir) : fit_dir;
  fs::create_directories(dir);
  write_diagnostics_csv(rep, dir);
  print_summary(rep, out);
  return convergence_exit(rep, err);
}

inline int cmd_summarize(const fs::path& fit_dir, const std::optional<std::string>& out_dir, std::ostream& out) {
  const auto f = load_fit(fit_dir);
  const auto rep = diagnose(f.set);
  const fs::path dir = out_dir ? fs::path(*out_dir) : fit_dir;
  fs::create_directories(dir);
  write_summary_csv(f.set, rep, dir / "summary.csv");
  write_school_tables(f.set, f.design, f.reference, dir);
  out << "wrote summaries for " << f.set.schools() << " schools to " << dir.string() << '\n';
  return kExitOk;
}

/// Matches schools by label and reports how the two fits agree.
inline int cmd_compare(const fs::path& a_dir, const fs::path& b_dir, const fs::path& out_dir, std::ostream& out) {
  const auto a = load_fit(a_dir);
  const auto b = load_fit(b_dir);
  const auto sa = school_summaries(a.set, a.design, a.reference);
  const auto sb = school_summaries(b.set, b.design, b.reference);
  std::map<std::string, const SchoolEffectSummary*> by_label;
  for (const auto& s : sb) by_label[s.school] = &s;
  const bool means = a.set.r > 0 && b.set.r > 0;
  const bool vars = a.set.spec.random_residual_variance && b.set.spec.random_residual_variance;

  std::vector<double> ua, ub, va, vb, ra, rb, rva, rvb;
  fs::create_directories(out_dir);
  {
    CsvWriter w(out_dir / "compare_schools.csv");
    w.row({"school", "a_u_mean", "b_u_mean", "a_mean_rank", "b_mean_rank", "a_sigma2e_mean", "b_sigma2e_mean",
           "a_variance_rank", "b_variance_rank"});
    for (const auto& s : sa) {
      auto it = by_label.find(s.school);
      if (it == by_label.end()) continue;
      const auto& t = *it->second;
      std::vector<std::string> row{s.school};
      if (means) {
        ua.push_back(s.mean_effects.front().mean), ub.push_back(t.mean_effects.front().mean);
        ra.push_back(static_cast<double>(s.mean_rank)), rb.push_back(static_cast<double>(t.mean_rank));
        row.insert(row.end(), {num(ua.back()), num(ub.back()), num(s.mean_rank), num(t.mean_rank)});
      } else {
        row.insert(row.end(), 4, kMissing);
      }
      if (vars) {
        va.push_back(s.school_variance->mean), vb.push_back(t.school_variance->mean);
        rva.push_back(static_cast<double>(*s.variance_rank)), rvb.push_back(static_cast<double>(*t.variance_rank));
        row.insert(row.end(), {num(va.back()), num(vb.back()), num(*s.variance_rank), num(*t.variance_rank)});
      } else {
        row.insert(row.end(), 4, kMissing);
      }
      w.row(row);
    }
  }
  auto corr = [](const std::vector<double>& x, const std::vector<double>& y, CorrelationMethod m) {
    if (x.size() < 3) return std::string(kMissing);
    try {
      return num(effect_correlation(x, y, m));
    } catch (const Error&) {
      return std::string(kMissing);
    }
  };
  CsvWriter w(out_dir / "compare.csv");
  w.row({"quantity", "value"});
  w.row({"matched_schools", num(means ? ua.size() : va.size())});
  w.row({"pearson_means", corr(ua, ub, CorrelationMethod::Pearson)});
  w.row({"spearman_means", corr(ua, ub, CorrelationMethod::Spearman)});
  w.row({"pearson_variances", corr(va, vb, CorrelationMethod::Pearson)});
  w.row({"spearman_variances", corr(va, vb, CorrelationMethod::Spearman)});
  out << "compared " << (means ? ua.size() : va.size()) << " matched schools\n";
  return kExitOk;
}

}  // namespace detail

/// Entry point for the `mels` executable.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Bayesian mixed-effects location-scale models for school value-added"};
  app.require_subcommand(1);

  std::string sim_config;
  std::optional<std::uint64_t> sim_seed;
  std::string sim_out = "mels_sim";
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic dataset");
  sim->add_option("--config", sim_config, "Simulation config (JSON)")->check(CLI::ExistingFile);
  sim->add_option("--seed", sim_seed, "Master seed");
  sim->add_option("--out", sim_out, "Output directory")->capture_default_str();

  std::string fit_config;
  detail::FitOverrides ov;
  auto* fitc = app.add_subcommand("fit", "Fit a model by MCMC");
  fitc->add_option("--config", fit_config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  fitc->add_option("--seed", ov.seed, "Master seed");
  fitc->add_option("--chains", ov.chains, "Number of chains")->check(CLI::PositiveNumber);
  fitc->add_option("--burnin", ov.burnin, "Burn-in iterations per chain")->check(CLI::NonNegativeNumber);
  fitc->add_option("--monitor", ov.monitor, "Monitoring iterations per chain")->check(CLI::PositiveNumber);
  fitc->add_option("--threads", ov.threads, "Worker threads (default MELS_THREADS or hardware)");
  fitc->add_option("--out", ov.out, "Output directory");

  std::string diag_dir;
  std::optional<std::string> diag_out;
  auto* diag = app.add_subcommand("diagnose", "Convergence diagnostics of a stored fit");
  diag->add_option("fit_dir", diag_dir, "Fit output directory or chain archive")->required()->check(CLI::ExistingDirectory);
  diag->add_option("--out", diag_out, "Output directory (default: fit_dir)");

  std::string sum_dir;
  std::optional<std::string> sum_out;
  auto* summ = app.add_subcommand("summarize", "Posterior and school summaries of a stored fit");
  summ->add_option("fit_dir", sum_dir, "Fit output directory or chain archive")->required()->check(CLI::ExistingDirectory);
  summ->add_option("--out", sum_out, "Output directory (default: fit_dir)");

  std::string cmp_a, cmp_b, cmp_out = "mels_compare";
  auto* cmp = app.add_subcommand("compare", "Compare school estimates of two stored fits");
  cmp->add_option("fit_a", cmp_a, "First fit")->required()->check(CLI::ExistingDirectory);
  cmp->add_option("fit_b", cmp_b, "Second fit")->required()->check(CLI::ExistingDirectory);
  cmp->add_option("--out", cmp_out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*sim) return detail::cmd_simulate(sim_config, sim_seed, sim_out, out);
    if (*fitc) return detail::cmd_fit(fit_config, ov, out, err);
    if (*diag) return detail::cmd_diagnose(diag_dir, diag_out, out, err);
    if (*summ) return detail::cmd_summarize(sum_dir, sum_out, out);
    if (*cmp) return detail::cmd_compare(cmp_a, cmp_b, cmp_out, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitUsage;
}

}  // namespace mels
