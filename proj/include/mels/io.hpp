#pragma once

// File formats: dataset CSV, JSON run configuration, the chain archive and
// the summary tables written by the command-line tool.
//
// Chain archive layout (a directory):
//   meta.json  format "mels-chain-archive", version "MAJOR.MINOR", model
//              spec, MCMC config, parameter and school names, per-chain
//              seed/draw count/acceptance, byte count and FNV-1a checksum
//              of draws.bin.
//   draws.bin  for each chain in order: the draws x parameters matrix,
//              then the draws x (J * d) school-effect matrix; row-major
//              little-endian IEEE-754 doubles, no padding.
//   data.csv   the analysis dataset (after any standardization).

#include <Eigen/Dense>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"
#include "mels/dataset.hpp"
#include "mels/diagnostics.hpp"
#include "mels/error.hpp"
#include "mels/postestimation.hpp"
#include "mels/sampler.hpp"
#include "mels/simulator.hpp"

namespace mels {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kMissing = "NA";

/// Shortest text that is still 17 significant digits; NaN/inf -> NA.
inline std::string format_double(double v) {
  if (!std::isfinite(v)) return kMissing;
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Reads a header-first CSV with a `school_id` column; every other column is
/// numeric. Empty cells and NA become NaN (left to validation to reject).
inline Dataset read_dataset_csv(const fs::path& path, const std::string& outcome = "y") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file '" + path.string() + "'");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (detail::trim(line).empty()) throw DataError("empty file '" + path.string() + "'");
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  std::size_t id_col = header.size();
  for (std::size_t c = 0; c < header.size(); ++c)
    if (header[c] == "school_id") id_col = c;
  if (id_col == header.size()) throw DataError("missing required column 'school_id' in '" + path.string() + "'");

  std::vector<std::string> names;
  for (std::size_t c = 0; c < header.size(); ++c)
    if (c != id_col) names.push_back(header[c]);
  std::vector<std::vector<double>> cols(names.size());
  std::vector<std::string> ids;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError("row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " fields, expected " +
                      std::to_string(header.size()));
    std::size_t k = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == id_col) {
        ids.push_back(detail::trim(cells[c]));
        continue;
      }
      const std::string cell = detail::trim(cells[c]);
      double v = std::numeric_limits<double>::quiet_NaN();
      if (!cell.empty() && cell != "NA") {
        const char* first = cell.data();
        if (*first == '+') ++first;
        auto res = std::from_chars(first, cell.data() + cell.size(), v);
        if (res.ec != std::errc() || res.ptr != cell.data() + cell.size())
          throw DataError("non-numeric value '" + cell + "' at row " + std::to_string(row) + ", column '" +
                          header[c] + "'");
      }
      cols[k++].push_back(v);
    }
  }
  if (ids.empty()) throw DataError("no data rows in '" + path.string() + "'");
  if (std::find(names.begin(), names.end(), outcome) == names.end())
    throw DataError("missing outcome column '" + outcome + "' in '" + path.string() + "'");
  return Dataset(std::move(ids), outcome, std::move(names), std::move(cols));
}

inline void write_dataset_csv(const Dataset& data, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "school_id";
  for (const auto& n : data.column_names()) out << ',' << detail::csv_escape(n);
  out << '\n';
  std::vector<const std::vector<double>*> cols;
  for (const auto& n : data.column_names()) cols.push_back(&data.column(n));
  for (std::size_t i = 0; i < data.rows(); ++i) {
    out << detail::csv_escape(data.school_ids()[i]);
    for (const auto* c : cols) out << ',' << format_double((*c)[i]);
    out << '\n';
  }
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// JSON helpers

namespace detail {

inline json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline json to_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    a.push_back(row);
  }
  return a;
}

inline Eigen::VectorXd vector_from_json(const json& j, const std::string& key) {
  if (!j.is_array()) throw ConfigError("'" + key + "' must be an array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError("'" + key + "' must be an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, const std::string& key) {
  if (!j.is_array()) throw ConfigError("'" + key + "' must be an array of rows");
  const auto n = static_cast<Eigen::Index>(j.size());
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n)
      throw ConfigError("'" + key + "' must be a square matrix");
    for (Eigen::Index c = 0; c < n; ++c) {
      if (!row[static_cast<std::size_t>(c)].is_number()) throw ConfigError("'" + key + "' must hold numbers");
      m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

/// Typed reads that reject unknown keys and type mismatches.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) && !obj_.at(key).is_null();
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
        if (!v.is_array()) throw ConfigError("");
        for (const auto& e : v)
          if (!e.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const ConfigError&) {
      throw ConfigError("type mismatch for key '" + key + "' in " + where_);
    } catch (const json::exception&) {
      throw ConfigError("type mismatch for key '" + key + "' in " + where_);
    }
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where_);
  }

 private:
  const json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

inline json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

inline json prior_to_json(const PriorConfig& p) {
  json j;
  j["coef_prior_variance"] = p.coef_prior_variance;
  if (p.iw_df) j["iw_df"] = *p.iw_df;
  if (p.iw_scale) j["iw_scale"] = to_json(*p.iw_scale);
  return j;
}

inline PriorConfig prior_from_json(const json& j) {
  PriorConfig p;
  ObjectReader r(j, "prior");
  r.read("coef_prior_variance", p.coef_prior_variance);
  if (r.has("iw_df")) {
    double df = 0.0;
    r.read("iw_df", df);
    p.iw_df = df;
  }
  if (r.has("iw_scale")) p.iw_scale = matrix_from_json(r.raw("iw_scale"), "iw_scale");
  r.finish();
  return p;
}

inline json spec_to_json(const ModelSpec& s) {
  json j;
  j["mean_covariates"] = s.mean_covariates;
  j["variance_covariates"] = s.variance_covariates;
  j["random_slope_covariates"] = s.random_slope_covariates;
  j["random_residual_variance"] = s.random_residual_variance;
  j["random_intercept"] = s.random_intercept;
  j["prior"] = prior_to_json(s.prior);
  return j;
}

inline ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  ObjectReader r(j, "model spec");
  r.read("mean_covariates", s.mean_covariates);
  r.read("variance_covariates", s.variance_covariates);
  r.read("random_slope_covariates", s.random_slope_covariates);
  r.read("random_residual_variance", s.random_residual_variance);
  r.read("random_intercept", s.random_intercept);
  if (r.has("prior")) s.prior = prior_from_json(r.raw("prior"));
  r.finish();
  return s;
}

inline json mcmc_to_json(const McmcConfig& c) {
  json j;
  j["chains"] = c.n_chains;
  j["burn_in"] = c.burn_in;
  j["monitor"] = c.monitor;
  j["thin"] = c.thin;
  j["seed"] = c.seed;
  j["target_accept_scalar"] = c.target_accept_scalar;
  j["target_accept_block"] = c.target_accept_block;
  j["adapt_interval"] = c.adapt_interval;
  j["init_dispersion"] = c.init_dispersion;
  j["initial_proposal_scale"] = c.initial_proposal_scale;
  j["hierarchical_centring"] = c.hierarchical_centring;
  j["empirical_proposal_covariance"] = c.empirical_proposal_covariance;
  if (c.fixed_alpha) j["fixed_alpha"] = to_json(*c.fixed_alpha);
  if (c.fixed_omega) j["fixed_omega"] = to_json(*c.fixed_omega);
  return j;
}

/// MCMC keys live at the top level of a run config; shared with the archive.
inline void read_mcmc_keys(ObjectReader& r, McmcConfig& c) {
  r.read("chains", c.n_chains);
  r.read("burn_in", c.burn_in);
  r.read("monitor", c.monitor);
  r.read("thin", c.thin);
  r.read("seed", c.seed);
  r.read("target_accept_scalar", c.target_accept_scalar);
  r.read("target_accept_block", c.target_accept_block);
  r.read("adapt_interval", c.adapt_interval);
  r.read("init_dispersion", c.init_dispersion);
  r.read("initial_proposal_scale", c.initial_proposal_scale);
  r.read("hierarchical_centring", c.hierarchical_centring);
  r.read("empirical_proposal_covariance", c.empirical_proposal_covariance);
  if (r.has("fixed_alpha")) c.fixed_alpha = vector_from_json(r.raw("fixed_alpha"), "fixed_alpha");
  if (r.has("fixed_omega")) c.fixed_omega = matrix_from_json(r.raw("fixed_omega"), "fixed_omega");
}

inline McmcConfig mcmc_from_json(const json& j) {
  McmcConfig c;
  ObjectReader r(j, "mcmc config");
  read_mcmc_keys(r, c);
  r.finish();
  return c;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Run configuration

struct ReferenceOverrides {
  std::optional<Eigen::VectorXd> w_bar;
  std::optional<Eigen::VectorXd> z_bar;
  std::optional<Eigen::MatrixXd> z_var;
  bool per_school_w = false;

  ReferenceProfile apply(const DesignSet& design) const {
    auto ref = ReferenceProfile::defaults(design);
    if (w_bar) {
      if (w_bar->size() != ref.w_bar.size()) throw DimensionError("reference w_bar has wrong length");
      ref.w_bar = *w_bar;
    }
    if (z_bar) {
      if (z_bar->size() != ref.z_bar.size()) throw DimensionError("reference z_bar has wrong length");
      ref.z_bar = *z_bar;
    }
    if (z_var) {
      if (z_var->rows() != ref.z_var.rows()) throw DimensionError("reference z_var has wrong shape");
      ref.z_var = *z_var;
    }
    ref.per_school_w = per_school_w;
    return ref;
  }

  json to_json() const {
    json j = json::object();
    if (w_bar) j["w_bar"] = detail::to_json(*w_bar);
    if (z_bar) j["z_bar"] = detail::to_json(*z_bar);
    if (z_var) j["z_var"] = detail::to_json(*z_var);
    j["per_school_w"] = per_school_w;
    return j;
  }

  static ReferenceOverrides from_json(const json& j) {
    ReferenceOverrides o;
    detail::ObjectReader r(j, "reference");
    if (r.has("w_bar")) o.w_bar = detail::vector_from_json(r.raw("w_bar"), "w_bar");
    if (r.has("z_bar")) o.z_bar = detail::vector_from_json(r.raw("z_bar"), "z_bar");
    if (r.has("z_var")) o.z_var = detail::matrix_from_json(r.raw("z_var"), "z_var");
    r.read("per_school_w", o.per_school_w);
    r.finish();
    return o;
  }
};

struct RunConfig {
  std::string input;
  std::string outcome = "y";
  ModelSpec spec;
  McmcConfig mcmc;
  ReferenceOverrides reference;
  std::string output_dir = "mels_out";
  std::vector<std::string> standardize;
};

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  detail::ObjectReader r(j, "run config");
  r.read("input", c.input);
  r.read("outcome", c.outcome);
  if (!r.has("mean_covariates")) throw ConfigError("run config needs 'mean_covariates'");
  r.read("mean_covariates", c.spec.mean_covariates);
  r.read("variance_covariates", c.spec.variance_covariates);
  r.read("random_slope_covariates", c.spec.random_slope_covariates);
  r.read("random_residual_variance", c.spec.random_residual_variance);
  r.read("random_intercept", c.spec.random_intercept);
  if (r.has("prior")) c.spec.prior = detail::prior_from_json(r.raw("prior"));
  detail::read_mcmc_keys(r, c.mcmc);
  if (r.has("threads")) r.read("threads", c.mcmc.threads);
  if (r.has("reference")) c.reference = ReferenceOverrides::from_json(r.raw("reference"));
  r.read("output_dir", c.output_dir);
  r.read("standardize", c.standardize);
  r.finish();
  if (auto errs = c.spec.structural_errors(); !errs.empty()) throw ConfigError(errs.front());
  c.mcmc.validate();
  return c;
}

inline RunConfig parse_run_config(const fs::path& path) {
  auto c = run_config_from_json(detail::load_json(path));
  if (!c.input.empty() && fs::path(c.input).is_relative()) c.input = (path.parent_path() / c.input).string();
  return c;
}

/// Data-generation settings for `mels simulate`; defaults reproduce the
/// supplement design (100 schools x 25 students).
struct SimulationConfig {
  ModelSpec spec = supplement_spec();
  TrueParameters truth = TrueParameters::supplement();
  std::vector<std::size_t> school_sizes = std::vector<std::size_t>(100, 25);
  std::uint64_t seed = 20240101;
};

inline SimulationConfig simulation_config_from_json(const json& j) {
  SimulationConfig c;
  detail::ObjectReader r(j, "simulation config");
  r.read("mean_covariates", c.spec.mean_covariates);
  r.read("variance_covariates", c.spec.variance_covariates);
  r.read("random_slope_covariates", c.spec.random_slope_covariates);
  r.read("random_residual_variance", c.spec.random_residual_variance);
  r.read("random_intercept", c.spec.random_intercept);
  if (r.has("beta")) c.truth.beta = detail::vector_from_json(r.raw("beta"), "beta");
  if (r.has("alpha")) c.truth.alpha = detail::vector_from_json(r.raw("alpha"), "alpha");
  if (r.has("omega")) c.truth.omega = detail::matrix_from_json(r.raw("omega"), "omega");
  r.read("icc", c.truth.default_icc);
  if (r.has("covariate_icc")) {
    const auto& m = r.raw("covariate_icc");
    if (!m.is_object()) throw ConfigError("'covariate_icc' must map column names to numbers");
    for (auto it = m.begin(); it != m.end(); ++it) {
      if (!it.value().is_number()) throw ConfigError("'covariate_icc' must map column names to numbers");
      c.truth.covariate_icc[it.key()] = it.value().get<double>();
    }
  }
  std::size_t schools = 100, per_school = 25;
  const bool explicit_sizes = r.has("school_sizes");
  r.read("schools", schools);
  r.read("students_per_school", per_school);
  if (explicit_sizes) {
    r.read("school_sizes", c.school_sizes);
  } else {
    c.school_sizes.assign(schools, per_school);
  }
  r.read("seed", c.seed);
  r.finish();
  return c;
}

// ---------------------------------------------------------------------------
// Chain archive

inline constexpr int kArchiveMajor = 1;
inline constexpr int kArchiveMinor = 0;

namespace detail {

inline std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void append_doubles(std::string& buf, const Eigen::MatrixXd& m) {
  static_assert(std::endian::native == std::endian::little, "archive writer assumes little-endian doubles");
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      buf.append(bytes, sizeof v);
    }
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

/// With `data`, the analysis dataset is stored alongside as data.csv.
inline void write_chain_archive(const ChainSet& set, const fs::path& dir, const Dataset* data = nullptr) {
  fs::create_directories(dir);
  std::string blob;
  json chains = json::array();
  for (const auto& ch : set.chains) {
    detail::append_doubles(blob, ch.scalars);
    detail::append_doubles(blob, ch.effects);
    json acc = json::array();
    for (const auto& a : ch.acceptance) acc.push_back({{"block", a.block}, {"proposed", a.proposed}, {"accepted", a.accepted}});
    chains.push_back({{"seed", ch.seed},
                      {"draws", ch.scalars.rows()},
                      {"seconds", ch.seconds},
                      {"final_scales", ch.final_scales},
                      {"acceptance", acc}});
  }
  json meta;
  meta["format"] = "mels-chain-archive";
  meta["version"] = std::to_string(kArchiveMajor) + "." + std::to_string(kArchiveMinor);
  meta["spec"] = detail::spec_to_json(set.spec);
  meta["mcmc"] = detail::mcmc_to_json(set.config);
  meta["parameter_names"] = set.parameter_names;
  meta["parameter_fixed"] = set.parameter_fixed;
  meta["school_labels"] = set.school_labels;
  meta["x_names"] = set.x_names;
  meta["w_names"] = set.w_names;
  meta["z_names"] = set.z_names;
  meta["dims"] = {{"p", set.p}, {"q", set.q}, {"r", set.r}, {"d", set.d}};
  meta["chains"] = chains;
  meta["data_file"] = "draws.bin";
  meta["bytes"] = blob.size();
  meta["checksum_fnv1a64"] = detail::hex64(detail::fnv1a(blob.data(), blob.size()));
  if (data) {
    meta["outcome"] = data->outcome_name();
    write_dataset_csv(*data, dir / "data.csv");
  }
  {
    std::ofstream out(dir / "draws.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot write '" + (dir / "draws.bin").string() + "'");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw ArchiveError("failed writing draws.bin");
  }
  std::ofstream out(dir / "meta.json", std::ios::trunc);
  if (!out) throw ArchiveError("cannot write meta.json");
  out << meta.dump(2) << '\n';
}

inline ChainSet read_chain_archive(const fs::path& dir) {
  json meta;
  {
    std::ifstream in(dir / "meta.json");
    if (!in) throw ArchiveError("missing meta.json in '" + dir.string() + "'");
    try {
      meta = json::parse(in);
    } catch (const json::exception& e) {
      throw ArchiveError(std::string("corrupt meta.json: ") + e.what());
    }
  }
  try {
    if (meta.at("format").get<std::string>() != "mels-chain-archive") throw ArchiveError("not a chain archive");
    const auto version = meta.at("version").get<std::string>();
    const int major = std::stoi(version.substr(0, version.find('.')));
    if (major > kArchiveMajor)
      throw ArchiveError("archive version " + version + " is newer than supported major version " +
                         std::to_string(kArchiveMajor));

    ChainSet set;
    set.spec = detail::spec_from_json(meta.at("spec"));
    set.config = detail::mcmc_from_json(meta.at("mcmc"));
    set.parameter_names = meta.at("parameter_names").get<std::vector<std::string>>();
    set.parameter_fixed = meta.at("parameter_fixed").get<std::vector<bool>>();
    set.school_labels = meta.at("school_labels").get<std::vector<std::string>>();
    set.x_names = meta.at("x_names").get<std::vector<std::string>>();
    set.w_names = meta.at("w_names").get<std::vector<std::string>>();
    set.z_names = meta.at("z_names").get<std::vector<std::string>>();
    const auto& dims = meta.at("dims");
    set.p = dims.at("p").get<Eigen::Index>();
    set.q = dims.at("q").get<Eigen::Index>();
    set.r = dims.at("r").get<Eigen::Index>();
    set.d = dims.at("d").get<Eigen::Index>();

    std::ifstream in(dir / meta.at("data_file").get<std::string>(), std::ios::binary);
    if (!in) throw ArchiveError("missing draws file in '" + dir.string() + "'");
    const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (blob.size() != meta.at("bytes").get<std::size_t>())
      throw ArchiveError("draws file is truncated or has trailing bytes");
    if (detail::hex64(detail::fnv1a(blob.data(), blob.size())) != meta.at("checksum_fnv1a64").get<std::string>())
      throw ArchiveError("draws file checksum mismatch");

    const Eigen::Index K = static_cast<Eigen::Index>(set.parameter_names.size());
    const Eigen::Index E = static_cast<Eigen::Index>(set.school_labels.size()) * set.d;
    std::size_t offset = 0;
    auto take = [&](Eigen::Index rows, Eigen::Index cols) {
      Eigen::MatrixXd m(rows, cols);
      const std::size_t need = static_cast<std::size_t>(rows * cols) * sizeof(double);
      if (offset + need > blob.size()) throw ArchiveError("draws file is truncated");
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
          double v;
          std::memcpy(&v, blob.data() + offset, sizeof v);
          offset += sizeof v;
          m(i, j) = v;
        }
      return m;
    };
    for (const auto& cj : meta.at("chains")) {
      Chain ch;
      ch.seed = cj.at("seed").get<std::uint64_t>();
      ch.seconds = cj.at("seconds").get<double>();
      ch.final_scales = cj.at("final_scales").get<std::vector<double>>();
      for (const auto& a : cj.at("acceptance"))
        ch.acceptance.push_back(
            {a.at("block").get<std::string>(), a.at("proposed").get<std::uint64_t>(), a.at("accepted").get<std::uint64_t>()});
      const auto draws = cj.at("draws").get<Eigen::Index>();
      ch.scalars = take(draws, K);
      ch.effects = take(draws, E);
      set.chains.push_back(std::move(ch));
    }
    if (offset != blob.size()) throw ArchiveError("draws file has trailing bytes");
    return set;
  } catch (const json::exception& e) {
    throw ArchiveError(std::string("corrupt archive metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw ArchiveError(std::string("corrupt archive metadata: ") + e.what());
  }
}

/// The dataset stored with an archive, or nullopt when none was stored.
inline std::optional<Dataset> read_archive_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "data.csv")) return std::nullopt;
  std::ifstream in(dir / "meta.json");
  if (!in) throw ArchiveError("missing meta.json in '" + dir.string() + "'");
  std::string outcome = "y";
  try {
    const auto meta = json::parse(in);
    if (meta.contains("outcome")) outcome = meta.at("outcome").get<std::string>();
  } catch (const json::exception& e) {
    throw ArchiveError(std::string("corrupt meta.json: ") + e.what());
  }
  return read_dataset_csv(dir / "data.csv", outcome);
}

// ---------------------------------------------------------------------------
// Output tables

namespace detail {

class CsvWriter {
 public:
  explicit CsvWriter(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw Error("cannot write '" + path.string() + "'");
  }
  ~CsvWriter() { out_.flush(); }

  CsvWriter& row(std::initializer_list<std::string> cells) { return row(std::vector<std::string>(cells)); }

  CsvWriter& row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << csv_escape(cells[i].empty() ? std::string(kMissing) : cells[i]);
    }
    out_ << '\n';
    if (!out_) throw Error("failed writing '" + path_.string() + "'");
    return *this;
  }

 private:
  std::ofstream out_;
  fs::path path_;
};

inline std::string num(double v) { return format_double(v); }
inline std::string num(std::size_t v) { return std::to_string(v); }

}  // namespace detail

/// Posterior summary per parameter plus derived correlations of omega.
inline void write_summary_csv(const ChainSet& set, const DiagnosticsReport& rep, const fs::path& path) {
  using detail::num;
  detail::CsvWriter w(path);
  w.row({"parameter", "mean", "sd", "mcse", "median", "lo95", "hi95"});
  for (const auto& p : rep.parameters) w.row({p.name, num(p.mean), num(p.sd), num(p.mcse), num(p.median), num(p.lo), num(p.hi)});
  for (Eigen::Index i = 1; i < set.d; ++i)
    for (Eigen::Index j = 0; j < i; ++j) {
      const auto kij = set.parameter_index("omega_" + std::to_string(i + 1) + "_" + std::to_string(j + 1));
      const auto kii = set.parameter_index("omega_" + std::to_string(i + 1) + "_" + std::to_string(i + 1));
      const auto kjj = set.parameter_index("omega_" + std::to_string(j + 1) + "_" + std::to_string(j + 1));
      std::vector<double> corr;
      for (const auto& ch : set.chains)
        for (Eigen::Index t = 0; t < ch.scalars.rows(); ++t)
          corr.push_back(ch.scalars(t, static_cast<Eigen::Index>(kij)) /
                         std::sqrt(ch.scalars(t, static_cast<Eigen::Index>(kii)) * ch.scalars(t, static_cast<Eigen::Index>(kjj))));
      const auto s = summarize_draws(corr);
      w.row({"corr_" + std::to_string(i + 1) + "_" + std::to_string(j + 1), num(s.mean), num(s.sd), kMissing,
             num(s.median), num(s.lo), num(s.hi)});
    }
}

inline void write_diagnostics_csv(const DiagnosticsReport& rep, const fs::path& dir) {
  using detail::num;
  {
    detail::CsvWriter w(dir / "diagnostics.csv");
    w.row({"parameter", "rhat", "ess", "mcse", "acf_lag1", "acf_lag5", "acf_lag10", "acf_lag50"});
    for (const auto& p : rep.parameters) {
      auto acf = [&](std::size_t lag) { return p.autocorr.size() >= lag ? num(p.autocorr[lag - 1]) : std::string(kMissing); };
      w.row({p.name, num(p.rhat), num(p.ess), num(p.mcse), acf(1), acf(5), acf(10), acf(50)});
    }
  }
  {
    detail::CsvWriter w(dir / "acceptance.csv");
    w.row({"block", "proposed", "accepted", "rate"});
    for (const auto& a : rep.acceptance)
      w.row({a.block, std::to_string(a.proposed), std::to_string(a.accepted), num(a.rate())});
  }
  if (rep.has_dic) {
    detail::CsvWriter w(dir / "dic.csv");
    w.row({"statistic", "value", "deviance"});
    w.row({"Dbar", num(rep.dic.dbar), "conditional"});
    w.row({"D_at_posterior_mean", num(rep.dic.d_at_mean), "conditional"});
    w.row({"pD", num(rep.dic.pd), "conditional"});
    w.row({"DIC", num(rep.dic.dic), "conditional"});
  }
}

/// schools.csv, caterpillar_means.csv, caterpillar_variances.csv,
/// scatter_mean_variance.csv, residuals.csv and report.csv.
inline void write_school_tables(const ChainSet& set, const DesignSet& design, const ReferenceProfile& reference,
                                const fs::path& dir) {
  using detail::num;
  const auto schools = school_summaries(set, design, reference);
  const bool has_v = set.spec.random_residual_variance;
  auto stat_cols = [](const std::string& stem) {
    return std::vector<std::string>{stem + "_mean", stem + "_sd", stem + "_median", stem + "_lo95", stem + "_hi95"};
  };
  auto stat_vals = [](const EffectSummary& e) {
    return std::vector<std::string>{num(e.mean), num(e.sd), num(e.median), num(e.lo), num(e.hi)};
  };
  {
    detail::CsvWriter w(dir / "schools.csv");
    std::vector<std::string> header{"school", "n"};
    for (const auto& z : set.z_names) {
      const auto c = stat_cols("u" + z);
      header.insert(header.end(), c.begin(), c.end());
    }
    for (const auto& stem : {std::string("v"), std::string("sigma2e")}) {
      const auto c = stat_cols(stem);
      header.insert(header.end(), c.begin(), c.end());
    }
    header.push_back("mean_rank");
    header.push_back("variance_rank");
    w.row(header);
    for (const auto& s : schools) {
      std::vector<std::string> row{s.school, num(s.n)};
      for (const auto& e : s.mean_effects) {
        const auto v = stat_vals(e);
        row.insert(row.end(), v.begin(), v.end());
      }
      for (const auto& opt : {s.variance_effect, s.school_variance}) {
        const auto v = opt ? stat_vals(*opt) : std::vector<std::string>(5, kMissing);
        row.insert(row.end(), v.begin(), v.end());
      }
      row.push_back(set.r > 0 ? num(s.mean_rank) : std::string(kMissing));
      row.push_back(s.variance_rank ? num(*s.variance_rank) : std::string(kMissing));
      w.row(row);
    }
  }
  {
    detail::CsvWriter w(dir / "caterpillar_means.csv");
    w.row({"rank", "school", "mean", "lo95", "hi95", "n"});
    if (set.r > 0) {
      std::vector<const SchoolEffectSummary*> order(schools.size());
      for (const auto& s : schools) order[s.mean_rank - 1] = &s;
      for (const auto* s : order) {
        const auto& e = s->mean_effects.front();
        w.row({num(s->mean_rank), s->school, num(e.mean), num(e.lo), num(e.hi), num(s->n)});
      }
    }
  }
  {
    detail::CsvWriter w(dir / "caterpillar_variances.csv");
    w.row({"rank", "school", "mean", "lo95", "hi95", "n"});
    if (has_v) {
      std::vector<const SchoolEffectSummary*> order(schools.size());
      for (const auto& s : schools) order[*s.variance_rank - 1] = &s;
      for (const auto* s : order) {
        const auto& e = *s->school_variance;
        w.row({num(*s->variance_rank), s->school, num(e.mean), num(e.lo), num(e.hi), num(s->n)});
      }
    }
  }
  {
    detail::CsvWriter w(dir / "scatter_mean_variance.csv");
    w.row({"school", "u_mean", "v_mean", "sigma2e_mean"});
    for (const auto& s : schools)
      w.row({s.school, set.r > 0 ? num(s.mean_effects.front().mean) : std::string(kMissing),
             s.variance_effect ? num(s.variance_effect->mean) : std::string(kMissing),
             s.school_variance ? num(s.school_variance->mean) : std::string(kMissing)});
  }
  {
    const auto res = export_residuals_and_effects(set, design);
    detail::CsvWriter w(dir / "residuals.csv");
    w.row({"school", "row", "y", "fitted", "residual"});
    for (const auto& s : res.students) w.row({s.school, num(s.row + 1), num(s.y), num(s.fitted), num(s.residual)});
  }
  {
    const auto rep = population_report(set, reference, schools);
    detail::CsvWriter w(dir / "report.csv");
    w.row({"quantity", "value"});
    auto opt = [](const auto& o, auto f) { return o ? num(f(*o)) : std::string(kMissing); };
    w.row({"beta0", num(rep.beta0)});
    w.row({"sigma2_u", num(rep.sigma_u2)});
    w.row({"eta0", num(rep.eta0)});
    w.row({"sigma2_v", num(rep.sigma_v2)});
    w.row({"sigma2_e", num(rep.sigma_e2)});
    w.row({"vpc", num(rep.vpc)});
    w.row({"idr_mean_lo", num(rep.idr_mean.first)});
    w.row({"idr_mean_hi", num(rep.idr_mean.second)});
    w.row({"idr_variance_lo", opt(rep.idr_variance, [](auto p) { return p.first; })});
    w.row({"idr_variance_hi", opt(rep.idr_variance, [](auto p) { return p.second; })});
    w.row({"spread_at_sigma2_e", num(rep.spread)});
    w.row({"spread_least_variable", opt(rep.spread_at_idr, [](auto p) { return p.first; })});
    w.row({"spread_most_variable", opt(rep.spread_at_idr, [](auto p) { return p.second; })});
    w.row({"separable_means", set.r > 0 ? num(rep.separable_means) : std::string(kMissing)});
    w.row({"separable_variances", rep.separable_variances ? num(*rep.separable_variances) : std::string(kMissing)});
    w.row({"schools", num(set.schools())});
    w.row({"corr_mean_variance", opt(rep.mean_variance_correlation, [](double v) { return v; })});
    w.row({"interaction_idr_lo", opt(rep.interaction_idr, [](auto p) { return p.first; })});
    w.row({"interaction_idr_hi", opt(rep.interaction_idr, [](auto p) { return p.second; })});
    w.row({"residual_idr_lo", opt(rep.residual_idr, [](auto p) { return p.first; })});
    w.row({"residual_idr_hi", opt(rep.residual_idr, [](auto p) { return p.second; })});
  }
}

}  // namespace mels
