#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <random>

#include "mels/error.hpp"
#include "mels/likelihood.hpp"

namespace mels {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for substream `stream` of `master`; distinct streams give
/// statistically independent generators.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(master ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

/// Mersenne Twister seeded through splitmix64 so that nearby seeds do not
/// produce correlated streams.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed) {
    std::array<std::uint32_t, 8> words{};
    std::uint64_t s = seed;
    for (std::size_t i = 0; i < words.size(); i += 2) {
      s = splitmix64(s);
      words[i] = static_cast<std::uint32_t>(s);
      words[i + 1] = static_cast<std::uint32_t>(s >> 32);
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  Rng(std::uint64_t master, std::uint64_t stream) : Rng(derive_seed(master, stream)) {}

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  double normal() { return normal_(engine_); }
  double uniform() { return std::generate_canonical<double, 53>(engine_); }
  double chi_squared(double df) { return std::chi_squared_distribution<double>(df)(engine_); }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = normal();
    return z;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Draw from MVN(0, cov).
inline Eigen::VectorXd draw_mvn(const Eigen::MatrixXd& cov, Rng& rng) {
  const auto llt = factor_covariance(cov);
  return llt.matrixL() * rng.normal_vector(cov.rows());
}

/// Inverse-Wishart draw via the Bartlett decomposition of
/// Wishart(df, scale^{-1}).
inline Eigen::MatrixXd draw_inverse_wishart(double df, const Eigen::MatrixXd& scale, Rng& rng) {
  const Eigen::Index d = scale.rows();
  if (scale.cols() != d) throw DimensionError("inverse-Wishart scale must be square");
  if (!(df > static_cast<double>(d) - 1.0)) throw ConfigError("inverse-Wishart df must exceed dim - 1");
  const auto scale_llt = factor_covariance(scale);
  // W = L A A' L' with L L' = scale^{-1}; then W^{-1} = L^{-T} (A A')^{-1} L^{-1}.
  const Eigen::MatrixXd precision = scale_llt.solve(Eigen::MatrixXd::Identity(d, d));
  const Eigen::MatrixXd L = factor_covariance(0.5 * (precision + precision.transpose())).matrixL();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    A(i, i) = std::sqrt(rng.chi_squared(df - static_cast<double>(i)));
    for (Eigen::Index k = 0; k < i; ++k) A(i, k) = rng.normal();
  }
  const Eigen::MatrixXd LA = L * A;
  // (LA)^{-1} is lower triangular; invert by triangular solve.
  const Eigen::MatrixXd inv = LA.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(d, d));
  Eigen::MatrixXd out = inv.transpose() * inv;
  return 0.5 * (out + out.transpose());
}

}  // namespace mels
