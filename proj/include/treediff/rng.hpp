#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>

namespace treediff {

/// Seeded random source. Every stochastic operation in the library draws from
/// an Rng passed in explicitly; there is no global generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  double normal();
  double uniform();
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p);

  template <typename S>
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<S>(normal());
    return m;
  }

  /// Independent child stream; depends only on (seed, stream), not on how many
  /// draws this generator has made.
  Rng split(std::uint64_t stream) const;

  std::mt19937_64& engine() { return engine_; }

  /// Full engine state as text, and its inverse.
  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Entry point for reproducible runs: one root generator per seed.
Rng seed_all(std::uint64_t seed);

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace treediff
