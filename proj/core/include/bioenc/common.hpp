#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bioenc {

// Row-major so that row t of a (T x D) matrix is the feature vector of frame t.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

// Bad input data: unreadable files, malformed manifests, shape mismatches in
// user-provided artifacts. Maps to CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or flag values. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values during optimization. Maps to CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// SplitMix64-seeded xoshiro256** generator. The standard distributions are
/// implementation-defined, so all sampling goes through the helpers here to
/// keep runs bit-reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::uint64_t s_[4];
};

/// Derives an independent stream seed from a base seed and a salt.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

/// Rounds every entry to the nearest float32. Parameters are kept
/// f32-representable so checkpoints round-trip exactly.
void round_to_f32(Mat& m);

bool all_finite(const Mat& m);

}  // namespace bioenc
