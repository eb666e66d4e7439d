#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace infossm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Error taxonomy
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
public:
  using Error::Error;
};

// Same failure class as ShapeMismatch, kept as a distinct name for call sites
// that validate user-facing vector/matrix dimensions.
class DimensionMismatch : public ShapeMismatch {
public:
  using ShapeMismatch::ShapeMismatch;
};

class NotPositiveDefinite : public Error {
public:
  using Error::Error;
};

class GraphError : public Error {
public:
  using Error::Error;
};

class IndexOutOfRange : public Error {
public:
  using Error::Error;
};

class NonFiniteObjective : public Error {
public:
  using Error::Error;
};

class ZeroWeights : public Error {
public:
  using Error::Error;
};

class DegenerateDistribution : public Error {
public:
  using Error::Error;
};

class InvalidManeuverSpec : public Error {
public:
  using Error::Error;
};

class LengthMismatch : public Error {
public:
  using Error::Error;
};

class ValidationError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic random streams
// ---------------------------------------------------------------------------

// splitmix64; used to derive independent sub-streams from one master seed so
// results do not depend on evaluation schedule.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Independent stream for a tagged sub-task (epoch, trajectory, ...).
  Rng fork(std::uint64_t tag) const { return Rng(mix_seed(seed_, tag)); }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }  // in [0, 1)

  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return std::uniform_int_distribution<std::int64_t>(0, n - 1)(engine_);
  }

  Matrix normal_matrix(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = normal();
    return m;
  }

  Matrix uniform_matrix(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = uniform();
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// ---------------------------------------------------------------------------
// Observation data
// ---------------------------------------------------------------------------

// N observation sequences y_{1:T,n}. Ground-truth labels, when present, exist
// for evaluation only and are never fed to training.
struct TrajectoryBatch {
  std::vector<Matrix> trajectories;  // each T x D
  Vector times;                      // shared time stamps, length T
  std::vector<std::string> units;    // one per observation dimension

  std::vector<int> labels;           // optional per-trajectory maneuver id
  std::vector<Matrix> true_states;   // optional per-trajectory T x S states

  Index size() const { return static_cast<Index>(trajectories.size()); }
  bool has_labels() const { return !labels.empty(); }

  Index t_len() const { return trajectories.empty() ? 0 : trajectories.front().rows(); }
  Index obs_dim() const { return trajectories.empty() ? 0 : trajectories.front().cols(); }

  void validate() const {
    if (trajectories.empty()) throw ValidationError("TrajectoryBatch: empty batch");
    for (const Matrix& y : trajectories)
      if (y.rows() != t_len() || y.cols() != obs_dim())
        throw LengthMismatch("TrajectoryBatch: trajectories differ in shape");
    if (times.size() != 0 && times.size() != t_len())
      throw LengthMismatch("TrajectoryBatch: time stamps differ from trajectory length");
    if (!labels.empty() && static_cast<Index>(labels.size()) != size())
      throw LengthMismatch("TrajectoryBatch: label count differs from batch size");
    if (!true_states.empty() && static_cast<Index>(true_states.size()) != size())
      throw LengthMismatch("TrajectoryBatch: state count differs from batch size");
  }
};

}  // namespace infossm
