#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace kcal {

// Row-major so that one sample is one contiguous row, matching the on-disk layout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

using Labels = std::vector<int>;

// n x K matrix whose rows lie on the probability simplex.
using ProbMatrix = Matrix;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed container (bad magic, unsupported version).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Payload length disagrees with the header.
class SizeMismatchError : public Error {
 public:
  using Error::Error;
};

/// Data violates a documented invariant (non-finite values, out-of-range labels).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Caller passed an argument outside the accepted domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A numerical routine produced a non-finite value.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Writes a one-line warning to stderr. Library code never aborts on warnings.
void warn(const std::string& message);

// Counts warnings emitted since process start; tests use it to observe the warning paths.
std::size_t warning_count();

}  // namespace kcal
