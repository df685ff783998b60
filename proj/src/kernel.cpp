#include "kcal/kernel.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace kcal {

void KernelSpec::validate() const {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw ArgumentError("bandwidth must be positive and finite, got " + std::to_string(bandwidth));
  }
}

Matrix pairwise_sq_dist(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ArgumentError("pairwise_sq_dist: column mismatch (" + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.cols()) + ")");
  }
  Matrix out(a.rows(), b.rows());
  const Eigen::Index d = a.cols();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i).data();
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      const double* bj = b.row(j).data();
      double acc = 0.0;
      for (Eigen::Index c = 0; c < d; ++c) {
        const double diff = ai[c] - bj[c];
        acc += diff * diff;
      }
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix log_kernel_weights(const Matrix& sq_dists, const KernelSpec& spec) {
  spec.validate();
  const double inv_two_b2 = 1.0 / (2.0 * spec.bandwidth * spec.bandwidth);
  Matrix out(sq_dists.rows(), sq_dists.cols());
  for (Eigen::Index i = 0; i < sq_dists.rows(); ++i) {
    for (Eigen::Index j = 0; j < sq_dists.cols(); ++j) {
      const double s = sq_dists(i, j);
      if (s < 0.0) throw ArgumentError("log_kernel_weights: negative squared distance");
      out(i, j) = log_kernel_weight(s, inv_two_b2);
    }
  }
  return out;
}

double log_kernel_normalizer(const KernelSpec& spec, int dim) {
  spec.validate();
  return -0.5 * dim * std::log(2.0 * std::numbers::pi) - dim * std::log(spec.bandwidth);
}

}  // namespace kcal
