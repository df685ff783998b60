#pragma once

#include "kcal/common.hpp"

namespace kcal {

enum class KernelFamily { kRbf };

/// Mother kernel plus bandwidth. Only RBF ships today.
struct KernelSpec {
  KernelFamily family = KernelFamily::kRbf;
  double bandwidth = 1.0;

  void validate() const;
};

/// (i, j) = squared Euclidean distance between row i of a and row j of b.
/// Computed by direct differences, so identical rows give exact zeros.
Matrix pairwise_sq_dist(const Matrix& a, const Matrix& b);

/// Log kernel weight for one squared distance. For RBF this is -sq_dist / (2 b^2);
/// the normalizing constant is omitted because every consumer takes a ratio.
inline double log_kernel_weight(double sq_dist, double inv_two_b2) { return -sq_dist * inv_two_b2; }

Matrix log_kernel_weights(const Matrix& sq_dists, const KernelSpec& spec);

// log of the normalizing constant (2 pi)^(-d/2) b^(-d) dropped by log_kernel_weights;
// needed only where a true density value is wanted.
double log_kernel_normalizer(const KernelSpec& spec, int dim);

}  // namespace kcal
