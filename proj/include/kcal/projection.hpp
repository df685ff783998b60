#pragma once

#include "kcal/common.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>

namespace kcal {

/// Shape of the learnable map from embedding space (h) to metric space (d).
enum class Architecture {
  kMlp2Skip,  // relu(x W1 + b1) W2 + b2 + x Ws
  kLinear,    // x W1 + b1
  kIdentity,  // x, untouched
};

std::string to_string(Architecture arch);
Architecture architecture_from_string(const std::string& name);

inline constexpr double kNormEps = 1e-5;

/// Parameters of the projection, including the frozen input-normalization statistics.
///
/// norm_var stores the population variance plus kNormEps, so forward passes divide by
/// sqrt(norm_var) directly. Tensors unused by the architecture are empty.
struct ProjectionParams {
  Architecture arch = Architecture::kIdentity;
  int input_dim = 0;   // h
  int output_dim = 0;  // d
  double eps = kNormEps;

  Vector norm_mean;
  Vector norm_var;
  Matrix w1;  // h x d
  Vector b1;  // d
  Matrix w2;  // d x d
  Vector b2;  // d
  Matrix ws;  // h x d

  void validate() const;
};

/// Gradient with the same layout as the trainable part of ProjectionParams.
struct ProjectionGrads {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Matrix ws;

  static ProjectionGrads zeros_like(const ProjectionParams& params);
  ProjectionGrads& operator+=(const ProjectionGrads& other);
};

/// Intermediates of a forward pass, consumed by project_backward.
struct ForwardCache {
  Matrix normalized;  // x~
  Matrix hidden_pre;  // x~ W1 + b1 (MLP2 only)
  Matrix hidden;      // relu(hidden_pre)
};

// d = min(h, 32) unless overridden.
int default_output_dim(int input_dim);

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out)) per tensor), zero biases,
/// normalization stats mean 0 / var 1. Deterministic in seed.
ProjectionParams init_projection(int input_dim, int output_dim, Architecture arch,
                                 std::uint64_t seed);

/// Sets norm_mean / norm_var to the column statistics of x (population variance + eps).
ProjectionParams freeze_normalization(ProjectionParams params, const Matrix& x);

Matrix normalize_inputs(const ProjectionParams& params, const Matrix& x);

Matrix project(const ProjectionParams& params, const Matrix& x);
Matrix project_forward(const ProjectionParams& params, const Matrix& x, ForwardCache& cache);

/// Gradients of sum_ij dz_ij * z_ij with respect to every trainable tensor.
/// The relu subgradient at 0 is 0.
ProjectionGrads project_backward(const ProjectionParams& params, const ForwardCache& cache,
                                 const Matrix& dz);

// params <- params - learning_rate * grads
void apply_sgd(ProjectionParams& params, const ProjectionGrads& grads, double learning_rate);

// Trainable tensors flattened in serialization order; used by gradient checks.
std::vector<double*> trainable_values(ProjectionParams& params);
std::vector<const double*> gradient_values(const ProjectionGrads& grads,
                                           const ProjectionParams& params);

/// Binary layout: "KPRJ", u32 version 1, u64 header length, JSON header
/// {arch, h, d, eps, tensors:[...]}, then one KEMB-framed float32 block per listed tensor
/// in the order norm_mean, norm_var, w1, b1, w2, b2, ws (vectors stored as 1 x len).
void write_projection(std::ostream& out, const ProjectionParams& params);
ProjectionParams read_projection(std::istream& in, const std::string& source = "<stream>");
void write_projection_file(const std::string& path, const ProjectionParams& params);
ProjectionParams read_projection_file(const std::string& path);

}  // namespace kcal
