#pragma once

#include "kcal/common.hpp"
#include "kcal/dataio.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace kcal {

/// Isotropic Gaussian mixture with shared variance: the ground truth for synthetic runs.
struct GmmOracle {
  Matrix means;  // K x h
  double sigma = 1.0;
  std::vector<double> priors;
  std::uint64_t seed = 0;

  int num_classes() const { return static_cast<int>(means.rows()); }
  int dim() const { return static_cast<int>(means.cols()); }
  void validate() const;
};

/// Means drawn from seed as random Gaussian directions, centred, then scaled so the
/// closest pair sits exactly `separation` apart. Separation 0 puts every mean at the
/// origin. Empty priors mean uniform.
GmmOracle make_gmm_oracle(int num_classes, int dim, double separation, double sigma,
                          std::vector<double> priors, std::uint64_t seed);

// n samples: label ~ priors, then x ~ N(mean_label, sigma^2 I).
EmbeddingDataset sample_gmm(const GmmOracle& oracle, std::size_t n, std::uint64_t seed);

// Exactly per_class[k] samples of class k, grouped by class.
EmbeddingDataset sample_gmm_per_class(const GmmOracle& oracle,
                                      const std::vector<std::size_t>& per_class,
                                      std::uint64_t seed);

/// make_gmm_oracle followed by sample_gmm, both driven by seed.
std::pair<EmbeddingDataset, GmmOracle> generate_gmm(int num_classes, int dim, double separation,
                                                    double sigma, std::vector<double> priors,
                                                    std::size_t n, std::uint64_t seed);

/// Exact Bayes posterior P(Y = k | x), evaluated in log space.
ProbMatrix oracle_posterior(const GmmOracle& oracle, const Matrix& x);

/// Mean absolute gap between predicted and true posteriors over all samples and classes.
double full_calibration_error(const ProbMatrix& predicted, const ProbMatrix& truth);

std::string oracle_to_json(const GmmOracle& oracle);
GmmOracle oracle_from_json(const std::string& text);

}  // namespace kcal
