#pragma once

#include "kcal/common.hpp"

#include <string>
#include <vector>

namespace kcal {

enum class BinningKind {
  kAdaptive,  // equal mass: sorted samples split into contiguous groups differing in size by <= 1
  kStatic,    // equal width: [j/n, (j+1)/n), the last bin closed at 1
};

struct BinningScheme {
  BinningKind kind = BinningKind::kAdaptive;
  int n_bins = 20;
};

std::string to_string(BinningKind kind);
BinningKind binning_kind_from_string(const std::string& name);

// Index of the largest entry; ties go to the lowest index.
int argmax_row(const ProbMatrix& probs, Eigen::Index row);

// Class-wise filter threshold: max(0.01, 1/K).
double classwise_threshold(int num_classes);

double accuracy(const ProbMatrix& probs, const Labels& labels);

/// Confidence ECE: samples binned by their top probability, gap = |mean confidence -
/// top-class accuracy|, weighted by bin mass.
double ece(const ProbMatrix& probs, const Labels& labels, const BinningScheme& scheme = {});

/// Class-wise ECE. For each class, only samples with p_k >= max(0.01, 1/K) are binned;
/// per-class errors are averaged without weights over classes that keep any sample.
double cece(const ProbMatrix& probs, const Labels& labels, const BinningScheme& scheme = {});

double brier_top(const ProbMatrix& probs, const Labels& labels);

// (1 / (n K)) sum_i sum_k (p_ik - [y_i = k])^2
double brier_multi(const ProbMatrix& probs, const Labels& labels);

// -(1/n) sum_i log max(p_{i, y_i}, 1e-12)
double nll(const ProbMatrix& probs, const Labels& labels);

struct ReliabilityBin {
  double mean_predicted = 0.0;
  double frequency = 0.0;
  std::size_t count = 0;
};

struct ReliabilityAxis {
  // class_index < 0 selects the confidence (top-class) axis.
  int class_index = -1;

  static ReliabilityAxis confidence() { return {}; }
  static ReliabilityAxis for_class(int k) { return {k}; }
  bool is_confidence() const { return class_index < 0; }
  std::string describe() const;
};

struct ReliabilityData {
  ReliabilityAxis axis;
  BinningScheme scheme;
  std::size_t min_count = 15;
  std::size_t total = 0;  // samples binned before the min_count filter
  std::vector<ReliabilityBin> bins;
};

/// Reliability-diagram bins; empty bins and bins with fewer than min_count samples are
/// dropped, the rest sorted by mean predicted probability.
ReliabilityData reliability_data(const ProbMatrix& probs, const Labels& labels,
                                 const ReliabilityAxis& axis, const BinningScheme& scheme = {},
                                 std::size_t min_count = 15);

// Rows sum to 1 within tol and every entry lies in [0, 1]; throws ValidationError otherwise.
void validate_probabilities(const ProbMatrix& probs, double tol = 1e-9);

}  // namespace kcal
