#include "kcal/metrics.hpp"

#include "kcal/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kcal {

namespace {

struct BinAccumulator {
  double sum_predicted = 0.0;
  double sum_outcome = 0.0;
  std::size_t count = 0;
};

void check_shapes(const ProbMatrix& probs, const Labels& labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) {
    throw ArgumentError("probability rows (" + std::to_string(probs.rows()) +
                        ") and labels (" + std::to_string(labels.size()) + ") disagree");
  }
  for (int y : labels) {
    if (y < 0 || y >= probs.cols()) {
      throw ArgumentError("label " + std::to_string(y) + " outside [0, " +
                          std::to_string(probs.cols()) + ")");
    }
  }
}

// Groups (predicted, outcome) pairs into bins under the scheme.
std::vector<BinAccumulator> bin_values(const std::vector<double>& predicted,
                                       const std::vector<double>& outcome,
                                       const BinningScheme& scheme) {
  if (scheme.n_bins < 1) throw ArgumentError("n_bins must be >= 1");
  const auto n_bins = static_cast<std::size_t>(scheme.n_bins);
  std::vector<BinAccumulator> bins(n_bins);
  const std::size_t n = predicted.size();
  if (scheme.kind == BinningKind::kStatic) {
    for (std::size_t i = 0; i < n; ++i) {
      const double v = predicted[i];
      auto bin = static_cast<std::size_t>(std::max(0.0, std::floor(v * static_cast<double>(n_bins))));
      bin = std::min(bin, n_bins - 1);
      bins[bin].sum_predicted += v;
      bins[bin].sum_outcome += outcome[i];
      ++bins[bin].count;
    }
    return bins;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&predicted](std::size_t a, std::size_t b) { return predicted[a] < predicted[b]; });
  const std::size_t base = n / n_bins;
  const std::size_t extra = n % n_bins;
  std::size_t pos = 0;
  for (std::size_t bin = 0; bin < n_bins; ++bin) {
    const std::size_t size = base + (bin < extra ? 1 : 0);
    for (std::size_t t = 0; t < size; ++t, ++pos) {
      const std::size_t i = order[pos];
      bins[bin].sum_predicted += predicted[i];
      bins[bin].sum_outcome += outcome[i];
      ++bins[bin].count;
    }
  }
  return bins;
}

double binned_error(const std::vector<BinAccumulator>& bins, std::size_t total) {
  if (total == 0) return 0.0;
  double err = 0.0;
  for (const auto& bin : bins) {
    if (bin.count == 0) continue;
    const double c = static_cast<double>(bin.count);
    err += (c / static_cast<double>(total)) *
           std::abs(bin.sum_predicted / c - bin.sum_outcome / c);
  }
  return err;
}

void confidence_pairs(const ProbMatrix& probs, const Labels& labels, std::vector<double>& predicted,
                      std::vector<double>& outcome) {
  predicted.resize(labels.size());
  outcome.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int top = argmax_row(probs, static_cast<Eigen::Index>(i));
    predicted[i] = probs(static_cast<Eigen::Index>(i), top);
    outcome[i] = top == labels[i] ? 1.0 : 0.0;
  }
}

void class_pairs(const ProbMatrix& probs, const Labels& labels, int k, double threshold,
                 std::vector<double>& predicted, std::vector<double>& outcome) {
  predicted.clear();
  outcome.clear();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = probs(static_cast<Eigen::Index>(i), k);
    if (p >= threshold) {
      predicted.push_back(p);
      outcome.push_back(labels[i] == k ? 1.0 : 0.0);
    }
  }
}

}  // namespace

std::string to_string(BinningKind kind) {
  return kind == BinningKind::kAdaptive ? "adaptive" : "static";
}

BinningKind binning_kind_from_string(const std::string& name) {
  if (name == "adaptive") return BinningKind::kAdaptive;
  if (name == "static") return BinningKind::kStatic;
  throw ArgumentError("unknown binning scheme '" + name + "' (expected adaptive or static)");
}

std::string ReliabilityAxis::describe() const {
  return is_confidence() ? "confidence" : "class:" + std::to_string(class_index);
}

int argmax_row(const ProbMatrix& probs, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index k = 1; k < probs.cols(); ++k) {
    if (probs(row, k) > probs(row, best)) best = static_cast<int>(k);
  }
  return best;
}

double classwise_threshold(int num_classes) {
  return std::max(0.01, 1.0 / static_cast<double>(num_classes));
}

double accuracy(const ProbMatrix& probs, const Labels& labels) {
  check_shapes(probs, labels);
  if (labels.empty()) throw ArgumentError("accuracy of an empty prediction set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (argmax_row(probs, static_cast<Eigen::Index>(i)) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double ece(const ProbMatrix& probs, const Labels& labels, const BinningScheme& scheme) {
  check_shapes(probs, labels);
  std::vector<double> predicted;
  std::vector<double> outcome;
  confidence_pairs(probs, labels, predicted, outcome);
  return binned_error(bin_values(predicted, outcome, scheme), labels.size());
}

double cece(const ProbMatrix& probs, const Labels& labels, const BinningScheme& scheme) {
  check_shapes(probs, labels);
  const int num_classes = static_cast<int>(probs.cols());
  const double threshold = classwise_threshold(num_classes);
  std::vector<double> predicted;
  std::vector<double> outcome;
  double sum = 0.0;
  int used = 0;
  for (int k = 0; k < num_classes; ++k) {
    class_pairs(probs, labels, k, threshold, predicted, outcome);
    if (predicted.empty()) continue;
    sum += binned_error(bin_values(predicted, outcome, scheme), predicted.size());
    ++used;
  }
  if (used == 0) {
    throw ValidationError("class-wise ECE undefined: no prediction reaches the class threshold");
  }
  return sum / used;
}

double brier_top(const ProbMatrix& probs, const Labels& labels) {
  check_shapes(probs, labels);
  if (labels.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int top = argmax_row(probs, static_cast<Eigen::Index>(i));
    const double gap = probs(static_cast<Eigen::Index>(i), top) - (top == labels[i] ? 1.0 : 0.0);
    sum += gap * gap;
  }
  return sum / static_cast<double>(labels.size());
}

double brier_multi(const ProbMatrix& probs, const Labels& labels) {
  check_shapes(probs, labels);
  if (labels.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      const double gap = probs(static_cast<Eigen::Index>(i), k) - (k == labels[i] ? 1.0 : 0.0);
      sum += gap * gap;
    }
  }
  return sum / (static_cast<double>(labels.size()) * static_cast<double>(probs.cols()));
}

double nll(const ProbMatrix& probs, const Labels& labels) {
  check_shapes(probs, labels);
  if (labels.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sum -= std::log(std::max(probs(static_cast<Eigen::Index>(i), labels[i]), kProbFloor));
  }
  return sum / static_cast<double>(labels.size());
}

ReliabilityData reliability_data(const ProbMatrix& probs, const Labels& labels,
                                 const ReliabilityAxis& axis, const BinningScheme& scheme,
                                 std::size_t min_count) {
  check_shapes(probs, labels);
  if (axis.class_index >= probs.cols()) {
    throw ArgumentError("class " + std::to_string(axis.class_index) + " outside [0, " +
                        std::to_string(probs.cols()) + ")");
  }
  std::vector<double> predicted;
  std::vector<double> outcome;
  if (axis.is_confidence()) {
    confidence_pairs(probs, labels, predicted, outcome);
  } else {
    class_pairs(probs, labels, axis.class_index,
                classwise_threshold(static_cast<int>(probs.cols())), predicted, outcome);
  }

  ReliabilityData data;
  data.axis = axis;
  data.scheme = scheme;
  data.min_count = min_count;
  data.total = predicted.size();
  for (const auto& bin : bin_values(predicted, outcome, scheme)) {
    if (bin.count == 0 || bin.count < min_count) continue;
    const double c = static_cast<double>(bin.count);
    data.bins.push_back({bin.sum_predicted / c, bin.sum_outcome / c, bin.count});
  }
  std::stable_sort(data.bins.begin(), data.bins.end(),
                   [](const ReliabilityBin& a, const ReliabilityBin& b) {
                     return a.mean_predicted < b.mean_predicted;
                   });
  return data;
}

void validate_probabilities(const ProbMatrix& probs, double tol) {
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double sum = 0.0;
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      const double p = probs(i, k);
      if (!(p >= 0.0 && p <= 1.0)) {
        throw ValidationError("row " + std::to_string(i) + " has entry outside [0, 1]");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > tol) {
      throw ValidationError("row " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
  }
}

}  // namespace kcal
