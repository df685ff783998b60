#pragma once

#include "kcal/common.hpp"
#include "kcal/projection.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace kcal {

// A query whose every log kernel weight sits below this value (the natural-log
// underflow point of a double) is treated as having no support at all.
inline constexpr double kUnderflowLogFloor = -745.0;

/// Deployable calibrated classifier: projected calibration points, their labels,
/// per-class counts, the inference bandwidth, and the projection that produced them.
struct KdeModel {
  Matrix support;  // N x d
  Labels labels;
  std::vector<std::size_t> class_counts;
  double bandwidth = 1.0;
  ProjectionParams projection;

  int num_classes() const { return static_cast<int>(class_counts.size()); }
  std::size_t size() const { return labels.size(); }
  std::vector<double> priors() const;
  void validate() const;
};

/// Probabilities plus a per-row flag set when the prior fallback was used.
struct KdePrediction {
  ProbMatrix probs;
  std::vector<std::uint8_t> fallback;
  std::size_t fallback_count = 0;
};

/// Projects raw calibration embeddings and packages them with their labels.
KdeModel build_kde_model(ProjectionParams projection, const Matrix& raw_support,
                         const Labels& labels, int num_classes, double bandwidth);

/// Calibrated class probabilities for raw query embeddings.
///
/// Row i, class k is the kernel mass of class k over the total kernel mass, accumulated
/// with per-class log-sum-exp. With leave_one_out the queries must be the support itself
/// and query i ignores support row i. A query with no weight above kUnderflowLogFloor
/// falls back to the class priors |C^k| / N.
KdePrediction kde_predict(const KdeModel& model, const Matrix& raw_queries, bool leave_one_out);

/// Same as kde_predict, on queries that are already projected.
KdePrediction kde_predict_projected(const KdeModel& model, const Matrix& query_z,
                                    bool leave_one_out);

/// Training-time prediction over per-class background sets. Class k's kernel sum is
/// scaled by class_sizes[k] / backgrounds[k].rows() before normalizing over classes.
ProbMatrix kde_predict_weighted(const Matrix& query_z, const std::vector<Matrix>& backgrounds,
                                const std::vector<double>& class_sizes, double bandwidth);

/// Model container: "KCAL", u32 version 1, a length-prefixed JSON header (bandwidth,
/// class counts and the caller's metadata object), the projection, the support as a
/// float64 KEMB matrix, then the support labels as KLAB.
void write_kde_model(std::ostream& out, const KdeModel& model,
                     const std::string& metadata_json = "{}");
std::pair<KdeModel, std::string> read_kde_model(std::istream& in,
                                                const std::string& source = "<stream>");
void write_kde_model_file(const std::string& path, const KdeModel& model,
                          const std::string& metadata_json = "{}");
std::pair<KdeModel, std::string> read_kde_model_file(const std::string& path);

}  // namespace kcal
