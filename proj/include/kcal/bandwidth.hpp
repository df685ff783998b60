#pragma once

#include "kcal/common.hpp"

#include <functional>
#include <optional>
#include <utility>
#include <vector>

namespace kcal {

struct ScalarMinimum {
  double x = 0.0;
  double value = 0.0;
  int evaluations = 0;
  bool at_boundary = false;  // x* lies within the final bracket of lb or ub
};

// Golden-ratio conjugate (sqrt(5) - 1) / 2.
inline constexpr double kGoldenConjugate = 0.6180339887498949;

// Upper bound on the number of bracket reductions for a given interval and tolerance.
int golden_section_max_iterations(double width, double tol);

/// Golden-section search for the minimum of a unimodal f on [lb, ub]; stops once the
/// bracket is narrower than tol. Throws NumericalError on a non-finite f value.
ScalarMinimum golden_section_minimize(const std::function<double(double)>& f, double lb,
                                      double ub, double tol);

/// Golden-section search over log(x) in [log lb, log ub]; tol is the bracket width in
/// log units, i.e. a relative tolerance on x.
ScalarMinimum golden_section_minimize_log(const std::function<double(double)>& f, double lb,
                                          double ub, double tol);

struct BandwidthSearchConfig {
  std::optional<double> lb;  // defaults to 1e-3 * RMS pairwise distance
  std::optional<double> ub;  // defaults to 1e3 * RMS pairwise distance
  double tol = 1e-3;
  bool leave_one_out = true;
};

struct BandwidthSearchResult {
  double bandwidth = 0.0;
  double loss = 0.0;
  double lb = 0.0;
  double ub = 0.0;
  int evaluations = 0;
  bool at_boundary = false;
};

// Root-mean-square distance between distinct pairs of an evenly strided subsample of at
// most max_points rows.
double rms_pairwise_distance(const Matrix& points, std::size_t max_points = 1000);

/// Mean negative log-likelihood (probabilities floored at 1e-12) of the KDE classifier on
/// its own support at one bandwidth. Under leave-one-out, points that are the only member
/// of their class are left out of the mean.
double kde_support_nll(const Matrix& support, const Labels& labels, int num_classes,
                       double bandwidth, bool leave_one_out);

/// Bandwidth minimizing kde_support_nll, by golden-section search in log-bandwidth.
BandwidthSearchResult tune_bandwidth(const Matrix& support, const Labels& labels, int num_classes,
                                     const BandwidthSearchConfig& config = {});

/// b = constant * m^(-1 / (dim + 4)).
struct BandwidthLaw {
  double constant = 1.0;
  int dim = 1;
  double residual_rms = 0.0;  // of log b* around the fitted line

  double operator()(double m) const;
};

/// Fits the constant with the slope pinned at -1 / (dim + 4), by least squares in log space.
BandwidthLaw fit_bandwidth_constant(const std::vector<std::pair<double, double>>& m_and_bandwidth,
                                    int dim);

double analytic_bandwidth(const BandwidthLaw& law, double m);

// Number of local minima of a sampled curve, treating changes smaller than noise as flat.
// A curve whose lowest run touches an end counts that end as a minimum.
int count_local_minima(const std::vector<double>& values, double noise);

// n log-spaced points spanning [lo, hi].
std::vector<double> log_grid(double lo, double hi, int n);

}  // namespace kcal
