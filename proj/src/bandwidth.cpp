#include "kcal/bandwidth.hpp"

#include "kcal/kde.hpp"
#include "kcal/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace kcal {

namespace {

KdeModel support_model(const Matrix& support, const Labels& labels, int num_classes) {
  KdeModel model;
  model.support = support;
  model.labels = labels;
  model.class_counts.assign(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ValidationError("support label out of range");
    ++model.class_counts[static_cast<std::size_t>(y)];
  }
  model.projection = init_projection(static_cast<int>(support.cols()),
                                     static_cast<int>(support.cols()), Architecture::kIdentity, 0);
  return model;
}

double support_nll(KdeModel& model, double bandwidth, bool leave_one_out) {
  model.bandwidth = bandwidth;
  const KdePrediction pred = kde_predict_projected(model, model.support, leave_one_out);
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < model.size(); ++i) {
    const auto y = static_cast<std::size_t>(model.labels[i]);
    if (leave_one_out && model.class_counts[y] < 2) continue;
    total -= std::log(std::max(pred.probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(y)),
                               kProbFloor));
    ++used;
  }
  if (used == 0) throw ArgumentError("no calibration points usable for bandwidth tuning");
  return total / static_cast<double>(used);
}

}  // namespace

int golden_section_max_iterations(double width, double tol) {
  if (width <= tol) return 0;
  return static_cast<int>(std::ceil(std::log(width / tol) / std::log(1.0 / kGoldenConjugate)));
}

ScalarMinimum golden_section_minimize(const std::function<double(double)>& f, double lb,
                                      double ub, double tol) {
  if (!(lb < ub) || !std::isfinite(lb) || !std::isfinite(ub)) {
    throw ArgumentError("golden_section_minimize: need finite lb < ub");
  }
  if (!(tol > 0.0)) throw ArgumentError("golden_section_minimize: tol must be positive");

  ScalarMinimum result;
  auto eval = [&](double x) {
    const double v = f(x);
    ++result.evaluations;
    if (!std::isfinite(v)) {
      throw NumericalError("objective is not finite at x = " + std::to_string(x));
    }
    return v;
  };

  double a = lb;
  double b = ub;
  double c = b - kGoldenConjugate * (b - a);
  double d = a + kGoldenConjugate * (b - a);
  double fc = eval(c);
  double fd = eval(d);
  while (b - a > tol) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - kGoldenConjugate * (b - a);
      fc = eval(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + kGoldenConjugate * (b - a);
      fd = eval(d);
    }
  }
  if (fc < fd) {
    result.x = c;
    result.value = fc;
  } else {
    result.x = d;
    result.value = fd;
  }
  result.at_boundary = (result.x - lb <= tol) || (ub - result.x <= tol);
  return result;
}

ScalarMinimum golden_section_minimize_log(const std::function<double(double)>& f, double lb,
                                          double ub, double tol) {
  if (!(lb > 0.0)) throw ArgumentError("golden_section_minimize_log: lb must be positive");
  ScalarMinimum r = golden_section_minimize([&f](double u) { return f(std::exp(u)); },
                                            std::log(lb), std::log(ub), tol);
  r.x = std::exp(r.x);
  return r;
}

double rms_pairwise_distance(const Matrix& points, std::size_t max_points) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n < 2) return 0.0;
  const std::size_t take = std::min(n, std::max<std::size_t>(max_points, 2));
  std::vector<Eigen::Index> rows(take);
  for (std::size_t i = 0; i < take; ++i) {
    rows[i] = static_cast<Eigen::Index>(i * n / take);
  }
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < take; ++i) {
    for (std::size_t j = i + 1; j < take; ++j) {
      sum += (points.row(rows[i]) - points.row(rows[j])).squaredNorm();
      ++pairs;
    }
  }
  return std::sqrt(sum / static_cast<double>(pairs));
}

double kde_support_nll(const Matrix& support, const Labels& labels, int num_classes,
                       double bandwidth, bool leave_one_out) {
  KdeModel model = support_model(support, labels, num_classes);
  return support_nll(model, bandwidth, leave_one_out);
}

BandwidthSearchResult tune_bandwidth(const Matrix& support, const Labels& labels, int num_classes,
                                     const BandwidthSearchConfig& config) {
  if (static_cast<std::size_t>(support.rows()) != labels.size() || labels.empty()) {
    throw ArgumentError("tune_bandwidth: need one label per support row");
  }
  if (!(config.tol > 0.0)) throw ArgumentError("tune_bandwidth: tol must be positive");
  KdeModel model = support_model(support, labels, num_classes);

  if (config.leave_one_out) {
    for (std::size_t k = 0; k < model.class_counts.size(); ++k) {
      if (model.class_counts[k] == 1) {
        warn("class " + std::to_string(k) +
             " has a single calibration point; it is left out of the tuning loss");
      }
    }
  }

  double scale = rms_pairwise_distance(support);
  if (!(scale > 0.0)) scale = 1.0;
  BandwidthSearchResult result;
  result.lb = config.lb.value_or(1e-3 * scale);
  result.ub = config.ub.value_or(1e3 * scale);
  if (!(result.lb > 0.0 && result.lb < result.ub)) {
    throw ArgumentError("tune_bandwidth: need 0 < lb < ub");
  }

  const ScalarMinimum best = golden_section_minimize_log(
      [&](double b) { return support_nll(model, b, config.leave_one_out); }, result.lb, result.ub,
      config.tol);
  result.bandwidth = best.x;
  result.loss = best.value;
  result.evaluations = best.evaluations;
  result.at_boundary = best.at_boundary;
  return result;
}

double BandwidthLaw::operator()(double m) const {
  return constant * std::pow(m, -1.0 / (dim + 4));
}

BandwidthLaw fit_bandwidth_constant(const std::vector<std::pair<double, double>>& m_and_bandwidth,
                                    int dim) {
  if (m_and_bandwidth.size() < 2) {
    throw ArgumentError("fit_bandwidth_constant needs at least 2 (m, b*) pairs");
  }
  if (dim < 0) throw ArgumentError("fit_bandwidth_constant: dim must be >= 0");
  const double slope = -1.0 / (dim + 4);
  double intercept = 0.0;
  for (const auto& [m, b] : m_and_bandwidth) {
    if (!(m > 0.0) || !(b > 0.0)) throw ArgumentError("fit_bandwidth_constant: pairs must be positive");
    intercept += std::log(b) - slope * std::log(m);
  }
  intercept /= static_cast<double>(m_and_bandwidth.size());

  double ss = 0.0;
  for (const auto& [m, b] : m_and_bandwidth) {
    const double r = std::log(b) - (intercept + slope * std::log(m));
    ss += r * r;
  }
  BandwidthLaw law;
  law.constant = std::exp(intercept);
  law.dim = dim;
  law.residual_rms = std::sqrt(ss / static_cast<double>(m_and_bandwidth.size()));
  return law;
}

double analytic_bandwidth(const BandwidthLaw& law, double m) {
  if (!(m >= 1.0)) throw ArgumentError("analytic_bandwidth: m must be >= 1");
  return law(m);
}

int count_local_minima(const std::vector<double>& values, double noise) {
  if (values.empty()) return 0;
  int direction = 0;  // +1 rising, -1 falling, 0 not yet moved
  int first_direction = 0;
  double extreme = values.front();
  int minima = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const double v = values[i];
    if (direction == 0) {
      if (v > extreme + noise) {
        direction = first_direction = 1;
        extreme = v;
      } else if (v < extreme - noise) {
        direction = first_direction = -1;
        extreme = v;
      }
    } else if (direction == 1) {
      if (v > extreme) {
        extreme = v;
      } else if (v < extreme - noise) {
        direction = -1;
        extreme = v;
      }
    } else {
      if (v < extreme) {
        extreme = v;
      } else if (v > extreme + noise) {
        direction = 1;
        extreme = v;
        ++minima;
      }
    }
  }
  if (direction == 0) return 1;
  if (first_direction == 1) ++minima;
  if (direction == -1) ++minima;
  return minima;
}

std::vector<double> log_grid(double lo, double hi, int n) {
  if (n < 2 || !(lo > 0.0) || !(hi > lo)) throw ArgumentError("log_grid: need n >= 2, 0 < lo < hi");
  std::vector<double> grid(static_cast<std::size_t>(n));
  const double a = std::log(lo);
  const double b = std::log(hi);
  for (int i = 0; i < n; ++i) grid[static_cast<std::size_t>(i)] = std::exp(a + (b - a) * i / (n - 1));
  return grid;
}

}  // namespace kcal
