#include "kcal/temperature.hpp"

#include "kcal/bandwidth.hpp"
#include "kcal/numeric.hpp"

#include <cmath>
#include <string>

namespace kcal {

namespace {

void check_logits(const Matrix& logits) {
  if (!logits.allFinite()) throw ValidationError("logits contain non-finite values");
}

// Mean NLL of softmax(logits / T) without materializing the probability matrix.
double tempered_nll(const Matrix& logits, const Labels& labels, double temperature) {
  const double inv_t = 1.0 / temperature;
  const double log_floor = std::log(kProbFloor);
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    Eigen::Index arg = 0;
    const double top = row.maxCoeff(&arg) * inv_t;
    // Mass outside the top entry, kept apart so log1p resolves confident rows.
    double rest = 0.0;
    for (Eigen::Index k = 0; k < row.size(); ++k) {
      if (k != arg) rest += std::exp(row(k) * inv_t - top);
    }
    const double log_p = row(labels[static_cast<std::size_t>(i)]) * inv_t - top - std::log1p(rest);
    total -= std::max(log_p, log_floor);
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace

ProbMatrix softmax(const Matrix& logits) {
  check_logits(logits);
  ProbMatrix probs(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      probs(i, k) = std::exp(logits(i, k) - top);
      sum += probs(i, k);
    }
    probs.row(i) /= sum;
  }
  return probs;
}

void TemperatureModel::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ArgumentError("temperature must be positive and finite");
  }
}

TemperatureFit fit_temperature(const Matrix& logits, const Labels& labels) {
  check_logits(logits);
  if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.empty()) {
    throw ArgumentError("fit_temperature: need one label per logit row");
  }
  for (int y : labels) {
    if (y < 0 || y >= logits.cols()) throw ValidationError("label outside the logit columns");
  }

  const ScalarMinimum best = golden_section_minimize_log(
      [&](double t) { return tempered_nll(logits, labels, t); }, kTemperatureLower,
      kTemperatureUpper, kTemperatureTol);

  TemperatureFit fit;
  fit.model.temperature = best.x;
  fit.nll = best.value;
  fit.nll_at_one = tempered_nll(logits, labels, 1.0);
  fit.evaluations = best.evaluations;
  fit.at_boundary = best.at_boundary;
  if (fit.at_boundary) {
    warn("fitted temperature " + std::to_string(best.x) + " sits on the search boundary");
  }
  return fit;
}

ProbMatrix apply_temperature(const TemperatureModel& model, const Matrix& logits) {
  model.validate();
  return softmax(logits / model.temperature);
}

}  // namespace kcal
