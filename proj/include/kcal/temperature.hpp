#pragma once

#include "kcal/common.hpp"

namespace kcal {

// Row-wise softmax with the row maximum subtracted first.
ProbMatrix softmax(const Matrix& logits);

struct TemperatureModel {
  double temperature = 1.0;

  void validate() const;
};

struct TemperatureFit {
  TemperatureModel model;
  double nll = 0.0;          // calibration NLL at the fitted temperature
  double nll_at_one = 0.0;   // calibration NLL at T = 1
  int evaluations = 0;
  bool at_boundary = false;  // T hit the edge of the search range
};

inline constexpr double kTemperatureLower = 0.05;
inline constexpr double kTemperatureUpper = 20.0;
inline constexpr double kTemperatureTol = 1e-4;

/// Fits T by golden-section search over log T in [0.05, 20], minimizing the NLL of
/// softmax(logits / T). A result on the edge of the range is flagged and warned about.
TemperatureFit fit_temperature(const Matrix& logits, const Labels& labels);

ProbMatrix apply_temperature(const TemperatureModel& model, const Matrix& logits);

}  // namespace kcal
