#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

namespace kcal {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Floor applied to probabilities before taking logs (losses and NLL).
inline constexpr double kProbFloor = 1e-12;

// log(sum(exp(v))), -inf for an empty or all -inf input.
inline double log_sum_exp(std::span<const double> values) {
  double max_value = kNegInf;
  for (double v : values) max_value = std::max(max_value, v);
  if (max_value == kNegInf) return kNegInf;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - max_value);
  return max_value + std::log(sum);
}

// log(exp(a) + exp(b))
inline double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  const double lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

}  // namespace kcal
