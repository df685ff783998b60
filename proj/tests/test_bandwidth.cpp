#include "kcal/bandwidth.hpp"
#include "kcal/synth.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace kcal;
using kcal::testing::random_matrix;

namespace {

struct GridMin {
  double x;
  double value;
};

GridMin grid_argmin(const std::function<double(double)>& f, const std::vector<double>& grid) {
  GridMin best{grid.front(), f(grid.front())};
  for (double x : grid) {
    const double v = f(x);
    if (v < best.value) best = {x, v};
  }
  return best;
}

EmbeddingDataset overlapping_fixture(std::uint64_t seed) {
  const GmmOracle oracle = make_gmm_oracle(3, 2, 2.5, 1.0, {}, seed);
  return sample_gmm_per_class(oracle, {80, 80, 80}, seed + 1);
}

}  // namespace

TEST_CASE("golden-section analytic minima") {
  const ScalarMinimum q = golden_section_minimize([](double x) { return (x - 2) * (x - 2); }, 0.1, 10, 1e-4);
  CHECK(std::abs(q.x - 2.0) <= 1e-3);
  CHECK_FALSE(q.at_boundary);

  const ScalarMinimum l = golden_section_minimize([](double x) { return std::abs(std::log(x)); }, 0.1, 10, 1e-4);
  CHECK(std::abs(l.x - 1.0) <= 1e-3);

  const ScalarMinimum inc = golden_section_minimize([](double x) { return x; }, 0.5, 3.0, 1e-4);
  CHECK(inc.x - 0.5 <= 1e-4);
  CHECK(inc.at_boundary);

  const ScalarMinimum dec = golden_section_minimize_log([](double x) { return -x; }, 0.5, 3.0, 1e-4);
  CHECK(dec.x == doctest::Approx(3.0).epsilon(1e-4));
  CHECK(dec.at_boundary);

  const ScalarMinimum lg = golden_section_minimize_log([](double x) { return (x - 2) * (x - 2); }, 1e-3, 1e3, 1e-6);
  CHECK(std::abs(lg.x - 2.0) <= 1e-5);
}

TEST_CASE("golden-section iteration bound") {
  for (double tol : {1e-2, 1e-4, 1e-6}) {
    int evals = 0;
    const ScalarMinimum r = golden_section_minimize(
        [&evals](double x) {
          ++evals;
          return std::cosh(x - 0.3);
        },
        -5.0, 5.0, tol);
    const int bound = static_cast<int>(std::ceil(std::log(10.0 / tol) / std::log(1.0 / kGoldenConjugate)));
    CHECK(golden_section_max_iterations(10.0, tol) <= bound);
    // Two initial probes, then one new evaluation per reduction.
    CHECK(evals <= bound + 2);
    CHECK(r.evaluations == evals);
    CHECK(std::abs(r.x - 0.3) <= tol);
  }
}

TEST_CASE("golden-section agrees with a dense bracket on unimodal functions") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    const double c = u(rng);
    const double p = 1.0 + trial % 4;
    auto f = [c, p](double x) { return std::pow(std::abs(x - c), p) + 0.1 * x; };
    const ScalarMinimum r = golden_section_minimize(f, -4.0, 4.0, 1e-6);
    std::vector<double> grid;
    for (int i = 0; i <= 80000; ++i) grid.push_back(-4.0 + 8.0 * i / 80000);
    const GridMin g = grid_argmin(f, grid);
    CHECK(std::abs(r.x - g.x) <= 2e-4 + 1e-6);
    CHECK(r.value <= g.value + 1e-9);
  }
}

TEST_CASE("golden-section input errors") {
  CHECK_THROWS_AS(golden_section_minimize([](double) { return std::nan(""); }, 0.0, 1.0, 1e-3), NumericalError);
  CHECK_THROWS_AS(golden_section_minimize([](double x) { return x; }, 1.0, 0.0, 1e-3), ArgumentError);
  CHECK_THROWS_AS(golden_section_minimize([](double x) { return x; }, 0.0, 1.0, 0.0), ArgumentError);
  CHECK_THROWS_AS(golden_section_minimize_log([](double x) { return x; }, 0.0, 1.0, 1e-3), ArgumentError);
  try {
    golden_section_minimize_log([](double x) { return x > 2.0 ? std::nan("") : x; }, 1.0, 4.0, 1e-3);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("at ") != std::string::npos);
  }
}

TEST_CASE("two separated clusters") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  Matrix s(100, 1);
  Labels y;
  for (int i = 0; i < 100; ++i) {
    s(i, 0) = (i < 50 ? -10.0 : 10.0) + n01(rng);
    y.push_back(i < 50 ? 0 : 1);
  }
  const BandwidthSearchResult r = tune_bandwidth(s, y, 2);
  CHECK(r.bandwidth >= 0.2);
  CHECK(r.bandwidth <= 5.0);
  // The loss is flat near zero over a wide band, so compare loss values, not locations.
  const GridMin g = grid_argmin([&](double b) { return kde_support_nll(s, y, 2, b, true); },
                                log_grid(r.lb, r.ub, 100));
  CHECK(r.loss <= g.value + 1e-9);
  CHECK(kde_support_nll(s, y, 2, r.lb, true) > r.loss + 1e-3);
  CHECK(kde_support_nll(s, y, 2, r.ub, true) > r.loss + 0.1);
}

TEST_CASE("tuned bandwidth agrees with a grid oracle and scales with the data") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const EmbeddingDataset ds = overlapping_fixture(seed);
    const auto loss = [&](double b) { return kde_support_nll(ds.embeddings, ds.labels, 3, b, true); };
    const GridMin g = grid_argmin(loss, log_grid(0.05, 2.0, 100));
    const BandwidthSearchResult r = tune_bandwidth(ds.embeddings, ds.labels, 3);
    CHECK(std::abs(r.bandwidth - g.x) / g.x <= 0.05);
    CHECK(r.loss <= g.value + 1e-12);

    const double s = 7.5;
    const BandwidthSearchResult scaled = tune_bandwidth(s * ds.embeddings, ds.labels, 3);
    CHECK(scaled.bandwidth / (s * r.bandwidth) == doctest::Approx(1.0).epsilon(0.01));
    CHECK(scaled.lb == doctest::Approx(s * r.lb).epsilon(1e-12));
  }
}

TEST_CASE("duplicating the calibration set") {
  const EmbeddingDataset ds = overlapping_fixture(11);
  Matrix twice(2 * ds.size(), 2);
  twice << ds.embeddings, ds.embeddings;
  Labels y2 = ds.labels;
  y2.insert(y2.end(), ds.labels.begin(), ds.labels.end());

  // Without self-exclusion the loss is a per-point mean and every point keeps its neighbourhood
  // scaled by two, so the whole curve is unchanged.
  for (double b : log_grid(0.05, 5.0, 25)) {
    CHECK(kde_support_nll(twice, y2, 3, b, false) ==
          doctest::Approx(kde_support_nll(ds.embeddings, ds.labels, 3, b, false)).epsilon(1e-12));
  }
  // With self-exclusion each point still sees its twin at distance zero, so the optimum collapses
  // toward the lower bound.
  const BandwidthSearchResult dup = tune_bandwidth(twice, y2, 3);
  const BandwidthSearchResult once = tune_bandwidth(ds.embeddings, ds.labels, 3);
  CHECK(dup.bandwidth < 0.05 * once.bandwidth);
  CHECK(dup.bandwidth < 2.0 * dup.lb);
}

TEST_CASE("support loss details") {
  const EmbeddingDataset ds = overlapping_fixture(3);
  // Without LOO the self-match makes tiny bandwidths perfect.
  CHECK(kde_support_nll(ds.embeddings, ds.labels, 3, 1e-4, false) == doctest::Approx(0.0).epsilon(1e-12));
  // Infinite bandwidth predicts the priors.
  const double uniform = kde_support_nll(ds.embeddings, ds.labels, 3, 1e6, false);
  CHECK(uniform == doctest::Approx(std::log(3.0)).epsilon(1e-6));

  // A singleton class is left out of the LOO mean with a warning.
  Matrix s(4, 1);
  s << 0.0, 0.5, 1.0, 9.0;
  const Labels y{0, 0, 0, 1};
  const std::size_t before = warning_count();
  const BandwidthSearchResult r = tune_bandwidth(s, y, 2);
  CHECK(warning_count() > before);
  CHECK(std::isfinite(r.loss));
  Matrix s3(3, 1);
  s3 << 0.0, 0.5, 1.0;
  CHECK(kde_support_nll(s, y, 2, 0.7, true) ==
        doctest::Approx(kde_support_nll(s3, {0, 0, 0}, 2, 0.7, true)).epsilon(1e-9));

  BandwidthSearchConfig bad;
  bad.lb = 2.0;
  bad.ub = 1.0;
  CHECK_THROWS_AS(tune_bandwidth(ds.embeddings, ds.labels, 3, bad), ArgumentError);
}

TEST_CASE("rms pairwise distance") {
  std::mt19937_64 rng(4);
  const Matrix p = random_matrix(30, 3, rng);
  double sum = 0.0;
  int pairs = 0;
  for (int i = 0; i < 30; ++i) {
    for (int j = i + 1; j < 30; ++j) {
      sum += (p.row(i) - p.row(j)).squaredNorm();
      ++pairs;
    }
  }
  CHECK(rms_pairwise_distance(p) == doctest::Approx(std::sqrt(sum / pairs)).epsilon(1e-12));
  CHECK(rms_pairwise_distance(4.0 * p) == doctest::Approx(4.0 * rms_pairwise_distance(p)).epsilon(1e-12));
}

TEST_CASE("bandwidth law fitting") {
  std::vector<std::pair<double, double>> exact;
  for (double m : {10.0, 100.0, 1000.0}) exact.emplace_back(m, 3.0 * std::pow(m, -1.0 / 8.0));
  const BandwidthLaw law = fit_bandwidth_constant(exact, 4);
  CHECK(law.constant == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(law.residual_rms == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(law.dim == 4);

  CHECK_THROWS_AS(fit_bandwidth_constant({{10.0, 1.0}}, 2), ArgumentError);
  CHECK_THROWS_AS(fit_bandwidth_constant({{10.0, 1.0}, {20.0, -1.0}}, 2), ArgumentError);

  std::mt19937_64 rng(8);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::pair<double, double>> pairs;
    for (double m : {25.0, 50.0, 100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0}) {
      pairs.emplace_back(m, 1.7 * std::pow(m, -1.0 / 6.0) * std::exp(noise(rng)));
    }
    const BandwidthLaw fitted = fit_bandwidth_constant(pairs, 2);
    CHECK(std::abs(fitted.constant / 1.7 - 1.0) <= 0.10);

    auto scaled = pairs;
    for (auto& p : scaled) p.second *= 2.5;
    CHECK(fit_bandwidth_constant(scaled, 2).constant ==
          doctest::Approx(2.5 * fitted.constant).epsilon(1e-12));
  }
}

TEST_CASE("analytic bandwidth closed forms") {
  CHECK(analytic_bandwidth(BandwidthLaw{1.0, 0, 0.0}, 16.0) == doctest::Approx(0.5).epsilon(1e-15));
  for (int d : {0, 1, 5, 30}) CHECK(analytic_bandwidth(BandwidthLaw{2.0, d, 0.0}, 1.0) == 2.0);
  const BandwidthLaw law{1.3, 4, 0.0};
  CHECK(law(400.0) / law(100.0) == doctest::Approx(std::pow(4.0, -1.0 / 8.0)).epsilon(1e-14));
  CHECK(std::pow(4.0, -1.0 / 8.0) == doctest::Approx(0.841).epsilon(1e-3));
}

TEST_CASE("local minima counting and log grids") {
  CHECK(count_local_minima({3, 2, 1, 2, 3}, 1e-6) == 1);
  CHECK(count_local_minima({3, 1, 2, 1, 3}, 1e-6) == 2);
  CHECK(count_local_minima({3, 1, 1 + 1e-8, 1, 3}, 1e-6) == 1);
  CHECK(count_local_minima({1, 2, 3}, 1e-6) == 1);
  CHECK(count_local_minima({3, 2, 1}, 1e-6) == 1);
  CHECK(count_local_minima({2, 2, 2}, 1e-6) == 1);

  const std::vector<double> g = log_grid(0.01, 100.0, 5);
  REQUIRE(g.size() == 5);
  CHECK(g.front() == doctest::Approx(0.01).epsilon(1e-14));
  CHECK(g[2] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(g.back() == doctest::Approx(100.0).epsilon(1e-14));
}
