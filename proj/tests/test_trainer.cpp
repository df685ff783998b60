#include "kcal/synth.hpp"
#include "kcal/trainer.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace kcal;
using kcal::testing::random_matrix;

namespace {

Labels blocks(const std::vector<int>& counts) {
  Labels y;
  for (std::size_t c = 0; c < counts.size(); ++c) y.insert(y.end(), static_cast<std::size_t>(counts[c]), static_cast<int>(c));
  return y;
}

}  // namespace

TEST_CASE("sample_batch contract") {
  const Labels y = blocks({100, 100});
  const ClassPartition p = class_partition(y, 2);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const Batch batch = sample_batch(p, 4, 3, rng);
    REQUIRE(batch.prediction.size() == 4);
    CHECK(std::set<std::size_t>(batch.prediction.begin(), batch.prediction.end()).size() == 4);
    const std::set<std::size_t> pred(batch.prediction.begin(), batch.prediction.end());
    for (int k = 0; k < 2; ++k) {
      const auto& bg = batch.background[static_cast<std::size_t>(k)];
      REQUIRE(bg.size() == 3);
      CHECK(std::set<std::size_t>(bg.begin(), bg.end()).size() == 3);
      std::size_t in_pred = 0;
      for (std::size_t i : batch.prediction) in_pred += y[i] == k;
      CHECK(batch.class_sizes[static_cast<std::size_t>(k)] == doctest::Approx(100.0 - in_pred));
      for (std::size_t i : bg) {
        CHECK(y[i] == k);
        CHECK(pred.count(i) == 0);
      }
    }
    CHECK_FALSE(batch.resampled);
  }

  const ClassPartition small = class_partition(blocks({3, 100}), 2);
  const Batch all = sample_batch(small, 0, 3, rng);
  CHECK(std::set<std::size_t>(all.background[0].begin(), all.background[0].end()) ==
        std::set<std::size_t>{0, 1, 2});
  CHECK(all.class_sizes[0] == 3.0);
  CHECK(all.prediction.empty());

  // Fewer than m left: drawn with replacement and flagged.
  const ClassPartition tiny = class_partition(blocks({2, 50}), 2);
  const Batch re = sample_batch(tiny, 0, 5, rng);
  CHECK(re.resampled);
  CHECK(re.background[0].size() == 5);
  CHECK(re.class_sizes[0] == 2.0);

  CHECK_THROWS_AS(sample_batch(tiny, 53, 1, rng), ArgumentError);
  CHECK_THROWS_AS(sample_batch(class_partition(blocks({4, 0}), 2), 1, 1, rng), ArgumentError);

  std::mt19937_64 r1(77), r2(77);
  const Batch a = sample_batch(p, 8, 4, r1);
  const Batch b = sample_batch(p, 8, 4, r2);
  CHECK(a.prediction == b.prediction);
  CHECK(a.background == b.background);
}

TEST_CASE("background membership is uniform within each class") {
  const Labels y = blocks({40, 25});
  const ClassPartition p = class_partition(y, 2);
  const int draws = 10000;
  const int m = 5;
  std::vector<int> hits(y.size(), 0);
  std::mt19937_64 rng(2);
  for (int t = 0; t < draws; ++t) {
    const Batch batch = sample_batch(p, 0, m, rng);
    CHECK(batch.background[0].size() == batch.background[1].size());
    for (const auto& bg : batch.background) {
      for (std::size_t i : bg) ++hits[i];
    }
  }
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double n_k = static_cast<double>(p.counts[static_cast<std::size_t>(y[i])]);
    const double q = m / n_k;
    const double sigma = std::sqrt(draws * q * (1 - q));
    CHECK(std::abs(hits[i] - draws * q) <= 3.5 * sigma);
  }
}

TEST_CASE("batch loss evaluated by hand") {
  // Identity projection on 1-D data: query 0 (class 0), class-0 background at 1, class-1 at 2.
  Matrix x(3, 1);
  x << 0.0, 1.0, 2.0;
  const Labels y{0, 0, 1};
  const ProjectionParams id = init_projection(1, 1, Architecture::kIdentity, 0);
  Batch batch;
  batch.prediction = {0};
  batch.background = {{1}, {2}};
  batch.class_sizes = {4.0, 9.0};
  const double w0 = 4.0 * std::exp(-0.5);
  const double w1 = 9.0 * std::exp(-2.0);
  const LossAndGrads r = compute_batch_loss_and_grads(id, x, y, batch);
  CHECK(r.loss == doctest::Approx(-std::log(w0 / (w0 + w1))).epsilon(1e-12));

  // Certain prediction: the other class is far away.
  x(2, 0) = 1e4;
  CHECK(compute_batch_loss_and_grads(id, x, y, batch).loss == doctest::Approx(0.0).epsilon(1e-15));

  // True-class weight underflows: the loss is clamped at -log(1e-12).
  Matrix far(3, 1);
  far << 0.0, 1e4, 0.5;
  CHECK(compute_batch_loss_and_grads(id, far, y, batch).loss == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("batch gradients match central differences on a tiny instance") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Labels y = blocks({4, 4});
    const Matrix x = random_matrix(8, 4, rng);
    ProjectionParams p = freeze_normalization(init_projection(4, 2, Architecture::kMlp2Skip, rng()), x);
    p.b1 = random_matrix(2, 1, rng, 0.3).col(0);
    const Batch batch = sample_batch(class_partition(y, 2), 2, 1, rng);
    const LossAndGrads r = compute_batch_loss_and_grads(p, x, y, batch);
    const auto grads = gradient_values(r.grads, p);
    auto values = trainable_values(p);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = *values[i];
      *values[i] = saved + 1e-5;
      const double up = compute_batch_loss_and_grads(p, x, y, batch).loss;
      *values[i] = saved - 1e-5;
      const double down = compute_batch_loss_and_grads(p, x, y, batch).loss;
      *values[i] = saved;
      const double numeric = (up - down) / 2e-5;
      const double gap = std::abs(numeric - *grads[i]);
      CHECK((gap <= 1e-6 || gap <= 1e-4 * std::max(std::abs(numeric), std::abs(*grads[i]))));
    }
  }
}

TEST_CASE("non-finite loss names the batch seed") {
  const Labels y = blocks({3, 3});
  std::mt19937_64 rng(4);
  const Matrix x = random_matrix(6, 2, rng);
  ProjectionParams p = freeze_normalization(init_projection(2, 2, Architecture::kLinear, 0), x);
  p.w1(0, 0) = std::nan("");
  Batch batch = sample_batch(class_partition(y, 2), 2, 1, rng);
  batch.seed = 123456789;
  try {
    compute_batch_loss_and_grads(p, x, y, batch);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("123456789") != std::string::npos);
  }
}

TEST_CASE("training config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = {};
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = {};
  c.plateau_factor = 1.0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = {};
  c.background_per_class = 0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
}

TEST_CASE("training determinism and zero epochs") {
  const auto [ds, oracle] = generate_gmm(3, 6, 3.0, 1.0, {}, 600, 5);
  TrainConfig c;
  c.epochs = 0;
  c.seed = 9;
  const TrainReport zero = train_projection(c, ds);
  const ProjectionParams init =
      freeze_normalization(init_projection(6, 6, Architecture::kMlp2Skip, 9), ds.embeddings);
  CHECK(zero.params.w1 == init.w1);
  CHECK(zero.params.ws == init.ws);
  CHECK(zero.epoch_losses.empty());

  c.epochs = 2;
  c.batches_per_epoch = 20;
  const TrainReport a = train_projection(c, ds);
  const TrainReport b = train_projection(c, ds);
  CHECK(a.params.w1 == b.params.w1);
  CHECK(a.params.w2 == b.params.w2);
  CHECK(a.params.ws == b.params.ws);
  CHECK(a.epoch_losses == b.epoch_losses);
  CHECK(a.epoch_losses.size() == 2);
  CHECK(a.learning_rates == std::vector<double>{1e-3, 1e-3});

  c.arch = Architecture::kLinear;
  c.output_dim = 2;
  const TrainReport lin = train_projection(c, ds);
  CHECK(lin.params.arch == Architecture::kLinear);
  CHECK(lin.params.output_dim == 2);
}

TEST_CASE("plateau schedule halves the rate") {
  // A huge learning rate on overlapping classes stalls quickly; patience 0 reacts every epoch.
  const auto [ds, oracle] = generate_gmm(2, 2, 0.0, 1.0, {}, 200, 6);
  TrainConfig c;
  c.epochs = 6;
  c.batches_per_epoch = 5;
  c.plateau_patience = 0;
  c.learning_rate = 1e-9;
  const TrainReport r = train_projection(c, ds);
  bool halved = false;
  for (std::size_t e = 1; e < r.learning_rates.size(); ++e) {
    const double ratio = r.learning_rates[e] / r.learning_rates[e - 1];
    CHECK((ratio == 1.0 || ratio == 0.5));
    halved = halved || ratio == 0.5;
  }
  CHECK(halved);
}

TEST_CASE("uninformative data gives a loss near log K") {
  const auto [ds, oracle] = generate_gmm(3, 4, 0.0, 1.0, {}, 900, 7);
  TrainConfig c;
  c.epochs = 1;
  c.batches_per_epoch = 50;
  const TrainReport r = train_projection(c, ds);
  CHECK(std::abs(r.epoch_losses[0] - std::log(3.0)) <= 0.2 * std::log(3.0));
}

TEST_CASE("training makes progress on separated mixtures") {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto [ds, oracle] = generate_gmm(3, 8, 3.0, 1.0, {}, 3000, 100 + seed);
    TrainConfig c;
    c.output_dim = 2;
    c.epochs = 5;
    c.seed = seed;
    const TrainReport r = train_projection(c, ds);
    if (r.epoch_losses.back() < r.epoch_losses.front()) ++improved;
  }
  CHECK(improved >= 9);
}
