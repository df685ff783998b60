#pragma once

#include "kcal/common.hpp"
#include "kcal/dataio.hpp"
#include "kcal/projection.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace kcal {

struct TrainConfig {
  int batch_size = 64;             // B
  int background_per_class = 20;   // m
  double learning_rate = 1e-3;
  int epochs = 100;
  int batches_per_epoch = 200;
  int plateau_patience = 10;
  double plateau_factor = 0.5;
  Architecture arch = Architecture::kMlp2Skip;
  int output_dim = 0;  // 0 selects min(h, 32)
  std::uint64_t seed = 0;

  void validate() const;
};

/// One training step's draw: prediction rows, per-class background rows, and the
/// per-class sizes |D^k \ D^B| used to rescale each background sum.
struct Batch {
  std::vector<std::size_t> prediction;
  std::vector<std::vector<std::size_t>> background;
  std::vector<double> class_sizes;
  bool resampled = false;  // some class was drawn with replacement
  std::uint64_t seed = 0;
};

/// Draws B prediction rows uniformly without replacement from all rows, then m background
/// rows per class uniformly without replacement from that class minus the prediction rows.
/// A class with fewer than m rows left is drawn with replacement and the batch is flagged.
Batch sample_batch(const ClassPartition& partition, int batch_size, int background_per_class,
                   std::mt19937_64& rng);

struct LossAndGrads {
  double loss = 0.0;
  ProjectionGrads grads;
};

/// Mean negative log-probability of the true label under the rescaled background KDE
/// (bandwidth 1), and its exact gradient with respect to the projection parameters.
/// Log-probabilities are floored at log(1e-12); floored samples contribute no gradient.
LossAndGrads compute_batch_loss_and_grads(const ProjectionParams& params,
                                          const Matrix& train_embeddings, const Labels& labels,
                                          const Batch& batch);

struct TrainReport {
  std::vector<double> epoch_losses;
  std::vector<double> learning_rates;  // rate in effect during each epoch
  ProjectionParams params;
  std::uint64_t seed = 0;
  std::size_t resampled_batches = 0;
};

/// Plain SGD on the batch loss with a reduce-on-plateau schedule. Deterministic in config.seed.
TrainReport train_projection(const TrainConfig& config, const EmbeddingDataset& train_set);

// Per-batch seed derived from the run seed; reported in numerical errors so a failing
// batch can be replayed.
std::uint64_t batch_seed(std::uint64_t run_seed, std::uint64_t batch_number);

}  // namespace kcal
