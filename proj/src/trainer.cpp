#include "kcal/trainer.hpp"

#include "kcal/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace kcal {

namespace {

std::size_t uniform_below(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// k distinct draws from [0, n), in draw order.
std::vector<std::size_t> draw_distinct(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> out;
  out.reserve(k);
  if (k * 4 >= n) {
    // Dense case: partial Fisher-Yates.
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + uniform_below(rng, n - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }
  while (out.size() < k) {
    const std::size_t candidate = uniform_below(rng, n);
    if (std::find(out.begin(), out.end(), candidate) == out.end()) out.push_back(candidate);
  }
  return out;
}

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (background_per_class < 1) throw ArgumentError("background_per_class must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ArgumentError("learning_rate must be positive");
  }
  if (epochs < 0) throw ArgumentError("epochs must be >= 0");
  if (batches_per_epoch < 1) throw ArgumentError("batches_per_epoch must be >= 1");
  if (plateau_patience < 0) throw ArgumentError("plateau_patience must be >= 0");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
    throw ArgumentError("plateau_factor must lie in (0, 1)");
  }
  if (output_dim < 0) throw ArgumentError("output_dim must be >= 0");
}

std::uint64_t batch_seed(std::uint64_t run_seed, std::uint64_t batch_number) {
  return mix64(mix64(run_seed) ^ batch_number);
}

Batch sample_batch(const ClassPartition& partition, int batch_size, int background_per_class,
                   std::mt19937_64& rng) {
  if (batch_size < 0 || background_per_class < 1) {
    throw ArgumentError("sample_batch: need batch_size >= 0 and background_per_class >= 1");
  }
  std::size_t n = 0;
  for (std::size_t c : partition.counts) n += c;
  const auto b = static_cast<std::size_t>(batch_size);
  const auto m = static_cast<std::size_t>(background_per_class);
  if (b > n) {
    throw ArgumentError("batch size " + std::to_string(b) + " exceeds dataset size " +
                        std::to_string(n));
  }

  Batch batch;
  batch.prediction = draw_distinct(rng, n, b);
  std::vector<std::size_t> taken = batch.prediction;
  std::sort(taken.begin(), taken.end());

  const std::size_t num_classes = partition.per_class_indices.size();
  batch.background.resize(num_classes);
  batch.class_sizes.assign(num_classes, 0.0);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const auto& members = partition.per_class_indices[k];
    if (members.empty()) {
      throw ArgumentError("sample_batch: class " + std::to_string(k) + " has no rows");
    }
    std::vector<std::size_t> available;
    available.reserve(members.size());
    for (std::size_t idx : members) {
      if (!std::binary_search(taken.begin(), taken.end(), idx)) available.push_back(idx);
    }
    auto& bg = batch.background[k];
    if (available.size() >= m) {
      for (std::size_t pos : draw_distinct(rng, available.size(), m)) bg.push_back(available[pos]);
      batch.class_sizes[k] = static_cast<double>(available.size());
    } else {
      // Degenerate input: too few rows left. Draw with replacement, from the whole class
      // when the prediction batch swallowed all of it.
      const auto& pool = available.empty() ? members : available;
      for (std::size_t i = 0; i < m; ++i) bg.push_back(pool[uniform_below(rng, pool.size())]);
      batch.class_sizes[k] = static_cast<double>(pool.size());
      batch.resampled = true;
    }
  }
  return batch;
}

LossAndGrads compute_batch_loss_and_grads(const ProjectionParams& params,
                                          const Matrix& train_embeddings, const Labels& labels,
                                          const Batch& batch) {
  const std::size_t num_classes = batch.background.size();
  const std::size_t b = batch.prediction.size();
  if (b == 0) throw ArgumentError("compute_batch_loss_and_grads: empty prediction batch");
  if (batch.class_sizes.size() != num_classes) {
    throw ArgumentError("compute_batch_loss_and_grads: class_sizes size mismatch");
  }

  // Stack prediction rows, then background rows class by class.
  std::vector<std::size_t> rows = batch.prediction;
  std::vector<std::size_t> block_begin(num_classes + 1, b);
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (batch.background[k].empty()) {
      throw ArgumentError("compute_batch_loss_and_grads: empty background for class " +
                          std::to_string(k));
    }
    rows.insert(rows.end(), batch.background[k].begin(), batch.background[k].end());
    block_begin[k + 1] = rows.size();
  }
  Matrix x(static_cast<Eigen::Index>(rows.size()), train_embeddings.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    x.row(static_cast<Eigen::Index>(r)) = train_embeddings.row(static_cast<Eigen::Index>(rows[r]));
  }

  ForwardCache cache;
  const Matrix z = project_forward(params, x, cache);
  Matrix dz = Matrix::Zero(z.rows(), z.cols());

  std::vector<double> log_scale(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    log_scale[k] = std::log(batch.class_sizes[k] /
                            static_cast<double>(block_begin[k + 1] - block_begin[k]));
  }

  const double log_floor = std::log(kProbFloor);
  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<double> lw(rows.size());
  std::vector<double> class_mass(num_classes);
  double loss = 0.0;

  for (std::size_t j = 0; j < b; ++j) {
    const int y = labels[batch.prediction[j]];
    const auto zj = z.row(static_cast<Eigen::Index>(j));
    for (std::size_t k = 0; k < num_classes; ++k) {
      double block_max = kNegInf;
      for (std::size_t r = block_begin[k]; r < block_begin[k + 1]; ++r) {
        lw[r] = -0.5 * (zj - z.row(static_cast<Eigen::Index>(r))).squaredNorm();
        block_max = std::max(block_max, lw[r]);
      }
      double sum = 0.0;
      for (std::size_t r = block_begin[k]; r < block_begin[k + 1]; ++r) {
        sum += std::exp(lw[r] - block_max);
      }
      class_mass[k] = block_max + std::log(sum);  // unscaled log kernel sum
    }
    double total = kNegInf;
    for (std::size_t k = 0; k < num_classes; ++k) {
      total = log_add_exp(total, class_mass[k] + log_scale[k]);
    }
    const double log_p = class_mass[static_cast<std::size_t>(y)] +
                         log_scale[static_cast<std::size_t>(y)] - total;
    if (!std::isfinite(log_p) && log_p != kNegInf) {
      throw NumericalError("non-finite loss in batch with seed " + std::to_string(batch.seed));
    }
    if (log_p < log_floor) {
      loss -= log_floor;
      continue;
    }
    loss -= log_p;

    for (std::size_t k = 0; k < num_classes; ++k) {
      const double p_k = std::exp(class_mass[k] + log_scale[k] - total);
      const double target = static_cast<int>(k) == y ? 1.0 : 0.0;
      for (std::size_t r = block_begin[k]; r < block_begin[k + 1]; ++r) {
        const double resp = std::exp(lw[r] - class_mass[k]);
        const double g = -inv_b * resp * (target - p_k);  // dL / d lw
        for (Eigen::Index c = 0; c < z.cols(); ++c) {
          const double diff = z(static_cast<Eigen::Index>(j), c) - z(static_cast<Eigen::Index>(r), c);
          dz(static_cast<Eigen::Index>(j), c) -= g * diff;
          dz(static_cast<Eigen::Index>(r), c) += g * diff;
        }
      }
    }
  }
  loss *= inv_b;
  if (!std::isfinite(loss)) {
    throw NumericalError("non-finite loss in batch with seed " + std::to_string(batch.seed));
  }

  LossAndGrads out;
  out.loss = loss;
  out.grads = project_backward(params, cache, dz);
  return out;
}

TrainReport train_projection(const TrainConfig& config, const EmbeddingDataset& train_set) {
  config.validate();
  train_set.validate();
  if (train_set.labels.size() != train_set.size() || train_set.size() == 0) {
    throw ArgumentError("training set needs one label per row");
  }
  const ClassPartition partition = class_partition(train_set.labels, train_set.num_classes);
  for (std::size_t k = 0; k < partition.counts.size(); ++k) {
    if (partition.counts[k] == 0) {
      throw ArgumentError("training class " + std::to_string(k) + " has no rows");
    }
  }

  const int h = static_cast<int>(train_set.dim());
  const int d = config.output_dim > 0 ? config.output_dim : default_output_dim(h);
  ProjectionParams params = init_projection(h, d, config.arch, config.seed);
  params = freeze_normalization(std::move(params), train_set.embeddings);

  TrainReport report;
  report.seed = config.seed;
  if (config.arch == Architecture::kIdentity) {
    report.params = std::move(params);
    return report;
  }

  double lr = config.learning_rate;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  std::uint64_t batch_number = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int step = 0; step < config.batches_per_epoch; ++step) {
      const std::uint64_t seed = batch_seed(config.seed, batch_number++);
      std::mt19937_64 rng(seed);
      Batch batch = sample_batch(partition, config.batch_size, config.background_per_class, rng);
      batch.seed = seed;
      if (batch.resampled) ++report.resampled_batches;
      LossAndGrads step_result =
          compute_batch_loss_and_grads(params, train_set.embeddings, train_set.labels, batch);
      apply_sgd(params, step_result.grads, lr);
      epoch_loss += step_result.loss;
    }
    epoch_loss /= config.batches_per_epoch;
    report.epoch_losses.push_back(epoch_loss);
    report.learning_rates.push_back(lr);

    // Reduce-on-plateau with a 1e-4 relative improvement threshold.
    if (epoch_loss < best * (1.0 - 1e-4)) {
      best = epoch_loss;
      bad_epochs = 0;
    } else if (++bad_epochs > config.plateau_patience) {
      lr *= config.plateau_factor;
      bad_epochs = 0;
    }
  }
  if (report.resampled_batches > 0) {
    warn(std::to_string(report.resampled_batches) +
         " batches drew background rows with replacement (a class is smaller than m)");
  }
  report.params = std::move(params);
  return report;
}

}  // namespace kcal
