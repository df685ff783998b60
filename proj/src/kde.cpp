#include "kcal/kde.hpp"

#include "kcal/kernel.hpp"
#include "kcal/numeric.hpp"
#include "kcal/parallel.hpp"

#include "kcal/dataio.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace kcal {

namespace {

// Terms more than this far below the running class maximum add less than
// exp(-40) ~ 4e-18 relative each and are skipped.
constexpr double kNegligibleLogRatio = -40.0;

constexpr Magic kMagicModel{'K', 'C', 'A', 'L'};
constexpr std::uint32_t kModelVersion = 1;

// Support rows regrouped so each class occupies a contiguous block.
struct GroupedSupport {
  Matrix points;
  std::vector<std::size_t> block_begin;  // K + 1 offsets
  std::vector<std::size_t> position_of;  // original row -> grouped row
};

GroupedSupport group_by_class(const Matrix& support, const Labels& labels, int num_classes) {
  GroupedSupport g;
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&labels](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });
  g.points.resize(support.rows(), support.cols());
  g.position_of.assign(n, 0);
  g.block_begin.assign(static_cast<std::size_t>(num_classes) + 1, 0);
  for (std::size_t r = 0; r < n; ++r) {
    g.points.row(static_cast<Eigen::Index>(r)) = support.row(static_cast<Eigen::Index>(order[r]));
    g.position_of[order[r]] = r;
    ++g.block_begin[static_cast<std::size_t>(labels[order[r]]) + 1];
  }
  for (std::size_t k = 1; k < g.block_begin.size(); ++k) g.block_begin[k] += g.block_begin[k - 1];
  return g;
}

// log sum_j exp(-|q - p_j|^2 / (2 b^2)) over rows [begin, end) of points, skipping row `skip`.
// Also reports the largest single log weight seen.
double block_log_mass(const Matrix& points, std::size_t begin, std::size_t end, std::size_t skip,
                      const double* q, double inv_two_b2, std::vector<double>& scratch,
                      double& max_weight) {
  const Eigen::Index d = points.cols();
  double block_max = kNegInf;
  std::size_t used = 0;
  for (std::size_t j = begin; j < end; ++j) {
    if (j == skip) continue;
    const double* p = points.row(static_cast<Eigen::Index>(j)).data();
    double sq = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) {
      const double diff = q[c] - p[c];
      sq += diff * diff;
    }
    const double lw = log_kernel_weight(sq, inv_two_b2);
    scratch[used++] = lw;
    block_max = std::max(block_max, lw);
  }
  max_weight = block_max;
  if (used == 0) return kNegInf;
  double sum = 0.0;
  for (std::size_t u = 0; u < used; ++u) {
    const double rel = scratch[u] - block_max;
    if (rel > kNegligibleLogRatio) sum += std::exp(rel);
  }
  return block_max + std::log(sum);
}

}  // namespace

std::vector<double> KdeModel::priors() const {
  std::vector<double> p(class_counts.size(), 0.0);
  const double n = static_cast<double>(size());
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = n > 0 ? class_counts[k] / n : 0.0;
  return p;
}

void KdeModel::validate() const {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw ValidationError("model bandwidth must be positive and finite");
  }
  if (static_cast<std::size_t>(support.rows()) != labels.size()) {
    throw ValidationError("support rows and labels disagree");
  }
  if (class_counts.size() < 2) throw ValidationError("model needs at least 2 classes");
  std::vector<std::size_t> hist(class_counts.size(), 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= hist.size()) {
      throw ValidationError("support label out of range");
    }
    ++hist[static_cast<std::size_t>(y)];
  }
  if (hist != class_counts) throw ValidationError("class_counts disagree with support labels");
  if (support.rows() > 0 && support.cols() != projection.output_dim) {
    throw ValidationError("support dimension disagrees with projection output");
  }
}

KdeModel build_kde_model(ProjectionParams projection, const Matrix& raw_support,
                         const Labels& labels, int num_classes, double bandwidth) {
  KdeModel model;
  model.support = project(projection, raw_support);
  model.projection = std::move(projection);
  model.labels = labels;
  model.class_counts.assign(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ValidationError("calibration label out of range");
    ++model.class_counts[static_cast<std::size_t>(y)];
  }
  model.bandwidth = bandwidth;
  model.validate();
  return model;
}

KdePrediction kde_predict_projected(const KdeModel& model, const Matrix& query_z,
                                    bool leave_one_out) {
  model.validate();
  const int num_classes = model.num_classes();
  const std::size_t n = static_cast<std::size_t>(query_z.rows());
  if (n > 0 && query_z.cols() != model.support.cols()) {
    throw ArgumentError("query dimension " + std::to_string(query_z.cols()) +
                        " does not match support dimension " +
                        std::to_string(model.support.cols()));
  }
  if (leave_one_out && n != model.size()) {
    throw ArgumentError("leave-one-out prediction requires the support itself as queries");
  }

  const GroupedSupport grouped = group_by_class(model.support, model.labels, num_classes);
  const std::vector<double> priors = model.priors();
  const double inv_two_b2 = 1.0 / (2.0 * model.bandwidth * model.bandwidth);
  constexpr std::size_t kNoSkip = static_cast<std::size_t>(-1);

  KdePrediction out;
  out.probs.resize(static_cast<Eigen::Index>(n), num_classes);
  out.fallback.assign(n, 0);

  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    std::vector<double> scratch(model.size() + 1);
    std::vector<double> class_mass(static_cast<std::size_t>(num_classes));
    for (std::size_t i = begin; i < end; ++i) {
      const double* q = query_z.row(static_cast<Eigen::Index>(i)).data();
      const std::size_t skip = leave_one_out ? grouped.position_of[i] : kNoSkip;
      double best_weight = kNegInf;
      for (int k = 0; k < num_classes; ++k) {
        double block_max = kNegInf;
        class_mass[static_cast<std::size_t>(k)] = block_log_mass(
            grouped.points, grouped.block_begin[static_cast<std::size_t>(k)],
            grouped.block_begin[static_cast<std::size_t>(k) + 1], skip, q, inv_two_b2, scratch,
            block_max);
        best_weight = std::max(best_weight, block_max);
      }
      auto row = out.probs.row(static_cast<Eigen::Index>(i));
      if (!(best_weight >= kUnderflowLogFloor)) {
        for (int k = 0; k < num_classes; ++k) row[k] = priors[static_cast<std::size_t>(k)];
        out.fallback[i] = 1;
        continue;
      }
      const double total = log_sum_exp(class_mass);
      for (int k = 0; k < num_classes; ++k) {
        row[k] = std::exp(class_mass[static_cast<std::size_t>(k)] - total);
      }
    }
  });
  out.fallback_count =
      static_cast<std::size_t>(std::count(out.fallback.begin(), out.fallback.end(), 1));
  return out;
}

KdePrediction kde_predict(const KdeModel& model, const Matrix& raw_queries, bool leave_one_out) {
  if (raw_queries.rows() == 0) {
    KdePrediction empty;
    empty.probs.resize(0, model.num_classes());
    return empty;
  }
  return kde_predict_projected(model, project(model.projection, raw_queries), leave_one_out);
}

ProbMatrix kde_predict_weighted(const Matrix& query_z, const std::vector<Matrix>& backgrounds,
                                const std::vector<double>& class_sizes, double bandwidth) {
  KernelSpec{KernelFamily::kRbf, bandwidth}.validate();
  const std::size_t num_classes = backgrounds.size();
  if (class_sizes.size() != num_classes) {
    throw ArgumentError("kde_predict_weighted: one class size per background set required");
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (backgrounds[k].rows() == 0) {
      throw ArgumentError("kde_predict_weighted: empty background for class " + std::to_string(k));
    }
    if (backgrounds[k].cols() != query_z.cols()) {
      throw ArgumentError("kde_predict_weighted: background dimension mismatch");
    }
    if (!(class_sizes[k] > 0.0)) {
      throw ArgumentError("kde_predict_weighted: class sizes must be positive");
    }
  }
  const double inv_two_b2 = 1.0 / (2.0 * bandwidth * bandwidth);
  ProbMatrix probs(query_z.rows(), static_cast<Eigen::Index>(num_classes));
  std::vector<double> scratch;
  std::vector<double> class_mass(num_classes);
  for (Eigen::Index j = 0; j < query_z.rows(); ++j) {
    const double* q = query_z.row(j).data();
    for (std::size_t k = 0; k < num_classes; ++k) {
      const Matrix& bg = backgrounds[k];
      scratch.resize(static_cast<std::size_t>(bg.rows()));
      double ignored = 0.0;
      const double mass = block_log_mass(bg, 0, static_cast<std::size_t>(bg.rows()),
                                         static_cast<std::size_t>(-1), q, inv_two_b2, scratch,
                                         ignored);
      class_mass[k] = mass + std::log(class_sizes[k] / static_cast<double>(bg.rows()));
    }
    const double total = log_sum_exp(class_mass);
    for (std::size_t k = 0; k < num_classes; ++k) {
      probs(j, static_cast<Eigen::Index>(k)) = std::exp(class_mass[k] - total);
    }
  }
  return probs;
}

void write_kde_model(std::ostream& out, const KdeModel& model, const std::string& metadata_json) {
  model.validate();
  nlohmann::json header;
  header["bandwidth"] = model.bandwidth;
  header["num_classes"] = model.num_classes();
  header["class_counts"] = model.class_counts;
  try {
    header["metadata"] = nlohmann::json::parse(metadata_json);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("model metadata is not JSON: ") + e.what());
  }
  write_magic(out, kMagicModel);
  write_u32_le(out, kModelVersion);
  write_blob(out, header.dump());
  write_projection(out, model.projection);
  write_matrix(out, kMagicEmbeddings, model.support, Precision::kFloat64);
  write_labels(out, model.labels, model.num_classes());
  if (!out) throw ValidationError("failed writing model");
}

std::pair<KdeModel, std::string> read_kde_model(std::istream& in, const std::string& source) {
  expect_magic(in, kMagicModel, source);
  const std::uint32_t version = read_u32_le(in, source);
  if (version != kModelVersion) {
    throw FormatError(source + ": unsupported model version " + std::to_string(version));
  }
  KdeModel model;
  std::string metadata;
  try {
    const nlohmann::json header = nlohmann::json::parse(read_blob(in, source));
    model.bandwidth = header.at("bandwidth").get<double>();
    model.class_counts = header.at("class_counts").get<std::vector<std::size_t>>();
    metadata = header.value("metadata", nlohmann::json::object()).dump();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": bad model header: " + e.what());
  }
  model.projection = read_projection(in, source);
  model.support = read_matrix(in, kMagicEmbeddings, source);
  auto [labels, num_classes] = read_labels(in, source);
  if (num_classes > model.num_classes()) {
    throw ValidationError(source + ": support labels exceed the stored class count");
  }
  model.labels = std::move(labels);
  if (model.support.rows() == 0) model.support.resize(0, model.projection.output_dim);
  model.validate();
  return {std::move(model), std::move(metadata)};
}

void write_kde_model_file(const std::string& path, const KdeModel& model,
                          const std::string& metadata_json) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  write_kde_model(out, model, metadata_json);
}

std::pair<KdeModel, std::string> read_kde_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  return read_kde_model(in, path);
}

}  // namespace kcal
