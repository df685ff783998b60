#include "kcal/synth.hpp"

#include "kcal/numeric.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>
#include <random>

namespace kcal {

namespace {

constexpr std::uint64_t kSampleStream = 0x5A17'0000'0000'0001ULL;

double min_pair_distance(const Matrix& points) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < points.rows(); ++j) {
      best = std::min(best, (points.row(i) - points.row(j)).norm());
    }
  }
  return best;
}

double max_pair_distance(const Matrix& points) {
  double best = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < points.rows(); ++j) {
      best = std::max(best, (points.row(i) - points.row(j)).norm());
    }
  }
  return best;
}

std::vector<double> checked_priors(std::vector<double> priors, int num_classes) {
  if (priors.empty()) return std::vector<double>(static_cast<std::size_t>(num_classes), 1.0 / num_classes);
  if (priors.size() != static_cast<std::size_t>(num_classes)) {
    throw ArgumentError("expected " + std::to_string(num_classes) + " priors, got " +
                        std::to_string(priors.size()));
  }
  double sum = 0.0;
  for (double p : priors) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ArgumentError("priors must be finite and >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ArgumentError("priors must sum to 1");
  for (double& p : priors) p /= sum;
  return priors;
}

void fill_normal_row(Matrix& x, Eigen::Index row, const GmmOracle& oracle, int label,
                     std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, oracle.sigma);
  for (Eigen::Index c = 0; c < x.cols(); ++c) x(row, c) = oracle.means(label, c) + normal(rng);
}

}  // namespace

void GmmOracle::validate() const {
  if (means.rows() < 2) throw ValidationError("oracle needs at least 2 classes");
  if (means.cols() < 1) throw ValidationError("oracle needs dimension >= 1");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("oracle sigma must be > 0");
  if (priors.size() != static_cast<std::size_t>(means.rows())) {
    throw ValidationError("oracle priors do not match the number of means");
  }
  double sum = 0.0;
  for (double p : priors) {
    if (!(p >= 0.0)) throw ValidationError("oracle priors must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw ValidationError("oracle priors must sum to 1");
  if (!means.allFinite()) throw ValidationError("oracle means must be finite");
}

GmmOracle make_gmm_oracle(int num_classes, int dim, double separation, double sigma,
                          std::vector<double> priors, std::uint64_t seed) {
  if (num_classes < 2) throw ArgumentError("synthetic mixtures need K >= 2");
  if (dim < 1) throw ArgumentError("synthetic mixtures need h >= 1");
  if (!(separation >= 0.0) || !std::isfinite(separation)) {
    throw ArgumentError("separation must be finite and >= 0");
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ArgumentError("sigma must be > 0");

  GmmOracle oracle;
  oracle.sigma = sigma;
  oracle.priors = checked_priors(std::move(priors), num_classes);
  oracle.seed = seed;
  oracle.means = Matrix::Zero(num_classes, dim);
  if (separation == 0.0) return oracle;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix draw(num_classes, dim);
  for (int attempt = 0;; ++attempt) {
    if (attempt == 1000) throw NumericalError("could not place well-spread mixture means");
    for (Eigen::Index i = 0; i < draw.rows(); ++i) {
      for (Eigen::Index c = 0; c < draw.cols(); ++c) draw(i, c) = normal(rng);
    }
    // Reject draws where two means nearly coincide; scaling would blow the rest apart.
    if (min_pair_distance(draw) > 0.05 * max_pair_distance(draw)) break;
  }
  const RowVector centre = draw.colwise().mean();
  draw.rowwise() -= centre;
  oracle.means = draw * (separation / min_pair_distance(draw));
  return oracle;
}

EmbeddingDataset sample_gmm(const GmmOracle& oracle, std::size_t n, std::uint64_t seed) {
  oracle.validate();
  std::mt19937_64 rng(seed ^ kSampleStream);
  std::discrete_distribution<int> pick(oracle.priors.begin(), oracle.priors.end());
  EmbeddingDataset ds;
  ds.num_classes = oracle.num_classes();
  ds.embeddings.resize(static_cast<Eigen::Index>(n), oracle.dim());
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = pick(rng);
    ds.labels[i] = y;
    fill_normal_row(ds.embeddings, static_cast<Eigen::Index>(i), oracle, y, rng);
  }
  return ds;
}

EmbeddingDataset sample_gmm_per_class(const GmmOracle& oracle,
                                      const std::vector<std::size_t>& per_class,
                                      std::uint64_t seed) {
  oracle.validate();
  if (per_class.size() != static_cast<std::size_t>(oracle.num_classes())) {
    throw ArgumentError("need one sample count per class");
  }
  std::size_t n = 0;
  for (std::size_t c : per_class) n += c;
  std::mt19937_64 rng(seed ^ kSampleStream);
  EmbeddingDataset ds;
  ds.num_classes = oracle.num_classes();
  ds.embeddings.resize(static_cast<Eigen::Index>(n), oracle.dim());
  ds.labels.reserve(n);
  Eigen::Index row = 0;
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    for (std::size_t i = 0; i < per_class[k]; ++i, ++row) {
      ds.labels.push_back(static_cast<int>(k));
      fill_normal_row(ds.embeddings, row, oracle, static_cast<int>(k), rng);
    }
  }
  return ds;
}

std::pair<EmbeddingDataset, GmmOracle> generate_gmm(int num_classes, int dim, double separation,
                                                    double sigma, std::vector<double> priors,
                                                    std::size_t n, std::uint64_t seed) {
  GmmOracle oracle = make_gmm_oracle(num_classes, dim, separation, sigma, std::move(priors), seed);
  EmbeddingDataset ds = sample_gmm(oracle, n, seed);
  return {std::move(ds), std::move(oracle)};
}

ProbMatrix oracle_posterior(const GmmOracle& oracle, const Matrix& x) {
  oracle.validate();
  if (x.cols() != oracle.dim()) {
    throw ArgumentError("posterior query has " + std::to_string(x.cols()) + " columns, oracle has " +
                        std::to_string(oracle.dim()));
  }
  const int num_classes = oracle.num_classes();
  const double inv_two_s2 = 1.0 / (2.0 * oracle.sigma * oracle.sigma);
  std::vector<double> log_prior(static_cast<std::size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    const double p = oracle.priors[static_cast<std::size_t>(k)];
    log_prior[static_cast<std::size_t>(k)] = p > 0.0 ? std::log(p) : kNegInf;
  }

  ProbMatrix probs(x.rows(), num_classes);
  std::vector<double> log_joint(static_cast<std::size_t>(num_classes));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (int k = 0; k < num_classes; ++k) {
      log_joint[static_cast<std::size_t>(k)] =
          log_prior[static_cast<std::size_t>(k)] -
          (x.row(i) - oracle.means.row(k)).squaredNorm() * inv_two_s2;
    }
    const double total = log_sum_exp(log_joint);
    for (int k = 0; k < num_classes; ++k) {
      probs(i, k) = std::exp(log_joint[static_cast<std::size_t>(k)] - total);
    }
  }
  return probs;
}

double full_calibration_error(const ProbMatrix& predicted, const ProbMatrix& truth) {
  if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols()) {
    throw ArgumentError("full_calibration_error: shape mismatch");
  }
  if (predicted.size() == 0) return 0.0;
  return (predicted - truth).cwiseAbs().sum() / static_cast<double>(predicted.size());
}

std::string oracle_to_json(const GmmOracle& oracle) {
  nlohmann::json j;
  j["num_classes"] = oracle.num_classes();
  j["dim"] = oracle.dim();
  j["sigma"] = oracle.sigma;
  j["priors"] = oracle.priors;
  j["seed"] = oracle.seed;
  nlohmann::json means = nlohmann::json::array();
  for (Eigen::Index k = 0; k < oracle.means.rows(); ++k) {
    std::vector<double> row(oracle.means.row(k).begin(), oracle.means.row(k).end());
    means.push_back(row);
  }
  j["means"] = std::move(means);
  return j.dump(2);
}

GmmOracle oracle_from_json(const std::string& text) {
  GmmOracle oracle;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    const auto rows = j.at("means").get<std::vector<std::vector<double>>>();
    if (rows.empty()) throw ValidationError("oracle has no means");
    oracle.means.resize(static_cast<Eigen::Index>(rows.size()),
                        static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k].size() != rows.front().size()) throw ValidationError("ragged oracle means");
      for (std::size_t c = 0; c < rows[k].size(); ++c) {
        oracle.means(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) = rows[k][c];
      }
    }
    oracle.sigma = j.at("sigma").get<double>();
    oracle.priors = j.at("priors").get<std::vector<double>>();
    oracle.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad oracle JSON: ") + e.what());
  }
  oracle.validate();
  return oracle;
}

}  // namespace kcal
