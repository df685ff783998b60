#include "commands.hpp"

#include "digest.hpp"
#include "kcal/bandwidth.hpp"
#include "kcal/dataio.hpp"
#include "kcal/kde.hpp"
#include "kcal/metrics.hpp"
#include "kcal/projection.hpp"
#include "kcal/synth.hpp"
#include "kcal/temperature.hpp"
#include "kcal/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace kcal::cli {

namespace {

using nlohmann::json;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw Error("failed writing " + path);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Records what a command read and wrote. Digests cover the exact file bytes.
class RunManifest {
 public:
  explicit RunManifest(std::string command)
      : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {}

  json& config() { return config_; }
  json& results() { return results_; }
  void input(const std::string& role, const std::string& path) { inputs_.emplace_back(role, path); }
  void output(const std::string& role, const std::string& path) { outputs_.emplace_back(role, path); }

  void write(const std::string& path) const {
    json j;
    j["command"] = command_;
    j["config"] = config_;
    j["results"] = results_;
    j["inputs"] = describe(inputs_);
    j["outputs"] = describe(outputs_);
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start_;
    j["timing_seconds"] = elapsed.count();
    write_text(path, j.dump(2) + "\n");
  }

 private:
  static json describe(const std::vector<std::pair<std::string, std::string>>& files) {
    json list = json::array();
    for (const auto& [role, path] : files) {
      list.push_back({{"role", role}, {"path", path}, {"sha256", sha256_file(path)}});
    }
    return list;
  }

  std::string command_;
  std::chrono::steady_clock::time_point start_;
  json config_ = json::object();
  json results_ = json::object();
  std::vector<std::pair<std::string, std::string>> inputs_;
  std::vector<std::pair<std::string, std::string>> outputs_;
};

std::string manifest_path(const std::string& explicit_path, const std::string& primary_output) {
  if (!explicit_path.empty()) return explicit_path;
  return primary_output + ".manifest.json";
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Feature source shared by train, calibrate, predict and sweep.
struct FeatureFlags {
  std::string emb;
  std::string logits;
  std::string input = "embeddings";

  void add(CLI::App* app) {
    app->add_option("--emb", emb, "Embeddings (KEMB, or CSV)");
    app->add_option("--logits", logits, "Logits (KLGT)");
    app->add_option("--input", input, "Which features feed the projection")
        ->check(CLI::IsMember({"embeddings", "logits"}));
  }

  bool uses_logits() const { return input == "logits"; }

  std::string path() const {
    const std::string& p = uses_logits() ? logits : emb;
    if (p.empty()) {
      throw ArgumentError(uses_logits() ? "--input logits needs --logits" : "--emb is required");
    }
    return p;
  }
};

// Features (and labels when a label path is given or the CSV carries them).
EmbeddingDataset load_features(const FeatureFlags& flags, const std::string& labels_path,
                               RunManifest& manifest, bool need_labels) {
  const std::string path = flags.path();
  manifest.input(flags.uses_logits() ? "logits" : "embeddings", path);
  EmbeddingDataset ds;
  if (!flags.uses_logits() && ends_with(path, ".csv")) {
    ds = read_csv(path, labels_path.empty() && need_labels);
  } else {
    ds.embeddings = read_matrix_file(path, flags.uses_logits() ? kMagicLogits : kMagicEmbeddings);
  }
  if (!labels_path.empty()) {
    manifest.input("labels", labels_path);
    auto [labels, num_classes] = read_label_file(labels_path);
    if (labels.size() != ds.size()) {
      throw ValidationError(path + " has " + std::to_string(ds.size()) + " rows but " + labels_path +
                            " has " + std::to_string(labels.size()) + " labels");
    }
    ds.labels = std::move(labels);
    ds.num_classes = num_classes;
  }
  if (need_labels && ds.labels.size() != ds.size()) {
    throw ArgumentError("labels are required (--labels)");
  }
  if (need_labels) ds.validate();
  return ds;
}

std::pair<Labels, int> load_labels(const std::string& path, RunManifest& manifest) {
  manifest.input("labels", path);
  return read_label_file(path);
}

ProjectionParams load_projection_or_identity(const std::string& path, int input_dim,
                                             RunManifest& manifest) {
  if (path.empty()) return init_projection(input_dim, input_dim, Architecture::kIdentity, 0);
  manifest.input("projection", path);
  ProjectionParams params = read_projection_file(path);
  if (params.input_dim != input_dim) {
    throw ValidationError("projection expects " + std::to_string(params.input_dim) +
                          " input columns, features have " + std::to_string(input_dim));
  }
  return params;
}

std::string oracle_json_path(const std::string& prefix) { return prefix + ".oracle.json"; }

// ---------------------------------------------------------------------------- synth

struct SynthFlags {
  int classes = 3;
  int dim = 2;
  double separation = 4.0;
  double sigma = 1.0;
  std::vector<double> priors;
  std::size_t n = 1000;
  std::size_t per_class = 0;
  std::uint64_t seed = 0;
  std::string oracle;
  std::string out;
  std::optional<double> logit_scale;
  std::vector<double> class_offsets;
  std::string manifest;
};

void add_synth(CLI::App& app, SynthFlags& f) {
  CLI::App* sub = app.add_subcommand("synth", "Sample a Gaussian-mixture dataset with its oracle");
  sub->add_option("--classes", f.classes, "Number of classes K")->capture_default_str();
  sub->add_option("--dim", f.dim, "Embedding dimension h")->capture_default_str();
  sub->add_option("--separation", f.separation, "Closest distance between class means")
      ->capture_default_str();
  sub->add_option("--sigma", f.sigma, "Shared isotropic standard deviation")->capture_default_str();
  sub->add_option("--priors", f.priors, "Class priors (default uniform)");
  sub->add_option("--n", f.n, "Number of samples, labels drawn from the priors")
      ->capture_default_str();
  sub->add_option("--per-class", f.per_class, "Exactly this many samples per class instead of --n");
  sub->add_option("--oracle", f.oracle, "Reuse an existing oracle JSON instead of drawing means");
  sub->add_option("--seed", f.seed, "Random seed")->capture_default_str();
  sub->add_option("--out", f.out, "Output prefix: <out>.kemb, <out>.klab, <out>.oracle.json")
      ->required();
  sub->add_option("--logit-scale", f.logit_scale,
                  "Also write <out>.klgt holding scale * log posterior (scale > 1 is overconfident)");
  sub->add_option("--class-offsets", f.class_offsets, "Per-class offsets added to the logits");
  sub->add_option("--manifest", f.manifest, "Manifest path (default <out>.manifest.json)");
}

int cmd_synth(const SynthFlags& f) {
  RunManifest manifest("synth");
  GmmOracle oracle;
  if (!f.oracle.empty()) {
    manifest.input("oracle", f.oracle);
    oracle = oracle_from_json(read_text(f.oracle));
  } else {
    oracle = make_gmm_oracle(f.classes, f.dim, f.separation, f.sigma, f.priors, f.seed);
  }
  const int num_classes = oracle.num_classes();
  EmbeddingDataset ds;
  if (f.per_class > 0) {
    ds = sample_gmm_per_class(oracle, std::vector<std::size_t>(static_cast<std::size_t>(num_classes),
                                                               f.per_class),
                              f.seed);
  } else {
    ds = sample_gmm(oracle, f.n, f.seed);
  }
  // Round through float32 so the oracle quantities below match what readers will see.
  ds.embeddings = ds.embeddings.cast<float>().cast<double>();

  const std::string emb_path = f.out + ".kemb";
  const std::string lab_path = f.out + ".klab";
  const std::string oracle_path = oracle_json_path(f.out);
  write_embedding_file(emb_path, ds.embeddings);
  write_label_file(lab_path, ds.labels, num_classes);
  write_text(oracle_path, oracle_to_json(oracle) + "\n");
  manifest.output("embeddings", emb_path);
  manifest.output("labels", lab_path);
  manifest.output("oracle", oracle_path);

  if (f.logit_scale) {
    if (!f.class_offsets.empty() && f.class_offsets.size() != static_cast<std::size_t>(num_classes)) {
      throw ArgumentError("--class-offsets needs one value per class");
    }
    const ProbMatrix post = oracle_posterior(oracle, ds.embeddings);
    Matrix logits(post.rows(), post.cols());
    for (Eigen::Index i = 0; i < post.rows(); ++i) {
      for (Eigen::Index k = 0; k < post.cols(); ++k) {
        const double offset = f.class_offsets.empty() ? 0.0 : f.class_offsets[static_cast<std::size_t>(k)];
        logits(i, k) = *f.logit_scale * std::log(std::max(post(i, k), 1e-300)) + offset;
      }
    }
    const std::string logit_path = f.out + ".klgt";
    write_matrix_file(logit_path, kMagicLogits, logits, Precision::kFloat32);
    manifest.output("logits", logit_path);
  }

  manifest.config() = {{"classes", num_classes},
                       {"dim", oracle.dim()},
                       {"separation", f.separation},
                       {"sigma", oracle.sigma},
                       {"priors", oracle.priors},
                       {"n", ds.size()},
                       {"per_class", f.per_class},
                       {"seed", f.seed}};
  if (f.logit_scale) manifest.config()["logit_scale"] = *f.logit_scale;
  if (!f.class_offsets.empty()) manifest.config()["class_offsets"] = f.class_offsets;
  manifest.write(manifest_path(f.manifest, f.out));
  std::cout << "wrote " << ds.size() << " samples (K=" << num_classes << ", h=" << oracle.dim()
            << ") to " << emb_path << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------- train

struct TrainFlags {
  FeatureFlags features;
  std::string labels;
  std::string out;
  std::string report;
  std::string config;
  std::string manifest;
  std::uint64_t seed = 0;
  int epochs = 0;
  int batches_per_epoch = 0;
  int batch_size = 0;
  int background = 0;
  double lr = 0.0;
  int patience = 0;
  double factor = 0.0;
  std::string arch;
  int output_dim = 0;
  CLI::App* sub = nullptr;
};

void add_train(CLI::App& app, TrainFlags& f) {
  CLI::App* sub = app.add_subcommand("train", "Train the projection on labelled training data");
  f.sub = sub;
  f.features.add(sub);
  sub->add_option("--labels", f.labels, "Training labels (KLAB)");
  sub->add_option("--out", f.out, "Projection output file")->required();
  sub->add_option("--report", f.report, "Training report JSON (default <out>.report.json)");
  sub->add_option("--config", f.config, "JSON file with training settings; flags override it");
  sub->add_option("--seed", f.seed, "Random seed");
  sub->add_option("--epochs", f.epochs, "Epoch cap (default 100)");
  sub->add_option("--batches-per-epoch", f.batches_per_epoch, "Batches per epoch (default 200)");
  sub->add_option("--batch-size", f.batch_size, "Prediction batch size B (default 64)");
  sub->add_option("--background", f.background, "Background samples per class m (default 20)");
  sub->add_option("--lr", f.lr, "SGD learning rate (default 1e-3)");
  sub->add_option("--patience", f.patience, "Plateau patience in epochs (default 10)");
  sub->add_option("--factor", f.factor, "Plateau learning-rate factor (default 0.5)");
  sub->add_option("--arch", f.arch, "mlp2_skip, linear or identity")
      ->check(CLI::IsMember({"mlp2_skip", "mlp", "linear", "identity"}));
  sub->add_option("--output-dim", f.output_dim, "Projection output dimension (default min(h, 32))");
  sub->add_option("--manifest", f.manifest, "Manifest path (default <out>.manifest.json)");
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "background_per_class") c.background_per_class = value.get<int>();
    else if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "batches_per_epoch") c.batches_per_epoch = value.get<int>();
    else if (key == "plateau_patience") c.plateau_patience = value.get<int>();
    else if (key == "plateau_factor") c.plateau_factor = value.get<double>();
    else if (key == "arch") c.arch = architecture_from_string(value.get<std::string>());
    else if (key == "output_dim") c.output_dim = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw ArgumentError("unknown training setting '" + key + "'");
  }
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"background_per_class", c.background_per_class},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batches_per_epoch", c.batches_per_epoch},
          {"plateau_patience", c.plateau_patience},
          {"plateau_factor", c.plateau_factor},
          {"arch", to_string(c.arch)},
          {"output_dim", c.output_dim},
          {"seed", c.seed}};
}

int cmd_train(const TrainFlags& f) {
  RunManifest manifest("train");
  TrainConfig config;
  if (!f.config.empty()) {
    manifest.input("config", f.config);
    config = train_config_from_json(json::parse(read_text(f.config)));
  }
  const CLI::App& sub = *f.sub;
  if (sub.count("--seed")) config.seed = f.seed;
  if (sub.count("--epochs")) config.epochs = f.epochs;
  if (sub.count("--batches-per-epoch")) config.batches_per_epoch = f.batches_per_epoch;
  if (sub.count("--batch-size")) config.batch_size = f.batch_size;
  if (sub.count("--background")) config.background_per_class = f.background;
  if (sub.count("--lr")) config.learning_rate = f.lr;
  if (sub.count("--patience")) config.plateau_patience = f.patience;
  if (sub.count("--factor")) config.plateau_factor = f.factor;
  if (sub.count("--arch")) config.arch = architecture_from_string(f.arch);
  if (sub.count("--output-dim")) config.output_dim = f.output_dim;
  config.validate();

  if (f.labels.empty() && !ends_with(f.features.emb, ".csv")) {
    throw ArgumentError("train needs --labels");
  }
  const EmbeddingDataset train_set = load_features(f.features, f.labels, manifest, true);
  const TrainReport report = train_projection(config, train_set);
  for (std::size_t e = 0; e < report.epoch_losses.size(); ++e) {
    std::cout << "epoch " << e + 1 << " loss " << fmt(report.epoch_losses[e]) << " lr "
              << fmt(report.learning_rates[e]) << "\n";
  }

  write_projection_file(f.out, report.params);
  const std::string report_path = f.report.empty() ? f.out + ".report.json" : f.report;
  json rj;
  rj["seed"] = report.seed;
  rj["arch"] = to_string(report.params.arch);
  rj["input_dim"] = report.params.input_dim;
  rj["output_dim"] = report.params.output_dim;
  rj["input_kind"] = f.features.input;
  rj["epoch_losses"] = report.epoch_losses;
  rj["learning_rates"] = report.learning_rates;
  rj["resampled_batches"] = report.resampled_batches;
  rj["config"] = train_config_to_json(config);
  write_text(report_path, rj.dump(2) + "\n");

  manifest.config() = train_config_to_json(config);
  manifest.config()["input_kind"] = f.features.input;
  manifest.output("projection", f.out);
  manifest.output("report", report_path);
  if (!report.epoch_losses.empty()) manifest.results()["final_loss"] = report.epoch_losses.back();
  manifest.write(manifest_path(f.manifest, f.out));
  return kExitOk;
}

// ---------------------------------------------------------------------------- calibrate

struct CalibrateFlags {
  FeatureFlags features;
  std::string labels;
  std::string projection;
  std::string out;
  std::string law;
  std::string manifest;
  bool loo = true;
  std::optional<double> lb;
  std::optional<double> ub;
  double tol = 1e-3;
};

void add_calibrate(CLI::App& app, CalibrateFlags& f) {
  CLI::App* sub = app.add_subcommand("calibrate", "Project the calibration set and tune the bandwidth");
  f.features.add(sub);
  sub->add_option("--labels", f.labels, "Calibration labels (KLAB)");
  sub->add_option("--projection", f.projection, "Trained projection (default identity)");
  sub->add_option("--out", f.out, "Model output file")->required();
  sub->add_option("--bandwidth-law", f.law,
                  "Law JSON (constant, dim) from sweep; skips the search and uses the rarest class size");
  sub->add_flag("--loo,!--no-loo", f.loo, "Leave-one-out tuning loss (default on; --loo=false disables)");
  sub->add_option("--lb", f.lb, "Lower search bound (default 1e-3 x RMS pairwise distance)");
  sub->add_option("--ub", f.ub, "Upper search bound (default 1e3 x RMS pairwise distance)");
  sub->add_option("--tol", f.tol, "Search tolerance in log-bandwidth")->capture_default_str();
  sub->add_option("--manifest", f.manifest, "Manifest path (default <out>.manifest.json)");
}

BandwidthLaw law_from_json(const json& j) {
  BandwidthLaw law;
  law.constant = j.at("constant").get<double>();
  law.dim = j.at("dim").get<int>();
  law.residual_rms = j.value("residual_rms", 0.0);
  if (!(law.constant > 0.0)) throw ValidationError("bandwidth law constant must be > 0");
  return law;
}

json law_to_json(const BandwidthLaw& law) {
  return {{"constant", law.constant}, {"dim", law.dim}, {"residual_rms", law.residual_rms}};
}

int cmd_calibrate(const CalibrateFlags& f) {
  RunManifest manifest("calibrate");
  if (f.labels.empty() && !ends_with(f.features.emb, ".csv")) {
    throw ArgumentError("calibrate needs --labels");
  }
  const EmbeddingDataset cal = load_features(f.features, f.labels, manifest, true);
  if (cal.size() == 0) throw ValidationError("calibration set is empty");
  ProjectionParams projection =
      load_projection_or_identity(f.projection, static_cast<int>(cal.dim()), manifest);
  const std::string arch = to_string(projection.arch);
  KdeModel model = build_kde_model(std::move(projection), cal.embeddings, cal.labels,
                                   cal.num_classes, 1.0);

  json meta;
  meta["input_kind"] = f.features.input;
  meta["leave_one_out"] = f.loo;
  meta["projection_arch"] = arch;
  json empty = json::array();
  std::size_t min_count = 0;
  for (std::size_t k = 0; k < model.class_counts.size(); ++k) {
    const std::size_t c = model.class_counts[k];
    if (c == 0) {
      empty.push_back(k);
      continue;
    }
    min_count = min_count == 0 ? c : std::min(min_count, c);
  }
  if (!empty.empty()) {
    warn("calibration set has no rows for " + std::to_string(empty.size()) +
         " class(es); they get zero kernel mass and zero prior");
    meta["empty_class_handling"] = "zero mass; prior fallback assigns them probability 0";
  }
  meta["empty_classes"] = empty;
  meta["min_class_count"] = min_count;

  if (!f.law.empty()) {
    manifest.input("bandwidth_law", f.law);
    const BandwidthLaw law = law_from_json(json::parse(read_text(f.law)));
    if (law.dim != model.support.cols()) {
      warn("bandwidth law was fitted for d=" + std::to_string(law.dim) + ", support has d=" +
           std::to_string(model.support.cols()));
    }
    model.bandwidth = analytic_bandwidth(law, static_cast<double>(min_count));
    meta["bandwidth_source"] = "law";
    meta["law"] = law_to_json(law);
  } else {
    BandwidthSearchConfig search;
    search.lb = f.lb;
    search.ub = f.ub;
    search.tol = f.tol;
    search.leave_one_out = f.loo;
    const BandwidthSearchResult r =
        tune_bandwidth(model.support, model.labels, model.num_classes(), search);
    if (r.at_boundary) warn("tuned bandwidth sits on the search boundary");
    model.bandwidth = r.bandwidth;
    meta["bandwidth_source"] = "golden_section";
    meta["search"] = {{"lb", r.lb},
                      {"ub", r.ub},
                      {"tol", f.tol},
                      {"loss", r.loss},
                      {"evaluations", r.evaluations},
                      {"at_boundary", r.at_boundary}};
  }

  write_kde_model_file(f.out, model, meta.dump());
  std::cout << "bandwidth " << fmt(model.bandwidth) << "\n";

  manifest.config() = {{"input_kind", f.features.input},
                       {"leave_one_out", f.loo},
                       {"tol", f.tol},
                       {"bandwidth_law", !f.law.empty()}};
  if (f.lb) manifest.config()["lb"] = *f.lb;
  if (f.ub) manifest.config()["ub"] = *f.ub;
  manifest.results() = {{"bandwidth", model.bandwidth},
                        {"class_counts", model.class_counts},
                        {"n", model.size()},
                        {"metadata", meta}};
  manifest.output("model", f.out);
  manifest.write(manifest_path(f.manifest, f.out));
  return kExitOk;
}

// ---------------------------------------------------------------------------- predict

struct PredictFlags {
  FeatureFlags features;
  std::string model;
  std::string out;
  std::string manifest;
  bool loo = false;
};

void add_predict(CLI::App& app, PredictFlags& f) {
  CLI::App* sub = app.add_subcommand("predict", "Calibrated probabilities for query features");
  f.features.add(sub);
  sub->add_option("--model", f.model, "Model file from calibrate")->required();
  sub->add_option("--out", f.out, "Probability output (KPRB)")->required();
  sub->add_flag("--loo", f.loo, "Queries are the calibration set; leave each point out");
  sub->add_option("--manifest", f.manifest, "Manifest path (default <out>.manifest.json)");
}

int cmd_predict(const PredictFlags& f) {
  RunManifest manifest("predict");
  manifest.input("model", f.model);
  auto [model, meta_text] = read_kde_model_file(f.model);
  const json meta = json::parse(meta_text);
  const std::string trained_on = meta.value("input_kind", "embeddings");
  if (trained_on != f.features.input) {
    throw ValidationError("model was calibrated on " + trained_on + " but --input is " +
                          f.features.input);
  }
  const EmbeddingDataset queries = load_features(f.features, "", manifest, false);
  if (static_cast<int>(queries.dim()) != model.projection.input_dim) {
    throw ValidationError("queries have " + std::to_string(queries.dim()) +
                          " columns, model expects " + std::to_string(model.projection.input_dim));
  }
  const KdePrediction pred = kde_predict(model, queries.embeddings, f.loo);
  write_matrix_file(f.out, kMagicProbabilities, pred.probs, Precision::kFloat64);
  if (pred.fallback_count > 0) {
    warn(std::to_string(pred.fallback_count) + " queries had no kernel support; priors used");
  }
  std::cout << "rows " << pred.probs.rows() << " fallback_count " << pred.fallback_count << "\n";

  manifest.config() = {{"leave_one_out", f.loo}, {"input_kind", f.features.input}};
  manifest.results() = {{"rows", pred.probs.rows()}, {"fallback_count", pred.fallback_count}};
  manifest.output("probabilities", f.out);
  manifest.write(manifest_path(f.manifest, f.out));
  return kExitOk;
}

// ---------------------------------------------------------------------------- eval

struct EvalFlags {
  std::string probs;
  std::string labels;
  std::vector<std::string> schemes{"adaptive", "static"};
  int bins = 20;
  bool validate = false;
  std::string out;
  std::string oracle;
  std::string emb;
  std::string manifest;
};

void add_eval(CLI::App& app, EvalFlags& f) {
  CLI::App* sub = app.add_subcommand("eval", "Accuracy, ECE, CECE, Brier scores and NLL");
  sub->add_option("--probs", f.probs, "Probabilities (KPRB)")->required();
  sub->add_option("--labels", f.labels, "True labels (KLAB)")->required();
  sub->add_option("--scheme", f.schemes, "Binning schemes")
      ->check(CLI::IsMember({"adaptive", "static"}))
      ->capture_default_str();
  sub->add_option("--bins", f.bins, "Bins per scheme")->capture_default_str();
  sub->add_flag("--validate", f.validate, "Fail unless every row is on the simplex within 1e-9");
  sub->add_option("--out", f.out, "Metrics JSON (default stdout)");
  sub->add_option("--oracle", f.oracle, "Oracle JSON; with --emb adds the full calibration error");
  sub->add_option("--emb", f.emb, "Raw embeddings of the evaluated rows (for --oracle)");
  sub->add_option("--manifest", f.manifest, "Manifest path (default <out>.manifest.json)");
}

ProbMatrix load_probs(const std::string& path, RunManifest& manifest) {
  manifest.input("probabilities", path);
  return read_matrix_file(path, kMagicProbabilities);
}

void check_label_range(const ProbMatrix& probs, const Labels& labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) {
    throw ValidationError("probabilities have " + std::to_string(probs.rows()) + " rows but " +
                          std::to_string(labels.size()) + " labels were given");
  }
  for (int y : labels) {
    if (y >= probs.cols()) throw ValidationError("label " + std::to_string(y) + " >= K");
  }
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
  } else {
    write_text(path, text);
  }
}

int cmd_eval(const EvalFlags& f) {
  RunManifest manifest("eval");
  const ProbMatrix probs = load_probs(f.probs, manifest);
  const Labels labels = load_labels(f.labels, manifest).first;
  check_label_range(probs, labels);
  if (f.validate) validate_probabilities(probs);
  if (labels.empty()) throw ValidationError("nothing to evaluate");

  const int num_classes = static_cast<int>(probs.cols());
  json j;
  j["n"] = labels.size();
  j["num_classes"] = num_classes;
  j["accuracy"] = accuracy(probs, labels);
  j["brier_top"] = brier_top(probs, labels);
  j["brier_multi"] = brier_multi(probs, labels);
  j["nll"] = nll(probs, labels);
  j["cece_threshold_rule"] = "max(0.01, 1/K)";
  j["cece_threshold"] = classwise_threshold(num_classes);
  j["validated"] = f.validate;
  json schemes = json::object();
  for (const std::string& name : f.schemes) {
    const BinningScheme scheme{binning_kind_from_string(name), f.bins};
    schemes[name] = {{"n_bins", f.bins}, {"ece", ece(probs, labels, scheme)},
                     {"cece", cece(probs, labels, scheme)}};
  }
  j["schemes"] = schemes;

  if (!f.oracle.empty()) {
    if (f.emb.empty()) throw ArgumentError("--oracle needs --emb");
    manifest.input("oracle", f.oracle);
    manifest.input("embeddings", f.emb);
    const GmmOracle oracle = oracle_from_json(read_text(f.oracle));
    const Matrix x = read_matrix_file(f.emb, kMagicEmbeddings);
    if (x.rows() != probs.rows()) throw ValidationError("--emb rows differ from the probabilities");
    const ProbMatrix truth = oracle_posterior(oracle, x);
    j["full_calibration_error"] = full_calibration_error(probs, truth);
    j["oracle_accuracy"] = accuracy(truth, labels);
  }

  const std::string text = j.dump(2) + "\n";
  emit(f.out, text);
  if (!f.out.empty() || !f.manifest.empty()) {
    manifest.config() = {{"schemes", f.schemes}, {"bins", f.bins}, {"validate", f.validate}};
    if (!f.out.empty()) manifest.output("metrics", f.out);
    manifest.write(manifest_path(f.manifest, f.out));
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------- reliability

struct ReliabilityFlags {
  std::string probs;
  std::string labels;
  std::string axis = "confidence";
  std::string scheme = "adaptive";
  int bins = 20;
  std::size_t min_count = 15;
  std::string out;
  std::string csv;
  std::string manifest;
};

void add_reliability(CLI::App& app, ReliabilityFlags& f) {
  CLI::App* sub = app.add_subcommand("reliability", "Reliability-diagram bins");
  sub->add_option("--probs", f.probs, "Probabilities (KPRB)")->required();
  sub->add_option("--labels", f.labels, "True labels (KLAB)")->required();
  sub->add_option("--axis", f.axis, "confidence or class:<k>")->capture_default_str();
  sub->add_option("--scheme", f.scheme, "adaptive or static")
      ->check(CLI::IsMember({"adaptive", "static"}))
      ->capture_default_str();
  sub->add_option("--bins", f.bins, "Number of bins")->capture_default_str();
  sub->add_option("--min-count", f.min_count, "Drop bins with fewer samples")->capture_default_str();
  sub->add_option("--out", f.out, "JSON output (default stdout)");
  sub->add_option("--csv", f.csv, "Also write the bins as CSV");
  sub->add_option("--manifest", f.manifest, "Manifest path (default <out>.manifest.json)");
}

ReliabilityAxis parse_axis(const std::string& text) {
  if (text == "confidence") return ReliabilityAxis::confidence();
  if (text.rfind("class:", 0) == 0) {
    const std::string rest = text.substr(6);
    int k = -1;
    try {
      std::size_t used = 0;
      k = std::stoi(rest, &used);
      if (used != rest.size()) k = -1;
    } catch (const std::exception&) {
      k = -1;
    }
    if (k >= 0) return ReliabilityAxis::for_class(k);
  }
  throw ArgumentError("--axis must be 'confidence' or 'class:<k>', got '" + text + "'");
}

int cmd_reliability(const ReliabilityFlags& f) {
  RunManifest manifest("reliability");
  const ProbMatrix probs = load_probs(f.probs, manifest);
  const Labels labels = load_labels(f.labels, manifest).first;
  check_label_range(probs, labels);
  const ReliabilityAxis axis = parse_axis(f.axis);
  if (axis.class_index >= probs.cols()) {
    throw ValidationError("class " + std::to_string(axis.class_index) + " does not exist (K = " +
                          std::to_string(probs.cols()) + ")");
  }
  const BinningScheme scheme{binning_kind_from_string(f.scheme), f.bins};
  const ReliabilityData data = reliability_data(probs, labels, axis, scheme, f.min_count);

  json j;
  j["axis"] = axis.describe();
  j["scheme"] = to_string(scheme.kind);
  j["n_bins"] = scheme.n_bins;
  j["min_count"] = data.min_count;
  j["total"] = data.total;
  json bins = json::array();
  for (const auto& b : data.bins) {
    bins.push_back({{"mean_predicted", b.mean_predicted}, {"frequency", b.frequency}, {"count", b.count}});
  }
  j["bins"] = bins;
  emit(f.out, j.dump(2) + "\n");

  if (!f.csv.empty()) {
    std::string text = "mean_predicted,frequency,count\n";
    for (const auto& b : data.bins) {
      text += fmt(b.mean_predicted) + "," + fmt(b.frequency) + "," + std::to_string(b.count) + "\n";
    }
    write_text(f.csv, text);
  }
  if (!f.out.empty() || !f.manifest.empty()) {
    manifest.config() = {{"axis", f.axis}, {"scheme", f.scheme}, {"bins", f.bins},
                         {"min_count", f.min_count}};
    if (!f.out.empty()) manifest.output("reliability", f.out);
    if (!f.csv.empty()) manifest.output("reliability_csv", f.csv);
    manifest.write(manifest_path(f.manifest, f.out.empty() ? f.csv : f.out));
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------- sweep

struct SweepFlags {
  FeatureFlags features;
  std::string labels;
  std::string test_emb;
  std::string test_logits;
  std::string test_labels;
  std::string projection;
  std::string oracle;
  std::vector<std::size_t> sizes;
  std::uint64_t seed = 0;
  bool loo = true;
  int bins = 20;
  std::string out;
  std::string law_out;
  std::string manifest;
};

void add_sweep(CLI::App& app, SweepFlags& f) {
  CLI::App* sub = app.add_subcommand("sweep", "Retune and evaluate over calibration-set sizes");
  f.features.add(sub);
  sub->add_option("--labels", f.labels, "Calibration pool labels (KLAB)");
  sub->add_option("--test-emb", f.test_emb, "Test embeddings (KEMB)");
  sub->add_option("--test-logits", f.test_logits, "Test logits (KLGT) when --input logits");
  sub->add_option("--test-labels", f.test_labels, "Test labels (KLAB)")->required();
  sub->add_option("--projection", f.projection, "Trained projection (default identity)");
  sub->add_option("--oracle", f.oracle, "Oracle JSON; adds the full calibration error column");
  sub->add_option("--sizes", f.sizes, "Total calibration sizes |C| to try")->required();
  sub->add_option("--seed", f.seed, "Subsampling seed")->capture_default_str();
  sub->add_flag("--loo,!--no-loo", f.loo, "Leave-one-out tuning loss");
  sub->add_option("--bins", f.bins, "Adaptive bins for ECE and CECE")->capture_default_str();
  sub->add_option("--out", f.out, "CSV output")->required();
  sub->add_option("--law-out", f.law_out, "Fitted law JSON (default <out>.law.json)");
  sub->add_option("--manifest", f.manifest, "Manifest path (default <out>.manifest.json)");
}

int cmd_sweep(const SweepFlags& f) {
  RunManifest manifest("sweep");
  if (f.labels.empty() && !ends_with(f.features.emb, ".csv")) {
    throw ArgumentError("sweep needs --labels");
  }
  const EmbeddingDataset pool = load_features(f.features, f.labels, manifest, true);
  FeatureFlags test_flags;
  test_flags.input = f.features.input;
  test_flags.emb = f.test_emb;
  test_flags.logits = f.test_logits;
  const EmbeddingDataset test = load_features(test_flags, f.test_labels, manifest, true);
  if (test.dim() != pool.dim()) throw ValidationError("test and pool features differ in width");
  const int num_classes = std::max(pool.num_classes, test.num_classes);
  const ProjectionParams projection =
      load_projection_or_identity(f.projection, static_cast<int>(pool.dim()), manifest);
  const Matrix pool_z = project(projection, pool.embeddings);
  const Matrix test_z = project(projection, test.embeddings);

  std::optional<ProbMatrix> truth;
  if (!f.oracle.empty()) {
    if (f.features.uses_logits()) throw ArgumentError("--oracle needs embedding inputs");
    manifest.input("oracle", f.oracle);
    truth = oracle_posterior(oracle_from_json(read_text(f.oracle)), test.embeddings);
  }

  const ClassPartition partition = class_partition(pool.labels, num_classes);
  const BinningScheme scheme{BinningKind::kAdaptive, f.bins};
  std::string csv =
      "size,m,bandwidth,at_boundary,accuracy,ece,cece,brier_top,brier_multi,nll,full_calibration_error\n";
  std::vector<std::pair<double, double>> pairs;
  json rows = json::array();
  for (std::size_t i = 0; i < f.sizes.size(); ++i) {
    const std::size_t size = f.sizes[i];
    if (size < static_cast<std::size_t>(num_classes)) {
      warn("skipping calibration size " + std::to_string(size) + " (below K)");
      continue;
    }
    if (size > pool.size()) {
      warn("skipping calibration size " + std::to_string(size) + " (pool has " +
           std::to_string(pool.size()) + " rows)");
      continue;
    }
    const std::vector<std::size_t> picked = stratified_subsample(partition, size, f.seed + i);
    KdeModel model;
    model.projection = projection;
    model.support.resize(static_cast<Eigen::Index>(picked.size()), pool_z.cols());
    model.class_counts.assign(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t r = 0; r < picked.size(); ++r) {
      model.support.row(static_cast<Eigen::Index>(r)) = pool_z.row(static_cast<Eigen::Index>(picked[r]));
      const int y = pool.labels[picked[r]];
      model.labels.push_back(y);
      ++model.class_counts[static_cast<std::size_t>(y)];
    }
    std::size_t m = 0;
    for (std::size_t c : model.class_counts) {
      if (c > 0) m = m == 0 ? c : std::min(m, c);
    }
    BandwidthSearchConfig search;
    search.leave_one_out = f.loo;
    const BandwidthSearchResult r = tune_bandwidth(model.support, model.labels, num_classes, search);
    model.bandwidth = r.bandwidth;
    const ProbMatrix probs = kde_predict_projected(model, test_z, false).probs;
    const double fce = truth ? full_calibration_error(probs, *truth) : std::nan("");
    csv += std::to_string(size) + "," + std::to_string(m) + "," + fmt(r.bandwidth) + "," +
           (r.at_boundary ? "1" : "0") + "," + fmt(accuracy(probs, test.labels)) + "," +
           fmt(ece(probs, test.labels, scheme)) + "," + fmt(cece(probs, test.labels, scheme)) + "," +
           fmt(brier_top(probs, test.labels)) + "," + fmt(brier_multi(probs, test.labels)) + "," +
           fmt(nll(probs, test.labels)) + "," + (truth ? fmt(fce) : std::string()) + "\n";
    pairs.emplace_back(static_cast<double>(m), r.bandwidth);
    rows.push_back({{"size", size}, {"m", m}, {"bandwidth", r.bandwidth}});
  }
  write_text(f.out, csv);
  manifest.output("sweep", f.out);

  const int dim = static_cast<int>(pool_z.cols());
  const std::string law_path = f.law_out.empty() ? f.out + ".law.json" : f.law_out;
  json law_json;
  if (pairs.size() >= 2) {
    law_json = law_to_json(fit_bandwidth_constant(pairs, dim));
    if (pairs.size() >= 3) {
      // Fit without the largest m and see how well the law extrapolates to it.
      auto largest = std::max_element(pairs.begin(), pairs.end());
      std::vector<std::pair<double, double>> rest;
      for (auto it = pairs.begin(); it != pairs.end(); ++it) {
        if (it != largest) rest.push_back(*it);
      }
      const double predicted = fit_bandwidth_constant(rest, dim)(largest->first);
      law_json["holdout"] = {{"m", largest->first},
                             {"tuned", largest->second},
                             {"predicted", predicted},
                             {"ratio", predicted / largest->second}};
    }
  } else {
    warn("fewer than 2 usable sizes; no bandwidth law fitted");
    law_json["constant"] = nullptr;
    law_json["dim"] = dim;
  }
  law_json["pairs"] = rows;
  write_text(law_path, law_json.dump(2) + "\n");
  manifest.output("law", law_path);

  manifest.config() = {{"sizes", f.sizes}, {"seed", f.seed}, {"leave_one_out", f.loo},
                       {"bins", f.bins}, {"input_kind", f.features.input}};
  manifest.write(manifest_path(f.manifest, f.out));
  std::cout << "wrote " << pairs.size() << " sweep rows to " << f.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------- temp-scale

struct TempScaleFlags {
  std::string cal_logits;
  std::string cal_labels;
  std::string logits;
  std::string out;
  std::string report;
  std::string manifest;
};

void add_temp_scale(CLI::App& app, TempScaleFlags& f) {
  CLI::App* sub = app.add_subcommand("temp-scale", "Temperature-scaling baseline");
  sub->add_option("--cal-logits", f.cal_logits, "Calibration logits (KLGT)")->required();
  sub->add_option("--cal-labels", f.cal_labels, "Calibration labels (KLAB)")->required();
  sub->add_option("--logits", f.logits, "Logits to rescale (default: the calibration logits)");
  sub->add_option("--out", f.out, "Probability output (KPRB)")->required();
  sub->add_option("--report", f.report, "Temperature JSON (default <out>.json)");
  sub->add_option("--manifest", f.manifest, "Manifest path (default <out>.manifest.json)");
}

int cmd_temp_scale(const TempScaleFlags& f) {
  RunManifest manifest("temp-scale");
  manifest.input("cal_logits", f.cal_logits);
  const Matrix cal_logits = read_matrix_file(f.cal_logits, kMagicLogits);
  const Labels cal_labels = load_labels(f.cal_labels, manifest).first;
  const TemperatureFit fit = fit_temperature(cal_logits, cal_labels);

  const std::string apply_path = f.logits.empty() ? f.cal_logits : f.logits;
  if (!f.logits.empty()) manifest.input("logits", f.logits);
  const Matrix logits = f.logits.empty() ? cal_logits : read_matrix_file(f.logits, kMagicLogits);
  if (logits.cols() != cal_logits.cols()) throw ValidationError("logit widths differ");
  const ProbMatrix probs = apply_temperature(fit.model, logits);
  write_matrix_file(f.out, kMagicProbabilities, probs, Precision::kFloat64);

  const json result = {{"temperature", fit.model.temperature},
                       {"at_boundary", fit.at_boundary},
                       {"calibration_nll", fit.nll},
                       {"calibration_nll_at_1", fit.nll_at_one},
                       {"evaluations", fit.evaluations},
                       {"search", {{"lower", kTemperatureLower},
                                   {"upper", kTemperatureUpper},
                                   {"tol", kTemperatureTol}}}};
  const std::string report_path = f.report.empty() ? f.out + ".json" : f.report;
  write_text(report_path, result.dump(2) + "\n");
  std::cout << "temperature " << fmt(fit.model.temperature) << "\n";

  manifest.results() = result;
  manifest.output("probabilities", f.out);
  manifest.output("report", report_path);
  manifest.write(manifest_path(f.manifest, f.out));
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"KDE calibration over a learned projection of embeddings", "kcal"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "kcal 0.1.0");

  SynthFlags synth;
  TrainFlags train;
  CalibrateFlags calibrate;
  PredictFlags predict;
  EvalFlags eval;
  ReliabilityFlags reliability;
  SweepFlags sweep;
  TempScaleFlags temp_scale;
  add_synth(app, synth);
  add_train(app, train);
  add_calibrate(app, calibrate);
  add_predict(app, predict);
  add_eval(app, eval);
  add_reliability(app, reliability);
  add_sweep(app, sweep);
  add_temp_scale(app, temp_scale);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "synth") return cmd_synth(synth);
    if (name == "train") return cmd_train(train);
    if (name == "calibrate") return cmd_calibrate(calibrate);
    if (name == "predict") return cmd_predict(predict);
    if (name == "eval") return cmd_eval(eval);
    if (name == "reliability") return cmd_reliability(reliability);
    if (name == "sweep") return cmd_sweep(sweep);
    if (name == "temp-scale") return cmd_temp_scale(temp_scale);
    return kExitValidation;
  } catch (const NumericalError& e) {
    std::cerr << "kcal: numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "kcal: error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const json::exception& e) {
    std::cerr << "kcal: error: bad JSON: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "kcal: failure: " << e.what() << "\n";
    return kExitFailure;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("kcal");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace kcal::cli
