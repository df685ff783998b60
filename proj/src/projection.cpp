#include "kcal/projection.hpp"

#include "kcal/dataio.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace kcal {

namespace {

inline constexpr Magic kMagicProjection{'K', 'P', 'R', 'J'};

Matrix glorot(int fan_in, int fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
  }
  return w;
}

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ValidationError(std::string("projection tensor ") + name + " has shape " +
                          std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                          ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

void require_size(const Vector& v, Eigen::Index size, const char* name) {
  if (v.size() != size) {
    throw ValidationError(std::string("projection tensor ") + name + " has length " +
                          std::to_string(v.size()) + ", expected " + std::to_string(size));
  }
}

Matrix relu_mask(const Matrix& pre) {
  return (pre.array() > 0.0).cast<double>().matrix();
}

}  // namespace

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::kMlp2Skip:
      return "mlp2_skip";
    case Architecture::kLinear:
      return "linear";
    case Architecture::kIdentity:
      return "identity";
  }
  return "unknown";
}

Architecture architecture_from_string(const std::string& name) {
  if (name == "mlp2_skip" || name == "mlp") return Architecture::kMlp2Skip;
  if (name == "linear") return Architecture::kLinear;
  if (name == "identity") return Architecture::kIdentity;
  throw ArgumentError("unknown architecture '" + name + "' (expected mlp, linear or identity)");
}

int default_output_dim(int input_dim) { return std::min(input_dim, 32); }

void ProjectionParams::validate() const {
  if (input_dim < 1 || output_dim < 1) throw ValidationError("projection dimensions must be >= 1");
  if (arch == Architecture::kIdentity) {
    if (input_dim != output_dim) throw ValidationError("identity projection requires d == h");
    return;
  }
  if (output_dim > input_dim) throw ValidationError("projection output dim exceeds input dim");
  if (!(eps > 0.0)) throw ValidationError("normalization eps must be positive");
  require_size(norm_mean, input_dim, "norm_mean");
  require_size(norm_var, input_dim, "norm_var");
  for (Eigen::Index i = 0; i < norm_var.size(); ++i) {
    if (!(norm_var[i] >= eps * (1.0 - 1e-6)) || !std::isfinite(norm_var[i])) {
      throw ValidationError("norm_var entries must be >= eps");
    }
  }
  require_shape(w1, input_dim, output_dim, "w1");
  require_size(b1, output_dim, "b1");
  if (arch == Architecture::kMlp2Skip) {
    require_shape(w2, output_dim, output_dim, "w2");
    require_size(b2, output_dim, "b2");
    require_shape(ws, input_dim, output_dim, "ws");
  }
}

ProjectionGrads ProjectionGrads::zeros_like(const ProjectionParams& params) {
  ProjectionGrads g;
  g.w1 = Matrix::Zero(params.w1.rows(), params.w1.cols());
  g.b1 = Vector::Zero(params.b1.size());
  g.w2 = Matrix::Zero(params.w2.rows(), params.w2.cols());
  g.b2 = Vector::Zero(params.b2.size());
  g.ws = Matrix::Zero(params.ws.rows(), params.ws.cols());
  return g;
}

ProjectionGrads& ProjectionGrads::operator+=(const ProjectionGrads& other) {
  w1 += other.w1;
  b1 += other.b1;
  w2 += other.w2;
  b2 += other.b2;
  ws += other.ws;
  return *this;
}

ProjectionParams init_projection(int input_dim, int output_dim, Architecture arch,
                                 std::uint64_t seed) {
  if (input_dim < 1) throw ArgumentError("input dim must be >= 1");
  ProjectionParams p;
  p.arch = arch;
  p.input_dim = input_dim;
  if (arch == Architecture::kIdentity) {
    p.output_dim = input_dim;
    return p;
  }
  if (output_dim < 1 || output_dim > input_dim) {
    throw ArgumentError("output dim " + std::to_string(output_dim) + " must lie in [1, " +
                        std::to_string(input_dim) + "]");
  }
  p.output_dim = output_dim;
  p.norm_mean = Vector::Zero(input_dim);
  p.norm_var = Vector::Ones(input_dim);

  std::mt19937_64 rng(seed);
  p.w1 = glorot(input_dim, output_dim, rng);
  p.b1 = Vector::Zero(output_dim);
  if (arch == Architecture::kMlp2Skip) {
    p.w2 = glorot(output_dim, output_dim, rng);
    p.b2 = Vector::Zero(output_dim);
    p.ws = glorot(input_dim, output_dim, rng);
  }
  return p;
}

ProjectionParams freeze_normalization(ProjectionParams params, const Matrix& x) {
  if (params.arch == Architecture::kIdentity) return params;
  if (x.rows() < 2) throw ArgumentError("freeze_normalization needs at least 2 rows");
  if (x.cols() != params.input_dim) throw ArgumentError("freeze_normalization: column mismatch");
  const double n = static_cast<double>(x.rows());
  params.norm_mean = x.colwise().sum().transpose() / n;
  params.norm_var.resize(params.input_dim);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mean = params.norm_mean[j];
    double ss = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double dev = x(i, j) - mean;
      ss += dev * dev;
    }
    params.norm_var[j] = ss / n + params.eps;
  }
  return params;
}

Matrix normalize_inputs(const ProjectionParams& params, const Matrix& x) {
  if (x.cols() != params.input_dim) {
    throw ArgumentError("projection expects " + std::to_string(params.input_dim) +
                        " input columns, got " + std::to_string(x.cols()));
  }
  if (params.arch == Architecture::kIdentity) return x;
  const RowVector inv_sd = params.norm_var.array().rsqrt().matrix().transpose();
  Matrix out = x.rowwise() - params.norm_mean.transpose();
  out.array().rowwise() *= inv_sd.array();
  return out;
}

Matrix project_forward(const ProjectionParams& params, const Matrix& x, ForwardCache& cache) {
  cache.normalized = normalize_inputs(params, x);
  switch (params.arch) {
    case Architecture::kIdentity:
      cache.hidden_pre.resize(0, 0);
      cache.hidden.resize(0, 0);
      return cache.normalized;
    case Architecture::kLinear: {
      Matrix z = cache.normalized * params.w1;
      z.rowwise() += params.b1.transpose();
      return z;
    }
    case Architecture::kMlp2Skip: {
      cache.hidden_pre = cache.normalized * params.w1;
      cache.hidden_pre.rowwise() += params.b1.transpose();
      cache.hidden = cache.hidden_pre.cwiseMax(0.0);
      Matrix z = cache.hidden * params.w2 + cache.normalized * params.ws;
      z.rowwise() += params.b2.transpose();
      return z;
    }
  }
  throw ArgumentError("unknown architecture");
}

Matrix project(const ProjectionParams& params, const Matrix& x) {
  ForwardCache cache;
  return project_forward(params, x, cache);
}

ProjectionGrads project_backward(const ProjectionParams& params, const ForwardCache& cache,
                                 const Matrix& dz) {
  ProjectionGrads g = ProjectionGrads::zeros_like(params);
  if (params.arch == Architecture::kIdentity) return g;
  if (dz.rows() != cache.normalized.rows() || dz.cols() != params.output_dim) {
    throw ArgumentError("project_backward: dz has shape " + std::to_string(dz.rows()) + "x" +
                        std::to_string(dz.cols()) + ", expected " +
                        std::to_string(cache.normalized.rows()) + "x" +
                        std::to_string(params.output_dim));
  }
  const Matrix& xn = cache.normalized;
  if (params.arch == Architecture::kLinear) {
    g.w1 = xn.transpose() * dz;
    g.b1 = dz.colwise().sum().transpose();
    return g;
  }
  g.w2 = cache.hidden.transpose() * dz;
  g.b2 = dz.colwise().sum().transpose();
  g.ws = xn.transpose() * dz;
  const Matrix d_hidden = (dz * params.w2.transpose()).cwiseProduct(relu_mask(cache.hidden_pre));
  g.w1 = xn.transpose() * d_hidden;
  g.b1 = d_hidden.colwise().sum().transpose();
  return g;
}

void apply_sgd(ProjectionParams& params, const ProjectionGrads& grads, double learning_rate) {
  if (params.arch == Architecture::kIdentity) return;
  params.w1 -= learning_rate * grads.w1;
  params.b1 -= learning_rate * grads.b1;
  if (params.arch == Architecture::kMlp2Skip) {
    params.w2 -= learning_rate * grads.w2;
    params.b2 -= learning_rate * grads.b2;
    params.ws -= learning_rate * grads.ws;
  }
}

std::vector<double*> trainable_values(ProjectionParams& params) {
  std::vector<double*> out;
  auto add = [&out](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) out.push_back(t.data() + i);
  };
  add(params.w1);
  add(params.b1);
  if (params.arch == Architecture::kMlp2Skip) {
    add(params.w2);
    add(params.b2);
    add(params.ws);
  }
  return out;
}

std::vector<const double*> gradient_values(const ProjectionGrads& grads,
                                           const ProjectionParams& params) {
  std::vector<const double*> out;
  auto add = [&out](const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) out.push_back(t.data() + i);
  };
  add(grads.w1);
  add(grads.b1);
  if (params.arch == Architecture::kMlp2Skip) {
    add(grads.w2);
    add(grads.b2);
    add(grads.ws);
  }
  return out;
}

void write_projection(std::ostream& out, const ProjectionParams& params) {
  params.validate();
  std::vector<std::pair<std::string, Matrix>> tensors;
  if (params.arch != Architecture::kIdentity) {
    tensors.emplace_back("norm_mean", params.norm_mean.transpose());
    tensors.emplace_back("norm_var", params.norm_var.transpose());
    tensors.emplace_back("w1", params.w1);
    tensors.emplace_back("b1", params.b1.transpose());
    if (params.arch == Architecture::kMlp2Skip) {
      tensors.emplace_back("w2", params.w2);
      tensors.emplace_back("b2", params.b2.transpose());
      tensors.emplace_back("ws", params.ws);
    }
  }
  nlohmann::json header;
  header["arch"] = to_string(params.arch);
  header["h"] = params.input_dim;
  header["d"] = params.output_dim;
  header["eps"] = params.eps;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  }
  write_magic(out, kMagicProjection);
  write_u32_le(out, 1);
  write_blob(out, header.dump());
  for (const auto& [name, t] : tensors) write_matrix(out, kMagicEmbeddings, t, Precision::kFloat32);
}

ProjectionParams read_projection(std::istream& in, const std::string& source) {
  expect_magic(in, kMagicProjection, source);
  const std::uint32_t version = read_u32_le(in, source);
  if (version != 1) throw FormatError(source + ": unsupported projection version");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(read_blob(in, source));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": bad projection header: " + e.what());
  }

  ProjectionParams p;
  try {
    p.arch = architecture_from_string(header.at("arch").get<std::string>());
    p.input_dim = header.at("h").get<int>();
    p.output_dim = header.at("d").get<int>();
    p.eps = header.at("eps").get<double>();
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      Matrix t = read_matrix(in, kMagicEmbeddings, source + ":" + name);
      if (t.rows() != entry.at("rows").get<Eigen::Index>() ||
          t.cols() != entry.at("cols").get<Eigen::Index>()) {
        throw SizeMismatchError(source + ": tensor " + name + " shape disagrees with header");
      }
      if (name == "norm_mean") p.norm_mean = t.row(0).transpose();
      else if (name == "norm_var") p.norm_var = t.row(0).transpose();
      else if (name == "w1") p.w1 = t;
      else if (name == "b1") p.b1 = t.row(0).transpose();
      else if (name == "w2") p.w2 = t;
      else if (name == "b2") p.b2 = t.row(0).transpose();
      else if (name == "ws") p.ws = t;
      else throw FormatError(source + ": unknown tensor " + name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": bad projection header: " + e.what());
  }
  p.validate();
  return p;
}

void write_projection_file(const std::string& path, const ProjectionParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  write_projection(out, params);
}

ProjectionParams read_projection_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  return read_projection(in, path);
}

}  // namespace kcal
