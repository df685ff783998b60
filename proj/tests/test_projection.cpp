#include "kcal/projection.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace kcal;
using kcal::testing::random_matrix;

namespace {

// Scalar-by-scalar reference forward pass, sharing no code with the library.
Matrix reference_forward(const ProjectionParams& p, const Matrix& x) {
  if (p.arch == Architecture::kIdentity) return x;
  const int h = p.input_dim;
  const int d = p.output_dim;
  Matrix out(x.rows(), d);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    std::vector<double> xt(static_cast<std::size_t>(h));
    for (int i = 0; i < h; ++i) xt[static_cast<std::size_t>(i)] = (x(n, i) - p.norm_mean(i)) / std::sqrt(p.norm_var(i));
    std::vector<double> pre(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
      double s = p.b1(j);
      for (int i = 0; i < h; ++i) s += xt[static_cast<std::size_t>(i)] * p.w1(i, j);
      pre[static_cast<std::size_t>(j)] = s;
    }
    for (int j = 0; j < d; ++j) {
      if (p.arch == Architecture::kLinear) {
        out(n, j) = pre[static_cast<std::size_t>(j)];
        continue;
      }
      double s = p.b2(j);
      for (int t = 0; t < d; ++t) s += std::max(0.0, pre[static_cast<std::size_t>(t)]) * p.w2(t, j);
      for (int i = 0; i < h; ++i) s += xt[static_cast<std::size_t>(i)] * p.ws(i, j);
      out(n, j) = s;
    }
  }
  return out;
}

ProjectionParams randomized(int h, int d, Architecture arch, std::mt19937_64& rng) {
  ProjectionParams p = init_projection(h, d, arch, rng());
  p = freeze_normalization(p, random_matrix(20, h, rng, 2.0));
  p.b1 = random_matrix(d, 1, rng, 0.5).col(0);
  if (arch == Architecture::kMlp2Skip) p.b2 = random_matrix(d, 1, rng, 0.5).col(0);
  return p;
}

double bilinear(const Matrix& dz, const Matrix& z) { return (dz.array() * z.array()).sum(); }

}  // namespace

TEST_CASE("init_projection determinism, shapes and bounds") {
  const ProjectionParams a = init_projection(8, 4, Architecture::kMlp2Skip, 0);
  const ProjectionParams b = init_projection(8, 4, Architecture::kMlp2Skip, 0);
  CHECK(a.w1 == b.w1);
  CHECK(a.w2 == b.w2);
  CHECK(a.ws == b.ws);
  CHECK(a.w1 != init_projection(8, 4, Architecture::kMlp2Skip, 1).w1);

  const double bound_w1 = std::sqrt(6.0 / 12.0);
  CHECK(a.w1.cwiseAbs().maxCoeff() <= bound_w1);
  CHECK(a.ws.cwiseAbs().maxCoeff() <= bound_w1);
  CHECK(a.w2.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 8.0));
  CHECK(a.b1.isZero());
  CHECK(a.b2.isZero());
  CHECK(a.norm_mean.isZero());
  CHECK(a.norm_var == Vector::Ones(8));

  const ProjectionParams lin = init_projection(8, 4, Architecture::kLinear, 0);
  CHECK(lin.w2.size() == 0);
  CHECK(lin.b2.size() == 0);
  CHECK(lin.ws.size() == 0);
  CHECK(lin.w1.rows() == 8);
  CHECK(lin.w1.cols() == 4);

  ProjectionParams id = init_projection(5, 2, Architecture::kIdentity, 0);
  CHECK(id.output_dim == 5);
  CHECK(trainable_values(id).empty());

  CHECK_THROWS_AS(init_projection(3, 4, Architecture::kMlp2Skip, 0), ArgumentError);
  CHECK_THROWS_AS(init_projection(3, 4, Architecture::kLinear, 0), ArgumentError);
  CHECK_THROWS_AS(init_projection(3, 0, Architecture::kLinear, 0), ArgumentError);

  CHECK(default_output_dim(8) == 8);
  CHECK(default_output_dim(100) == 32);
}

TEST_CASE("Glorot draws are roughly uniform over the bound") {
  // Uniform(-a, a) has variance a^2 / 3; check on a large tensor.
  const ProjectionParams p = init_projection(200, 100, Architecture::kLinear, 3);
  const double a = std::sqrt(6.0 / 300.0);
  const double var = p.w1.array().square().mean();
  CHECK(var == doctest::Approx(a * a / 3.0).epsilon(0.03));
  CHECK(std::abs(p.w1.mean()) < 0.01 * a);
}

TEST_CASE("architecture names") {
  CHECK(to_string(Architecture::kMlp2Skip) == "mlp2_skip");
  CHECK(architecture_from_string("mlp") == Architecture::kMlp2Skip);
  CHECK(architecture_from_string("linear") == Architecture::kLinear);
  CHECK(architecture_from_string("identity") == Architecture::kIdentity);
  CHECK_THROWS_AS(architecture_from_string("conv"), ArgumentError);
}

TEST_CASE("freeze_normalization statistics") {
  Matrix x(4, 2);
  x << 5, 1, 5, 2, 5, 3, 5, 6;
  const ProjectionParams p = freeze_normalization(init_projection(2, 1, Architecture::kLinear, 0), x);
  CHECK(p.norm_mean(0) == 5.0);
  CHECK(p.norm_var(0) == kNormEps);
  CHECK(p.norm_mean(1) == 3.0);
  // Population variance of {1,2,3,6} is 3.5.
  CHECK(p.norm_var(1) == doctest::Approx(3.5 + kNormEps).epsilon(1e-15));

  std::mt19937_64 rng(4);
  const Matrix big = random_matrix(10000, 3, rng);
  const ProjectionParams q = freeze_normalization(init_projection(3, 2, Architecture::kMlp2Skip, 0), big);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(q.norm_mean(i)) < 0.05);
    CHECK(std::abs(q.norm_var(i) - 1.0) < 0.05);
  }
  const ProjectionParams again = freeze_normalization(q, big);
  CHECK(again.norm_mean == q.norm_mean);
  CHECK(again.norm_var == q.norm_var);

  CHECK_THROWS_AS(freeze_normalization(init_projection(2, 1, Architecture::kLinear, 0), Matrix::Zero(1, 2)),
                  ArgumentError);
}

TEST_CASE("forward pass examples") {
  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(7, 4, rng);
  CHECK(project(init_projection(4, 4, Architecture::kIdentity, 0), x) == x);

  ProjectionParams skip = init_projection(4, 4, Architecture::kMlp2Skip, 0);
  skip.w1.setZero();
  skip.w2.setZero();
  skip.ws = Matrix::Identity(4, 4);
  CHECK((project(skip, x) - x).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(project(skip, Matrix::Zero(2, 3)), ArgumentError);
}

TEST_CASE("forward pass matches the scalar reference") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    const int h = 1 + trial % 7;
    const int d = 1 + trial % h;
    const Architecture arch = trial % 3 == 0 ? Architecture::kLinear : Architecture::kMlp2Skip;
    const ProjectionParams p = randomized(h, d, arch, rng);
    const Matrix x = random_matrix(9, h, rng, 2.0);
    const Matrix z = project(p, x);
    const Matrix ref = reference_forward(p, x);
    CHECK((z - ref).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, ref.cwiseAbs().maxCoeff()));
    CHECK(project(p, x) == z);
  }
}

TEST_CASE("LINEAR is MLP2_SKIP with the nonlinear path zeroed") {
  std::mt19937_64 rng(7);
  const ProjectionParams lin = randomized(5, 3, Architecture::kLinear, rng);
  ProjectionParams mlp = init_projection(5, 3, Architecture::kMlp2Skip, 0);
  mlp.norm_mean = lin.norm_mean;
  mlp.norm_var = lin.norm_var;
  mlp.w1.setZero();
  mlp.b1.setZero();
  mlp.w2.setZero();
  mlp.b2 = lin.b1;
  mlp.ws = lin.w1;
  const Matrix x = random_matrix(11, 5, rng);
  CHECK((project(lin, x) - project(mlp, x)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("backward pass closed forms") {
  std::mt19937_64 rng(8);
  const ProjectionParams lin = randomized(4, 2, Architecture::kLinear, rng);
  const Matrix x = random_matrix(6, 4, rng);
  ForwardCache cache;
  project_forward(lin, x, cache);
  const Matrix dz = random_matrix(6, 2, rng);
  const ProjectionGrads g = project_backward(lin, cache, dz);
  const Matrix xt = normalize_inputs(lin, x);
  CHECK((g.w1 - xt.transpose() * dz).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((g.b1 - dz.colwise().sum().transpose()).cwiseAbs().maxCoeff() <= 1e-12);

  const ProjectionParams mlp = randomized(4, 2, Architecture::kMlp2Skip, rng);
  project_forward(mlp, x, cache);
  const ProjectionGrads zero = project_backward(mlp, cache, Matrix::Zero(6, 2));
  CHECK(zero.w1.isZero());
  CHECK(zero.b1.isZero());
  CHECK(zero.w2.isZero());
  CHECK(zero.b2.isZero());
  CHECK(zero.ws.isZero());

  CHECK_THROWS_AS(project_backward(mlp, cache, Matrix::Zero(5, 2)), ArgumentError);
}

TEST_CASE("backward pass matches central differences") {
  std::mt19937_64 rng(9);
  int compared = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 1 + trial % 6;
    const int d = 1 + trial % h;
    const Architecture arch = trial % 4 == 0 ? Architecture::kLinear : Architecture::kMlp2Skip;
    ProjectionParams p = randomized(h, d, arch, rng);
    const Matrix x = random_matrix(5, h, rng);
    const Matrix dz = random_matrix(5, d, rng);
    ForwardCache cache;
    project_forward(p, x, cache);
    const ProjectionGrads g = project_backward(p, cache, dz);
    const auto grads = gradient_values(g, p);
    auto values = trainable_values(p);
    REQUIRE(grads.size() == values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = *values[i];
      *values[i] = saved + 1e-5;
      const double up = bilinear(dz, project(p, x));
      *values[i] = saved - 1e-5;
      const double down = bilinear(dz, project(p, x));
      *values[i] = saved;
      const double numeric = (up - down) / 2e-5;
      const double gap = std::abs(numeric - *grads[i]);
      CHECK((gap <= 1e-6 || gap <= 1e-4 * std::max(std::abs(numeric), std::abs(*grads[i]))));
      ++compared;
    }
  }
  CHECK(compared > 1000);
}

TEST_CASE("sgd step moves against the gradient") {
  std::mt19937_64 rng(10);
  ProjectionParams p = randomized(3, 2, Architecture::kMlp2Skip, rng);
  const ProjectionParams before = p;
  ProjectionGrads g = ProjectionGrads::zeros_like(p);
  g.w1.setOnes();
  g.ws.setConstant(2.0);
  apply_sgd(p, g, 0.1);
  CHECK((p.w1 - (before.w1.array() - 0.1).matrix()).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((p.ws - (before.ws.array() - 0.2).matrix()).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK(p.w2 == before.w2);

  ProjectionGrads sum = ProjectionGrads::zeros_like(p);
  sum += g;
  sum += g;
  CHECK(sum.ws == (2.0 * g.ws));
}

TEST_CASE("projection serialization round trip") {
  std::mt19937_64 rng(12);
  for (Architecture arch : {Architecture::kMlp2Skip, Architecture::kLinear, Architecture::kIdentity}) {
    ProjectionParams p = arch == Architecture::kIdentity ? init_projection(3, 3, arch, 0)
                                                         : randomized(5, 3, arch, rng);
    // Stored tensors are float32, so round-trip exactness needs float-representable values.
    for (double* v : trainable_values(p)) *v = static_cast<float>(*v);
    if (arch != Architecture::kIdentity) {
      p.norm_mean = p.norm_mean.cast<float>().cast<double>();
      p.norm_var = p.norm_var.cast<float>().cast<double>();
    }
    std::stringstream buf;
    write_projection(buf, p);
    const ProjectionParams q = read_projection(buf);
    CHECK(q.arch == p.arch);
    CHECK(q.input_dim == p.input_dim);
    CHECK(q.output_dim == p.output_dim);
    CHECK(q.eps == p.eps);
    const Matrix x = random_matrix(4, p.input_dim, rng);
    CHECK(project(q, x) == project(p, x));
  }
  std::stringstream garbage("NOPE....");
  CHECK_THROWS_AS(read_projection(garbage), FormatError);
}

TEST_CASE("validate rejects malformed parameters") {
  ProjectionParams p = init_projection(4, 2, Architecture::kMlp2Skip, 0);
  CHECK_NOTHROW(p.validate());
  p.norm_var(1) = 0.0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = init_projection(4, 2, Architecture::kMlp2Skip, 0);
  p.w2 = Matrix::Zero(3, 2);
  CHECK_THROWS_AS(p.validate(), ValidationError);
}
