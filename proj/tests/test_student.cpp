#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"

using namespace agglom3d;

namespace {

StudentConfig small_config(std::uint64_t seed = 1) {
  StudentConfig c;
  c.pe_frequencies = 2;
  c.trunk_widths = {8, 6};
  c.head_dims = {4, 3};
  c.init_seed = seed;
  c.bounds = {Point3::Zero(), Point3::Ones()};
  return c;
}

PointCloud points(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return oracle::random_cloud(rng, n, 2);
}

double pairing(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i].array() * b[i].array()).sum();
  return s;
}

}  // namespace

TEST(InitStudent, DeterministicAndUnitSigma) {
  const auto a = init_student(small_config(3));
  const auto b = init_student(small_config(3));
  EXPECT_EQ(a.params.flatten(), b.params.flatten());
  EXPECT_NE(a.params.flatten(), init_student(small_config(4)).params.flatten());
  for (std::size_t i = 0; i < a.num_heads(); ++i) EXPECT_EQ(a.sigma(i), 1.0);
  for (const auto& l : a.params.trunk) {
    const double limit = 1.0 / std::sqrt(static_cast<double>(l.weight.cols()));
    EXPECT_LE(l.weight.cwiseAbs().maxCoeff(), limit);
    EXPECT_EQ(l.bias.norm(), 0.0);
  }
}

TEST(InitStudent, ParameterCount) {
  const auto m = init_student(small_config());
  // in = 3 + 6*2 = 15; trunk 15->8->6; heads 6->4, 6->3; two scalars.
  const std::size_t want = (15 * 8 + 8) + (8 * 6 + 6) + (6 * 4 + 4) + (6 * 3 + 3) + 2;
  EXPECT_EQ(m.parameter_count(), want);
  EXPECT_EQ(static_cast<std::size_t>(m.params.flatten().size()), want);
}

TEST(InitStudent, RejectsBadConfig) {
  auto c = small_config();
  c.head_dims.clear();
  EXPECT_THROW(init_student(c), ValidationError);
  c = small_config();
  c.trunk_widths = {0};
  EXPECT_THROW(init_student(c), ValidationError);
  c = small_config();
  c.bounds.max.x() = c.bounds.min.x();
  EXPECT_THROW(init_student(c), ValidationError);
}

TEST(PositionalEncode, KnownValues) {
  const SceneBounds b{Point3::Zero(), Point3::Constant(2.0)};
  const auto lo = positional_encode(Point3::Zero(), 2, b);
  ASSERT_EQ(lo.size(), 15);
  for (int a = 0; a < 3; ++a) {
    EXPECT_DOUBLE_EQ(lo[a], -1.0);
    EXPECT_NEAR(lo[3 + a], 0.0, 1e-15);   // sin(-pi)
    EXPECT_NEAR(lo[6 + a], -1.0, 1e-15);  // cos(-pi)
    EXPECT_NEAR(lo[9 + a], 0.0, 1e-15);   // sin(-2pi)
    EXPECT_NEAR(lo[12 + a], 1.0, 1e-15);  // cos(-2pi)
  }
  const auto mid = positional_encode(Point3(1.0, 1.5, 0.5), 1, b);
  EXPECT_DOUBLE_EQ(mid[0], 0.0);
  EXPECT_DOUBLE_EQ(mid[1], 0.5);
  EXPECT_DOUBLE_EQ(mid[2], -0.5);
  EXPECT_NEAR(mid[4], 1.0, 1e-15);
  EXPECT_NEAR(mid[8], std::cos(-0.5 * std::numbers::pi), 1e-15);
  EXPECT_EQ(positional_encode(Point3::Ones(), 0, b).size(), 3);
}

TEST(Forward, ZeroParametersGiveZeroOutput) {
  auto m = init_student(small_config());
  m.params.assign(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.parameter_count())));
  for (const auto& y : forward(m, points(10, 1))) EXPECT_EQ(y.norm(), 0.0);
}

TEST(Forward, HandComputedTinyNetwork) {
  StudentConfig c;
  c.pe_frequencies = 0;
  c.trunk_widths = {2};
  c.head_dims = {1};
  c.bounds = {Point3::Zero(), Point3::Constant(2.0)};
  auto m = init_student(c);
  m.params.trunk[0].weight << 0.5, -0.25, 1.0, 0.0, 0.75, -0.5;
  m.params.trunk[0].bias << 0.1, -0.2;
  m.params.heads[0].weight << 2.0, -3.0;
  m.params.heads[0].bias << 0.05;
  PointCloud p;
  p.points = {{1.5, 0.5, 1.0}};
  // normalized input (0.5, -0.5, 0)
  const double h0 = std::tanh(0.5 * 0.5 - 0.25 * -0.5 + 1.0 * 0.0 + 0.1);
  const double h1 = std::tanh(0.0 * 0.5 + 0.75 * -0.5 - 0.5 * 0.0 - 0.2);
  const double want = 2.0 * h0 - 3.0 * h1 + 0.05;
  EXPECT_NEAR(forward(m, p)[0](0, 0), want, 1e-15);
}

TEST(Forward, RowsFollowPointPermutation) {
  const auto m = init_student(small_config());
  const auto cloud = points(30, 2);
  std::vector<std::size_t> perm(30);
  for (std::size_t i = 0; i < 30; ++i) perm[i] = (i * 7) % 30;
  const auto a = forward(m, cloud);
  const auto b = forward(m, cloud.select(perm));
  for (std::size_t h = 0; h < a.size(); ++h) {
    for (std::size_t i = 0; i < 30; ++i) {
      // Blocked products may round the last bit differently per row position.
      EXPECT_LT((b[h].row(static_cast<Eigen::Index>(i)) - a[h].row(static_cast<Eigen::Index>(perm[i]))).cwiseAbs().maxCoeff(),
                1e-14);
    }
  }
}

TEST(Forward, HeadsAreIndependent) {
  auto m = init_student(small_config());
  const auto cloud = points(12, 3);
  const auto before = forward(m, cloud);
  m.params.heads[1].weight.setRandom();
  const auto after = forward(m, cloud);
  EXPECT_EQ(before[0], after[0]);
  EXPECT_NE(before[1], after[1]);
}

TEST(Backward, ZeroCotangentGivesZeroGradient) {
  const auto m = init_student(small_config());
  const auto cloud = points(9, 4);
  const auto g = backward(m, cloud, {Matrix::Zero(9, 4), Matrix::Zero(9, 3)});
  EXPECT_EQ(g.params.flatten().norm(), 0.0);
}

TEST(Backward, LinearInCotangent) {
  const auto m = init_student(small_config());
  const auto cloud = points(9, 5);
  Rng rng(6);
  auto rnd = [&rng](int r, int c) {
    Matrix x(r, c);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    return x;
  };
  const std::vector<Matrix> a{rnd(9, 4), rnd(9, 3)}, b{rnd(9, 4), rnd(9, 3)};
  const std::vector<Matrix> ab{2.0 * a[0] - 0.5 * b[0], 2.0 * a[1] - 0.5 * b[1]};
  const auto ga = backward(m, cloud, a).params.flatten();
  const auto gb = backward(m, cloud, b).params.flatten();
  const auto gab = backward(m, cloud, ab).params.flatten();
  EXPECT_LT((gab - (2.0 * ga - 0.5 * gb)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, MatchesFiniteDifferences) {
  auto m = init_student(small_config());
  const auto cloud = points(6, 7);
  Rng rng(8);
  std::vector<Matrix> cot;
  for (int d : {4, 3}) {
    Matrix x(6, d);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    cot.push_back(x);
  }
  const auto g = backward(m, cloud, cot).params.flatten();
  const auto theta = m.params.flatten();
  const double h = 1e-6;
  // The scalar slots are left for the objective: skip them.
  for (Eigen::Index i = 0; i < theta.size() - 2; i += 3) {
    auto tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    m.params.assign(tp);
    const double fp = pairing(forward(m, cloud), cot);
    m.params.assign(tm);
    const double fm = pairing(forward(m, cloud), cot);
    const double num = (fp - fm) / (2 * h);
    EXPECT_NEAR(g[i], num, 1e-6 * std::max(1.0, std::abs(num))) << "parameter " << i;
  }
  EXPECT_EQ(g.tail(2).norm(), 0.0);
}

TEST(Backward, RejectsShapeMismatch) {
  const auto m = init_student(small_config());
  const auto cloud = points(5, 9);
  EXPECT_THROW(backward(m, cloud, {Matrix::Zero(5, 4)}), ContractError);
  EXPECT_THROW(backward(m, cloud, {Matrix::Zero(5, 4), Matrix::Zero(4, 3)}), ContractError);
}

TEST(Checkpoint, RoundTripIsExact) {
  auto m = init_student(small_config(5));
  m.params.log_sigma << 0.3, -0.7;
  const auto ck = decode_checkpoint(encode_checkpoint(m, 42));
  EXPECT_EQ(ck.step, 42u);
  EXPECT_EQ(ck.model.params.flatten(), m.params.flatten());
  EXPECT_EQ(ck.model.config.trunk_widths, m.config.trunk_widths);
  EXPECT_EQ(ck.model.config.head_dims, m.config.head_dims);
  const auto cloud = points(8, 10);
  EXPECT_EQ(forward(ck.model, cloud)[1], forward(m, cloud)[1]);
  auto bytes = encode_checkpoint(m, 1);
  bytes.resize(bytes.size() - 8);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}
