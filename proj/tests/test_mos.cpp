#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace kgemos;
using kgemos::testing::random_matrix;

TEST(Mos, OutputNamesRoundTrip) {
  EXPECT_EQ(parse_output("softmax"), OutputKind::Softmax);
  EXPECT_EQ(parse_output("mos"), OutputKind::Mos);
  EXPECT_THROW(parse_output("sigmoid"), std::invalid_argument);
}

TEST(Mos, ParameterCountFormula) {
  for (std::size_t k : {1u, 2u, 4u})
    for (std::size_t d : {1u, 3u, 8u}) {
      auto m = init_mos(k, d, 5);
      EXPECT_EQ(m.parameter_count(), MosParams::expected_parameter_count(k, d));
      EXPECT_EQ(m.parameter_count(), k * d + k * 2 * (d * d + d + 2 * d));
    }
  EXPECT_THROW(init_mos(0, 3, 1), std::invalid_argument);
  EXPECT_THROW(init_mos(2, 0, 1), std::invalid_argument);
}

TEST(Mos, PriorsAreRowStochastic) {
  auto m = init_mos(4, 3, 2);
  const Matrix pi = priors(m, random_matrix(6, 3, 1, -3, 3));
  for (std::size_t i = 0; i < pi.rows(); ++i) {
    double s = 0.0;
    for (double v : pi.row(i)) {
      EXPECT_GT(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Mos, MixtureRowsAreNormalized) {
  auto m = init_mos(3, 4, 2);
  Tape t;
  Var h = t.constant(random_matrix(5, 4, 3));
  Var e = t.constant(random_matrix(9, 4, 4));
  auto out = mixture_log_prob(t, m, h, e, {});
  const Matrix p = exp(t.value(out.log_prob));
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (double v : p.row(i)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-13);
  }
}

TEST(Mos, MixtureEqualsExplicitWeightedSum) {
  auto m = init_mos(3, 4, 6);
  const Matrix hv = random_matrix(5, 4, 7);
  const Matrix ev = random_matrix(9, 4, 8);
  Tape t;
  Var h = t.constant(hv);
  Var e = t.constant(ev);
  const Matrix lp = t.value(mixture_log_prob(t, m, h, e, {}).log_prob);
  const Matrix pi = priors(m, hv);
  Matrix want(5, 9);
  for (std::size_t k = 0; k < 3; ++k) {
    Tape tk;
    const Matrix comp = exp(row_log_softmax(matmul(tk.value(project(tk, m, tk.constant(hv), k, {})), ev, true)));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 9; ++j) want(i, j) += pi(i, k) * comp(i, j);
  }
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(std::exp(lp(i, j)), want(i, j), 1e-14);
}

TEST(Mos, SingleComponentIsOneSoftmaxOfProjection) {
  auto m = init_mos(1, 3, 9);
  const Matrix hv = random_matrix(4, 3, 10);
  const Matrix ev = random_matrix(6, 3, 11);
  Tape t;
  auto out = mixture_log_prob(t, m, t.constant(hv), t.constant(ev), {});
  for (double v : t.value(out.log_prior).values()) EXPECT_EQ(v, 0.0);
  Tape t2;
  const Matrix want = row_log_softmax(matmul(t2.value(project(t2, m, t2.constant(hv), 0, {})), ev, true));
  kgemos::testing::expect_matrix_near(t.value(out.log_prob), want, 1e-14);
}

TEST(Mos, ProjectionOrderIsAffineNormActivation) {
  auto m = init_mos(1, 2, 12);
  auto& layer = m.projections[0][0];
  layer.weight.value = Matrix{{1, 0}, {0, 1}};
  layer.bias.value = Matrix{{0, 0}};
  layer.stats.running_mean = Matrix{{1, 1}};
  layer.stats.running_var = Matrix{{1 - 1e-5, 1 - 1e-5}};
  auto& second = m.projections[0][1];
  second.weight.value = Matrix{{1, 0}, {0, 1}};
  Tape t;
  // x = [0, 3]: normalized [-1, 2], activation [-0.01, 2]; second layer is
  // identity-affine, unit-stats norm, activation again.
  const Matrix y = t.value(project(t, m, t.constant(Matrix{{0, 3}}), 0, {}));
  const double inv = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y(0, 0), 0.01 * (-0.01 * inv), 1e-12);
  EXPECT_NEAR(y(0, 1), 2.0 * inv, 1e-12);
}

TEST(Mos, TrainingModeUpdatesRunningStatsInferenceDoesNot) {
  auto m = init_mos(2, 3, 13);
  const Matrix before = m.projections[1][0].stats.running_mean;
  Tape t;
  Var h = t.constant(random_matrix(6, 3, 14));
  Var e = t.constant(random_matrix(5, 3, 15));
  mixture_log_prob(t, m, h, e, {});
  EXPECT_EQ(m.projections[1][0].stats.running_mean, before);
  mixture_log_prob(t, m, h, e, {true, 0.0, nullptr});
  EXPECT_NE(m.projections[1][0].stats.running_mean, before);
}

TEST(Mos, RejectsMismatchedHidden) {
  auto m = init_mos(2, 3, 16);
  Tape t;
  EXPECT_THROW(mixture_log_prob(t, m, t.constant(Matrix(2, 4)), t.constant(Matrix(5, 4)), {}), DimensionError);
  EXPECT_THROW(project(t, m, t.constant(Matrix(2, 3)), 2, {}), std::out_of_range);
}

TEST(Mos, ModelParameterCountAddsEncoderAndLayer) {
  ModelConfig mc;
  mc.encoder = {EncoderKind::DistMult, 10, 4, 5, 0.01};
  mc.output = OutputKind::Mos;
  mc.num_components = 4;
  KgeModel model = make_model(mc, 1);
  EXPECT_EQ(model.parameter_count(), 70u + MosParams::expected_parameter_count(4, 5));
}
