#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace kgemos;
using kgemos::testing::random_matrix;

namespace {

EncoderConfig cfg(EncoderKind k, std::size_t e = 6, std::size_t r = 3, std::size_t d = 4) { return {k, e, r, d, 0.01}; }

Batch toy_batch() {
  Batch b;
  b.subjects = {0, 3, 5, 3};
  b.relations = {1, 0, 2, 2};
  return b;
}

std::vector<std::vector<EntityId>> toy_labels() { return {{1}, {2, 4}, {0}, {5, 1, 2}}; }

double full_objective_fd(EncoderKind enc, OutputKind out, std::size_t k) {
  ModelConfig mc;
  mc.encoder = cfg(enc);
  mc.output = out;
  mc.num_components = k;
  mc.dropout = 0.0;
  KgeModel model = make_model(mc, 17);
  const Batch batch = toy_batch();
  const auto labels = toy_labels();
  std::vector<std::span<const EntityId>> spans(labels.begin(), labels.end());
  return finite_difference_check(
      [&](Tape& t) { return batch_objective(t, model, batch, spans, 0.1, true, nullptr); }, model.parameters());
}

}  // namespace

TEST(Encoders, NamesRoundTrip) {
  for (auto k : {EncoderKind::DistMult, EncoderKind::Rescal, EncoderKind::Mlp}) EXPECT_EQ(parse_encoder(encoder_name(k)), k);
  EXPECT_THROW(parse_encoder("transe"), std::invalid_argument);
}

TEST(Encoders, ParameterCountsMatchClosedForms) {
  for (auto k : {EncoderKind::DistMult, EncoderKind::Rescal, EncoderKind::Mlp}) {
    const auto c = cfg(k, 10, 4, 5);
    EXPECT_EQ(init_params(c, 1).parameter_count(), ModelParams::expected_parameter_count(c));
  }
  EXPECT_EQ(ModelParams::expected_parameter_count(cfg(EncoderKind::DistMult, 10, 4, 5)), 70u);
  EXPECT_EQ(ModelParams::expected_parameter_count(cfg(EncoderKind::Rescal, 10, 4, 5)), 150u);
  EXPECT_EQ(ModelParams::expected_parameter_count(cfg(EncoderKind::Mlp, 10, 4, 5)), 70u + 55u + 30u);
}

TEST(Encoders, InitIsSeededAndXavierBounded) {
  const auto c = cfg(EncoderKind::Mlp, 50, 4, 8);
  auto a = init_params(c, 3), b = init_params(c, 3), d = init_params(c, 4);
  EXPECT_EQ(a.entity.value, b.entity.value);
  EXPECT_EQ(a.hidden_weight.value, b.hidden_weight.value);
  EXPECT_NE(a.entity.value, d.entity.value);
  const double bound = std::sqrt(6.0 / (8.0 + 50.0));
  for (double v : a.entity.value.values()) EXPECT_LE(std::abs(v), bound);
  EXPECT_THROW(init_params(cfg(EncoderKind::DistMult, 5, 1, 0), 0), std::invalid_argument);
}

TEST(Encoders, DistMultIsElementwiseProduct) {
  auto p = init_params(cfg(EncoderKind::DistMult), 2);
  Tape t;
  Var h = encode(p, toy_batch(), t);
  for (std::size_t j = 0; j < 4; ++j)
    EXPECT_DOUBLE_EQ(t.value(h)(1, j), p.entity.value(3, j) * p.relation.value(0, j));
}

TEST(Encoders, RescalIsBilinear) {
  auto p = init_params(cfg(EncoderKind::Rescal), 2);
  Tape t;
  Var h = encode(p, toy_batch(), t);
  for (std::size_t j = 0; j < 4; ++j) {
    double want = 0.0;
    for (std::size_t i = 0; i < 4; ++i) want += p.entity.value(5, i) * p.relation.value(2, i * 4 + j);
    EXPECT_NEAR(t.value(h)(2, j), want, 1e-15);
  }
}

TEST(Encoders, MlpMatchesManualForward) {
  auto p = init_params(cfg(EncoderKind::Mlp), 2);
  for (double& v : p.hidden_bias.value.values()) v = 0.1;
  Tape t;
  Var h = encode(p, toy_batch(), t);
  std::vector<double> x;
  for (std::size_t i = 0; i < 4; ++i) x.push_back(p.entity.value(0, i));
  for (std::size_t i = 0; i < 4; ++i) x.push_back(p.relation.value(1, i));
  std::vector<double> hidden(4);
  for (std::size_t o = 0; o < 4; ++o) {
    double s = p.hidden_bias.value(0, o);
    for (std::size_t i = 0; i < 8; ++i) s += p.hidden_weight.value(o, i) * x[i];
    hidden[o] = s < 0 ? 0.01 * s : s;
  }
  for (std::size_t o = 0; o < 4; ++o) {
    double s = p.out_bias.value(0, o);
    for (std::size_t i = 0; i < 4; ++i) s += p.out_weight.value(o, i) * hidden[i];
    EXPECT_NEAR(t.value(h)(0, o), s, 1e-14);
  }
}

TEST(Encoders, ScoresAreHiddenTimesEntities) {
  auto p = init_params(cfg(EncoderKind::DistMult), 2);
  Tape t;
  Var h = encode(p, toy_batch(), t);
  Var z = score_all(t, h, t.param(p.entity));
  EXPECT_EQ(t.value(z).rows(), 4u);
  EXPECT_EQ(t.value(z).cols(), 6u);
  double want = 0.0;
  for (std::size_t j = 0; j < 4; ++j) want += t.value(h)(2, j) * p.entity.value(3, j);
  EXPECT_NEAR(t.value(z)(2, 3), want, 1e-15);
  EXPECT_THROW(score_all(t, h, t.constant(Matrix(6, 3))), DimensionError);
}

TEST(Encoders, RejectsBadBatches) {
  auto p = init_params(cfg(EncoderKind::DistMult), 2);
  Tape t;
  EXPECT_THROW(encode(p, Batch{}, t), std::invalid_argument);
  Batch bad;
  bad.subjects = {0};
  bad.relations = {7};
  EXPECT_THROW(encode(p, bad, t), std::out_of_range);
  bad.relations = {0};
  bad.subjects = {9};
  EXPECT_THROW(encode(p, bad, t), std::out_of_range);
  EXPECT_THROW(encode(p, toy_batch(), t, {true, 0.5, nullptr}), std::invalid_argument);
}

TEST(Encoders, DropoutOnlyWhenTraining) {
  auto p = init_params(cfg(EncoderKind::DistMult), 2);
  Tape t;
  Rng rng{1};
  Var a = encode(p, toy_batch(), t, {false, 0.5, &rng});
  Var b = encode(p, toy_batch(), t, {false, 0.0, nullptr});
  EXPECT_EQ(t.value(a), t.value(b));
  Var c = encode(p, toy_batch(), t, {true, 0.5, &rng});
  EXPECT_NE(t.value(a), t.value(c));
}

TEST(FullObjectiveGradient, SoftmaxEncoders) {
  for (auto enc : {EncoderKind::DistMult, EncoderKind::Rescal, EncoderKind::Mlp})
    EXPECT_LE(full_objective_fd(enc, OutputKind::Softmax, 1), 1e-5) << encoder_name(enc);
}

TEST(FullObjectiveGradient, MixtureEncoders) {
  // Batch-norm paths inside the projections.
  for (auto enc : {EncoderKind::DistMult, EncoderKind::Rescal, EncoderKind::Mlp})
    EXPECT_LE(full_objective_fd(enc, OutputKind::Mos, 3), 1e-4) << encoder_name(enc);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelConfig mc;
  mc.encoder = cfg(EncoderKind::Rescal);
  mc.output = OutputKind::Mos;
  mc.num_components = 2;
  mc.dropout = 0.1;
  KgeModel m = make_model(mc, 99);
  m.mos->projections[1][0].stats.running_mean(0, 2) = 0.25;
  std::stringstream ss;
  save_checkpoint(ss, m);
  KgeModel back = load_checkpoint(ss);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.config.num_components, 2u);
  EXPECT_EQ(back.encoder.relation.value, m.encoder.relation.value);
  EXPECT_EQ(back.mos->projections[1][0].stats.running_mean, m.mos->projections[1][0].stats.running_mean);
  EXPECT_EQ(back.log_prob(toy_batch()), m.log_prob(toy_batch()));
}

TEST(Checkpoint, RejectsCorruptInput) {
  ModelConfig mc;
  mc.encoder = cfg(EncoderKind::DistMult);
  KgeModel m = make_model(mc, 1);
  std::stringstream ss;
  save_checkpoint(ss, m);
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 4));
  EXPECT_THROW(load_checkpoint(truncated), std::runtime_error);
  std::stringstream garbage("{\"format\":\"other\"}\n");
  EXPECT_THROW(load_checkpoint(garbage), std::runtime_error);
}
