#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace kgemos;

namespace {

double ce_of(const Matrix& log_p, const std::vector<std::vector<EntityId>>& labels) {
  Tape t;
  std::vector<std::span<const EntityId>> spans(labels.begin(), labels.end());
  return t.value(ce_loss(t, t.constant(log_p), spans))(0, 0);
}

double entropy_of(const Matrix& p) {
  Matrix lp = p;
  for (double& v : lp.values()) v = std::log(v);
  Tape t;
  return t.value(entropy_reg(t, t.constant(lp)))(0, 0);
}

TripleStore toy_store() { return augment_inverse(load_dataset_dir(std::filesystem::path(KGEMOS_SOURCE_DIR) / "data" / "toy", {false, nullptr})); }

TripleStore one_triple_store() {
  TripleStore st;
  st.entity_names = {"a", "b"};
  st.relation_names = {"r"};
  st.train = {{0, 0, 1}};
  return st;
}

// Scalar Adam written out longhand, for comparison.
std::vector<double> scalar_adam(std::vector<double> x, double lr, int steps, const std::vector<double>& target) {
  std::vector<double> m(x.size(), 0.0), v(x.size(), 0.0);
  for (int t = 1; t <= steps; ++t) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double g = 2.0 * (x[i] - target[i]);
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, t));
      const double vh = v[i] / (1.0 - std::pow(0.999, t));
      x[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  return x;
}

bool same_parameters(KgeModel& a, KgeModel& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(pa[i]->value == pb[i]->value)) return false;
  return true;
}

}  // namespace

TEST(CrossEntropy, HandExamples) {
  EXPECT_NEAR(ce_of(Matrix{{std::log(0.1), std::log(0.2), std::log(0.7)}}, {{2}}), -std::log(0.7), 1e-15);
  const double u = std::log(0.25);
  EXPECT_NEAR(ce_of(Matrix{{u, u, u, u}}, {{3}}), std::log(4.0), 1e-15);
  const double h = std::log(0.5);
  EXPECT_NEAR(ce_of(Matrix{{h, h, -std::numeric_limits<double>::infinity()}}, {{0, 1}}), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, AveragesOverQueries) {
  const Matrix lp{{std::log(0.5), std::log(0.5)}, {std::log(0.25), std::log(0.75)}};
  EXPECT_NEAR(ce_of(lp, {{0}, {1}}), 0.5 * (std::log(2.0) - std::log(0.75)), 1e-15);
}

TEST(CrossEntropy, RejectsEmptyLabelsAndMismatch) {
  EXPECT_THROW(ce_of(Matrix{{0.0, 0.0}}, {{}}), std::invalid_argument);
  EXPECT_THROW(ce_of(Matrix{{0.0, 0.0}}, {{0}, {1}}), DimensionError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusLabels) {
  Parameter z("z", Matrix{{0.3, -1.2, 0.8, 0.1}});
  Tape t;
  std::vector<std::vector<EntityId>> labels{{2}};
  std::vector<std::span<const EntityId>> spans(labels.begin(), labels.end());
  t.backward(ce_loss(t, t.row_log_softmax(t.param(z)), spans));
  const Matrix p = row_softmax(z.value);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(z.grad(0, j), p(0, j) - (j == 2 ? 1.0 : 0.0), 1e-15);
}

TEST(Entropy, HandExamples) {
  EXPECT_NEAR(entropy_of(Matrix{{0.25, 0.25, 0.25, 0.25}}), std::log(4.0), 1e-15);
  EXPECT_NEAR(entropy_of(Matrix{{1.0, 0.0, 0.0}}), 0.0, 1e-15);
  EXPECT_NEAR(entropy_of(Matrix{{0.5, 0.5}}), std::log(2.0), 1e-15);
  EXPECT_NEAR(entropy_of(Matrix{{0.5, 0.5}, {1.0, 0.0}}), 0.5 * std::log(2.0), 1e-15);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Parameter p("p", Matrix{{1.0, -2.0, 3.0}});
  const Matrix before = p.value;
  AdamState st;
  Parameter* ps[] = {&p};
  for (int i = 0; i < 3; ++i) adam_step(st, ps, 0.1);
  EXPECT_EQ(p.value, before);
  EXPECT_EQ(st.step, 3u);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  Parameter p("p", Matrix{{0.0, 0.0, 0.0, 0.0}});
  p.grad = Matrix{{3.0, -0.5, 1e-3, -200.0}};
  AdamState st;
  Parameter* ps[] = {&p};
  adam_step(st, ps, 0.01);
  for (std::size_t j = 0; j < 4; ++j) {
    const double upd = p.value(0, j);
    EXPECT_GE(std::abs(upd), 0.99 * 0.01);
    EXPECT_LE(std::abs(upd), 0.01);
    EXPECT_LT(upd * (j % 2 == 0 ? 1.0 : -1.0), 0.0);
  }
  for (double g : p.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Adam, TenStepsMatchScalarReference) {
  const std::vector<double> x0{0.7, -1.3, 2.0}, target{0.1, 0.4, -0.6};
  Parameter p("p", Matrix(1, 3, x0));
  AdamState st;
  Parameter* ps[] = {&p};
  for (int step = 0; step < 10; ++step) {
    for (std::size_t i = 0; i < 3; ++i) p.grad(0, i) = 2.0 * (p.value(0, i) - target[i]);
    adam_step(st, ps, 0.05);
  }
  const auto want = scalar_adam(x0, 0.05, 10, target);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.value(0, i), want[i], 1e-12);
}

TEST(Adam, NonFiniteGradientAbortsWithoutUpdate) {
  Parameter a("a", Matrix{{1.0}}), b("b", Matrix{{2.0}});
  a.grad(0, 0) = 0.5;
  b.grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  AdamState st;
  Parameter* ps[] = {&a, &b};
  try {
    adam_step(st, ps, 0.1);
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
  EXPECT_EQ(a.value(0, 0), 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(Config, ValidationAndDefaults) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.batch_size, 1000u);
  EXPECT_EQ(c.patience, 8u);
  EXPECT_DOUBLE_EQ(TrainConfig::defaults_for(EncoderKind::DistMult, OutputKind::Softmax).learning_rate, 1e-3);
  EXPECT_DOUBLE_EQ(TrainConfig::defaults_for(EncoderKind::Rescal, OutputKind::Mos).learning_rate, 1e-4);
  auto bad = c;
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.dropout = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.entropy_weight = -1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Config, JsonRoundTrip) {
  TrainConfig c;
  c.encoder = EncoderKind::Mlp;
  c.output = OutputKind::Mos;
  c.num_components = 3;
  c.learning_rate = 0.02;
  c.seed = 11;
  const TrainConfig back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(TrainLoop, ZeroEpochsKeepsInitialization) {
  const TripleStore st = toy_store();
  TrainConfig c;
  c.dim = 6;
  c.max_epochs = 0;
  c.seed = 4;
  TrainResult r = train_loop(st, c);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.best_epoch, 0u);
  KgeModel init = make_model(model_config(c, st), 4);
  EXPECT_TRUE(same_parameters(r.model, init));
}

TEST(TrainLoop, EmptyTrainRejected) {
  EXPECT_THROW(train_loop(TripleStore{}, TrainConfig{}), std::invalid_argument);
}

TEST(TrainLoop, SameSeedSameHistory) {
  const TripleStore st = toy_store();
  TrainConfig c;
  c.output = OutputKind::Mos;
  c.num_components = 2;
  c.dim = 6;
  c.batch_size = 16;
  c.max_epochs = 4;
  c.learning_rate = 0.01;
  c.seed = 21;
  TrainResult a = train_loop(st, c), b = train_loop(st, c);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss);
    EXPECT_EQ(a.history[i].val_mrr, b.history[i].val_mrr);
  }
  EXPECT_TRUE(same_parameters(a.model, b.model));
  c.seed = 22;
  TrainResult d = train_loop(st, c);
  EXPECT_NE(a.history[0].loss, d.history[0].loss);
}

TEST(TrainLoop, SingleTripleConverges) {
  TrainConfig c;
  c.dim = 2;
  c.dropout = 0.0;
  c.batch_size = 1;
  c.max_epochs = 200;
  c.learning_rate = 0.05;
  c.seed = 1;
  TrainResult r = train_loop(one_triple_store(), c);
  Batch b;
  b.subjects = {0};
  b.relations = {0};
  EXPECT_GE(std::exp(r.model.log_prob(b)(0, 1)), 0.99);
  EXPECT_EQ(r.best_epoch, 200u);
}

TEST(TrainLoop, ConvexToyLossNonIncreasing) {
  TrainConfig c;
  c.dim = 2;
  c.dropout = 0.0;
  c.batch_size = 1;
  c.max_epochs = 100;
  c.learning_rate = 0.01;
  c.seed = 3;
  TrainResult r = train_loop(one_triple_store(), c);
  for (std::size_t i = 1; i < r.history.size(); ++i)
    EXPECT_LE(r.history[i].loss, r.history[i - 1].loss) << "epoch " << r.history[i].epoch;
}

TEST(TrainLoop, EarlyStoppingReturnsBestEpoch) {
  const TripleStore st = toy_store();
  TrainConfig c;
  c.dim = 8;
  c.batch_size = 8;
  c.max_epochs = 60;
  c.patience = 2;
  c.learning_rate = 0.05;
  c.seed = 5;
  TrainResult full = train_loop(st, c);
  ASSERT_LT(full.best_epoch, full.history.size()) << "best epoch was the last; pick a noisier setting";
  double best = -1.0;
  for (const auto& rec : full.history) best = std::max(best, rec.val_mrr);
  EXPECT_EQ(full.best_val_mrr, best);
  EXPECT_EQ(full.history[full.best_epoch - 1].val_mrr, best);

  // Replaying up to the best epoch reproduces the returned parameters.
  TrainConfig upto = c;
  upto.max_epochs = full.best_epoch;
  TrainResult replay = train_loop(st, upto);
  EXPECT_TRUE(same_parameters(full.model, replay.model));
  EXPECT_EQ(full.model.log_prob(Batch{{0, 1}, {0, 1}}), replay.model.log_prob(Batch{{0, 1}, {0, 1}}));
}

TEST(TrainLoop, PatienceZeroStopsAtFirstNonImprovement) {
  const TripleStore st = toy_store();
  TrainConfig c;
  c.dim = 8;
  c.batch_size = 8;
  c.max_epochs = 60;
  c.patience = 0;
  c.learning_rate = 0.05;
  c.seed = 5;
  TrainResult r = train_loop(st, c);
  ASSERT_TRUE(r.stopped_early);
  EXPECT_LE(r.history.back().val_mrr, r.best_val_mrr);
  EXPECT_EQ(r.history.size(), r.best_epoch + 1);
}

TEST(TrainLoop, EntropyWeightRaisesPriorEntropy) {
  const TripleStore st = toy_store();
  TrainConfig c;
  c.output = OutputKind::Mos;
  c.num_components = 4;
  c.dim = 8;
  c.batch_size = 16;
  c.max_epochs = 30;
  c.patience = 1000;
  c.learning_rate = 0.01;
  c.dropout = 0.0;
  c.seed = 8;
  c.entropy_weight = 0.0;
  TrainResult plain = train_loop(st, c);
  c.entropy_weight = 0.1;
  TrainResult reg = train_loop(st, c);
  const QueryIndex idx(st, Split::Train);
  const double h0 = mean_prior_entropy(plain.model, idx.queries());
  const double h1 = mean_prior_entropy(reg.model, idx.queries());
  EXPECT_GT(h1, h0);
  EXPECT_LE(h1, std::log(4.0) + 1e-12);
}

TEST(TrainLoop, SingleComponentIgnoresEntropyWeight) {
  const TripleStore st = toy_store();
  TrainConfig c;
  c.output = OutputKind::Mos;
  c.num_components = 1;
  c.dim = 4;
  c.batch_size = 32;
  c.max_epochs = 2;
  c.learning_rate = 0.01;
  c.entropy_weight = 0.0;
  TrainResult a = train_loop(st, c);
  c.entropy_weight = 0.5;
  TrainResult b = train_loop(st, c);
  EXPECT_EQ(a.history.back().loss, b.history.back().loss);
}

TEST(TrainLoop, MeanCrossEntropyMatchesLossWithoutDropout) {
  TrainConfig c;
  c.dim = 2;
  c.dropout = 0.0;
  c.batch_size = 1;
  c.max_epochs = 0;
  TrainResult r = train_loop(one_triple_store(), c);
  const QueryIndex idx(one_triple_store(), Split::Train);
  Batch b;
  b.subjects = {0};
  b.relations = {0};
  EXPECT_NEAR(mean_cross_entropy(r.model, idx), -r.model.log_prob(b)(0, 1), 1e-15);
}
