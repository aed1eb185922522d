#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kgemos/autodiff.hpp"
#include "kgemos/eval.hpp"
#include "kgemos/graph.hpp"
#include "kgemos/kge_model.hpp"
#include "kgemos/random.hpp"

namespace kgemos {

struct TrainConfig {
  EncoderKind encoder = EncoderKind::DistMult;
  OutputKind output = OutputKind::Softmax;
  std::size_t num_components = 4;
  std::size_t dim = 200;
  double learning_rate = 1e-4;
  std::size_t batch_size = 1000;
  std::size_t max_epochs = 30;
  std::size_t patience = 8;
  double dropout = 0.1;
  double entropy_weight = 1e-3;
  double leaky_slope = 0.01;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 256;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning rate must be > 0");
    if (batch_size == 0) throw std::invalid_argument("train config: batch size must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("train config: dropout must be in [0,1)");
    if (!(entropy_weight >= 0.0)) throw std::invalid_argument("train config: entropy weight must be >= 0");
    if (dim == 0) throw std::invalid_argument("train config: dim must be >= 1");
    if (output == OutputKind::Mos && num_components == 0) throw std::invalid_argument("train config: K must be >= 1");
  }

  /// Defaults used for the reported experiments: lr 1e-4 (1e-3 for the
  /// DistMult baseline), batch 1000, 30 epochs, patience 8, dropout 0.1,
  /// entropy weight 1e-3, K = 4.
  static TrainConfig defaults_for(EncoderKind encoder, OutputKind output) {
    TrainConfig c;
    c.encoder = encoder;
    c.output = output;
    if (encoder == EncoderKind::DistMult && output == OutputKind::Softmax) c.learning_rate = 1e-3;
    return c;
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"encoder", encoder_name(c.encoder)},
          {"output_layer", output_name(c.output)},
          {"k", c.num_components},
          {"dim", c.dim},
          {"lr", c.learning_rate},
          {"batch", c.batch_size},
          {"epochs", c.max_epochs},
          {"patience", c.patience},
          {"dropout", c.dropout},
          {"entropy_weight", c.entropy_weight},
          {"leaky_slope", c.leaky_slope},
          {"seed", c.seed},
          {"eval_batch", c.eval_batch_size}};
}

/// Fields absent from `j` keep their values in `base`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (j.contains("encoder")) base.encoder = parse_encoder(j["encoder"].get<std::string>());
  if (j.contains("output_layer")) base.output = parse_output(j["output_layer"].get<std::string>());
  base.num_components = j.value("k", base.num_components);
  base.dim = j.value("dim", base.dim);
  base.learning_rate = j.value("lr", base.learning_rate);
  base.batch_size = j.value("batch", base.batch_size);
  base.max_epochs = j.value("epochs", base.max_epochs);
  base.patience = j.value("patience", base.patience);
  base.dropout = j.value("dropout", base.dropout);
  base.entropy_weight = j.value("entropy_weight", base.entropy_weight);
  base.leaky_slope = j.value("leaky_slope", base.leaky_slope);
  base.seed = j.value("seed", base.seed);
  base.eval_batch_size = j.value("eval_batch", base.eval_batch_size);
  return base;
}

inline ModelConfig model_config(const TrainConfig& c, const TripleStore& store) {
  ModelConfig m;
  m.encoder = {c.encoder, store.num_entities(), store.num_relations(), c.dim, c.leaky_slope};
  m.output = c.output;
  m.num_components = c.output == OutputKind::Mos ? c.num_components : 1;
  m.dropout = c.dropout;
  return m;
}

/// Bias-corrected Adam.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One Adam update over `params`, then zeroes their gradients. A
/// non-finite gradient aborts before any parameter is modified.
inline void adam_step(AdamState& state, std::span<Parameter* const> params, double lr) {
  for (const Parameter* p : params)
    for (std::size_t k = 0; k < p->grad.size(); ++k)
      if (!std::isfinite(p->grad[k]))
        throw NonFiniteGradient("adam_step: non-finite gradient in '" + p->name + "' at entry " + std::to_string(k) +
                                " (step " + std::to_string(state.step + 1) + ")");
  if (state.first_moment.empty()) {
    for (const Parameter* p : params) {
      state.first_moment.emplace_back(p->value.rows(), p->value.cols());
      state.second_moment.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  if (state.first_moment.size() != params.size()) throw std::invalid_argument("adam_step: parameter list changed");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      p.value[k] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
    p.zero_grad();
  }
}

/// Row-normalized label matrix: each true object of query b gets 1/|true|.
inline Matrix label_matrix(std::span<const std::span<const EntityId>> labels, std::size_t num_entities) {
  Matrix y(labels.size(), num_entities);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b].empty()) throw std::invalid_argument("ce_loss: query " + std::to_string(b) + " has no true objects");
    const double w = 1.0 / static_cast<double>(labels[b].size());
    for (EntityId o : labels[b]) y(b, o) += w;
  }
  return y;
}

/// −(1/B) Σ_b Σ_{o ∈ true(b)} logP[b, o] / |true(b)|.
inline Var ce_loss(Tape& tape, Var log_prob, std::span<const std::span<const EntityId>> labels) {
  const Matrix& lp = tape.value(log_prob);
  if (labels.size() != lp.rows()) throw DimensionError("ce_loss: one label set per row required");
  Matrix w = label_matrix(labels, lp.cols());
  const double scale = -1.0 / static_cast<double>(labels.size());
  for (double& v : w.values()) v *= scale;
  return tape.weighted_sum(log_prob, std::move(w));
}

/// Mean row entropy of the mixture priors, from log π.
inline Var entropy_reg(Tape& tape, Var log_prior) { return tape.mean_row_entropy(log_prior); }

/// Training objective for one batch: CE − λ_H·entropy(π) for MoS (the
/// entropy term vanishes at K = 1), plain CE otherwise.
inline Var batch_objective(Tape& tape, KgeModel& model, const Batch& batch,
                           std::span<const std::span<const EntityId>> labels, double entropy_weight, bool training, Rng* rng) {
  auto fw = model.forward(tape, batch, training, rng);
  Var loss = ce_loss(tape, fw.log_prob, labels);
  if (fw.log_prior && entropy_weight > 0.0 && model.config.num_components > 1) {
    const Var parts[] = {loss, entropy_reg(tape, *fw.log_prior)};
    const double coeffs[] = {1.0, -entropy_weight};
    loss = tape.combine(parts, coeffs);
  }
  return loss;
}

/// Mean cross-entropy of the model (inference mode) over every query of
/// `index` against its normalized label vector.
inline double mean_cross_entropy(KgeModel& model, const QueryIndex& index, std::size_t batch_size = 256) {
  const auto& qs = index.queries();
  if (qs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t begin = 0; begin < qs.size(); begin += batch_size) {
    const std::size_t end = std::min(qs.size(), begin + batch_size);
    const Batch batch = Batch::from_queries(std::span<const Query>(qs).subspan(begin, end - begin));
    const Matrix lp = model.log_prob(batch);
    for (std::size_t i = begin; i < end; ++i) {
      const auto objs = index.objects_at(i);
      double row = 0.0;
      for (EntityId o : objs) row -= lp(i - begin, o);
      total += row / static_cast<double>(objs.size());
    }
  }
  return total / static_cast<double>(qs.size());
}

/// Mean prior entropy over the given queries (0 for single-softmax models).
inline double mean_prior_entropy(KgeModel& model, std::span<const Query> queries) {
  if (!model.mos || queries.empty()) return 0.0;
  Tape tape;
  auto fw = model.forward(tape, Batch::from_queries(queries), false);
  return tape.value(entropy_reg(tape, *fw.log_prior))(0, 0);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_mrr = std::numeric_limits<double>::quiet_NaN();
  double wall_time = 0.0;
};

/// JSON-lines record. wall_time_s is the only field that varies between
/// identically seeded runs.
inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["loss"] = r.loss;
  if (std::isnan(r.val_mrr))
    j["val_mrr"] = nullptr;
  else
    j["val_mrr"] = r.val_mrr;
  j["wall_time_s"] = r.wall_time;
  return j;
}

struct TrainResult {
  KgeModel model;  // best validation epoch (or last epoch without validation)
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 = initialization
  double best_val_mrr = std::numeric_limits<double>::quiet_NaN();
  bool stopped_early = false;
};

/// Full training run. Each epoch visits every training (s, r) query once in
/// a seed- and epoch-keyed order. When the store has a validation split,
/// filtered MRR on it drives early stopping and selects the returned
/// parameters; otherwise the last epoch is returned.
inline TrainResult train_loop(const TripleStore& store, const TrainConfig& config,
                              const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  if (store.train.empty()) throw std::invalid_argument("train_loop: empty training split");
  const QueryIndex labels(store, Split::Train);
  const auto& queries = labels.queries();

  TrainResult result;
  KgeModel model = make_model(model_config(config, store), config.seed);
  result.model = model;
  auto params = model.parameters();
  for (Parameter* p : params) p->zero_grad();
  AdamState adam;

  const bool validate = !store.valid.empty();
  EvalOptions vopts;
  vopts.compute_nll = false;
  vopts.keep_records = false;
  vopts.batch_size = config.eval_batch_size;
  auto validation_mrr = [&] {
    return evaluate([&](const Batch& b) { return model.log_prob(b); }, store, Split::Valid, vopts).mrr;
  };

  std::vector<std::size_t> order(queries.size());
  std::vector<std::span<const EntityId>> batch_labels;
  std::size_t since_best = 0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng{config.seed, epoch, 0x73687566ULL};
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      Batch batch;
      batch_labels.clear();
      for (std::size_t i = begin; i < end; ++i) {
        const Query q = queries[order[i]];
        batch.subjects.push_back(q.s);
        batch.relations.push_back(q.r);
        batch_labels.push_back(labels.objects_at(order[i]));
      }
      Rng dropout_rng{config.seed, epoch, batch_index, 0x64726f70ULL};
      Tape tape;
      Var loss = batch_objective(tape, model, batch, batch_labels, config.entropy_weight, true, &dropout_rng);
      loss_sum += tape.value(loss)(0, 0) * static_cast<double>(batch.size());
      tape.backward(loss);
      adam_step(adam, params, config.learning_rate);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(queries.size());
    if (validate) rec.val_mrr = validation_mrr();
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (!validate) {
      result.model = model;
      result.best_epoch = epoch;
      continue;
    }
    if (std::isnan(result.best_val_mrr) || rec.val_mrr > result.best_val_mrr) {
      result.best_val_mrr = rec.val_mrr;
      result.best_epoch = epoch;
      result.model = model;
      since_best = 0;
    } else if (++since_best > config.patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace kgemos
