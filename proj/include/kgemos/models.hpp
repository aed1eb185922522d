#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kgemos/autodiff.hpp"
#include "kgemos/graph.hpp"
#include "kgemos/random.hpp"

namespace kgemos {

enum class EncoderKind { DistMult, Rescal, Mlp };

inline std::string_view encoder_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::DistMult: return "distmult";
    case EncoderKind::Rescal: return "rescal";
    case EncoderKind::Mlp: return "mlp";
  }
  return "?";
}

inline EncoderKind parse_encoder(std::string_view s) {
  if (s == "distmult") return EncoderKind::DistMult;
  if (s == "rescal") return EncoderKind::Rescal;
  if (s == "mlp") return EncoderKind::Mlp;
  throw std::invalid_argument("unknown encoder '" + std::string(s) + "'");
}

struct EncoderConfig {
  EncoderKind kind = EncoderKind::DistMult;
  std::size_t num_entities = 0;
  std::size_t num_relations = 0;
  std::size_t dim = 0;
  double leaky_slope = 0.01;
};

/// Samples U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline void xavier_uniform(Matrix& m, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : m.values()) v = rng.uniform(-bound, bound);
}

/// Entity embeddings plus encoder-specific relation parameters.
///
/// DistMult: relation holds |R| x d vectors w_r, and h = e_s ⊙ w_r.
/// RESCAL:   relation holds |R| x d² row-major matrices W_r, and hᵀ = e_sᵀ W_r.
/// MLP:      relation holds |R| x d vectors; h = A₂·σ(A₁·[e_s; w_r] + b₁) + b₂.
struct ModelParams {
  EncoderConfig config;
  Parameter entity;
  Parameter relation;
  Parameter hidden_weight, hidden_bias, out_weight, out_bias;  // MLP only

  std::size_t dim() const noexcept { return config.dim; }
  EncoderKind kind() const noexcept { return config.kind; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps{&entity, &relation};
    if (config.kind == EncoderKind::Mlp) ps.insert(ps.end(), {&hidden_weight, &hidden_bias, &out_weight, &out_bias});
    return ps;
  }

  std::size_t parameter_count() const {
    std::size_t n = entity.value.size() + relation.value.size();
    if (config.kind == EncoderKind::Mlp)
      n += hidden_weight.value.size() + hidden_bias.value.size() + out_weight.value.size() + out_bias.value.size();
    return n;
  }

  /// Closed-form parameter count for the configuration.
  static std::size_t expected_parameter_count(const EncoderConfig& c) {
    const std::size_t e = c.num_entities, r = c.num_relations, d = c.dim;
    switch (c.kind) {
      case EncoderKind::DistMult: return (e + r) * d;
      case EncoderKind::Rescal: return e * d + r * d * d;
      case EncoderKind::Mlp: return (e + r) * d + (2 * d * d + d) + (d * d + d);
    }
    return 0;
  }
};

inline ModelParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  if (config.dim == 0) throw std::invalid_argument("init_params: embedding dimension must be >= 1");
  const std::size_t d = config.dim;
  ModelParams p;
  p.config = config;
  Rng rng{seed, 0x656e636fULL};
  p.entity = Parameter("entity", Matrix(config.num_entities, d));
  xavier_uniform(p.entity.value, d, config.num_entities, rng);
  if (config.kind == EncoderKind::Rescal) {
    p.relation = Parameter("relation", Matrix(config.num_relations, d * d));
    // Each W_r is its own d x d weight.
    xavier_uniform(p.relation.value, d, d, rng);
  } else {
    p.relation = Parameter("relation", Matrix(config.num_relations, d));
    xavier_uniform(p.relation.value, d, config.num_relations, rng);
  }
  if (config.kind == EncoderKind::Mlp) {
    p.hidden_weight = Parameter("hidden_weight", Matrix(d, 2 * d));
    xavier_uniform(p.hidden_weight.value, 2 * d, d, rng);
    p.hidden_bias = Parameter("hidden_bias", Matrix(1, d));
    p.out_weight = Parameter("out_weight", Matrix(d, d));
    xavier_uniform(p.out_weight.value, d, d, rng);
    p.out_bias = Parameter("out_bias", Matrix(1, d));
  }
  return p;
}

/// Parallel subject/relation id arrays.
struct Batch {
  std::vector<std::size_t> subjects;
  std::vector<std::size_t> relations;

  std::size_t size() const noexcept { return subjects.size(); }

  static Batch from_queries(std::span<const Query> qs) {
    Batch b;
    b.subjects.reserve(qs.size());
    b.relations.reserve(qs.size());
    for (const Query& q : qs) {
      b.subjects.push_back(q.s);
      b.relations.push_back(q.r);
    }
    return b;
  }
};

struct EncodeOptions {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

/// Hidden states H (B x d) for the batch. Dropout, when training, is
/// applied to H itself.
inline Var encode(ModelParams& params, const Batch& batch, Tape& tape, const EncodeOptions& opts = {}) {
  if (batch.size() == 0) throw std::invalid_argument("encode: empty batch");
  if (batch.relations.size() != batch.subjects.size()) throw std::invalid_argument("encode: ragged batch");
  for (std::size_t r : batch.relations)
    if (r >= params.config.num_relations) throw std::out_of_range("encode: relation id " + std::to_string(r) + " out of range");
  Var es = tape.gather_rows(params.entity, batch.subjects);
  Var h;
  switch (params.kind()) {
    case EncoderKind::DistMult:
      h = tape.hadamard(es, tape.gather_rows(params.relation, batch.relations));
      break;
    case EncoderKind::Rescal:
      h = tape.relation_matvec(es, params.relation, batch.relations);
      break;
    case EncoderKind::Mlp: {
      Var x = tape.concat_cols(es, tape.gather_rows(params.relation, batch.relations));
      Var hidden = tape.leaky_relu(
          tape.affine(x, tape.param(params.hidden_weight), tape.param(params.hidden_bias)), params.config.leaky_slope);
      h = tape.affine(hidden, tape.param(params.out_weight), tape.param(params.out_bias));
      break;
    }
  }
  if (opts.training && opts.dropout > 0.0) {
    if (!opts.rng) throw std::invalid_argument("encode: dropout requires an rng");
    h = tape.dropout(h, opts.dropout, *opts.rng);
  }
  return h;
}

/// Z = H·Eᵀ.
inline Var score_all(Tape& tape, Var hidden, Var entities) {
  if (tape.value(hidden).cols() != tape.value(entities).cols())
    throw DimensionError("score_all: hidden width " + std::to_string(tape.value(hidden).cols()) +
                         " vs embedding width " + std::to_string(tape.value(entities).cols()));
  return tape.matmul(hidden, entities, true);
}

}  // namespace kgemos
