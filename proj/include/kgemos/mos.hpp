#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kgemos/autodiff.hpp"
#include "kgemos/models.hpp"
#include "kgemos/random.hpp"

namespace kgemos {

enum class OutputKind { Softmax, Mos };

inline std::string_view output_name(OutputKind k) { return k == OutputKind::Softmax ? "softmax" : "mos"; }

inline OutputKind parse_output(std::string_view s) {
  if (s == "softmax") return OutputKind::Softmax;
  if (s == "mos") return OutputKind::Mos;
  throw std::invalid_argument("unknown output layer '" + std::string(s) + "'");
}

/// affine -> batch-norm -> leaky-relu -> dropout.
struct ProjectionLayer {
  Parameter weight;  // d x d
  Parameter bias;    // 1 x d
  Parameter bn_scale;
  Parameter bn_shift;
  BatchNormStats stats;
};

/// Mixture-of-softmaxes output layer with K components.
struct MosParams {
  std::size_t num_components = 1;
  std::size_t dim = 0;
  double leaky_slope = 0.01;
  Parameter omegas;  // K x d prior vectors
  std::vector<std::array<ProjectionLayer, 2>> projections;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps{&omegas};
    for (auto& proj : projections)
      for (auto& layer : proj) ps.insert(ps.end(), {&layer.weight, &layer.bias, &layer.bn_scale, &layer.bn_shift});
    return ps;
  }

  /// K·d for the priors plus K·|θ_k|, with |θ_k| = 2·(d² + d + 2d).
  std::size_t parameter_count() const {
    std::size_t n = omegas.value.size();
    for (const auto& proj : projections)
      for (const auto& layer : proj)
        n += layer.weight.value.size() + layer.bias.value.size() + layer.bn_scale.value.size() + layer.bn_shift.value.size();
    return n;
  }

  static std::size_t expected_parameter_count(std::size_t k, std::size_t d) { return k * d + k * 2 * (d * d + 3 * d); }
};

inline MosParams init_mos(std::size_t num_components, std::size_t dim, std::uint64_t seed, double leaky_slope = 0.01) {
  if (num_components == 0) throw std::invalid_argument("init_mos: K must be >= 1");
  if (dim == 0) throw std::invalid_argument("init_mos: dimension must be >= 1");
  MosParams m;
  m.num_components = num_components;
  m.dim = dim;
  m.leaky_slope = leaky_slope;
  Rng rng{seed, 0x6d6f73ULL};
  m.omegas = Parameter("omegas", Matrix(num_components, dim));
  xavier_uniform(m.omegas.value, dim, num_components, rng);
  m.projections.resize(num_components);
  for (std::size_t k = 0; k < num_components; ++k)
    for (std::size_t l = 0; l < 2; ++l) {
      auto& layer = m.projections[k][l];
      const std::string tag = "proj" + std::to_string(k) + "_" + std::to_string(l);
      layer.weight = Parameter(tag + "_weight", Matrix(dim, dim));
      xavier_uniform(layer.weight.value, dim, dim, rng);
      layer.bias = Parameter(tag + "_bias", Matrix(1, dim));
      layer.bn_scale = Parameter(tag + "_bn_scale", Matrix(1, dim, 1.0));
      layer.bn_shift = Parameter(tag + "_bn_shift", Matrix(1, dim));
      layer.stats = BatchNormStats(dim);
    }
  return m;
}

struct LayerMode {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

/// log π (B x K): row log-softmax of H·Ωᵀ.
inline Var log_priors(Tape& tape, MosParams& mos, Var hidden) {
  return tape.row_log_softmax(tape.matmul(hidden, tape.param(mos.omegas), true));
}

/// π (B x K), rows sum to one.
inline Matrix priors(MosParams& mos, const Matrix& hidden) {
  Tape tape;
  return exp(tape.value(log_priors(tape, mos, tape.constant(hidden))));
}

/// f_θk(H): two projection layers, each affine, batch-norm, leaky-relu,
/// dropout in that order.
inline Var project(Tape& tape, MosParams& mos, Var hidden, std::size_t k, const LayerMode& mode) {
  if (k >= mos.num_components) throw std::out_of_range("project: component " + std::to_string(k) + " >= K");
  Var x = hidden;
  for (auto& layer : mos.projections[k]) {
    x = tape.affine(x, tape.param(layer.weight), tape.param(layer.bias));
    x = tape.batch_norm(x, tape.param(layer.bn_scale), tape.param(layer.bn_shift), layer.stats, mode.training);
    x = tape.leaky_relu(x, mos.leaky_slope);
    if (mode.training && mode.dropout > 0.0) {
      if (!mode.rng) throw std::invalid_argument("project: dropout requires an rng");
      x = tape.dropout(x, mode.dropout, *mode.rng);
    }
  }
  return x;
}

struct MixtureOutput {
  Var log_prob;   // B x |E|
  Var log_prior;  // B x K
};

/// log P(O|s,r) = logsumexp_k (log π_k + log softmax(f_k(H)·Eᵀ)).
inline MixtureOutput mixture_log_prob(Tape& tape, MosParams& mos, Var hidden, Var entities, const LayerMode& mode) {
  if (tape.value(hidden).cols() != mos.dim) throw DimensionError("mixture_log_prob: hidden width does not match the layer");
  Var lp = log_priors(tape, mos, hidden);
  std::vector<Var> terms;
  terms.reserve(mos.num_components);
  for (std::size_t k = 0; k < mos.num_components; ++k) {
    Var comp = tape.row_log_softmax(score_all(tape, project(tape, mos, hidden, k, mode), entities));
    terms.push_back(tape.add_column(comp, tape.column(lp, k)));
  }
  return {tape.logsumexp_stack(terms), lp};
}

/// Single softmax over H·Eᵀ, no projection.
inline Var plain_log_prob(Tape& tape, Var hidden, Var entities) {
  return tape.row_log_softmax(score_all(tape, hidden, entities));
}

}  // namespace kgemos
