#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kgemos/autodiff.hpp"
#include "kgemos/models.hpp"
#include "kgemos/mos.hpp"

namespace kgemos {

struct ModelConfig {
  EncoderConfig encoder;
  OutputKind output = OutputKind::Softmax;
  std::size_t num_components = 1;  // K, used when output == Mos
  double dropout = 0.0;            // hidden dropout on H and inside projections
};

/// Encoder plus output layer: maps queries to log P(O | s, r).
struct KgeModel {
  ModelConfig config;
  std::uint64_t seed = 0;
  ModelParams encoder;
  std::optional<MosParams> mos;

  struct Forward {
    Var log_prob;
    std::optional<Var> log_prior;
  };

  Forward forward(Tape& tape, const Batch& batch, bool training, Rng* rng = nullptr) {
    Var h = encode(encoder, batch, tape, {training, config.dropout, rng});
    Var e = tape.param(encoder.entity);
    if (config.output == OutputKind::Softmax) return {plain_log_prob(tape, h, e), std::nullopt};
    auto out = mixture_log_prob(tape, *mos, h, e, {training, config.dropout, rng});
    return {out.log_prob, out.log_prior};
  }

  /// Inference-mode log-probabilities, B x |E|.
  Matrix log_prob(const Batch& batch) {
    Tape tape;
    return tape.value(forward(tape, batch, false).log_prob);
  }

  std::vector<Parameter*> parameters() {
    auto ps = encoder.parameters();
    if (mos) {
      auto extra = mos->parameters();
      ps.insert(ps.end(), extra.begin(), extra.end());
    }
    return ps;
  }

  std::size_t parameter_count() const {
    return encoder.parameter_count() + (mos ? mos->parameter_count() : 0);
  }

  std::size_t num_entities() const noexcept { return config.encoder.num_entities; }
  std::size_t num_relations() const noexcept { return config.encoder.num_relations; }
};

inline KgeModel make_model(const ModelConfig& config, std::uint64_t seed) {
  if (!(config.dropout >= 0.0 && config.dropout < 1.0)) throw std::invalid_argument("make_model: dropout must be in [0,1)");
  KgeModel m;
  m.config = config;
  m.seed = seed;
  m.encoder = init_params(config.encoder, seed);
  if (config.output == OutputKind::Mos)
    m.mos = init_mos(config.num_components, config.encoder.dim, seed, config.encoder.leaky_slope);
  return m;
}

// Checkpoint layout:
//   line 1   JSON header terminated by '\n' ("format", "version", model
//            configuration, "seed", and "tensors": [{name, rows, cols}...])
//   then     the tensors' values as little-endian IEEE-754 f64, row-major,
//            concatenated in header order.
// Tensor order: entity, relation, [MLP: hidden_weight, hidden_bias,
// out_weight, out_bias], [MoS: omegas, then per component k and layer l:
// weight, bias, bn_scale, bn_shift, running_mean, running_var].

inline constexpr const char* kCheckpointFormat = "kgemos-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::vector<std::pair<std::string, Matrix*>> checkpoint_tensors(KgeModel& m) {
  std::vector<std::pair<std::string, Matrix*>> out;
  for (Parameter* p : m.encoder.parameters()) out.emplace_back(p->name, &p->value);
  if (m.mos) {
    out.emplace_back(m.mos->omegas.name, &m.mos->omegas.value);
    for (std::size_t k = 0; k < m.mos->projections.size(); ++k)
      for (std::size_t l = 0; l < 2; ++l) {
        auto& layer = m.mos->projections[k][l];
        for (Parameter* p : {&layer.weight, &layer.bias, &layer.bn_scale, &layer.bn_shift})
          out.emplace_back(p->name, &p->value);
        const std::string tag = "proj" + std::to_string(k) + "_" + std::to_string(l);
        out.emplace_back(tag + "_running_mean", &layer.stats.running_mean);
        out.emplace_back(tag + "_running_var", &layer.stats.running_var);
      }
  }
  return out;
}

inline void write_f64_le(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

inline double read_f64_le(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated tensor data");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  return {{"encoder", encoder_name(c.encoder.kind)},
          {"output_layer", output_name(c.output)},
          {"k", c.num_components},
          {"dim", c.encoder.dim},
          {"num_entities", c.encoder.num_entities},
          {"num_relations", c.encoder.num_relations},
          {"dropout", c.dropout},
          {"leaky_slope", c.encoder.leaky_slope}};
}

inline void save_checkpoint(std::ostream& out, KgeModel& model) {
  nlohmann::ordered_json header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  header["model"] = model_config_json(model.config);
  header["seed"] = model.seed;
  auto tensors = detail::checkpoint_tensors(model);
  header["tensors"] = nlohmann::json::array();
  for (auto& [name, m] : tensors) header["tensors"].push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
  out << header.dump() << '\n';
  for (auto& [name, m] : tensors)
    for (double v : m->values()) detail::write_f64_le(out, v);
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

inline void save_checkpoint(const std::filesystem::path& path, KgeModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  save_checkpoint(out, model);
}

inline KgeModel load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint: missing header");
  const auto header = nlohmann::json::parse(line);
  if (header.value("format", "") != kCheckpointFormat) throw std::runtime_error("checkpoint: unrecognized format");
  if (header.value("version", 0) != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
  const auto& mj = header.at("model");
  ModelConfig c;
  c.encoder.kind = parse_encoder(mj.at("encoder").get<std::string>());
  c.encoder.dim = mj.at("dim").get<std::size_t>();
  c.encoder.num_entities = mj.at("num_entities").get<std::size_t>();
  c.encoder.num_relations = mj.at("num_relations").get<std::size_t>();
  c.encoder.leaky_slope = mj.at("leaky_slope").get<double>();
  c.output = parse_output(mj.at("output_layer").get<std::string>());
  c.num_components = mj.at("k").get<std::size_t>();
  c.dropout = mj.at("dropout").get<double>();
  KgeModel model = make_model(c, header.at("seed").get<std::uint64_t>());
  auto tensors = detail::checkpoint_tensors(model);
  const auto& listed = header.at("tensors");
  if (listed.size() != tensors.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& [name, m] = tensors[i];
    if (listed[i].at("name").get<std::string>() != name || listed[i].at("rows").get<std::size_t>() != m->rows() ||
        listed[i].at("cols").get<std::size_t>() != m->cols())
      throw std::runtime_error("checkpoint: tensor " + std::to_string(i) + " does not match the model layout");
  }
  for (auto& [name, m] : tensors)
    for (double& v : m->values()) v = detail::read_f64_le(in);
  return model;
}

inline KgeModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return load_checkpoint(in);
}

}  // namespace kgemos
