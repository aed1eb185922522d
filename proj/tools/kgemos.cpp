// kgemos command-line tool: stats, train, eval, analyze.
//
// Every result is machine-readable. The primary result is printed to stdout
// as JSON; with --out the same document (plus any CSV/JSONL side files) is
// written into that directory. Exit status is 0 on success, 1 when an
// operation fails, and CLI11's usage code on bad arguments.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kgemos/kgemos.hpp"

namespace fs = std::filesystem;
using namespace kgemos;
using ojson = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kDefaultAnalysisSeed = 0;

void emit(const ojson& doc, const std::string& out_dir, const std::string& file) {
  std::cout << doc.dump(2) << '\n';
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / file);
  if (!f) throw std::runtime_error("cannot write " + (fs::path(out_dir) / file).string());
  f << doc.dump(2) << '\n';
}

void write_matrix_file(const std::string& out_dir, const std::string& file, const Matrix& m,
                       const std::vector<std::string>& header = {}) {
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / file);
  if (!f) throw std::runtime_error("cannot write " + (fs::path(out_dir) / file).string());
  write_csv(f, m, header);
}

std::vector<std::string> numbered(const std::string& prefix, std::size_t n) {
  std::vector<std::string> h;
  for (std::size_t i = 0; i < n; ++i) h.push_back(prefix + std::to_string(i));
  return h;
}

// --- stats -----------------------------------------------------------------

struct StatsArgs {
  std::string dataset, out;
  bool strict = false;
};

void cmd_stats(const StatsArgs& a) {
  const TripleStore store = load_dataset_dir(a.dataset, {a.strict, &std::cerr});
  emit(dataset_stats_json(store), a.out, "stats.json");
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string dataset, out, config_file;
  std::optional<std::uint64_t> seed;
  std::string encoder = "distmult", output = "softmax";
  std::optional<std::size_t> k, dim, batch, epochs, patience;
  std::optional<double> lr, dropout, entropy_weight;
  bool no_inverse = false, strict = false;
};

TrainConfig resolve_config(const TrainArgs& a) {
  TrainConfig c = TrainConfig::defaults_for(parse_encoder(a.encoder), parse_output(a.output));
  if (!a.config_file.empty()) {
    std::ifstream f(a.config_file);
    if (!f) throw std::runtime_error("cannot open " + a.config_file);
    c = train_config_from_json(nlohmann::json::parse(f), c);
  }
  if (a.k) c.num_components = *a.k;
  if (a.dim) c.dim = *a.dim;
  if (a.batch) c.batch_size = *a.batch;
  if (a.epochs) c.max_epochs = *a.epochs;
  if (a.patience) c.patience = *a.patience;
  if (a.lr) c.learning_rate = *a.lr;
  if (a.dropout) c.dropout = *a.dropout;
  if (a.entropy_weight) c.entropy_weight = *a.entropy_weight;
  c.seed = *a.seed;
  c.validate();
  return c;
}

void cmd_train(const TrainArgs& a) {
  const TrainConfig config = resolve_config(a);
  TripleStore store = load_dataset_dir(a.dataset, {a.strict, &std::cerr});
  if (!a.no_inverse) store = augment_inverse(store);
  fs::create_directories(a.out);
  const fs::path out(a.out);
  {
    std::ofstream f(out / "config.json");
    ojson cj = to_json(config);
    cj["inverse_relations"] = !a.no_inverse;
    f << cj.dump(2) << '\n';
  }
  std::ofstream history(out / "history.jsonl");
  TrainResult result = train_loop(store, config, [&](const EpochRecord& r) {
    history << to_json(r).dump() << '\n';
    history.flush();
  });
  save_checkpoint(out / "checkpoint.bin", result.model);

  ojson summary;
  summary["epochs_run"] = result.history.size();
  summary["best_epoch"] = result.best_epoch;
  summary["stopped_early"] = result.stopped_early;
  summary["parameters"] = result.model.parameter_count();
  if (!store.valid.empty()) {
    EvalOptions opts;
    opts.keep_records = false;
    opts.batch_size = config.eval_batch_size;
    const EvalReport rep = evaluate([&](const Batch& b) { return result.model.log_prob(b); }, store, Split::Valid, opts);
    std::ofstream f(out / "valid_eval.json");
    f << to_json(rep).dump(2) << '\n';
    summary["valid"] = to_json(rep);
  }
  emit(summary, a.out, "summary.json");
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, dataset, out, split = "test", rank_mode = "optimistic", candidates;
  bool nll_filter_valid = false, records = false, strict = false;
};

void cmd_eval(const EvalArgs& a) {
  KgeModel model = load_checkpoint(fs::path(a.checkpoint));
  TripleStore store = load_dataset_dir(a.dataset, {a.strict, &std::cerr});
  if (model.num_entities() != store.num_entities())
    throw std::runtime_error("checkpoint has " + std::to_string(model.num_entities()) + " entities, dataset has " +
                             std::to_string(store.num_entities()));
  if (model.num_relations() == 2 * store.num_relations())
    store = augment_inverse(store);
  else if (model.num_relations() != store.num_relations())
    throw std::runtime_error("checkpoint has " + std::to_string(model.num_relations()) +
                             " relations, dataset has " + std::to_string(store.num_relations()) +
                             " (or twice that with inverses)");
  EvalOptions opts;
  opts.rank_mode = parse_rank_mode(a.rank_mode);
  opts.nll_filter_valid = a.nll_filter_valid;
  opts.keep_records = a.records;
  std::vector<std::vector<EntityId>> lists;
  if (!a.candidates.empty()) {
    lists = read_candidate_lists(fs::path(a.candidates), store);
    opts.candidates = &lists;
  }
  const EvalReport rep = evaluate([&](const Batch& b) { return model.log_prob(b); }, store, parse_split(a.split), opts);
  ojson j = to_json(rep);
  emit(j, a.out, "eval_" + a.split + ".json");
  if (a.records && !a.out.empty()) {
    std::ofstream f(fs::path(a.out) / ("records_" + a.split + ".csv"));
    write_records_csv(f, rep);
  }
}

// --- analyze ---------------------------------------------------------------

struct ModelArgs {
  std::string checkpoint;
  std::string encoder = "distmult", output = "softmax";
  std::size_t k = 4, dim = 2, entities = 8, relations = 8;
};

KgeModel model_from(const ModelArgs& m, std::uint64_t seed) {
  if (!m.checkpoint.empty()) return load_checkpoint(fs::path(m.checkpoint));
  ModelConfig c;
  c.encoder = {parse_encoder(m.encoder), m.entities, m.relations, m.dim, 0.01};
  c.output = parse_output(m.output);
  c.num_components = c.output == OutputKind::Mos ? m.k : 1;
  return make_model(c, seed);
}

void add_model_options(CLI::App* app, ModelArgs& m) {
  app->add_option("--checkpoint", m.checkpoint, "Trained model (otherwise a randomly initialized one)");
  app->add_option("--encoder", m.encoder, "distmult | rescal | mlp")->check(CLI::IsMember({"distmult", "rescal", "mlp"}));
  app->add_option("--output-layer", m.output, "softmax | mos")->check(CLI::IsMember({"softmax", "mos"}));
  app->add_option("--k", m.k, "Mixture components");
  app->add_option("--dim", m.dim, "Embedding dimension");
  app->add_option("--entities", m.entities, "Entity count of the random model");
  app->add_option("--relations", m.relations, "Relation count of the random model");
}

struct AnalyzeArgs {
  std::string out, dataset, matrix;
  std::uint64_t seed = kDefaultAnalysisSeed;
  std::optional<std::size_t> n, m, d, c;
  double epsilon = 0.5;
  bool no_merge = false, bias = false, strict = false;
  double tau_plus = 1.0, tau_minus = 0.0;
  double tol = kDefaultRankTolerance;
  std::size_t queries = 0, samples = 200, ref = 0;
  ModelArgs model;
};

Matrix instance_matrix(const AnalyzeArgs& a, const char* what) {
  if (!a.matrix.empty()) return read_matrix(fs::path(a.matrix));
  if (!a.n || !a.d) throw std::invalid_argument(std::string(what) + ": give --matrix or both --n and --d");
  Rng rng{a.seed, 0x616e616cULL};
  return random_gaussian(*a.n, *a.d, rng);
}

void analyze_bound(const AnalyzeArgs& a) {
  ojson j;
  if (!a.dataset.empty()) {
    const TripleStore store = load_dataset_dir(a.dataset, {a.strict, &std::cerr});
    const auto plain = degree_stats(store, SplitSelector::all());
    const auto inv = degree_stats(augment_inverse(store), SplitSelector::all());
    j["max_out_degree"] = {{"without_inverse", plain.max}, {"with_inverse", inv.max}};
    j["sufficient_dim"] = {{"without_inverse", sufficient_dim(plain)}, {"with_inverse", sufficient_dim(inv)}};
  }
  if (a.n && a.d) {
    j["N"] = *a.n;
    j["d"] = *a.d;
    j["feasible_sign_bound"] = feasible_sign_bound(*a.n, *a.d).str();
  }
  if (j.empty()) throw std::invalid_argument("bound: give --dataset and/or --n with --d");
  emit(j, a.out, "bound.json");
}

void analyze_sign_decompose(const AnalyzeArgs& a) {
  Matrix adj;
  if (!a.matrix.empty()) {
    adj = read_matrix(fs::path(a.matrix));
  } else {
    if (!a.n || !a.m || !a.c) throw std::invalid_argument("sign-decompose: give --matrix or --n, --m and --c");
    Rng rng{a.seed, 0x7369676eULL};
    adj = random_adjacency(*a.n, *a.m, *a.c, rng);
  }
  const auto dec = sign_decompose(adj, a.epsilon, !a.no_merge);
  const auto ver = verify_sign_decomposition(adj, dec);
  ojson j = to_json(dec, a.out.empty());
  j["verification"] = to_json(ver);
  write_matrix_file(a.out, "adjacency.csv", adj);
  write_matrix_file(a.out, "X.csv", dec.coefficients);
  write_matrix_file(a.out, "V.csv", dec.vandermonde);
  emit(j, a.out, "sign_decomposition.json");
  if (!ver.ok) throw std::runtime_error("sign-decompose: verification failed");
}

void analyze_feasible(const AnalyzeArgs& a, bool rankings) {
  const Matrix e = instance_matrix(a, rankings ? "feasible-rankings" : "feasible-signs");
  FeasibilityOptions opts;
  if (a.bias) {
    Rng rng{a.seed, 0x62696173ULL};
    std::vector<double> b(e.rows());
    for (double& v : b) v = rng.normal();
    opts.biases = b;
  }
  ojson j = to_json(rankings ? enumerate_feasible_rankings(e, opts) : enumerate_feasible_signs(e, opts));
  if (opts.biases) j["biases"] = *opts.biases;
  write_matrix_file(a.out, "E.csv", e);
  emit(j, a.out, rankings ? "feasible_rankings.json" : "feasible_signs.json");
}

void analyze_dr_check(const AnalyzeArgs& a) {
  if (a.matrix.empty() || !a.d) throw std::invalid_argument("dr-check: give --matrix and --d");
  const auto v = dr_obstruction_check(read_matrix(fs::path(a.matrix)), *a.d, {a.tau_plus, a.tau_minus});
  emit(to_json(v), a.out, "dr_check.json");
}

std::vector<Query> all_queries(const KgeModel& model, std::size_t limit) {
  std::vector<Query> qs;
  for (std::size_t r = 0; r < model.num_relations(); ++r)
    for (std::size_t s = 0; s < model.num_entities(); ++s) qs.push_back({static_cast<EntityId>(s), static_cast<RelationId>(r)});
  if (limit > 0 && limit < qs.size()) qs.resize(limit);
  return qs;
}

void analyze_logprob_rank(const AnalyzeArgs& a) {
  KgeModel model = model_from(a.model, a.seed);
  const auto qs = all_queries(model, a.queries);
  const std::size_t rank = logprob_rank_probe(model, qs, a.tol);
  ojson j;
  j["model"] = model_config_json(model.config);
  j["queries"] = qs.size();
  j["rank"] = rank;
  j["softmax_limit"] = model.config.encoder.dim + 1;
  j["tol"] = a.tol;
  write_matrix_file(a.out, "log_probs.csv", model.log_prob(Batch::from_queries(qs)));
  emit(j, a.out, "logprob_rank.json");
}

void analyze_manifold(const AnalyzeArgs& a) {
  KgeModel model = model_from(a.model, a.seed);
  const auto s = sample_output_manifold(model, a.samples, a.seed);
  ojson j;
  j["model"] = model_config_json(model.config);
  j["samples"] = a.samples;
  j["seed"] = a.seed;
  if (a.samples > 0 && model.num_entities() > 1)
    j["alr_centered_rank"] = centered_rank(alr_transform(s.probabilities, 0), a.tol);
  if (a.out.empty()) {
    auto rows = ojson::array();
    for (std::size_t i = 0; i < s.probabilities.rows(); ++i)
      rows.push_back(std::vector<double>(s.probabilities.row(i).begin(), s.probabilities.row(i).end()));
    j["probabilities"] = std::move(rows);
  }
  write_matrix_file(a.out, "manifold.csv", s.probabilities, numbered("p", model.num_entities()));
  write_matrix_file(a.out, "hidden.csv", s.hidden, numbered("h", s.hidden.cols()));
  emit(j, a.out, "manifold.json");
}

void analyze_alr(const AnalyzeArgs& a) {
  if (a.matrix.empty()) throw std::invalid_argument("alr: give --matrix with row-stochastic probabilities");
  const Matrix alr = alr_transform(read_matrix(fs::path(a.matrix)), a.ref);
  ojson j;
  j["rows"] = alr.rows();
  j["cols"] = alr.cols();
  j["ref"] = a.ref;
  j["centered_rank"] = centered_rank(alr, a.tol);
  if (a.out.empty()) {
    auto rows = ojson::array();
    for (std::size_t i = 0; i < alr.rows(); ++i) rows.push_back(std::vector<double>(alr.row(i).begin(), alr.row(i).end()));
    j["alr"] = std::move(rows);
  }
  write_matrix_file(a.out, "alr.csv", alr);
  emit(j, a.out, "alr.json");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge graph embeddings with softmax and mixture-of-softmaxes outputs"};
  app.require_subcommand(1);

  StatsArgs stats;
  auto* s = app.add_subcommand("stats", "Entity/relation/triple counts and out-degree statistics");
  s->add_option("--dataset", stats.dataset, "Directory with train.txt [valid.txt test.txt]")->required();
  s->add_option("--out", stats.out, "Output directory");
  s->add_flag("--strict", stats.strict, "Reject valid/test entities or relations unseen in train");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train an encoder/output-layer pair");
  t->add_option("--dataset", train.dataset, "Dataset directory")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--seed", train.seed, "Random seed")->required();
  t->add_option("--config", train.config_file, "JSON training configuration (flags override it)");
  t->add_option("--encoder", train.encoder, "distmult | rescal | mlp")->check(CLI::IsMember({"distmult", "rescal", "mlp"}));
  t->add_option("--output-layer", train.output, "softmax | mos")->check(CLI::IsMember({"softmax", "mos"}));
  t->add_option("--k", train.k, "Mixture components (mos)");
  t->add_option("--dim", train.dim, "Embedding dimension");
  t->add_option("--lr", train.lr, "Adam learning rate");
  t->add_option("--batch", train.batch, "Queries per batch");
  t->add_option("--epochs", train.epochs, "Maximum epochs");
  t->add_option("--patience", train.patience, "Early-stopping patience in epochs");
  t->add_option("--dropout", train.dropout, "Hidden dropout probability");
  t->add_option("--entropy-weight", train.entropy_weight, "Weight of the prior-entropy bonus (mos)");
  t->add_flag("--no-inverse", train.no_inverse, "Do not add inverse relations");
  t->add_flag("--strict", train.strict, "Reject valid/test entities or relations unseen in train");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Filtered ranking metrics and filtered NLL of a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint written by train")->required();
  e->add_option("--dataset", ev.dataset, "Dataset directory")->required();
  e->add_option("--split", ev.split, "train | valid | test")->check(CLI::IsMember({"train", "valid", "test"}));
  e->add_option("--out", ev.out, "Output directory");
  e->add_option("--rank-mode", ev.rank_mode, "optimistic | pessimistic")->check(CLI::IsMember({"optimistic", "pessimistic"}));
  e->add_option("--candidates", ev.candidates, "One line of candidate entity labels per evaluated triple");
  e->add_flag("--nll-filter-valid", ev.nll_filter_valid, "Also filter validation objects in the NLL");
  e->add_flag("--records", ev.records, "Write per-query records (records_<split>.csv)");
  e->add_flag("--strict", ev.strict, "Reject valid/test entities or relations unseen in train");

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "Theory diagnostics");
  a->require_subcommand(1);
  auto common = [&](CLI::App* sub) {
    sub->add_option("--out", an.out, "Output directory");
    sub->add_option("--seed", an.seed, "Random seed (default 0)");
  };
  auto instance = [&](CLI::App* sub) {
    sub->add_option("--matrix", an.matrix, "Matrix file (comma/whitespace separated rows)");
    sub->add_option("--n", an.n, "Rows of a random instance");
    sub->add_option("--d", an.d, "Dimension");
  };
  auto* bound = a->add_subcommand("bound", "Sufficient sign-rank dimension of a dataset, or the feasible sign-pattern bound");
  common(bound);
  bound->add_option("--dataset", an.dataset, "Dataset directory");
  bound->add_option("--n", an.n, "Number of objects N");
  bound->add_option("--d", an.d, "Dimension d");
  bound->add_flag("--strict", an.strict, "Strict ingestion");
  auto* sd = a->add_subcommand("sign-decompose", "Polynomial sign decomposition of a 0/1 matrix");
  common(sd);
  sd->add_option("--matrix", an.matrix, "0/1 matrix file");
  sd->add_option("--n", an.n, "Rows of a random adjacency");
  sd->add_option("--m", an.m, "Columns of a random adjacency");
  sd->add_option("--c", an.c, "Maximum row sum of a random adjacency");
  sd->add_option("--epsilon", an.epsilon, "Root offset in (0,1)");
  sd->add_flag("--no-merge", an.no_merge, "One block per positive entry");
  auto* fs_sub = a->add_subcommand("feasible-signs", "Enumerate sign patterns of E·h");
  common(fs_sub);
  instance(fs_sub);
  fs_sub->add_flag("--bias", an.bias, "Add random per-object biases");
  auto* fr = a->add_subcommand("feasible-rankings", "Enumerate rankings of E·h");
  common(fr);
  instance(fr);
  fr->add_flag("--bias", an.bias, "Add random per-object biases");
  auto* dr = a->add_subcommand("dr-check", "Rank obstruction for exact distributional reconstruction");
  common(dr);
  dr->add_option("--matrix", an.matrix, "0/1 adjacency file")->required();
  dr->add_option("--d", an.d, "Embedding dimension")->required();
  dr->add_option("--tau-plus", an.tau_plus, "Score of true triples");
  dr->add_option("--tau-minus", an.tau_minus, "Score of false triples");
  auto* lr = a->add_subcommand("logprob-rank", "Numerical rank of the log-probability matrix");
  common(lr);
  add_model_options(lr, an.model);
  lr->add_option("--queries", an.queries, "Use only the first n (s, r) queries (0 = all)");
  lr->add_option("--tol", an.tol, "Relative rank tolerance");
  auto* mf = a->add_subcommand("manifold", "Sample output distributions for random hidden states");
  common(mf);
  add_model_options(mf, an.model);
  mf->add_option("--samples", an.samples, "Number of hidden states");
  mf->add_option("--tol", an.tol, "Relative rank tolerance");
  auto* alr = a->add_subcommand("alr", "Additive log-ratio transform of probability rows");
  common(alr);
  alr->add_option("--matrix", an.matrix, "Row-stochastic matrix file")->required();
  alr->add_option("--ref", an.ref, "Reference column");
  alr->add_option("--tol", an.tol, "Relative rank tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;  // --help is a ParseError too
  }

  try {
    if (*s) cmd_stats(stats);
    if (*t) cmd_train(train);
    if (*e) cmd_eval(ev);
    if (*bound) analyze_bound(an);
    if (*sd) analyze_sign_decompose(an);
    if (*fs_sub) analyze_feasible(an, false);
    if (*fr) analyze_feasible(an, true);
    if (*dr) analyze_dr_check(an);
    if (*lr) analyze_logprob_rank(an);
    if (*mf) analyze_manifold(an);
    if (*alr) analyze_alr(an);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
