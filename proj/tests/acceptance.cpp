// Acceptance harness: one PASS/FAIL line per criterion, exit 1 if any gating
// criterion fails. Criteria 8 and 9 never gate.
//
//   KGEMOS_FB15K237   directory with train/valid/test.txt (default data/FB15k-237)
//   KGEMOS_STRETCH=1  run the multi-hour FB15k-237 training check

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kgemos/kgemos.hpp"

using namespace kgemos;
namespace fs = std::filesystem;

namespace {

enum class Status { Pass, Fail, Skip, Info };

struct Outcome {
  Status status = Status::Fail;
  std::string detail;
};

Outcome pass(std::string d) { return {Status::Pass, std::move(d)}; }
Outcome fail(std::string d) { return {Status::Fail, std::move(d)}; }

std::string fmt(double v, int digits = 6) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng{seed, 0x61636370ULL};
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.uniform(lo, hi);
  return m;
}

fs::path fb15k237_dir() {
  if (const char* env = std::getenv("KGEMOS_FB15K237"); env && *env) return env;
  return fs::path(KGEMOS_SOURCE_DIR) / "data" / "FB15k-237";
}

// --- 1. degree bound on FB15k-237 -------------------------------------------

Outcome bound_reproduction() {
  const fs::path dir = fb15k237_dir();
  if (!fs::exists(dir / "train.txt"))
    return fail("dataset not found at " + dir.string() + " (set KGEMOS_FB15K237)");
  const TripleStore st = load_dataset_dir(dir, {false, nullptr});
  const auto j = dataset_stats_json(st);
  const std::size_t c = j["without_inverse"]["max_out_degree"], ci = j["with_inverse"]["max_out_degree"];
  const std::size_t d = j["without_inverse"]["sufficient_dim"], di = j["with_inverse"]["sufficient_dim"];
  const std::string got = "c+=" + std::to_string(c) + "/" + std::to_string(ci) + " d+=" + std::to_string(d) + "/" +
                          std::to_string(di);
  if (c == 954 && ci == 4364 && d == 1909 && di == 8729) return pass(got);
  return fail(got + ", expected c+=954/4364 d+=1909/8729");
}

// --- 2. constructive sign decomposition -------------------------------------

Outcome sign_decomposition() {
  Rng rng{2, 0x7369676eULL};
  std::size_t failures = 0, exact = 0;
  std::string first;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng.below(48), m = 1 + rng.below(48), c = rng.below(9);
    const Matrix a = random_adjacency(n, m, c, rng);
    const auto dec = sign_decompose(a);
    const auto v = verify_sign_decomposition(a, dec);
    exact += v.exact_checked;
    const bool width_ok = dec.coefficients.cols() == 2 * max_row_sum(a) + 1;
    const bool exact_ok = (n > kExactSignCheckMax || m > kExactSignCheckMax) || (v.exact_checked && v.exact_mismatches.empty());
    if (!v.ok || !width_ok || !exact_ok) {
      if (first.empty()) first = "rep " + std::to_string(rep) + " (" + std::to_string(n) + "x" + std::to_string(m) + ")";
      ++failures;
    }
  }
  const std::string d = "200 adjacencies, " + std::to_string(exact) + " with rational cross-check";
  return failures == 0 ? pass(d) : fail(std::to_string(failures) + " failures, first " + first);
}

// --- 3. gradients -----------------------------------------------------------

Outcome gradients() {
  constexpr double tol = 1e-5, tol_bn = 1e-4;
  std::vector<std::string> bad;
  double worst = 0.0;
  auto probe = [](Tape& t, Var x, std::uint64_t seed) {
    const Matrix& v = t.value(x);
    return t.weighted_sum(x, random_matrix(v.rows(), v.cols(), seed));
  };
  auto check = [&](const std::string& name, const LossBuilder& f, std::vector<Parameter*> ps, double limit) {
    const double err = finite_difference_check(f, ps);
    worst = std::max(worst, err);
    if (!(err <= limit)) bad.push_back(name + "=" + fmt(err, 3));
  };

  Parameter a("a", random_matrix(3, 4, 1)), b("b", random_matrix(4, 2, 2)), c("c", random_matrix(5, 4, 3));
  Parameter x("x", random_matrix(3, 4, 4)), y("y", random_matrix(3, 4, 5));
  Parameter e("e", random_matrix(5, 3, 6)), w("w", random_matrix(2, 9, 7));
  Parameter h("h", random_matrix(4, 3, 8)), aw("aw", random_matrix(5, 3, 9)), ab("ab", random_matrix(1, 5, 10));
  Parameter g("g", random_matrix(1, 3, 11, 0.5, 1.5)), beta("beta", random_matrix(1, 3, 12));
  Parameter l("l", random_matrix(3, 5, 13, -2, 2)), col("col", random_matrix(3, 1, 14));
  Parameter p("p", random_matrix(3, 2, 15)), q("q", random_matrix(3, 2, 16));
  const std::vector<std::size_t> ids{4, 0, 4, 2}, rel_ids{1, 0, 1, 1};
  const Matrix mask = random_matrix(3, 4, 17, 0, 2);

  check("matmul", [&](Tape& t) { return probe(t, t.matmul(t.param(a), t.param(b)), 20); }, {&a, &b}, tol);
  check("matmul_t", [&](Tape& t) { return probe(t, t.matmul(t.param(a), t.param(c), true), 21); }, {&a, &c}, tol);
  check("add", [&](Tape& t) { return probe(t, t.add(t.param(x), t.param(y)), 22); }, {&x, &y}, tol);
  check("sub", [&](Tape& t) { return probe(t, t.sub(t.param(x), t.param(y)), 23); }, {&x, &y}, tol);
  check("hadamard", [&](Tape& t) { return probe(t, t.hadamard(t.param(x), t.param(y)), 24); }, {&x, &y}, tol);
  check("gather_rows", [&](Tape& t) { return probe(t, t.gather_rows(e, ids), 25); }, {&e}, tol);
  check("relation_matvec", [&](Tape& t) { return probe(t, t.relation_matvec(t.param(h), w, rel_ids), 26); }, {&h, &w}, tol);
  check("affine", [&](Tape& t) { return probe(t, t.affine(t.param(h), t.param(aw), t.param(ab)), 27); }, {&h, &aw, &ab}, tol);
  check("leaky_relu", [&](Tape& t) { return probe(t, t.leaky_relu(t.param(x), 0.01), 28); }, {&x}, tol);
  check("mask_multiply", [&](Tape& t) { return probe(t, t.mask_multiply(t.param(x), mask), 29); }, {&x}, tol);
  check("dropout", [&](Tape& t) {
    Rng rng{5};
    return probe(t, t.dropout(t.param(x), 0.3, rng), 30);
  }, {&x}, tol);
  BatchNormStats stats(3);
  check("batch_norm_train", [&](Tape& t) {
    return probe(t, t.batch_norm(t.param(h), t.param(g), t.param(beta), stats, true), 31);
  }, {&h, &g, &beta}, tol_bn);
  stats.running_mean = random_matrix(1, 3, 32);
  stats.running_var = random_matrix(1, 3, 33, 0.5, 2.0);
  check("batch_norm_eval", [&](Tape& t) {
    return probe(t, t.batch_norm(t.param(h), t.param(g), t.param(beta), stats, false), 34);
  }, {&h, &g, &beta}, tol_bn);
  check("row_log_softmax", [&](Tape& t) { return probe(t, t.row_log_softmax(t.param(l)), 35); }, {&l}, tol);
  check("row_logsumexp", [&](Tape& t) { return probe(t, t.row_logsumexp(t.param(l)), 36); }, {&l}, tol);
  check("add_column", [&](Tape& t) { return probe(t, t.add_column(t.param(l), t.param(col)), 37); }, {&l, &col}, tol);
  check("column", [&](Tape& t) { return probe(t, t.column(t.param(l), 2), 38); }, {&l}, tol);
  check("concat_cols", [&](Tape& t) { return probe(t, t.concat_cols(t.param(p), t.param(l)), 39); }, {&p, &l}, tol);
  check("logsumexp_stack", [&](Tape& t) {
    const Var xs[] = {t.param(p), t.param(q)};
    return probe(t, t.logsumexp_stack(xs), 40);
  }, {&p, &q}, tol);
  check("combine", [&](Tape& t) {
    const Var xs[] = {t.param(p), t.param(q)};
    const double cs[] = {0.7, -1.3};
    return probe(t, t.combine(xs, cs), 41);
  }, {&p, &q}, tol);
  check("mean_row_entropy", [&](Tape& t) { return t.mean_row_entropy(t.row_log_softmax(t.param(l))); }, {&l}, tol);
  check("sum", [&](Tape& t) { return t.sum(t.hadamard(t.param(x), t.param(x))); }, {&x}, tol);

  Batch batch;
  batch.subjects = {0, 3, 5, 3, 7};
  batch.relations = {1, 0, 2, 2, 1};
  const std::vector<std::vector<EntityId>> labels{{1}, {2, 4}, {0}, {5, 1, 2}, {7, 6}};
  const std::vector<std::span<const EntityId>> spans(labels.begin(), labels.end());
  for (auto enc : {EncoderKind::DistMult, EncoderKind::Rescal, EncoderKind::Mlp})
    for (auto out : {OutputKind::Softmax, OutputKind::Mos}) {
      ModelConfig mc;
      mc.encoder = {enc, 8, 3, 4, 0.01};
      mc.output = out;
      mc.num_components = out == OutputKind::Mos ? 3 : 1;
      KgeModel model = make_model(mc, 17);
      check(std::string(encoder_name(enc)) + "/" + std::string(output_name(out)),
            [&](Tape& t) { return batch_objective(t, model, batch, spans, 0.1, true, nullptr); }, model.parameters(),
            out == OutputKind::Mos ? tol_bn : tol);
    }

  const std::string d = "22 op checks + 6 full losses, worst rel err " + fmt(worst, 3);
  if (bad.empty()) return pass(d);
  std::string list;
  for (const auto& s : bad) list += " " + s;
  return fail(d + "; over tolerance:" + list);
}

// --- 4. log-probability rank ------------------------------------------------

KgeModel toy_model(OutputKind out, std::size_t k, std::uint64_t seed) {
  ModelConfig mc;
  mc.encoder = {EncoderKind::DistMult, 8, 8, 2, 0.01};
  mc.output = out;
  mc.num_components = k;
  return make_model(mc, seed);
}

std::vector<Query> all_queries(std::size_t entities, std::size_t relations) {
  std::vector<Query> qs;
  for (std::size_t s = 0; s < entities; ++s)
    for (std::size_t r = 0; r < relations; ++r) qs.push_back({static_cast<EntityId>(s), static_cast<RelationId>(r)});
  return qs;
}

Outcome logprob_rank() {
  const auto qs = all_queries(8, 8);
  std::size_t max_k1 = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    KgeModel m = toy_model(OutputKind::Mos, 1, seed);
    max_k1 = std::max(max_k1, logprob_rank_probe(m, qs, 1e-8));
  }
  std::size_t best_k4 = 0;
  std::uint64_t best_seed = 0;
  for (std::uint64_t seed = 0; seed < 20 && best_k4 < 4; ++seed) {
    KgeModel m = toy_model(OutputKind::Mos, 4, seed);
    const std::size_t r = logprob_rank_probe(m, qs, 1e-8);
    if (r > best_k4) best_k4 = r, best_seed = seed;
  }
  const std::string d = "K=1 max rank " + std::to_string(max_k1) + " over 20 seeds; K=4 rank " + std::to_string(best_k4) +
                        " (seed " + std::to_string(best_seed) + ")";
  return max_k1 <= 3 && best_k4 >= 4 ? pass(d) : fail(d);
}

// --- 5. feasibility counts --------------------------------------------------

std::set<SignPattern> sampled_signs(const Matrix& e, std::size_t probes, std::uint64_t seed) {
  Rng rng{seed, 0x70726f62ULL};
  std::set<SignPattern> out;
  std::vector<double> h(e.cols());
  for (std::size_t k = 0; k < probes; ++k) {
    for (double& v : h) v = rng.normal();
    SignPattern p(e.rows());
    for (std::size_t i = 0; i < e.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < e.cols(); ++j) s += e(i, j) * h[j];
      p[i] = s > 0 ? 1 : -1;
    }
    out.insert(p);
  }
  return out;
}

std::set<Ranking> sampled_rankings(const Matrix& e, std::size_t probes, std::uint64_t seed) {
  Rng rng{seed, 0x72616e6bULL};
  std::set<Ranking> out;
  std::vector<double> h(e.cols()), s(e.rows());
  for (std::size_t k = 0; k < probes; ++k) {
    for (double& v : h) v = rng.normal();
    for (std::size_t i = 0; i < e.rows(); ++i) {
      s[i] = 0.0;
      for (std::size_t j = 0; j < e.cols(); ++j) s[i] += e(i, j) * h[j];
    }
    Ranking r(e.rows());
    std::iota(r.begin(), r.end(), 0);
    std::sort(r.begin(), r.end(), [&](int a, int b) { return s[a] > s[b]; });
    out.insert(r);
  }
  return out;
}

Outcome feasibility_counts() {
  Rng rng{5, 0x66656173ULL};
  std::vector<std::string> bad;
  std::size_t instances = 0;
  for (std::size_t n = 1; n <= 6; ++n)
    for (std::size_t d = 1; d <= 3; ++d) {
      const Matrix e = random_gaussian(n, d, rng);
      const std::string tag = "N=" + std::to_string(n) + ",d=" + std::to_string(d);
      // enumerate_feasible_signs already requires the dual test and the
      // arrangement cells to agree.
      const auto r = enumerate_feasible_signs(e);
      if (BigInt(r.feasible_count) != *r.bound) bad.push_back(tag + " count " + std::to_string(r.feasible_count));
      const auto sampled = sampled_signs(e, 100000, n * 10 + d);
      if (sampled != std::set<SignPattern>(r.patterns.begin(), r.patterns.end())) bad.push_back(tag + " sampling");
      if (d == 1 && n >= 2) {
        const auto rk = enumerate_feasible_rankings(e);
        if (rk.feasible_count != 2) bad.push_back(tag + " rankings " + std::to_string(rk.feasible_count));
        if (sampled_rankings(e, 20000, n) != std::set<Ranking>(rk.patterns.begin(), rk.patterns.end()))
          bad.push_back(tag + " ranking sampling");
      }
      ++instances;
    }
  const std::string d = std::to_string(instances) + " instances, signs = bound, d=1 rankings = 2, oracles agree";
  if (bad.empty()) return pass(d);
  std::string list;
  for (const auto& s : bad) list += " " + s;
  return fail("mismatches:" + list);
}

// --- 6. metrics -------------------------------------------------------------

struct NaiveMetrics {
  double mrr = 0, mr = 0, h1 = 0, h3 = 0, h10 = 0, nll = 0;
};

NaiveMetrics naive_metrics(const TripleStore& st, const Matrix& table, Split split, RankMode mode) {
  NaiveMetrics out;
  std::size_t nll_count = 0;
  const std::size_t n = st.num_entities();
  for (const Triple& t : st.split(split)) {
    auto row = table.row(t.s * st.num_relations() + t.r);
    auto known = [&](std::size_t e, bool train_only) {
      for (Split s : kAllSplits) {
        if (train_only && s != Split::Train) continue;
        for (const Triple& u : st.split(s))
          if (u.s == t.s && u.r == t.r && u.o == e) return true;
      }
      return false;
    };
    std::size_t rank = 1;
    for (std::size_t e = 0; e < n; ++e) {
      if (e == t.o || known(e, false)) continue;
      if (mode == RankMode::Optimistic ? row[e] > row[t.o] : row[e] >= row[t.o]) ++rank;
    }
    out.mrr += 1.0 / static_cast<double>(rank);
    out.mr += static_cast<double>(rank);
    out.h1 += rank <= 1;
    out.h3 += rank <= 3;
    out.h10 += rank <= 10;
    if (!known(t.o, true)) {
      double mass = 0.0;
      for (std::size_t e = 0; e < n; ++e)
        if (!known(e, true)) mass += std::exp(row[e]);
      out.nll -= std::log(std::exp(row[t.o]) / mass);
      ++nll_count;
    }
  }
  const double m = static_cast<double>(st.split(split).size());
  out.mrr /= m;
  out.mr /= m;
  out.h1 /= m;
  out.h3 /= m;
  out.h10 /= m;
  out.nll /= static_cast<double>(nll_count);
  return out;
}

Outcome metrics() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    constexpr std::size_t n = 20, rels = 3;
    TripleStore st;
    for (std::size_t i = 0; i < n; ++i) st.entity_names.push_back("e" + std::to_string(i));
    for (std::size_t i = 0; i < rels; ++i) st.relation_names.push_back("r" + std::to_string(i));
    Rng rng{seed, 0x6d657472ULL};
    std::set<Triple> used;
    auto fill = [&](std::vector<Triple>& split, std::size_t count) {
      while (split.size() < count) {
        Triple t{static_cast<EntityId>(rng.below(n / 2)), static_cast<RelationId>(rng.below(rels)),
                 static_cast<EntityId>(rng.below(n))};
        if (used.insert(t).second) split.push_back(t);
      }
    };
    fill(st.train, 80);
    fill(st.valid, 15);
    fill(st.test, 30);
    Matrix z(n * rels, n);
    for (double& v : z.values()) v = std::round(rng.uniform(-3, 3) * 2.0) / 2.0;  // ties on purpose
    const Matrix table = row_log_softmax(z);
    const Scorer scorer = [&](const Batch& b) {
      Matrix out(b.size(), n);
      for (std::size_t i = 0; i < b.size(); ++i) {
        const auto row = table.row(b.subjects[i] * rels + b.relations[i]);
        std::copy(row.begin(), row.end(), &out(i, 0));
      }
      return out;
    };
    for (auto mode : {RankMode::Optimistic, RankMode::Pessimistic}) {
      EvalOptions o;
      o.rank_mode = mode;
      const EvalReport got = evaluate(scorer, st, Split::Test, o);
      const NaiveMetrics want = naive_metrics(st, table, Split::Test, mode);
      for (double diff : {got.mrr - want.mrr, got.mr - want.mr, got.hits1 - want.h1, got.hits3 - want.h3,
                          got.hits10 - want.h10, got.filtered_nll - want.nll})
        worst = std::max(worst, std::abs(diff));
    }
  }
  const std::vector<double> lp{std::log(0.5), std::log(0.3), std::log(0.2)};
  const std::vector<EntityId> filter{0};
  const double worked = std::exp(*filtered_log_prob(lp, 1, filter));
  const bool worked_ok = std::abs(worked - 0.6) <= 1e-12;
  const std::string d = "max |diff| " + fmt(worst, 3) + " over 10 KGs x 2 rank modes; P_filtered = " + fmt(worked, 15);
  return worst <= 1e-12 && worked_ok ? pass(d) : fail(d);
}

// --- 7. mixture vs single softmax on a rank-6 target ------------------------

// 8 x 8 adjacency whose exact rank is 6; rows are (s, r=0) queries.
Matrix rank6_target() {
  Rng rng{7, 0x74617267ULL};
  for (;;) {
    Matrix y = random_adjacency(8, 8, 4, rng);
    bool rows_ok = true;
    for (std::size_t i = 0; i < 8; ++i) {
      double s = 0.0;
      for (double v : y.row(i)) s += v;
      rows_ok = rows_ok && s > 0.0;
    }
    if (rows_ok && exact_rank_binary(y) == 6) return y;
  }
}

Outcome dr_separation() {
  const Matrix y = rank6_target();
  const DrVerdict verdict = dr_obstruction_check(y, 2);
  TripleStore st;
  for (std::size_t i = 0; i < 8; ++i) st.entity_names.push_back("e" + std::to_string(i));
  st.relation_names.push_back("r");
  for (std::size_t s = 0; s < 8; ++s)
    for (std::size_t o = 0; o < 8; ++o)
      if (y(s, o) != 0.0) st.train.push_back({static_cast<EntityId>(s), 0, static_cast<EntityId>(o)});

  std::string d = "target rank " + std::to_string(verdict.rank) + " (" + verdict.verdict() + " at d=2);";
  bool all = verdict.rank == 6;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    double nll[2];
    for (int which = 0; which < 2; ++which) {
      TrainConfig c;
      c.encoder = EncoderKind::DistMult;
      c.output = OutputKind::Mos;
      c.num_components = which == 0 ? 1 : 4;
      c.dim = 2;
      c.learning_rate = 0.01;
      c.batch_size = 8;
      c.max_epochs = 5000;
      c.dropout = 0.0;
      c.entropy_weight = 0.0;
      c.seed = seed;
      // Last epoch's mean training loss: pure NLL with the entropy term off,
      // taken with the batch statistics the layers were fit under.
      const TrainResult r = train_loop(st, c);
      nll[which] = r.history.back().loss;
    }
    all = all && nll[1] < nll[0];
    d += " seed " + std::to_string(seed) + ": K=1 " + fmt(nll[0], 4) + " K=4 " + fmt(nll[1], 4) + ";";
  }
  d.pop_back();
  return all ? pass(d) : fail(d);
}

// --- 8. stretch -------------------------------------------------------------

Outcome stretch() {
  const char* on = std::getenv("KGEMOS_STRETCH");
  if (!on || std::string(on) != "1") return {Status::Skip, "non-gating; set KGEMOS_STRETCH=1 to run"};
  const fs::path dir = fb15k237_dir();
  if (!fs::exists(dir / "train.txt")) return {Status::Skip, "dataset not found at " + dir.string()};
  const TripleStore st = augment_inverse(load_dataset_dir(dir, {false, nullptr}));
  TrainConfig c = TrainConfig::defaults_for(EncoderKind::DistMult, OutputKind::Softmax);
  c.dim = 200;
  TrainResult r = train_loop(st, c);
  EvalOptions o;
  o.keep_records = false;
  const EvalReport rep = evaluate([&](const Batch& b) { return r.model.log_prob(b); }, st, Split::Test, o);
  const std::string d = "test MRR " + fmt(rep.mrr, 4) + " (target 0.304 +/- 0.02)";
  return std::abs(rep.mrr - 0.304) <= 0.02 ? pass(d) : fail(d);
}

Outcome not_reproducible() {
  return {Status::Info, "large-scale results (d=1000, ogbl-biokg) are out of scope at desk scale; covered by 4 and 7"};
}

const char* label(Status s) {
  switch (s) {
    case Status::Pass: return "PASS";
    case Status::Fail: return "FAIL";
    case Status::Skip: return "SKIP";
    case Status::Info: return "N/A ";
  }
  return "?";
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    bool gating;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "bound reproduction (FB15k-237)", true, bound_reproduction},
      {2, "sign decomposition with 2c+1 columns", true, sign_decomposition},
      {3, "finite-difference gradients", true, gradients},
      {4, "softmax rank law", true, logprob_rank},
      {5, "feasibility counting", true, feasibility_counts},
      {6, "metric correctness", true, metrics},
      {7, "toy DR separation", true, dr_separation},
      {8, "stretch: DistMult d=200 on FB15k-237", false, stretch},
      {9, "large-scale results", false, not_reproducible},
  };
  bool ok = true;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %d %s  %s [%.1fs]: %s\n", c.id, label(o.status), c.name, secs, o.detail.c_str());
    std::fflush(stdout);
    if (c.gating && o.status != Status::Pass) ok = false;
  }
  return ok ? 0 : 1;
}
