#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "kgemos/graph.hpp"
#include "kgemos/linalg.hpp"
#include "kgemos/models.hpp"
#include "kgemos/parallel.hpp"

namespace kgemos {

/// Optimistic counts only strictly better competitors (ties favor the
/// true object); pessimistic counts ties against it.
enum class RankMode { Optimistic, Pessimistic };

inline RankMode parse_rank_mode(std::string_view s) {
  if (s == "optimistic") return RankMode::Optimistic;
  if (s == "pessimistic") return RankMode::Pessimistic;
  throw std::invalid_argument("unknown rank mode '" + std::string(s) + "'");
}

namespace detail {

inline bool beats(double competitor, double target, RankMode mode) {
  return mode == RankMode::Optimistic ? competitor > target : competitor >= target;
}

inline bool in_sorted(std::span<const EntityId> sorted, std::size_t e) {
  return std::binary_search(sorted.begin(), sorted.end(), static_cast<EntityId>(e));
}

/// Rank of true_o among all entities, skipping entities in `filter`
/// (true_o itself is never skipped).
inline std::size_t rank_all(std::span<const double> z, std::size_t true_o, std::span<const EntityId> filter, RankMode mode) {
  const double target = z[true_o];
  std::size_t rank = 1;
  for (std::size_t e = 0; e < z.size(); ++e) {
    if (e == true_o || !beats(z[e], target, mode)) continue;
    if (!in_sorted(filter, e)) ++rank;
  }
  return rank;
}

/// Rank of true_o among candidates ∪ {true_o}, skipping filtered ones.
inline std::size_t rank_candidates(std::span<const double> z, std::size_t true_o, std::span<const EntityId> candidates,
                                   std::span<const EntityId> filter, RankMode mode) {
  const double target = z[true_o];
  std::size_t rank = 1;
  for (EntityId e : candidates) {
    if (e == true_o || !beats(z[e], target, mode)) continue;
    if (!in_sorted(filter, e)) ++rank;
  }
  return rank;
}

}  // namespace detail

/// rank = 1 + |{e ∉ filter, e ≠ true_o : z_e > z_true}| (≥ under the
/// pessimistic rule). `filter` must be sorted ascending.
inline std::size_t filtered_rank(std::span<const double> z, std::size_t true_o, std::span<const EntityId> filter,
                                 RankMode mode = RankMode::Optimistic) {
  if (true_o >= z.size()) throw std::out_of_range("filtered_rank: true object out of range");
  if (!std::is_sorted(filter.begin(), filter.end())) throw std::invalid_argument("filtered_rank: filter must be sorted");
  if (detail::in_sorted(filter, true_o)) throw std::invalid_argument("filtered_rank: true object is filtered out");
  return detail::rank_all(z, true_o, filter, mode);
}

/// log P^filtered(o) = log P(o) − log Σ_{o' ∉ filter} P(o'), given a row of
/// normalized log-probabilities. nullopt when o is filtered or the
/// remaining mass is zero.
inline std::optional<double> filtered_log_prob(std::span<const double> log_p, std::size_t o, std::span<const EntityId> filter) {
  if (o >= log_p.size()) throw std::out_of_range("filtered_log_prob: object out of range");
  if (detail::in_sorted(filter, o)) return std::nullopt;
  std::vector<double> kept;
  kept.reserve(log_p.size());
  for (std::size_t e = 0; e < log_p.size(); ++e)
    if (!detail::in_sorted(filter, e)) kept.push_back(log_p[e]);
  const double log_mass = logsumexp(kept);
  if (!std::isfinite(log_mass) || !std::isfinite(log_p[o])) return std::nullopt;
  return log_p[o] - log_mass;
}

struct QueryRecord {
  Triple triple;
  std::size_t rank = 0;
  double filtered_log_prob = std::numeric_limits<double>::quiet_NaN();  // NaN when skipped
};

struct EvalReport {
  std::string split;
  std::size_t num_triples = 0;
  double mrr = 0.0;
  double mr = 0.0;
  double hits1 = 0.0, hits3 = 0.0, hits10 = 0.0;
  double filtered_nll = 0.0;
  std::size_t nll_count = 0;
  std::size_t nll_skipped = 0;
  RankMode rank_mode = RankMode::Optimistic;
  bool candidate_lists = false;
  bool nll_filters_valid = false;
  std::vector<QueryRecord> records;
};

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["split"] = r.split;
  j["num_triples"] = r.num_triples;
  j["mrr"] = r.mrr;
  j["mr"] = r.mr;
  j["hits@1"] = r.hits1;
  j["hits@3"] = r.hits3;
  j["hits@10"] = r.hits10;
  j["filtered_nll"] = r.filtered_nll;
  j["nll_count"] = r.nll_count;
  j["nll_skipped"] = r.nll_skipped;
  j["rank_mode"] = r.rank_mode == RankMode::Optimistic ? "optimistic" : "pessimistic";
  j["candidate_lists"] = r.candidate_lists;
  j["nll_filter"] = r.nll_filters_valid ? "train+valid" : "train";
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.split = j.at("split").get<std::string>();
  r.num_triples = j.at("num_triples").get<std::size_t>();
  r.mrr = j.at("mrr").get<double>();
  r.mr = j.at("mr").get<double>();
  r.hits1 = j.at("hits@1").get<double>();
  r.hits3 = j.at("hits@3").get<double>();
  r.hits10 = j.at("hits@10").get<double>();
  r.filtered_nll = j.at("filtered_nll").get<double>();
  r.nll_count = j.at("nll_count").get<std::size_t>();
  r.nll_skipped = j.at("nll_skipped").get<std::size_t>();
  r.rank_mode = parse_rank_mode(j.at("rank_mode").get<std::string>());
  r.candidate_lists = j.at("candidate_lists").get<bool>();
  r.nll_filters_valid = j.at("nll_filter").get<std::string>() == "train+valid";
  return r;
}

/// Per-query CSV: subject,relation,object,rank,filtered_log_prob (ids).
inline void write_records_csv(std::ostream& out, const EvalReport& r) {
  out << "subject,relation,object,rank,filtered_log_prob\n";
  out.precision(17);
  for (const auto& q : r.records)
    out << q.triple.s << ',' << q.triple.r << ',' << q.triple.o << ',' << q.rank << ',' << q.filtered_log_prob << '\n';
}

/// Maps a batch of queries to rows of scores over all entities. For
/// filtered NLL the rows must be normalized log-probabilities.
using Scorer = std::function<Matrix(const Batch&)>;

struct EvalOptions {
  RankMode rank_mode = RankMode::Optimistic;
  /// One candidate list per triple of the evaluated split, in split order.
  const std::vector<std::vector<EntityId>>* candidates = nullptr;
  /// Also remove validation objects when renormalizing for filtered NLL.
  bool nll_filter_valid = false;
  bool compute_nll = true;
  bool keep_records = true;
  std::size_t batch_size = 256;
};

/// Filtered ranking metrics and filtered NLL for every triple of `split`.
/// Rank filtering removes train ∪ valid ∪ test objects of the query; NLL
/// filtering removes train objects (plus valid when requested).
inline EvalReport evaluate(const Scorer& scorer, const TripleStore& store, Split split, const EvalOptions& opts = {}) {
  const auto& triples = store.split(split);
  if (triples.empty()) throw std::invalid_argument("evaluate: split '" + std::string(split_name(split)) + "' is empty");
  if (opts.candidates && opts.candidates->size() != triples.size())
    throw std::invalid_argument("evaluate: expected one candidate list per triple");
  if (opts.batch_size == 0) throw std::invalid_argument("evaluate: batch size must be positive");
  if (opts.candidates)
    for (std::size_t i = 0; i < triples.size(); ++i) {
      const auto& c = (*opts.candidates)[i];
      if (std::count(c.begin(), c.end(), triples[i].o) > 1)
        throw std::invalid_argument("evaluate: candidate list " + std::to_string(i) + " contains the true object twice");
      for (EntityId e : c)
        if (e >= store.num_entities()) throw std::out_of_range("evaluate: candidate id out of range");
    }

  const QueryIndex rank_filter(store, SplitSelector::all());
  const QueryIndex nll_filter(store, opts.nll_filter_valid ? Split::Train | Split::Valid : SplitSelector(Split::Train));

  // Group triples by query so each (s, r) is scored once.
  std::vector<Query> queries;
  std::vector<std::vector<std::size_t>> members;
  {
    std::map<Query, std::size_t> slot;
    for (std::size_t i = 0; i < triples.size(); ++i) {
      const Query q{triples[i].s, triples[i].r};
      auto [it, inserted] = slot.emplace(q, queries.size());
      if (inserted) {
        queries.push_back(q);
        members.emplace_back();
      }
      members[it->second].push_back(i);
    }
  }

  std::vector<QueryRecord> records(triples.size());
  const std::size_t num_batches = (queries.size() + opts.batch_size - 1) / opts.batch_size;
  auto run_batches = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t bi = lo; bi < hi; ++bi) {
      const std::size_t begin = bi * opts.batch_size;
      const std::size_t end = std::min(queries.size(), begin + opts.batch_size);
      const Batch batch = Batch::from_queries(std::span<const Query>(queries).subspan(begin, end - begin));
      const Matrix rows = scorer(batch);
      if (rows.rows() != batch.size() || rows.cols() != store.num_entities())
        throw DimensionError("evaluate: scorer returned " + shape_str(rows));
      for (std::size_t qi = begin; qi < end; ++qi) {
        const auto row = rows.row(qi - begin);
        const auto rfilter = rank_filter.objects(queries[qi]);
        const auto nfilter = nll_filter.objects(queries[qi]);
        for (std::size_t ti : members[qi]) {
          const Triple& t = triples[ti];
          QueryRecord& rec = records[ti];
          rec.triple = t;
          rec.rank = opts.candidates ? detail::rank_candidates(row, t.o, (*opts.candidates)[ti], rfilter, opts.rank_mode)
                                     : detail::rank_all(row, t.o, rfilter, opts.rank_mode);
          if (opts.compute_nll) {
            auto lp = filtered_log_prob(row, t.o, nfilter);
            if (lp) rec.filtered_log_prob = *lp;
          }
        }
      }
    }
  };
  parallel_for(num_batches, 1, run_batches);

  EvalReport rep;
  rep.split = std::string(split_name(split));
  rep.num_triples = triples.size();
  rep.rank_mode = opts.rank_mode;
  rep.candidate_lists = opts.candidates != nullptr;
  rep.nll_filters_valid = opts.nll_filter_valid;
  double nll_sum = 0.0;
  for (const auto& rec : records) {
    const double rank = static_cast<double>(rec.rank);
    rep.mrr += 1.0 / rank;
    rep.mr += rank;
    rep.hits1 += rec.rank <= 1 ? 1.0 : 0.0;
    rep.hits3 += rec.rank <= 3 ? 1.0 : 0.0;
    rep.hits10 += rec.rank <= 10 ? 1.0 : 0.0;
    if (opts.compute_nll) {
      if (std::isnan(rec.filtered_log_prob)) {
        ++rep.nll_skipped;
      } else {
        nll_sum -= rec.filtered_log_prob;
        ++rep.nll_count;
      }
    }
  }
  const double n = static_cast<double>(records.size());
  rep.mrr /= n;
  rep.mr /= n;
  rep.hits1 /= n;
  rep.hits3 /= n;
  rep.hits10 /= n;
  rep.filtered_nll = rep.nll_count == 0 ? std::numeric_limits<double>::quiet_NaN() : nll_sum / static_cast<double>(rep.nll_count);
  if (opts.keep_records) rep.records = std::move(records);
  return rep;
}

inline EvalReport ranking_metrics(const Scorer& scorer, const TripleStore& store, Split split, EvalOptions opts = {}) {
  opts.compute_nll = false;
  return evaluate(scorer, store, split, opts);
}

inline double filtered_nll(const Scorer& scorer, const TripleStore& store, Split split, EvalOptions opts = {}) {
  opts.candidates = nullptr;
  opts.keep_records = false;
  return evaluate(scorer, store, split, opts).filtered_nll;
}

/// One line of whitespace-separated entity labels per triple of the split.
inline std::vector<std::vector<EntityId>> read_candidate_lists(std::istream& in, const TripleStore& store) {
  std::unordered_map<std::string, EntityId> ids;
  for (std::size_t i = 0; i < store.entity_names.size(); ++i) ids.emplace(store.entity_names[i], static_cast<EntityId>(i));
  std::vector<std::vector<EntityId>> lists;
  std::string line, label;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<EntityId> list;
    while (fields >> label) {
      auto it = ids.find(label);
      if (it == ids.end()) throw IngestError("candidates", line_no, "unknown entity '" + label + "'");
      list.push_back(it->second);
    }
    lists.push_back(std::move(list));
  }
  return lists;
}

inline std::vector<std::vector<EntityId>> read_candidate_lists(const std::filesystem::path& path, const TripleStore& store) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_candidate_lists(in, store);
}

}  // namespace kgemos
