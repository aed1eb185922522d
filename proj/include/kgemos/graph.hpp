#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

namespace kgemos {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

struct Triple {
  EntityId s = 0;
  RelationId r = 0;
  EntityId o = 0;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

enum class Split : unsigned { Train = 1, Valid = 2, Test = 4 };

/// Bitmask over splits.
class SplitSelector {
 public:
  constexpr SplitSelector() = default;
  constexpr SplitSelector(Split s) : bits_(static_cast<unsigned>(s)) {}
  static constexpr SplitSelector all() { return SplitSelector(7u); }
  constexpr SplitSelector operator|(SplitSelector o) const { return SplitSelector(bits_ | o.bits_); }
  constexpr bool contains(Split s) const { return (bits_ & static_cast<unsigned>(s)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr unsigned bits() const { return bits_; }

 private:
  constexpr explicit SplitSelector(unsigned bits) : bits_(bits) {}
  unsigned bits_ = 0;
};

constexpr SplitSelector operator|(Split a, Split b) { return SplitSelector(a) | SplitSelector(b); }

inline constexpr Split kAllSplits[] = {Split::Train, Split::Valid, Split::Test};

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "valid" || name == "validation") return Split::Valid;
  if (name == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

/// Appended to a relation name to name its inverse.
inline constexpr std::string_view kInverseSuffix = "__inverse";

class IngestError : public std::runtime_error {
 public:
  IngestError(const std::string& where, std::size_t line, const std::string& what)
      : std::runtime_error(where + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Entity/relation dictionaries plus the three splits as id triples.
struct TripleStore {
  std::vector<std::string> entity_names;
  std::vector<std::string> relation_names;
  std::vector<Triple> train, valid, test;
  /// Lines dropped because the triple already appeared in the same split.
  std::size_t duplicates_train = 0, duplicates_valid = 0, duplicates_test = 0;
  bool inverse_augmented = false;

  std::size_t num_entities() const noexcept { return entity_names.size(); }
  std::size_t num_relations() const noexcept { return relation_names.size(); }
  /// Relation count before inverse augmentation.
  std::size_t base_relations() const noexcept {
    return inverse_augmented ? relation_names.size() / 2 : relation_names.size();
  }

  std::vector<Triple>& split(Split s) {
    return s == Split::Train ? train : s == Split::Valid ? valid : test;
  }
  const std::vector<Triple>& split(Split s) const {
    return s == Split::Train ? train : s == Split::Valid ? valid : test;
  }
  std::size_t duplicates(Split s) const {
    return s == Split::Train ? duplicates_train : s == Split::Valid ? duplicates_valid : duplicates_test;
  }
  std::size_t total_triples() const noexcept { return train.size() + valid.size() + test.size(); }

  std::optional<EntityId> entity_id(std::string_view name) const {
    for (std::size_t i = 0; i < entity_names.size(); ++i)
      if (entity_names[i] == name) return static_cast<EntityId>(i);
    return std::nullopt;
  }
};

struct LoadOptions {
  /// Reject entities/relations that appear in valid/test but not in train.
  bool strict = false;
  /// Receives lenient-mode warnings; nullptr silences them.
  std::ostream* warnings = &std::cerr;
};

namespace detail {

class Dictionary {
 public:
  explicit Dictionary(std::vector<std::string>& names) : names_(names) {
    for (std::size_t i = 0; i < names_.size(); ++i) ids_.emplace(names_[i], static_cast<std::uint32_t>(i));
  }
  std::optional<std::uint32_t> find(const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  std::uint32_t intern(const std::string& name) {
    auto [it, inserted] = ids_.emplace(name, static_cast<std::uint32_t>(names_.size()));
    if (inserted) names_.push_back(name);
    return it->second;
  }

 private:
  std::vector<std::string>& names_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

struct TripleHash {
  std::size_t operator()(const Triple& t) const noexcept {
    std::uint64_t h = (static_cast<std::uint64_t>(t.s) << 32) ^ t.o;
    h ^= static_cast<std::uint64_t>(t.r) * 0x9e3779b97f4a7c15ULL;
    return std::hash<std::uint64_t>{}(h);
  }
};

inline void split_tabs(const std::string& line, std::vector<std::string>& out) {
  out.clear();
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
}

inline void read_split(std::istream& in, const std::string& where, Split split, TripleStore& store,
                       Dictionary& entities, Dictionary& relations, const LoadOptions& opts) {
  auto& triples = store.split(split);
  std::size_t& dups = split == Split::Train   ? store.duplicates_train
                      : split == Split::Valid ? store.duplicates_valid
                                              : store.duplicates_test;
  std::unordered_set<Triple, TripleHash> seen(triples.begin(), triples.end());
  std::string line;
  std::vector<std::string> fields;
  std::size_t line_no = 0;
  std::size_t unseen = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    split_tabs(line, fields);
    if (fields.size() != 3)
      throw IngestError(where, line_no, "expected 3 tab-separated fields, found " + std::to_string(fields.size()));
    for (const auto& f : fields)
      if (f.empty()) throw IngestError(where, line_no, "empty field");
    Triple t;
    if (split == Split::Train) {
      t = {entities.intern(fields[0]), relations.intern(fields[1]), entities.intern(fields[2])};
    } else {
      auto s = entities.find(fields[0]);
      auto r = relations.find(fields[1]);
      auto o = entities.find(fields[2]);
      if (!s || !r || !o) {
        if (opts.strict) {
          const std::string& name = !s ? fields[0] : !r ? fields[1] : fields[2];
          throw IngestError(where, line_no, "'" + name + "' does not occur in the training split");
        }
        ++unseen;
      }
      t = {s ? *s : entities.intern(fields[0]), r ? *r : relations.intern(fields[1]),
           o ? *o : entities.intern(fields[2])};
    }
    if (!seen.insert(t).second) {
      ++dups;
      continue;
    }
    triples.push_back(t);
  }
  if (unseen > 0 && opts.warnings)
    *opts.warnings << "warning: " << where << ": " << unseen
                   << " triple(s) mention entities or relations absent from train\n";
}

}  // namespace detail

/// Reads one tab-separated triple file as the train split.
inline TripleStore load_triples(std::istream& in, const std::string& name = "<stream>") {
  TripleStore store;
  detail::Dictionary entities(store.entity_names), relations(store.relation_names);
  detail::read_split(in, name, Split::Train, store, entities, relations, LoadOptions{});
  return store;
}

inline TripleStore load_triples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return load_triples(in, path.string());
}

/// Reads train/valid/test files. Ids are assigned by first appearance,
/// scanning train, then valid, then test.
inline TripleStore load_dataset(const std::filesystem::path& train, const std::filesystem::path& valid,
                                const std::filesystem::path& test, const LoadOptions& opts = {}) {
  TripleStore store;
  detail::Dictionary entities(store.entity_names), relations(store.relation_names);
  const std::pair<Split, const std::filesystem::path*> files[] = {
      {Split::Train, &train}, {Split::Valid, &valid}, {Split::Test, &test}};
  for (auto [split, path] : files) {
    if (path->empty()) continue;
    std::ifstream in(*path);
    if (!in) throw std::runtime_error("cannot open " + path->string());
    detail::read_split(in, path->string(), split, store, entities, relations, opts);
  }
  return store;
}

/// Loads <dir>/train.txt, valid.txt and test.txt. valid/test are optional.
inline TripleStore load_dataset_dir(const std::filesystem::path& dir, const LoadOptions& opts = {}) {
  const auto train = dir / "train.txt";
  if (!std::filesystem::exists(train)) throw std::runtime_error("missing training file " + train.string());
  auto optional_file = [&](const char* name) {
    const auto p = dir / name;
    return std::filesystem::exists(p) ? p : std::filesystem::path{};
  };
  return load_dataset(train, optional_file("valid.txt"), optional_file("test.txt"), opts);
}

/// Adds r⁻¹ = r + |R| and the mirrored triple (o, r⁻¹, s) for every triple
/// of every split. Mirrors follow the originals within each split.
inline TripleStore augment_inverse(const TripleStore& store) {
  if (store.inverse_augmented) throw std::logic_error("augment_inverse: store is already inverse-augmented");
  TripleStore out = store;
  const auto base = static_cast<RelationId>(store.num_relations());
  for (std::size_t r = 0; r < base; ++r) out.relation_names.push_back(store.relation_names[r] + std::string(kInverseSuffix));
  for (Split s : kAllSplits) {
    auto& triples = out.split(s);
    const std::size_t n = triples.size();
    triples.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      const Triple t = triples[i];
      triples.push_back({t.o, static_cast<RelationId>(t.r + base), t.s});
    }
  }
  out.duplicates_train *= 2;
  out.duplicates_valid *= 2;
  out.duplicates_test *= 2;
  out.inverse_augmented = true;
  return out;
}

/// (subject, relation) pair; the unit of an object-prediction query.
struct Query {
  EntityId s = 0;
  RelationId r = 0;
  friend auto operator<=>(const Query&, const Query&) = default;
};

/// Sorted, deduplicated true objects for every indexed (s, r).
class QueryIndex {
 public:
  QueryIndex() = default;
  QueryIndex(const TripleStore& store, SplitSelector splits) : splits_(splits) {
    if (splits.empty()) throw std::invalid_argument("build_query_index: empty split selector");
    std::map<Query, std::vector<EntityId>> grouped;
    for (Split s : kAllSplits) {
      if (!splits.contains(s)) continue;
      for (const Triple& t : store.split(s)) grouped[{t.s, t.r}].push_back(t.o);
    }
    queries_.reserve(grouped.size());
    for (auto& [q, objs] : grouped) {
      std::sort(objs.begin(), objs.end());
      objs.erase(std::unique(objs.begin(), objs.end()), objs.end());
      num_triples_ += objs.size();
      lookup_.emplace(key(q), queries_.size());
      queries_.push_back(q);
      objects_.push_back(std::move(objs));
    }
  }

  /// True objects of (s, r); empty when the pair is not indexed.
  std::span<const EntityId> objects(Query q) const {
    auto it = lookup_.find(key(q));
    if (it == lookup_.end()) return {};
    return objects_[it->second];
  }
  std::span<const EntityId> objects(EntityId s, RelationId r) const { return objects({s, r}); }

  bool contains(const Triple& t) const {
    auto objs = objects(t.s, t.r);
    return std::binary_search(objs.begin(), objs.end(), t.o);
  }

  /// Indexed pairs in ascending (s, r) order.
  const std::vector<Query>& queries() const noexcept { return queries_; }
  std::span<const EntityId> objects_at(std::size_t i) const { return objects_[i]; }
  std::size_t num_triples() const noexcept { return num_triples_; }
  SplitSelector splits() const noexcept { return splits_; }

  /// Every unique indexed triple in (s, r, o) order.
  std::vector<Triple> flatten() const {
    std::vector<Triple> out;
    out.reserve(num_triples_);
    for (std::size_t i = 0; i < queries_.size(); ++i)
      for (EntityId o : objects_[i]) out.push_back({queries_[i].s, queries_[i].r, o});
    return out;
  }

 private:
  static std::uint64_t key(Query q) { return (static_cast<std::uint64_t>(q.s) << 32) | q.r; }

  SplitSelector splits_;
  std::vector<Query> queries_;
  std::vector<std::vector<EntityId>> objects_;
  std::unordered_map<std::uint64_t, std::size_t> lookup_;
  std::size_t num_triples_ = 0;
};

inline QueryIndex build_query_index(const TripleStore& store, SplitSelector splits) {
  return QueryIndex(store, splits);
}

/// Out-degree statistics over (s, r) pairs with at least one object.
struct DegreeStats {
  std::vector<std::size_t> degrees;  // aligned with QueryIndex::queries()
  std::size_t num_pairs = 0;
  std::size_t num_triples = 0;
  double mean = 0.0;
  double median = 0.0;
  std::size_t max = 0;
};

inline DegreeStats degree_stats(const QueryIndex& index) {
  DegreeStats st;
  st.num_pairs = index.queries().size();
  st.num_triples = index.num_triples();
  st.degrees.reserve(st.num_pairs);
  for (std::size_t i = 0; i < st.num_pairs; ++i) st.degrees.push_back(index.objects_at(i).size());
  if (st.num_pairs == 0) return st;
  st.mean = static_cast<double>(st.num_triples) / static_cast<double>(st.num_pairs);
  std::vector<std::size_t> sorted = st.degrees;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  st.median = n % 2 == 1 ? static_cast<double>(sorted[n / 2])
                         : 0.5 * static_cast<double>(sorted[n / 2 - 1] + sorted[n / 2]);
  st.max = sorted.back();
  return st;
}

inline DegreeStats degree_stats(const TripleStore& store, SplitSelector splits) {
  return degree_stats(QueryIndex(store, splits));
}

/// Embedding dimension sufficient for exact sign reconstruction: 2c⁺ + 1.
constexpr std::size_t sufficient_dim(std::size_t max_out_degree) noexcept { return 2 * max_out_degree + 1; }
inline std::size_t sufficient_dim(const DegreeStats& stats) noexcept { return sufficient_dim(stats.max); }

namespace detail {

inline nlohmann::ordered_json degree_block(const TripleStore& store, SplitSelector splits) {
  const DegreeStats st = degree_stats(store, splits);
  std::size_t raw = st.num_triples;
  for (Split s : kAllSplits)
    if (splits.contains(s)) raw += store.duplicates(s);
  nlohmann::ordered_json j;
  j["relations"] = store.num_relations();
  j["pairs"] = st.num_pairs;
  j["triples_unique"] = st.num_triples;
  j["triples_raw"] = raw;
  j["mean_out_degree"] = st.mean;
  j["mean_out_degree_raw"] = st.num_pairs == 0 ? 0.0 : static_cast<double>(raw) / static_cast<double>(st.num_pairs);
  j["median_out_degree"] = st.median;
  j["max_out_degree"] = st.max;
  j["sufficient_dim"] = sufficient_dim(st);
  return j;
}

}  // namespace detail

/// Dataset summary with and without inverse relations. The store must not
/// already be inverse-augmented.
inline nlohmann::ordered_json dataset_stats_json(const TripleStore& store, SplitSelector splits = SplitSelector::all()) {
  if (store.inverse_augmented) throw std::invalid_argument("dataset_stats_json: pass the original store");
  nlohmann::ordered_json j;
  j["entities"] = store.num_entities();
  j["relations"] = store.num_relations();
  j["triples"] = store.total_triples();
  j["splits"] = {{"train", store.train.size()}, {"valid", store.valid.size()}, {"test", store.test.size()}};
  j["duplicates_dropped"] = store.duplicates_train + store.duplicates_valid + store.duplicates_test;
  j["without_inverse"] = detail::degree_block(store, splits);
  j["with_inverse"] = detail::degree_block(augment_inverse(store), splits);
  return j;
}

}  // namespace kgemos
