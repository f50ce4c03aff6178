#pragma once

// Top-k cosine similarity over sparse feature vectors, and the CSV cache format
// `kind,entity_a,entity_b,score`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "hyperfair/parallel.hpp"
#include "hyperfair/types.hpp"

namespace hyperfair {

/// Sorted by dimension, no duplicate dimensions.
using SparseVector = std::vector<std::pair<std::int64_t, double>>;
/// entity id -> feature vector
using FeatureMap = std::map<std::int64_t, SparseVector>;

enum class SimilarityKind { UserRating, ItemRating, UserDemographic, ItemContent };

inline std::string_view to_string(SimilarityKind k)
{
  switch (k) {
    case SimilarityKind::UserRating: return "user_rating";
    case SimilarityKind::ItemRating: return "item_rating";
    case SimilarityKind::UserDemographic: return "user_demographic";
    case SimilarityKind::ItemContent: return "item_content";
  }
  return "";
}

inline SimilarityKind similarity_kind_from_string(std::string_view s)
{
  for (auto k : {SimilarityKind::UserRating, SimilarityKind::ItemRating, SimilarityKind::UserDemographic,
                 SimilarityKind::ItemContent})
    if (to_string(k) == s) return k;
  throw DataError("unknown similarity kind '" + std::string(s) + "'");
}

inline bool is_user_similarity(SimilarityKind k)
{
  return k == SimilarityKind::UserRating || k == SimilarityKind::UserDemographic;
}

struct Neighbor {
  std::int64_t entity = 0;
  double score = 0.0;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct SimilarityGraph {
  SimilarityKind kind = SimilarityKind::UserRating;
  /// Only entities with at least one neighbor appear. Lists are sorted by
  /// descending score, ties by ascending entity id.
  std::map<std::int64_t, std::vector<Neighbor>> neighbors;

  friend bool operator==(const SimilarityGraph&, const SimilarityGraph&) = default;
};

/// Top-k neighbors of each entity by cosine similarity. Pairs sharing fewer
/// than min_overlap dimensions, and pairs with non-positive cosine, are left
/// out. Entities with an all-zero vector are omitted.
inline SimilarityGraph cosine_similarity(const FeatureMap& vectors, SimilarityKind kind, std::size_t k,
                                         std::size_t min_overlap, unsigned threads = 1)
{
  if (k < 1) throw ConfigError("similarity k must be >= 1");
  if (min_overlap < 1) throw ConfigError("similarity min_overlap must be >= 1");

  std::vector<std::int64_t> ids;
  std::vector<const SparseVector*> vecs;
  std::vector<double> norms;
  for (const auto& [id, v] : vectors) {
    double n2 = 0.0;
    for (const auto& [d, x] : v) n2 += x * x;
    if (n2 == 0.0) continue;
    ids.push_back(id);
    vecs.push_back(&v);
    norms.push_back(std::sqrt(n2));
  }
  const std::size_t n = ids.size();

  // Inverted index: dimension -> (entity slot, value).
  std::map<std::int64_t, std::vector<std::pair<std::size_t, double>>> index;
  for (std::size_t a = 0; a < n; ++a)
    for (const auto& [d, x] : *vecs[a])
      if (x != 0.0) index[d].emplace_back(a, x);

  std::vector<std::vector<Neighbor>> result(n);
  detail::parallel_for(n, threads, [&](std::size_t begin, std::size_t end) {
    std::vector<double> dot(n, 0.0);
    std::vector<std::uint32_t> overlap(n, 0);
    std::vector<std::size_t> touched;
    for (std::size_t a = begin; a < end; ++a) {
      touched.clear();
      for (const auto& [d, xa] : *vecs[a]) {
        if (xa == 0.0) continue;
        for (const auto& [b, xb] : index.at(d)) {
          if (overlap[b]++ == 0) touched.push_back(b);
          dot[b] += xa * xb;
        }
      }
      auto& out = result[a];
      for (auto b : touched) {
        if (b != a && overlap[b] >= min_overlap && dot[b] > 0.0)
          out.push_back({ids[b], std::min(1.0, dot[b] / (norms[a] * norms[b]))});
        dot[b] = 0.0;
        overlap[b] = 0;
      }
      auto better = [](const Neighbor& x, const Neighbor& y) {
        return x.score != y.score ? x.score > y.score : x.entity < y.entity;
      };
      if (out.size() > k) {
        std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(k), out.end(), better);
        out.resize(k);
      } else {
        std::sort(out.begin(), out.end(), better);
      }
    }
  }, 64);

  SimilarityGraph g;
  g.kind = kind;
  for (std::size_t a = 0; a < n; ++a)
    if (!result[a].empty()) g.neighbors.emplace(ids[a], std::move(result[a]));
  return g;
}

inline void write_similarity_csv(std::ostream& os, const std::vector<const SimilarityGraph*>& graphs)
{
  os << "kind,entity_a,entity_b,score\n";
  for (const auto* g : graphs)
    for (const auto& [a, list] : g->neighbors)
      for (const auto& nb : list) os << to_string(g->kind) << ',' << a << ',' << nb.entity << ',' << format_double(nb.score) << '\n';
}

/// Reads graphs back in file order; the result holds one graph per kind seen.
inline std::map<SimilarityKind, SimilarityGraph> read_similarity_csv(std::istream& is, const std::string& source = "similarity")
{
  std::map<SimilarityKind, SimilarityGraph> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("kind,", 0) == 0)) continue;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1))
      f.push_back(rest.substr(0, pos));
    f.push_back(rest);
    Neighbor nb;
    std::int64_t a = 0;
    if (f.size() != 4 || !parse_number(f[1], a) || !parse_number(f[2], nb.entity) || !parse_number(f[3], nb.score))
      throw ParseError(source, lineno, "expected kind,entity_a,entity_b,score");
    SimilarityKind kind;
    try {
      kind = similarity_kind_from_string(f[0]);
    } catch (const DataError& e) {
      throw ParseError(source, lineno, e.what());
    }
    auto& g = out[kind];
    g.kind = kind;
    g.neighbors[a].push_back(nb);
  }
  return out;
}

}  // namespace hyperfair
