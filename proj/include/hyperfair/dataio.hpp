#pragma once

// MovieLens-1M style data: `::`-delimited ratings/users/movies files, the
// genre and activity filter, rating normalization, k-fold splits by rating,
// gender groups, feature maps, and CSV caches of all of the above.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hyperfair/fairness.hpp"
#include "hyperfair/similarity.hpp"
#include "hyperfair/types.hpp"

namespace hyperfair {

struct Rating {
  UserId user{};
  ItemId item{};
  int value = 0;  // star level 1..5
  std::int64_t timestamp = 0;
  bool operator==(const Rating&) const = default;
};

struct UserRecord {
  std::string gender;
  int age = 0;
  int occupation = 0;
  std::string zip;
  bool operator==(const UserRecord&) const = default;
};

struct Movie {
  std::string title;
  std::vector<std::string> genres;
  bool operator==(const Movie&) const = default;
};

struct Dataset {
  std::vector<Rating> ratings;
  std::map<UserId, UserRecord> users;
  std::map<ItemId, Movie> movies;

  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Normalization

inline double normalize(int stars)
{
  if (stars < 1 || stars > 5) throw DataError("rating " + std::to_string(stars) + " outside 1..5");
  return (stars - 1) / 4.0;
}

inline int denormalize(double v)
{
  if (!(v >= 0.0 && v <= 1.0)) throw DataError("normalized rating " + format_double(v) + " outside [0,1]");
  return static_cast<int>(std::lround(4.0 * v)) + 1;
}

// ---------------------------------------------------------------------------
// MovieLens parsing

namespace detail {

template <typename F>
void for_each_line(std::istream& is, const std::string& source, F&& fn)
{
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fn(std::string_view(line), lineno);
  }
  if (is.bad()) throw DataError("read error in " + source);
}

}  // namespace detail

/// `UserID::MovieID::Rating::Timestamp`
inline std::vector<Rating> parse_ratings(std::istream& is, const std::string& source = "ratings.dat")
{
  std::vector<Rating> out;
  detail::for_each_line(is, source, [&](std::string_view line, std::size_t n) {
    auto f = split_fields(line, "::");
    Rating r;
    std::int64_t u = 0, i = 0;
    if (f.size() != 4 || !parse_number(f[0], u) || !parse_number(f[1], i) || !parse_number(f[2], r.value) ||
        !parse_number(f[3], r.timestamp))
      throw ParseError(source, n, "expected UserID::MovieID::Rating::Timestamp");
    if (r.value < 1 || r.value > 5) throw ParseError(source, n, "rating outside 1..5");
    r.user = UserId{u};
    r.item = ItemId{i};
    out.push_back(r);
  });
  return out;
}

/// `UserID::Gender::Age::Occupation::Zip-code`
inline std::map<UserId, UserRecord> parse_users(std::istream& is, const std::string& source = "users.dat")
{
  std::map<UserId, UserRecord> out;
  detail::for_each_line(is, source, [&](std::string_view line, std::size_t n) {
    auto f = split_fields(line, "::");
    UserRecord rec;
    std::int64_t u = 0;
    if (f.size() != 5 || !parse_number(f[0], u) || f[1].empty() || !parse_number(f[2], rec.age) ||
        !parse_number(f[3], rec.occupation))
      throw ParseError(source, n, "expected UserID::Gender::Age::Occupation::Zip-code");
    rec.gender = std::string(f[1]);
    rec.zip = std::string(f[4]);
    if (!out.emplace(UserId{u}, std::move(rec)).second) throw ParseError(source, n, "duplicate user");
  });
  return out;
}

/// `MovieID::Title::Genre1|Genre2|...`. Title bytes are kept verbatim.
inline std::map<ItemId, Movie> parse_movies(std::istream& is, const std::string& source = "movies.dat")
{
  std::map<ItemId, Movie> out;
  detail::for_each_line(is, source, [&](std::string_view line, std::size_t n) {
    auto f = split_fields(line, "::");
    std::int64_t id = 0;
    if (f.size() < 3 || !parse_number(f[0], id)) throw ParseError(source, n, "expected MovieID::Title::Genres");
    Movie m;
    // A title containing "::" would split; rejoin everything between id and genres.
    for (std::size_t k = 1; k + 1 < f.size(); ++k) m.title += (k > 1 ? "::" : "") + std::string(f[k]);
    if (!f.back().empty())
      for (auto g : split_fields(f.back(), "|")) m.genres.emplace_back(g);
    if (!out.emplace(ItemId{id}, std::move(m)).second) throw ParseError(source, n, "duplicate movie");
  });
  return out;
}

struct ParseReport {
  std::size_t orphan_ratings = 0;  // dropped: user or movie missing
};

/// Drops ratings whose user or movie is unknown; the count goes to `report`.
inline Dataset assemble(std::vector<Rating> ratings, std::map<UserId, UserRecord> users, std::map<ItemId, Movie> movies,
                        ParseReport* report = nullptr)
{
  Dataset ds;
  ds.users = std::move(users);
  ds.movies = std::move(movies);
  std::size_t orphans = 0;
  for (const auto& r : ratings) {
    if (ds.users.contains(r.user) && ds.movies.contains(r.item)) ds.ratings.push_back(r);
    else ++orphans;
  }
  if (report) report->orphan_ratings = orphans;
  return ds;
}

inline Dataset parse_movielens(const std::filesystem::path& dir, ParseReport* report = nullptr)
{
  auto open = [&](const char* name) {
    std::ifstream in(dir / name, std::ios::binary);
    if (!in) throw DataError("missing file " + (dir / name).string());
    return in;
  };
  auto rin = open("ratings.dat");
  auto uin = open("users.dat");
  auto min = open("movies.dat");
  return assemble(parse_ratings(rin, (dir / "ratings.dat").string()), parse_users(uin, (dir / "users.dat").string()),
                  parse_movies(min, (dir / "movies.dat").string()), report);
}

/// Writes the three `::`-delimited files parse_movielens reads.
inline void write_movielens(const Dataset& ds, const std::filesystem::path& dir)
{
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    return out;
  };
  auto r = open("ratings.dat");
  for (const auto& x : ds.ratings) r << raw(x.user) << "::" << raw(x.item) << "::" << x.value << "::" << x.timestamp << '\n';
  auto u = open("users.dat");
  for (const auto& [id, x] : ds.users)
    u << raw(id) << "::" << x.gender << "::" << x.age << "::" << x.occupation << "::" << x.zip << '\n';
  auto m = open("movies.dat");
  for (const auto& [id, x] : ds.movies) {
    m << raw(id) << "::" << x.title << "::";
    for (std::size_t k = 0; k < x.genres.size(); ++k) m << (k ? "|" : "") << x.genres[k];
    m << '\n';
  }
}

// ---------------------------------------------------------------------------
// Preprocessing

struct PreprocessOptions {
  std::vector<std::string> genres{"Action", "Romance", "Crime", "Musical", "Sci-Fi"};
  std::size_t min_user_ratings = 50;
};

struct DatasetCounts {
  std::size_t ratings = 0;
  std::size_t users = 0;
  std::size_t movies = 0;
};

inline DatasetCounts counts(const Dataset& ds) { return {ds.ratings.size(), ds.users.size(), ds.movies.size()}; }

/// Keeps movies tagged with any of the genres, then removes users with fewer
/// than min_user_ratings remaining ratings. Users and movies left without
/// ratings are dropped so the result is closed under a second application.
inline Dataset preprocess(const Dataset& ds, const PreprocessOptions& opt = {})
{
  const std::set<std::string> wanted(opt.genres.begin(), opt.genres.end());
  std::set<ItemId> kept_movies;
  for (const auto& [id, m] : ds.movies)
    if (std::any_of(m.genres.begin(), m.genres.end(), [&](const auto& g) { return wanted.contains(g); }))
      kept_movies.insert(id);

  std::map<UserId, std::size_t> per_user;
  for (const auto& r : ds.ratings)
    if (kept_movies.contains(r.item)) ++per_user[r.user];

  Dataset out;
  for (const auto& r : ds.ratings) {
    if (!kept_movies.contains(r.item)) continue;
    if (per_user[r.user] < opt.min_user_ratings) continue;
    out.ratings.push_back(r);
    out.users.try_emplace(r.user, ds.users.at(r.user));
    out.movies.try_emplace(r.item, ds.movies.at(r.item));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Folds

struct FoldSplit {
  int fold_id = 0;  // 1-based
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  bool operator==(const FoldSplit&) const = default;
};

/// Shuffles rating indices with the seed and cuts them into k test sets whose
/// sizes differ by at most one. Index lists are sorted.
inline std::vector<FoldSplit> make_folds(std::size_t n_ratings, int k, std::uint64_t seed)
{
  if (k < 2) throw ConfigError("fold count must be >= 2");
  if (n_ratings < static_cast<std::size_t>(k))
    throw DataError("cannot split " + std::to_string(n_ratings) + " ratings into " + std::to_string(k) + " folds");
  std::vector<std::size_t> perm(n_ratings);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = n_ratings; i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);

  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  const std::size_t base = n_ratings / k, extra = n_ratings % k;
  std::size_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const std::size_t len = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    folds[f].fold_id = f + 1;
    folds[f].test.assign(perm.begin() + pos, perm.begin() + pos + len);
    std::sort(folds[f].test.begin(), folds[f].test.end());
    pos += len;
  }
  for (auto& fold : folds) {
    fold.train.reserve(n_ratings - fold.test.size());
    std::size_t t = 0;
    for (std::size_t i = 0; i < n_ratings; ++i) {
      if (t < fold.test.size() && fold.test[t] == i) ++t;
      else fold.train.push_back(i);
    }
  }
  return folds;
}

inline std::vector<FoldSplit> make_folds(const Dataset& ds, int k, std::uint64_t seed)
{
  return make_folds(ds.ratings.size(), k, seed);
}

/// Normalized observations for the given rating indices.
inline std::vector<Observation> observations(const Dataset& ds, std::span<const std::size_t> indices)
{
  std::vector<Observation> out;
  out.reserve(indices.size());
  for (auto idx : indices) {
    const auto& r = ds.ratings.at(idx);
    out.push_back({r.user, r.item, normalize(r.value)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Groups and features

inline GroupAssignment derive_groups(const Dataset& ds)
{
  GroupAssignment g;
  for (const auto& [id, u] : ds.users) {
    if (u.gender == "F") g.set(id, Group::Protected);
    else if (u.gender == "M") g.set(id, Group::Unprotected);
    else throw DataError("user " + std::to_string(raw(id)) + " has unknown gender code '" + u.gender + "'");
  }
  return g;
}

/// One-hot gender, age bucket and occupation. Feature ids: 0/1 for F/M,
/// 1000 + age code, 2000 + occupation code.
inline FeatureMap demographic_features(const Dataset& ds)
{
  FeatureMap out;
  for (const auto& [id, u] : ds.users) {
    SparseVector v;
    if (u.gender == "F") v.push_back({0, 1.0});
    else if (u.gender == "M") v.push_back({1, 1.0});
    v.push_back({1000 + u.age, 1.0});
    v.push_back({2000 + u.occupation, 1.0});
    out[raw(id)] = std::move(v);
  }
  return out;
}

/// One-hot genres; feature id is the genre's rank among all genre names in the dataset.
inline FeatureMap genre_features(const Dataset& ds)
{
  std::set<std::string> names;
  for (const auto& [id, m] : ds.movies) names.insert(m.genres.begin(), m.genres.end());
  std::map<std::string, std::int64_t> code;
  for (const auto& n : names) code.emplace(n, static_cast<std::int64_t>(code.size()));
  FeatureMap out;
  for (const auto& [id, m] : ds.movies) {
    SparseVector v;
    for (const auto& g : m.genres) v.push_back({code.at(g), 1.0});
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    if (!v.empty()) out[raw(id)] = std::move(v);
  }
  return out;
}

/// Star-scale rating vectors: per user over items, or per item over users.
inline FeatureMap rating_vectors(std::span<const Observation> ratings, bool by_user)
{
  FeatureMap out;
  for (const auto& o : ratings) {
    const auto row = by_user ? raw(o.user) : raw(o.item);
    const auto col = by_user ? raw(o.item) : raw(o.user);
    out[row].push_back({col, 1.0 + 4.0 * o.value});
  }
  for (auto& [id, v] : out) std::sort(v.begin(), v.end());
  return out;
}

// ---------------------------------------------------------------------------
// CSV caches

namespace detail {

inline std::string csv_quote(const std::string& s)
{
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

/// RFC 4180 fields of one line (no embedded newlines).
inline std::vector<std::string> csv_fields(std::string_view line, const std::string& source, std::size_t lineno)
{
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        out.back() += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"' && out.back().empty()) {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  if (quoted) throw ParseError(source, lineno, "unterminated quoted field");
  return out;
}

inline std::ofstream open_out(const std::filesystem::path& p)
{
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& p)
{
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("missing file " + p.string());
  return in;
}

template <typename F>
void read_csv(const std::filesystem::path& p, std::string_view header, F&& row)
{
  auto in = open_in(p);
  const std::string source = p.string();
  bool first = true;
  for_each_line(in, source, [&](std::string_view line, std::size_t n) {
    if (first) {
      first = false;
      if (line != header) throw ParseError(source, n, "expected header " + std::string(header));
      return;
    }
    row(csv_fields(line, source, n), n, source);
  });
}

}  // namespace detail

/// Writes ratings.csv, users.csv and movies.csv under dir.
inline void write_dataset_csv(const Dataset& ds, const std::filesystem::path& dir)
{
  std::filesystem::create_directories(dir);
  auto r = detail::open_out(dir / "ratings.csv");
  r << "user_id,item_id,rating,timestamp\n";
  for (const auto& x : ds.ratings) r << raw(x.user) << ',' << raw(x.item) << ',' << x.value << ',' << x.timestamp << '\n';
  auto u = detail::open_out(dir / "users.csv");
  u << "user_id,gender,age,occupation,zip\n";
  for (const auto& [id, x] : ds.users)
    u << raw(id) << ',' << detail::csv_quote(x.gender) << ',' << x.age << ',' << x.occupation << ','
      << detail::csv_quote(x.zip) << '\n';
  auto m = detail::open_out(dir / "movies.csv");
  m << "item_id,title,genres\n";
  for (const auto& [id, x] : ds.movies) {
    std::string genres;
    for (const auto& g : x.genres) genres += (genres.empty() ? "" : "|") + g;
    m << raw(id) << ',' << detail::csv_quote(x.title) << ',' << detail::csv_quote(genres) << '\n';
  }
}

inline Dataset read_dataset_csv(const std::filesystem::path& dir)
{
  std::vector<Rating> ratings;
  std::map<UserId, UserRecord> users;
  std::map<ItemId, Movie> movies;
  detail::read_csv(dir / "ratings.csv", "user_id,item_id,rating,timestamp", [&](const auto& f, auto n, const auto& src) {
    Rating r;
    std::int64_t u = 0, i = 0;
    if (f.size() != 4 || !parse_number(f[0], u) || !parse_number(f[1], i) || !parse_number(f[2], r.value) ||
        !parse_number(f[3], r.timestamp) || r.value < 1 || r.value > 5)
      throw ParseError(src, n, "bad rating row");
    r.user = UserId{u};
    r.item = ItemId{i};
    ratings.push_back(r);
  });
  detail::read_csv(dir / "users.csv", "user_id,gender,age,occupation,zip", [&](const auto& f, auto n, const auto& src) {
    UserRecord rec;
    std::int64_t u = 0;
    if (f.size() != 5 || !parse_number(f[0], u) || !parse_number(f[2], rec.age) || !parse_number(f[3], rec.occupation))
      throw ParseError(src, n, "bad user row");
    rec.gender = f[1];
    rec.zip = f[4];
    if (!users.emplace(UserId{u}, rec).second) throw ParseError(src, n, "duplicate user");
  });
  detail::read_csv(dir / "movies.csv", "item_id,title,genres", [&](const auto& f, auto n, const auto& src) {
    Movie m;
    std::int64_t id = 0;
    if (f.size() != 3 || !parse_number(f[0], id)) throw ParseError(src, n, "bad movie row");
    m.title = f[1];
    if (!f[2].empty())
      for (auto g : split_fields(f[2], "|")) m.genres.emplace_back(g);
    if (!movies.emplace(ItemId{id}, std::move(m)).second) throw ParseError(src, n, "duplicate movie");
  });
  ParseReport rep;
  auto ds = assemble(std::move(ratings), std::move(users), std::move(movies), &rep);
  if (rep.orphan_ratings > 0)
    throw DataError(dir.string() + ": cached ratings reference " + std::to_string(rep.orphan_ratings) +
                    " unknown users or movies");
  return ds;
}

/// Manifest rows `fold,rating_index,split` with split in {train,test}.
inline void write_fold_manifest(std::ostream& os, const std::vector<FoldSplit>& folds)
{
  os << "fold,rating_index,split\n";
  for (const auto& f : folds) {
    for (auto i : f.train) os << f.fold_id << ',' << i << ",train\n";
    for (auto i : f.test) os << f.fold_id << ',' << i << ",test\n";
  }
}

inline std::vector<FoldSplit> read_fold_manifest(std::istream& is, const std::string& source = "folds.csv")
{
  std::map<int, FoldSplit> by_id;
  bool first = true;
  detail::for_each_line(is, source, [&](std::string_view line, std::size_t n) {
    if (first) {
      first = false;
      if (line != "fold,rating_index,split") throw ParseError(source, n, "expected header fold,rating_index,split");
      return;
    }
    auto f = split_fields(line);
    int fold = 0;
    std::size_t idx = 0;
    if (f.size() != 3 || !parse_number(f[0], fold) || fold < 1 || !parse_number(f[1], idx) ||
        (f[2] != "train" && f[2] != "test"))
      throw ParseError(source, n, "expected fold,rating_index,train|test");
    auto& split = by_id[fold];
    split.fold_id = fold;
    (f[2] == "train" ? split.train : split.test).push_back(idx);
  });
  std::vector<FoldSplit> out;
  for (auto& [id, s] : by_id) {
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    out.push_back(std::move(s));
  }
  return out;
}

/// Partition check: within each fold train and test are disjoint, test sets are
/// pairwise disjoint, and together cover every index below n. Returns an empty
/// string when all hold, otherwise the first violation.
inline std::string check_fold_partition(const std::vector<FoldSplit>& folds, std::size_t n)
{
  std::vector<int> owner(n, 0);
  for (const auto& f : folds) {
    std::vector<std::size_t> both;
    std::set_intersection(f.train.begin(), f.train.end(), f.test.begin(), f.test.end(), std::back_inserter(both));
    if (!both.empty()) return "fold " + std::to_string(f.fold_id) + " has index " + std::to_string(both[0]) + " in train and test";
    if (f.train.size() + f.test.size() != n) return "fold " + std::to_string(f.fold_id) + " does not cover all ratings";
    for (auto i : f.test) {
      if (i >= n) return "index " + std::to_string(i) + " out of range";
      if (owner[i] != 0) return "index " + std::to_string(i) + " in two test sets";
      owner[i] = f.fold_id;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (owner[i] == 0) return "index " + std::to_string(i) + " in no test set";
  return {};
}

}  // namespace hyperfair
