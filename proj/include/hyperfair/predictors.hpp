#pragma once

// Local predictors feeding the prior rules: masked NMF, biased SVD trained by
// full-gradient Adam, and a multinomial Naive Bayes over user and item
// one-hot features. Ratings enter and leave on the [0,1] scale.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hyperfair/similarity.hpp"
#include "hyperfair/types.hpp"

namespace hyperfair {

/// Raw star level in [1,5] from a normalized rating.
inline double to_stars(double v) { return 1.0 + 4.0 * v; }
/// Normalized rating in [0,1] from a star level.
inline double from_stars(double r) { return (r - 1.0) / 4.0; }

struct FactorModel {
  enum class Kind { NMF, BiasedSVD };

  Kind kind = Kind::BiasedSVD;
  std::size_t rank = 0;
  std::map<UserId, std::size_t> user_index;
  std::map<ItemId, std::size_t> item_index;
  std::vector<double> user_factors;  // users x rank, row-major
  std::vector<double> item_factors;  // items x rank, row-major
  std::vector<double> user_bias;     // zero for NMF
  std::vector<double> item_bias;
  double global_mean = 0.0;  // SVD: learned offset; NMF: train mean, used for cold pairs

  std::span<const double> user_row(std::size_t u) const { return {user_factors.data() + u * rank, rank}; }
  std::span<const double> item_row(std::size_t i) const { return {item_factors.data() + i * rank, rank}; }

  bool operator==(const FactorModel&) const = default;
};

inline std::string_view to_string(FactorModel::Kind k) { return k == FactorModel::Kind::NMF ? "nmf" : "biased_svd"; }

namespace detail {

/// Dense re-indexing of the users and items of a rating set.
struct IndexedRatings {
  std::map<UserId, std::size_t> users;
  std::map<ItemId, std::size_t> items;
  std::vector<std::size_t> u, i;
  std::vector<double> r;

  explicit IndexedRatings(std::span<const Observation> train, double (*transform)(double) = nullptr)
  {
    if (train.empty()) throw DataError("cannot train on an empty rating set");
    for (const auto& o : train) {
      users.try_emplace(o.user, users.size());
      items.try_emplace(o.item, items.size());
    }
    // Dense order follows id order, independent of input order.
    std::size_t k = 0;
    for (auto& [id, idx] : users) idx = k++;
    k = 0;
    for (auto& [id, idx] : items) idx = k++;
    std::set<PairKey> seen;
    for (const auto& o : train) {
      if (!seen.insert({o.user, o.item}).second)
        throw DataError("duplicate rating for (" + std::to_string(raw(o.user)) + "," + std::to_string(raw(o.item)) + ")");
      u.push_back(users.at(o.user));
      i.push_back(items.at(o.item));
      r.push_back(transform ? transform(o.value) : o.value);
    }
  }

  std::size_t num_users() const { return users.size(); }
  std::size_t num_items() const { return items.size(); }
  std::size_t size() const { return r.size(); }

  void check_rank(std::size_t rank) const
  {
    if (rank < 1) throw ConfigError("rank must be >= 1");
    if (rank > std::min(num_users(), num_items()))
      throw ConfigError("rank " + std::to_string(rank) + " exceeds min(users, items) = " +
                        std::to_string(std::min(num_users(), num_items())));
  }
};

inline double dot(std::span<const double> a, std::span<const double> b)
{
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NMF

struct NmfOptions {
  std::size_t rank = 8;
  std::size_t iters = 500;
  std::uint64_t seed = 0;
  std::vector<double>* loss_trace = nullptr;  // squared error on observed cells, one entry per iteration plus the start
};

/// Masked Lee-Seung multiplicative updates on the star-scale matrix.
inline FactorModel train_nmf(std::span<const Observation> train, const NmfOptions& opt = {})
{
  detail::IndexedRatings data(train, &to_stars);
  data.check_rank(opt.rank);
  const std::size_t K = opt.rank, nu = data.num_users(), ni = data.num_items(), n = data.size();

  double mean = 0.0;
  for (double r : data.r) mean += r;
  mean /= static_cast<double>(n);

  std::mt19937_64 rng(opt.seed);
  const double scale = std::sqrt(4.0 * mean / static_cast<double>(K));
  std::uniform_real_distribution<double> init(0.1 * scale, scale);
  std::vector<double> W(nu * K), H(ni * K);
  for (auto& w : W) w = init(rng);
  for (auto& h : H) h = init(rng);

  std::vector<double> wh(n);
  auto reconstruct = [&] {
    double loss = 0.0;
    for (std::size_t e = 0; e < n; ++e) {
      wh[e] = detail::dot({&W[data.u[e] * K], K}, {&H[data.i[e] * K], K});
      loss += (data.r[e] - wh[e]) * (data.r[e] - wh[e]);
    }
    return loss;
  };

  std::vector<double> num, den;
  // One half-step: rows of A (indexed by a) rescaled against the fixed B (indexed by b).
  auto update = [&](std::vector<double>& A, const std::vector<double>& B, const std::vector<std::size_t>& a,
                    const std::vector<std::size_t>& b, std::size_t rows) {
    num.assign(rows * K, 0.0);
    den.assign(rows * K, 0.0);
    for (std::size_t e = 0; e < n; ++e) {
      const double* brow = &B[b[e] * K];
      double* nrow = &num[a[e] * K];
      double* drow = &den[a[e] * K];
      for (std::size_t k = 0; k < K; ++k) {
        nrow[k] += data.r[e] * brow[k];
        drow[k] += wh[e] * brow[k];
      }
    }
    for (std::size_t x = 0; x < rows * K; ++x)
      if (den[x] > 0.0) A[x] *= num[x] / den[x];
  };

  double loss = reconstruct();
  if (opt.loss_trace) opt.loss_trace->assign(1, loss);
  for (std::size_t it = 0; it < opt.iters; ++it) {
    update(W, H, data.u, data.i, nu);
    reconstruct();
    update(H, W, data.i, data.u, ni);
    loss = reconstruct();
    if (opt.loss_trace) opt.loss_trace->push_back(loss);
  }

  FactorModel m;
  m.kind = FactorModel::Kind::NMF;
  m.rank = K;
  m.user_index = std::move(data.users);
  m.item_index = std::move(data.items);
  m.user_factors = std::move(W);
  m.item_factors = std::move(H);
  m.user_bias.assign(nu, 0.0);
  m.item_bias.assign(ni, 0.0);
  m.global_mean = from_stars(mean);
  return m;
}

/// Dense-matrix entry point: only cells with mask set are seen by training.
inline FactorModel train_nmf(const std::vector<std::vector<double>>& ratings, const std::vector<std::vector<bool>>& mask,
                             const NmfOptions& opt = {})
{
  if (ratings.size() != mask.size()) throw DimensionError("ratings and mask differ in row count");
  std::vector<Observation> obs;
  for (std::size_t u = 0; u < ratings.size(); ++u) {
    if (ratings[u].size() != mask[u].size()) throw DimensionError("ratings and mask differ in column count");
    for (std::size_t i = 0; i < ratings[u].size(); ++i)
      if (mask[u][i])
        obs.push_back({UserId{static_cast<std::int64_t>(u)}, ItemId{static_cast<std::int64_t>(i)}, ratings[u][i]});
  }
  return train_nmf(obs, opt);
}

// ---------------------------------------------------------------------------
// Biased SVD

struct SvdOptions {
  std::size_t rank = 8;
  std::size_t iters = 500;
  double learning_rate = 0.1;
  double lambda = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double init_sd = 0.1;
  std::uint64_t seed = 0;
  std::vector<double>* loss_trace = nullptr;  // objective before each step, then the final value
};

namespace detail {

/// Flat parameter vector [mu, b_u..., b_i..., P (users x rank)..., Q (items x rank)...].
class SvdProblem {
 public:
  SvdProblem(const IndexedRatings& data, std::size_t rank, double lambda)
      : data_(data), rank_(rank), lambda_(lambda) {}

  std::size_t size() const { return 1 + nu() + ni() + (nu() + ni()) * rank_; }
  std::size_t nu() const { return data_.num_users(); }
  std::size_t ni() const { return data_.num_items(); }
  std::size_t bu(std::size_t u) const { return 1 + u; }
  std::size_t bi(std::size_t i) const { return 1 + nu() + i; }
  std::size_t p(std::size_t u) const { return 1 + nu() + ni() + u * rank_; }
  std::size_t q(std::size_t i) const { return 1 + nu() + ni() + (nu() + i) * rank_; }

  double predict(std::span<const double> th, std::size_t u, std::size_t i) const
  {
    return th[0] + th[bu(u)] + th[bi(i)] + dot(th.subspan(p(u), rank_), th.subspan(q(i), rank_));
  }

  /// Sum of squared errors plus lambda times the squared norm of everything but mu.
  double objective(std::span<const double> th) const
  {
    double loss = 0.0;
    for (std::size_t e = 0; e < data_.size(); ++e) {
      const double err = data_.r[e] - predict(th, data_.u[e], data_.i[e]);
      loss += err * err;
    }
    double reg = 0.0;
    for (std::size_t x = 1; x < th.size(); ++x) reg += th[x] * th[x];
    return loss + lambda_ * reg;
  }

  void gradient(std::span<const double> th, std::span<double> g) const
  {
    g[0] = 0.0;
    for (std::size_t x = 1; x < th.size(); ++x) g[x] = 2.0 * lambda_ * th[x];
    for (std::size_t e = 0; e < data_.size(); ++e) {
      const std::size_t u = data_.u[e], i = data_.i[e];
      const double c = -2.0 * (data_.r[e] - predict(th, u, i));
      g[0] += c;
      g[bu(u)] += c;
      g[bi(i)] += c;
      for (std::size_t k = 0; k < rank_; ++k) {
        g[p(u) + k] += c * th[q(i) + k];
        g[q(i) + k] += c * th[p(u) + k];
      }
    }
  }

 private:
  const IndexedRatings& data_;
  std::size_t rank_;
  double lambda_;
};

}  // namespace detail

/// Full-gradient Adam on the regularized squared error. mu starts at the
/// training mean; biases start at zero and factors at N(0, init_sd).
inline FactorModel train_biased_svd(std::span<const Observation> train, const SvdOptions& opt = {})
{
  if (!(opt.learning_rate > 0.0) || !(opt.lambda >= 0.0)) throw ConfigError("learning_rate must be > 0 and lambda >= 0");
  detail::IndexedRatings data(train);
  data.check_rank(opt.rank);
  detail::SvdProblem prob(data, opt.rank, opt.lambda);

  std::vector<double> th(prob.size(), 0.0), g(prob.size()), m(prob.size(), 0.0), v(prob.size(), 0.0);
  for (double r : data.r) th[0] += r;
  th[0] /= static_cast<double>(data.size());
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> init(0.0, opt.init_sd);
  for (std::size_t x = prob.p(0); x < th.size(); ++x) th[x] = init(rng);

  if (opt.loss_trace) opt.loss_trace->clear();
  double b1t = 1.0, b2t = 1.0;
  for (std::size_t it = 0; it < opt.iters; ++it) {
    if (opt.loss_trace) opt.loss_trace->push_back(prob.objective(th));
    prob.gradient(th, g);
    b1t *= opt.beta1;
    b2t *= opt.beta2;
    for (std::size_t x = 0; x < th.size(); ++x) {
      m[x] = opt.beta1 * m[x] + (1.0 - opt.beta1) * g[x];
      v[x] = opt.beta2 * v[x] + (1.0 - opt.beta2) * g[x] * g[x];
      th[x] -= opt.learning_rate * (m[x] / (1.0 - b1t)) / (std::sqrt(v[x] / (1.0 - b2t)) + opt.epsilon);
    }
  }
  if (opt.loss_trace) opt.loss_trace->push_back(prob.objective(th));

  FactorModel fm;
  fm.kind = FactorModel::Kind::BiasedSVD;
  fm.rank = opt.rank;
  fm.global_mean = th[0];
  fm.user_bias.assign(th.begin() + 1, th.begin() + 1 + prob.nu());
  fm.item_bias.assign(th.begin() + prob.bi(0), th.begin() + prob.bi(0) + prob.ni());
  fm.user_factors.assign(th.begin() + prob.p(0), th.begin() + prob.q(0));
  fm.item_factors.assign(th.begin() + prob.q(0), th.end());
  fm.user_index = std::move(data.users);
  fm.item_index = std::move(data.items);
  return fm;
}

/// Scores for the given pairs, clamped to [0,1]. Cold pairs fall back to the
/// global mean plus whichever biases are known (SVD) or the train mean (NMF).
inline PredictorOutput predict(const FactorModel& m, std::span<const PairKey> pairs, std::string name)
{
  PredictorOutput out{std::move(name), {}};
  for (const auto& key : pairs) {
    auto u = m.user_index.find(key.user);
    auto i = m.item_index.find(key.item);
    const bool warm = u != m.user_index.end() && i != m.item_index.end();
    double score;
    if (m.kind == FactorModel::Kind::NMF) {
      score = warm ? from_stars(detail::dot(m.user_row(u->second), m.item_row(i->second))) : m.global_mean;
    } else {
      score = m.global_mean;
      if (u != m.user_index.end()) score += m.user_bias[u->second];
      if (i != m.item_index.end()) score += m.item_bias[i->second];
      if (warm) score += detail::dot(m.user_row(u->second), m.item_row(i->second));
    }
    out.values[key] = std::clamp(score, 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multinomial Naive Bayes

struct NaiveBayesModel {
  static constexpr int kLevels = 5;

  double alpha = 1.0;
  std::array<double, kLevels> log_prior{};  // -inf for levels never seen
  // Feature key: (0, user feature) or (1, item feature).
  std::map<std::pair<int, std::int64_t>, std::array<double, kLevels>> log_likelihood;
  FeatureMap user_features;
  FeatureMap item_features;
};

/// Classes are the five star levels; features are the concatenated user and
/// item one-hots of each training rating. Class prior is the empirical
/// frequency; feature likelihoods use additive smoothing alpha.
inline NaiveBayesModel train_naive_bayes(std::span<const Observation> train, const FeatureMap& user_features,
                                         const FeatureMap& item_features, double alpha = 1.0)
{
  if (train.empty()) throw DataError("cannot train on an empty rating set");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  constexpr int L = NaiveBayesModel::kLevels;
  std::array<double, L> class_count{};
  std::array<double, L> class_total{};
  std::map<std::pair<int, std::int64_t>, std::array<double, L>> counts;

  auto add = [&](int side, const FeatureMap& fm, std::int64_t id, int c) {
    auto it = fm.find(id);
    if (it == fm.end()) return;
    for (const auto& [f, x] : it->second) {
      counts[{side, f}][c] += x;
      class_total[c] += x;
    }
  };
  for (const auto& o : train) {
    const int c = static_cast<int>(std::lround(to_stars(o.value))) - 1;
    if (c < 0 || c >= L) throw DataError("rating outside the five star levels");
    class_count[c] += 1.0;
    add(0, user_features, raw(o.user), c);
    add(1, item_features, raw(o.item), c);
  }

  NaiveBayesModel m;
  m.alpha = alpha;
  m.user_features = user_features;
  m.item_features = item_features;
  const double vocab = static_cast<double>(counts.size());
  for (int c = 0; c < L; ++c)
    m.log_prior[c] = class_count[c] > 0.0 ? std::log(class_count[c] / static_cast<double>(train.size()))
                                          : -std::numeric_limits<double>::infinity();
  for (const auto& [key, n] : counts)
    for (int c = 0; c < L; ++c) m.log_likelihood[key][c] = std::log((n[c] + alpha) / (class_total[c] + alpha * vocab));
  return m;
}

/// Posterior-expected star level per pair, normalized to [0,1]. Features never
/// seen in training are ignored.
inline PredictorOutput predict(const NaiveBayesModel& m, std::span<const PairKey> pairs, std::string name)
{
  constexpr int L = NaiveBayesModel::kLevels;
  PredictorOutput out{std::move(name), {}};
  for (const auto& key : pairs) {
    std::array<double, L> lp = m.log_prior;
    auto accumulate = [&](int side, const FeatureMap& fm, std::int64_t id) {
      auto it = fm.find(id);
      if (it == fm.end()) return;
      for (const auto& [f, x] : it->second) {
        auto ll = m.log_likelihood.find({side, f});
        if (ll == m.log_likelihood.end()) continue;
        for (int c = 0; c < L; ++c) lp[c] += x * ll->second[c];
      }
    };
    accumulate(0, m.user_features, raw(key.user));
    accumulate(1, m.item_features, raw(key.item));
    const double top = *std::max_element(lp.begin(), lp.end());
    double z = 0.0, ev = 0.0;
    for (int c = 0; c < L; ++c) {
      const double w = std::exp(lp[c] - top);
      z += w;
      ev += w * (c + 1);
    }
    out.values[key] = std::clamp(from_stars(ev / z), 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prediction files: user_id,item_id,prediction

enum class PredictionScale { Unit, Stars };

inline PredictorOutput read_predictions(std::istream& is, std::string name, const std::string& source = "predictions",
                                        PredictionScale* detected = nullptr)
{
  PredictorOutput out{std::move(name), {}};
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::pair<PairKey, std::size_t>> order;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("user_id", 0) == 0)) continue;
    auto f = split_fields(line);
    std::int64_t u = 0, i = 0;
    double v = 0.0;
    if (f.size() != 3 || !parse_number(f[0], u) || !parse_number(f[1], i) || !parse_number(f[2], v) || !std::isfinite(v))
      throw ParseError(source, lineno, "expected user_id,item_id,prediction");
    PairKey key{UserId{u}, ItemId{i}};
    if (!out.values.emplace(key, v).second)
      throw ParseError(source, lineno, "duplicate prediction for (" + std::to_string(u) + "," + std::to_string(i) + ")");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  PredictionScale scale = PredictionScale::Unit;
  if (!out.values.empty() && !(lo >= 0.0 && hi <= 1.0)) {
    if (lo >= 1.0 && hi <= 5.0) scale = PredictionScale::Stars;
    else throw DataError(source + ": predictions span [" + format_double(lo) + ", " + format_double(hi) +
                         "], neither [0,1] nor [1,5]");
  }
  if (scale == PredictionScale::Stars)
    for (auto& [k, v] : out.values) v = from_stars(v);
  if (detected) *detected = scale;
  return out;
}

inline PredictorOutput load_predictions(const std::string& path, std::string name,
                                        PredictionScale* detected = nullptr)
{
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_predictions(in, std::move(name), path, detected);
}

inline void write_predictions(std::ostream& os, const PredictorOutput& p)
{
  os << "user_id,item_id,prediction\n";
  for (const auto& [k, v] : p.values) os << raw(k.user) << ',' << raw(k.item) << ',' << format_double(v) << '\n';
}

// ---------------------------------------------------------------------------
// Factor model dump
//
//   kind,<nmf|biased_svd>
//   rank,<k>
//   global_mean,<mu>
//   user,<id>,<bias>,<f_1>,...,<f_k>
//   item,<id>,<bias>,<f_1>,...,<f_k>

inline void write_factor_model(std::ostream& os, const FactorModel& m)
{
  os << "kind," << to_string(m.kind) << "\nrank," << m.rank << "\nglobal_mean," << format_double(m.global_mean) << '\n';
  auto rows = [&](const char* tag, const auto& index, const std::vector<double>& bias, auto row) {
    for (const auto& [id, idx] : index) {
      os << tag << ',' << raw(id) << ',' << format_double(bias[idx]);
      for (double x : row(idx)) os << ',' << format_double(x);
      os << '\n';
    }
  };
  rows("user", m.user_index, m.user_bias, [&](std::size_t u) { return m.user_row(u); });
  rows("item", m.item_index, m.item_bias, [&](std::size_t i) { return m.item_row(i); });
}

inline FactorModel read_factor_model(std::istream& is, const std::string& source = "factors")
{
  FactorModel m;
  std::string line;
  std::size_t lineno = 0;
  bool have_kind = false, have_rank = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_fields(line);
    if (f[0] == "kind" && f.size() == 2) {
      if (f[1] == "nmf") m.kind = FactorModel::Kind::NMF;
      else if (f[1] == "biased_svd") m.kind = FactorModel::Kind::BiasedSVD;
      else throw ParseError(source, lineno, "unknown model kind");
      have_kind = true;
    } else if (f[0] == "rank" && f.size() == 2) {
      if (!parse_number(f[1], m.rank) || m.rank == 0) throw ParseError(source, lineno, "bad rank");
      have_rank = true;
    } else if (f[0] == "global_mean" && f.size() == 2) {
      if (!parse_number(f[1], m.global_mean)) throw ParseError(source, lineno, "bad global_mean");
    } else if ((f[0] == "user" || f[0] == "item") && have_rank) {
      std::int64_t id = 0;
      double bias = 0.0;
      if (f.size() != 3 + m.rank || !parse_number(f[1], id) || !parse_number(f[2], bias))
        throw ParseError(source, lineno, "expected tag,id,bias and " + std::to_string(m.rank) + " factors");
      const bool user = f[0] == "user";
      auto& factors = user ? m.user_factors : m.item_factors;
      const std::size_t idx = (user ? m.user_bias : m.item_bias).size();
      bool fresh = user ? m.user_index.emplace(UserId{id}, idx).second : m.item_index.emplace(ItemId{id}, idx).second;
      if (!fresh) throw ParseError(source, lineno, "duplicate " + std::string(f[0]) + " " + std::to_string(id));
      (user ? m.user_bias : m.item_bias).push_back(bias);
      for (std::size_t k = 0; k < m.rank; ++k) {
        double x = 0.0;
        if (!parse_number(f[3 + k], x)) throw ParseError(source, lineno, "bad factor value");
        factors.push_back(x);
      }
    } else {
      throw ParseError(source, lineno, "unrecognized line");
    }
  }
  if (!have_kind || !have_rank) throw DataError(source + ": missing kind or rank header");
  return m;
}

}  // namespace hyperfair
