#pragma once

// Grounding of the hybrid recommender rule families into hinge potentials.
//
//   Rating(A, I) & SimUsers(A, B)  -> Rating(B, I)     (and SimUserDemo)
//   Rating(U, I1) & SimItems(I1, I2) -> Rating(U, I2)  (and SimItemContent)
//   LocalPredictor(U, I) = Rating(U, I)
//   AverageUserRating(U) = Rating(U, I),  AverageItemRating(I) = Rating(U, I)
//
// Implications ground under the Lukasiewicz relaxation to
// max{body_1 + body_2 - 1 - head, 0} with exponent 1. Equalities ground to a
// pair of squared one-sided hinges.

#include <future>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hyperfair/hlmrf.hpp"
#include "hyperfair/similarity.hpp"
#include "hyperfair/types.hpp"

namespace hyperfair {

/// Observed ratings and the free rating variables of one fold.
class AtomTable {
 public:
  AtomTable() = default;

  /// Adds one target variable to the model per target pair, in the given order.
  AtomTable(std::span<const Observation> observed, std::span<const PairKey> targets, GroundModel& model)
  {
    for (const auto& o : observed) {
      if (!observed_.emplace(PairKey{o.user, o.item}, o.value).second)
        throw DataError("duplicate observed rating for user " + std::to_string(raw(o.user)) + " item " +
                        std::to_string(raw(o.item)));
    }
    for (const auto& t : targets) {
      if (observed_.contains(t))
        throw DataError("pair (" + std::to_string(raw(t.user)) + "," + std::to_string(raw(t.item)) +
                        ") is both observed and a target");
      if (targets_.contains(t)) throw DataError("duplicate target pair");
      const auto idx = model.add_variable(VariableInfo::rating(t.user, t.item));
      targets_.emplace(t, idx);
      order_.push_back(t);
      by_user_[t.user].push_back(t.item);
      by_item_[t.item].push_back(t.user);
    }
  }

  const std::map<PairKey, double>& observed() const { return observed_; }
  const std::map<PairKey, std::size_t>& targets() const { return targets_; }
  /// Targets in variable order.
  const std::vector<PairKey>& target_order() const { return order_; }

  std::optional<double> observed_value(PairKey k) const
  {
    auto it = observed_.find(k);
    return it == observed_.end() ? std::nullopt : std::optional<double>(it->second);
  }
  std::optional<std::size_t> target_index(PairKey k) const
  {
    auto it = targets_.find(k);
    return it == targets_.end() ? std::nullopt : std::optional<std::size_t>(it->second);
  }

  const std::vector<ItemId>& target_items_of(UserId u) const
  {
    static const std::vector<ItemId> none;
    auto it = by_user_.find(u);
    return it == by_user_.end() ? none : it->second;
  }
  const std::vector<UserId>& target_users_of(ItemId i) const
  {
    static const std::vector<UserId> none;
    auto it = by_item_.find(i);
    return it == by_item_.end() ? none : it->second;
  }

 private:
  std::map<PairKey, double> observed_;
  std::map<PairKey, std::size_t> targets_;
  std::vector<PairKey> order_;
  std::map<UserId, std::vector<ItemId>> by_user_;
  std::map<ItemId, std::vector<UserId>> by_item_;
};

struct RuleWeights {
  double sim_user_rating = 1.0;
  double sim_item_rating = 1.0;
  double sim_user_demo = 1.0;
  double sim_item_content = 1.0;
  std::map<std::string, double> prior;  ///< per predictor name; missing names weigh 1
  double mean_user = 1.0;
  double mean_item = 1.0;

  double prior_weight(const std::string& name) const
  {
    auto it = prior.find(name);
    return it == prior.end() ? 1.0 : it->second;
  }

  void validate() const
  {
    auto bad = [](double w) { return !(w >= 0.0) || !std::isfinite(w); };
    if (bad(sim_user_rating) || bad(sim_item_rating) || bad(sim_user_demo) || bad(sim_item_content) ||
        bad(mean_user) || bad(mean_item))
      throw ConfigError("rule weights must be finite and >= 0");
    for (const auto& [name, w] : prior)
      if (bad(w)) throw ConfigError("prior weight for '" + name + "' must be finite and >= 0");
  }
};

inline RuleFamily family_of(SimilarityKind k)
{
  switch (k) {
    case SimilarityKind::UserRating: return RuleFamily::SimUserRating;
    case SimilarityKind::ItemRating: return RuleFamily::SimItemRating;
    case SimilarityKind::UserDemographic: return RuleFamily::SimUserDemo;
    case SimilarityKind::ItemContent: return RuleFamily::SimItemContent;
  }
  return RuleFamily::Other;
}

/// Grounds the similarity implication for every neighbor pair (a, b, s): one
/// potential per item (or user) where the body atom exists and the head atom
/// is a target. Observed body atoms are folded into the constant.
inline std::vector<HingePotential> ground_similarity_rules(const SimilarityGraph& sim, const AtomTable& atoms, double w)
{
  if (!(w >= 0.0)) throw ConfigError("similarity rule weight must be >= 0");
  std::vector<HingePotential> out;
  const bool user_side = is_user_similarity(sim.kind);
  const RuleFamily family = family_of(sim.kind);

  auto emit = [&](PairKey body, PairKey head, double s, std::size_t head_idx) {
    HingePotential p;
    p.weight = w;
    p.exponent = 1;
    p.family = family;
    p.form.constant = s - 1.0;
    if (auto obs = atoms.observed_value(body)) {
      p.form.constant += *obs;
    } else if (auto idx = atoms.target_index(body)) {
      p.form.terms.push_back({*idx, 1.0});
    } else {
      return;
    }
    p.form.terms.push_back({head_idx, -1.0});
    p.form.canonicalize();
    if (p.form.terms.empty()) return;
    p.tag = user_side ? std::to_string(raw(body.user)) + ">" + std::to_string(raw(head.user)) + "@" + std::to_string(raw(head.item))
                      : std::to_string(raw(body.item)) + ">" + std::to_string(raw(head.item)) + "@" + std::to_string(raw(head.user));
    out.push_back(std::move(p));
  };

  for (const auto& [a, list] : sim.neighbors) {
    for (const auto& nb : list) {
      if (nb.score <= 0.0) continue;
      if (user_side) {
        const UserId ua{a}, ub{nb.entity};
        for (ItemId item : atoms.target_items_of(ub)) {
          const PairKey head{ub, item};
          emit(PairKey{ua, item}, head, nb.score, *atoms.target_index(head));
        }
      } else {
        const ItemId ia{a}, ib{nb.entity};
        for (UserId user : atoms.target_users_of(ib)) {
          const PairKey head{user, ib};
          emit(PairKey{user, ia}, head, nb.score, *atoms.target_index(head));
        }
      }
    }
  }
  return out;
}

namespace detail {
/// w * max{c - y, 0}^2 and w * max{y - c, 0}^2.
inline void squared_pull(std::vector<HingePotential>& out, std::size_t var, double center, double w, RuleFamily family,
                         const std::string& tag)
{
  out.push_back({w, {{{var, -1.0}}, center}, 2, family, tag});
  out.push_back({w, {{{var, 1.0}}, -center}, 2, family, tag});
}

inline std::string pair_tag(PairKey k) { return std::to_string(raw(k.user)) + "@" + std::to_string(raw(k.item)); }
}  // namespace detail

/// Symmetric squared pull of every target toward the predictor's value.
inline std::vector<HingePotential> ground_prior_rules(const PredictorOutput& pred, const AtomTable& atoms, double w)
{
  if (!(w >= 0.0)) throw ConfigError("prior weight must be >= 0");
  std::vector<PairKey> missing;
  for (const auto& key : atoms.target_order())
    if (!pred.values.contains(key)) missing.push_back(key);
  if (!missing.empty()) {
    std::string msg = "predictor '" + pred.name + "' has no value for " + std::to_string(missing.size()) + " target(s):";
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 10); ++i) msg += " (" + std::to_string(raw(missing[i].user)) + "," + std::to_string(raw(missing[i].item)) + ")";
    if (missing.size() > 10) msg += " ...";
    throw CoverageError(msg);
  }
  std::vector<HingePotential> out;
  out.reserve(2 * atoms.targets().size());
  for (const auto& key : atoms.target_order())
    detail::squared_pull(out, *atoms.target_index(key), pred.values.at(key), w, RuleFamily::LocalPredictor, pred.name);
  return out;
}

struct MeanCenters {
  double global = 0.5;
  std::map<UserId, double> user;
  std::map<ItemId, double> item;

  double of_user(UserId u) const
  {
    auto it = user.find(u);
    return it == user.end() ? global : it->second;
  }
  double of_item(ItemId i) const
  {
    auto it = item.find(i);
    return it == item.end() ? global : it->second;
  }
};

/// Per-user and per-item averages of the observed ratings. With no observed
/// ratings at all the global center is 0.5.
inline MeanCenters observed_means(const AtomTable& atoms)
{
  MeanCenters c;
  std::map<UserId, std::pair<double, std::size_t>> us;
  std::map<ItemId, std::pair<double, std::size_t>> is;
  double total = 0.0;
  for (const auto& [k, v] : atoms.observed()) {
    total += v;
    auto& u = us[k.user];
    u.first += v;
    ++u.second;
    auto& i = is[k.item];
    i.first += v;
    ++i.second;
  }
  if (!atoms.observed().empty()) c.global = total / static_cast<double>(atoms.observed().size());
  for (const auto& [u, s] : us) c.user[u] = s.first / static_cast<double>(s.second);
  for (const auto& [i, s] : is) c.item[i] = s.first / static_cast<double>(s.second);
  return c;
}

inline std::vector<HingePotential> ground_mean_centering(const AtomTable& atoms, double w_user, double w_item)
{
  if (!(w_user >= 0.0) || !(w_item >= 0.0)) throw ConfigError("mean-centering weights must be >= 0");
  const MeanCenters c = observed_means(atoms);
  std::vector<HingePotential> out;
  out.reserve(4 * atoms.targets().size());
  for (const auto& key : atoms.target_order()) {
    const auto var = *atoms.target_index(key);
    detail::squared_pull(out, var, c.of_user(key.user), w_user, RuleFamily::MeanUser, detail::pair_tag(key));
    detail::squared_pull(out, var, c.of_item(key.item), w_item, RuleFamily::MeanItem, detail::pair_tag(key));
  }
  return out;
}

struct SimilarityGraphs {
  SimilarityGraph user_rating{SimilarityKind::UserRating, {}};
  SimilarityGraph item_rating{SimilarityKind::ItemRating, {}};
  SimilarityGraph user_demo{SimilarityKind::UserDemographic, {}};
  SimilarityGraph item_content{SimilarityKind::ItemContent, {}};
};

struct BaseModel {
  GroundModel model;
  AtomTable atoms;
};

/// The hybrid recommender without fairness rules: one target per test pair;
/// similarity families, then local-predictor priors in the given order, then
/// mean-centering priors.
inline BaseModel build_base_model(std::span<const Observation> train, std::span<const PairKey> targets,
                                  const SimilarityGraphs& sims, std::span<const PredictorOutput> predictors,
                                  const RuleWeights& w, unsigned threads = 1)
{
  w.validate();
  BaseModel out;
  out.atoms = AtomTable(train, targets, out.model);
  if (targets.empty()) return out;

  const std::pair<const SimilarityGraph*, double> families[] = {
      {&sims.user_rating, w.sim_user_rating},
      {&sims.item_rating, w.sim_item_rating},
      {&sims.user_demo, w.sim_user_demo},
      {&sims.item_content, w.sim_item_content},
  };
  std::vector<std::vector<HingePotential>> grounded(4);
  if (threads > 1) {
    std::vector<std::future<std::vector<HingePotential>>> jobs;
    for (const auto& [g, wt] : families)
      jobs.push_back(std::async(std::launch::async, [&, g = g, wt = wt] { return ground_similarity_rules(*g, out.atoms, wt); }));
    for (std::size_t f = 0; f < 4; ++f) grounded[f] = jobs[f].get();
  } else {
    for (std::size_t f = 0; f < 4; ++f) grounded[f] = ground_similarity_rules(*families[f].first, out.atoms, families[f].second);
  }
  for (const auto& pred : predictors) grounded.push_back(ground_prior_rules(pred, out.atoms, w.prior_weight(pred.name)));
  grounded.push_back(ground_mean_centering(out.atoms, w.mean_user, w.mean_item));

  for (auto& family : grounded)
    for (auto& p : family) out.model.add_potential(std::move(p));
  return out;
}

/// Target values of a solved assignment as a prediction map.
inline PredictorOutput predictions_from(const AtomTable& atoms, std::span<const double> y, std::string name = "psl")
{
  PredictorOutput out{std::move(name), {}};
  for (const auto& [k, idx] : atoms.targets()) out.values.emplace(k, y[idx]);
  return out;
}

}  // namespace hyperfair
