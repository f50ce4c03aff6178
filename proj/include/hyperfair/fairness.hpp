#pragma once

// Non-parity and value unfairness: the metrics, and their injection into a
// GroundModel as auxiliary average variables tied down by equality
// constraints plus a mirrored pair of linear hinges whose sum is the absolute
// difference being penalized.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "hyperfair/grounder.hpp"
#include "hyperfair/hlmrf.hpp"
#include "hyperfair/types.hpp"

namespace hyperfair {

class GroupAssignment {
 public:
  GroupAssignment() = default;
  explicit GroupAssignment(std::map<UserId, Group> membership) : membership_(std::move(membership)) {}

  void set(UserId u, Group g) { membership_[u] = g; }

  Group of(UserId u) const
  {
    auto it = membership_.find(u);
    if (it == membership_.end()) throw DataError("user " + std::to_string(raw(u)) + " has no group label");
    return it->second;
  }

  const std::map<UserId, Group>& membership() const { return membership_; }

  void validate() const
  {
    bool p = false, up = false;
    for (const auto& [u, g] : membership_) (g == Group::Protected ? p : up) = true;
    if (!p || !up) throw DataError("group assignment needs at least one protected and one unprotected user");
  }

  GroupAssignment swapped() const
  {
    GroupAssignment s;
    for (const auto& [u, g] : membership_) s.set(u, other(g));
    return s;
  }

 private:
  std::map<UserId, Group> membership_;
};

namespace detail {
struct MeanAcc {
  double sum = 0.0;
  std::size_t count = 0;
  void add(double v)
  {
    sum += v;
    ++count;
  }
  double mean() const { return sum / static_cast<double>(count); }
};
}  // namespace detail

/// |E_g[v] - E_not_g[v]| over all predictions.
inline double u_par(const PredictorOutput& predictions, const GroupAssignment& groups)
{
  detail::MeanAcc acc[2];
  for (const auto& [k, v] : predictions.values) acc[groups.of(k.user) == Group::Protected ? 0 : 1].add(v);
  if (acc[0].count == 0 || acc[1].count == 0) throw MetricError("non-parity undefined: a group has no predictions");
  return std::abs(acc[0].mean() - acc[1].mean());
}

/// Mean over items rated by both groups of |(E_g[v]_j - E_g[r]_j) - (E_not_g[v]_j - E_not_g[r]_j)|.
inline double u_val(const PredictorOutput& predictions, const std::map<PairKey, double>& truth,
                    const GroupAssignment& groups)
{
  struct ItemAcc {
    detail::MeanAcc pred[2], real[2];
  };
  std::map<ItemId, ItemAcc> items;
  for (const auto& [k, v] : predictions.values) {
    auto t = truth.find(k);
    if (t == truth.end())
      throw MetricError("no true rating for prediction (" + std::to_string(raw(k.user)) + "," + std::to_string(raw(k.item)) + ")");
    const int g = groups.of(k.user) == Group::Protected ? 0 : 1;
    auto& it = items[k.item];
    it.pred[g].add(v);
    it.real[g].add(t->second);
  }
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& [item, a] : items) {
    if (a.pred[0].count == 0 || a.pred[1].count == 0) continue;
    total += std::abs((a.pred[0].mean() - a.real[0].mean()) - (a.pred[1].mean() - a.real[1].mean()));
    ++n;
  }
  if (n == 0) throw MetricError("value unfairness undefined: no item has predictions from both groups");
  return total / static_cast<double>(n);
}

/// Per-item group averages of the observed ratings (items seen by both groups only).
struct ObservedItemEstimates {
  struct Entry {
    double protected_mean = 0.0;
    double unprotected_mean = 0.0;
  };
  std::map<ItemId, Entry> per_item;

  static ObservedItemEstimates from(const std::map<PairKey, double>& observed, const GroupAssignment& groups)
  {
    std::map<ItemId, std::pair<detail::MeanAcc, detail::MeanAcc>> acc;
    for (const auto& [k, v] : observed) {
      auto& a = acc[k.item];
      (groups.of(k.user) == Group::Protected ? a.first : a.second).add(v);
    }
    ObservedItemEstimates est;
    for (const auto& [item, a] : acc)
      if (a.first.count > 0 && a.second.count > 0) est.per_item[item] = {a.first.mean(), a.second.mean()};
    return est;
  }
};

struct NonParityOptions {
  /// Average over observed ratings too (as constants), not only targets.
  bool include_observed_in_averages = false;
};

namespace detail {

/// y_aux - (sum of target vars + sum of observed) / count = 0
inline EqualityConstraint average_constraint(std::size_t aux, const std::vector<std::size_t>& vars, double observed_sum,
                                             std::size_t observed_count, std::string tag)
{
  const double m = static_cast<double>(vars.size() + observed_count);
  EqualityConstraint c;
  c.tag = std::move(tag);
  c.form.terms.push_back({aux, 1.0});
  for (auto v : vars) c.form.terms.push_back({v, -1.0 / m});
  c.form.constant = -observed_sum / m;
  c.form.canonicalize();
  return c;
}

}  // namespace detail

/// Appends the two group-average variables, their defining constraints and the
/// pair max{y_not_g - y_g, 0}, max{y_g - y_not_g, 0} weighted by w_f.
inline GroundModel build_nonparity_regularizer(const GroundModel& model, const AtomTable& atoms,
                                               const GroupAssignment& groups, double w_f, NonParityOptions opts = {})
{
  if (!(w_f >= 0.0) || !std::isfinite(w_f)) throw ConfigError("w_f must be finite and >= 0");
  std::vector<std::size_t> members[2];
  for (const auto& key : atoms.target_order())
    members[groups.of(key.user) == Group::Protected ? 0 : 1].push_back(*atoms.target_index(key));
  if (members[0].empty() || members[1].empty())
    throw StructureError("non-parity regularizer needs targets from both groups");

  double obs_sum[2] = {0.0, 0.0};
  std::size_t obs_count[2] = {0, 0};
  if (opts.include_observed_in_averages) {
    for (const auto& [k, v] : atoms.observed()) {
      const int g = groups.of(k.user) == Group::Protected ? 0 : 1;
      obs_sum[g] += v;
      ++obs_count[g];
    }
  }

  GroundModel out = model;
  const auto yg = out.add_variable(VariableInfo::group_avg(Group::Protected));
  const auto yng = out.add_variable(VariableInfo::group_avg(Group::Unprotected));
  out.add_constraint(detail::average_constraint(yg, members[0], obs_sum[0], obs_count[0], "protected_avg"));
  out.add_constraint(detail::average_constraint(yng, members[1], obs_sum[1], obs_count[1], "unprotected_avg"));
  // 1 - y_g - (1 - y_not_g) and its mirror.
  out.add_potential({w_f, {{{yg, -1.0}, {yng, 1.0}}, 0.0}, 1, RuleFamily::NonParity, "g<ng"});
  out.add_potential({w_f, {{{yg, 1.0}, {yng, -1.0}}, 0.0}, 1, RuleFamily::NonParity, "ng<g"});
  return out;
}

/// Appends, for every item with an observed estimate for both groups and
/// targets from both groups, the per-group item-average variables and the
/// mirrored hinge pair on the gap between the groups' signed deviations from
/// their observed estimates. Each hinge weighs w_f / n for n regularized items.
/// Items failing the precondition are skipped and, if a log is given, listed.
inline GroundModel build_value_regularizer(const GroundModel& model, const AtomTable& atoms,
                                           const GroupAssignment& groups, const ObservedItemEstimates& est, double w_f,
                                           std::vector<std::string>* skipped = nullptr)
{
  if (!(w_f >= 0.0) || !std::isfinite(w_f)) throw ConfigError("w_f must be finite and >= 0");
  if (est.per_item.empty()) throw StructureError("value regularizer needs observed item estimates");

  std::map<ItemId, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_item;
  for (const auto& key : atoms.target_order()) {
    auto& e = by_item[key.item];
    (groups.of(key.user) == Group::Protected ? e.first : e.second).push_back(*atoms.target_index(key));
  }

  std::vector<ItemId> items;
  for (const auto& [item, m] : by_item) {
    const bool both_targets = !m.first.empty() && !m.second.empty();
    const bool has_estimate = est.per_item.contains(item);
    if (both_targets && has_estimate) {
      items.push_back(item);
    } else if (skipped) {
      skipped->push_back("item " + std::to_string(raw(item)) +
                         (has_estimate ? ": targets missing for a group" : ": no observed estimate for both groups"));
    }
  }

  GroundModel out = model;
  if (items.empty()) return out;
  const double w = w_f / static_cast<double>(items.size());
  for (ItemId item : items) {
    const auto& m = by_item.at(item);
    const auto& e = est.per_item.at(item);
    const std::string tag = std::to_string(raw(item));
    const auto yg = out.add_variable(VariableInfo::group_item_avg(Group::Protected, item));
    const auto yng = out.add_variable(VariableInfo::group_item_avg(Group::Unprotected, item));
    out.add_constraint(detail::average_constraint(yg, m.first, 0.0, 0, "protected_item_avg@" + tag));
    out.add_constraint(detail::average_constraint(yng, m.second, 0.0, 0, "unprotected_item_avg@" + tag));
    // (y_g - E_g) - (y_ng - E_ng) and the sign-flipped mirror.
    const double shift = e.unprotected_mean - e.protected_mean;
    out.add_potential({w, {{{yg, 1.0}, {yng, -1.0}}, shift}, 1, RuleFamily::Value, tag});
    out.add_potential({w, {{{yg, -1.0}, {yng, 1.0}}, -shift}, 1, RuleFamily::Value, tag});
  }
  return out;
}

/// Unweighted fairness estimate carried by a regularizer family at y:
/// |y_g - y_not_g| for non-parity, (1/n) * sum of hinge pairs for value.
inline double regularizer_value(const GroundModel& model, std::span<const double> y, RuleFamily family)
{
  if (family != RuleFamily::NonParity && family != RuleFamily::Value)
    throw ConfigError("regularizer_value supports the nonparity and value families only");
  detail::check_dimension(model, y);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& p : model.potentials()) {
    if (p.family != family) continue;
    total += p.phi(y);
    ++count;
  }
  if (count == 0) throw StructureError("model has no " + std::string(to_string(family)) + " regularizer");
  if (family == RuleFamily::Value) total /= static_cast<double>(count / 2);
  return total;
}

}  // namespace hyperfair
