#pragma once

// Hinge-loss Markov random fields: box-bounded variables in [0,1], weighted
// hinge potentials w * max{l(y), 0}^p with p in {1,2}, and linear equality
// constraints. Only the MAP energy is represented.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hyperfair/parallel.hpp"
#include "hyperfair/types.hpp"

namespace hyperfair {

enum class VariableKind { TargetRating, GroupAvg, GroupItemAvg };

/// What a free variable stands for. user/item/group are meaningful only for
/// the kinds that use them.
struct VariableInfo {
  VariableKind kind = VariableKind::TargetRating;
  UserId user{};
  ItemId item{};
  Group group = Group::Protected;

  static VariableInfo rating(UserId u, ItemId i) { return {VariableKind::TargetRating, u, i, Group::Protected}; }
  static VariableInfo group_avg(Group g) { return {VariableKind::GroupAvg, UserId{}, ItemId{}, g}; }
  static VariableInfo group_item_avg(Group g, ItemId i) { return {VariableKind::GroupItemAvg, UserId{}, i, g}; }

  bool is_aux() const { return kind != VariableKind::TargetRating; }
  friend bool operator==(const VariableInfo&, const VariableInfo&) = default;
};

struct Variable {
  std::size_t index = 0;
  VariableInfo info;
  static constexpr double lower = 0.0;
  static constexpr double upper = 1.0;

  friend bool operator==(const Variable&, const Variable&) = default;
};

struct Term {
  std::size_t index = 0;
  double coef = 0.0;
  friend bool operator==(const Term&, const Term&) = default;
};

/// Sparse affine function sum(coef * y[index]) + constant.
struct LinearForm {
  std::vector<Term> terms;
  double constant = 0.0;

  double value(std::span<const double> y) const
  {
    double v = constant;
    for (const auto& t : terms) v += t.coef * y[t.index];
    return v;
  }

  /// Sorts by index, merges duplicate indices and drops zero coefficients.
  LinearForm& canonicalize()
  {
    std::stable_sort(terms.begin(), terms.end(), [](const Term& a, const Term& b) { return a.index < b.index; });
    std::vector<Term> merged;
    merged.reserve(terms.size());
    for (const auto& t : terms) {
      if (!merged.empty() && merged.back().index == t.index)
        merged.back().coef += t.coef;
      else
        merged.push_back(t);
    }
    std::erase_if(merged, [](const Term& t) { return t.coef == 0.0; });
    terms = std::move(merged);
    return *this;
  }

  bool has_duplicates() const
  {
    std::vector<std::size_t> idx;
    idx.reserve(terms.size());
    for (const auto& t : terms) idx.push_back(t.index);
    std::sort(idx.begin(), idx.end());
    return std::adjacent_find(idx.begin(), idx.end()) != idx.end();
  }

  double squared_norm() const
  {
    double s = 0.0;
    for (const auto& t : terms) s += t.coef * t.coef;
    return s;
  }

  friend bool operator==(const LinearForm&, const LinearForm&) = default;
};

enum class RuleFamily {
  SimUserRating,
  SimItemRating,
  SimUserDemo,
  SimItemContent,
  LocalPredictor,
  MeanUser,
  MeanItem,
  NonParity,
  Value,
  Other,
};

inline std::string_view to_string(RuleFamily f)
{
  switch (f) {
    case RuleFamily::SimUserRating: return "sim_user_rating";
    case RuleFamily::SimItemRating: return "sim_item_rating";
    case RuleFamily::SimUserDemo: return "sim_user_demo";
    case RuleFamily::SimItemContent: return "sim_item_content";
    case RuleFamily::LocalPredictor: return "local_predictor";
    case RuleFamily::MeanUser: return "mean_user";
    case RuleFamily::MeanItem: return "mean_item";
    case RuleFamily::NonParity: return "nonparity";
    case RuleFamily::Value: return "value";
    case RuleFamily::Other: break;
  }
  return "other";
}

inline RuleFamily rule_family_from_string(std::string_view s)
{
  for (auto f : {RuleFamily::SimUserRating, RuleFamily::SimItemRating, RuleFamily::SimUserDemo,
                 RuleFamily::SimItemContent, RuleFamily::LocalPredictor, RuleFamily::MeanUser,
                 RuleFamily::MeanItem, RuleFamily::NonParity, RuleFamily::Value}) {
    if (to_string(f) == s) return f;
  }
  return RuleFamily::Other;
}

struct HingePotential {
  double weight = 1.0;
  LinearForm form;
  int exponent = 1;
  RuleFamily family = RuleFamily::Other;
  std::string tag;

  /// max{l(y),0}^p, unweighted.
  double phi(std::span<const double> y) const
  {
    const double l = form.value(y);
    if (l <= 0.0) return 0.0;
    return exponent == 1 ? l : l * l;
  }

  double value(std::span<const double> y) const { return weight * phi(y); }

  friend bool operator==(const HingePotential&, const HingePotential&) = default;
};

/// form(y) = 0.
struct EqualityConstraint {
  LinearForm form;
  std::string tag;
  friend bool operator==(const EqualityConstraint&, const EqualityConstraint&) = default;
};

struct FeasibilityReport {
  double max_box_violation = 0.0;
  double max_constraint_residual = 0.0;
  bool feasible = true;
};

class GroundModel {
 public:
  std::size_t add_variable(VariableInfo info)
  {
    const std::size_t idx = variables_.size();
    variables_.push_back({idx, info});
    return idx;
  }

  void add_potential(HingePotential pot)
  {
    if (!(pot.weight >= 0.0) || !std::isfinite(pot.weight))
      throw StructureError("potential weight must be finite and >= 0 (" + pot.tag + ")");
    if (pot.exponent != 1 && pot.exponent != 2)
      throw StructureError("potential exponent must be 1 or 2 (" + pot.tag + ")");
    check_form(pot.form, pot.tag);
    potentials_.push_back(std::move(pot));
  }

  void add_constraint(EqualityConstraint con)
  {
    check_form(con.form, con.tag);
    if (std::none_of(con.form.terms.begin(), con.form.terms.end(), [](const Term& t) { return t.coef != 0.0; }))
      throw StructureError("constraint has no nonzero coefficient (" + con.tag + ")");
    constraints_.push_back(std::move(con));
  }

  const std::vector<Variable>& variables() const { return variables_; }
  const std::vector<HingePotential>& potentials() const { return potentials_; }
  const std::vector<EqualityConstraint>& constraints() const { return constraints_; }
  std::size_t num_variables() const { return variables_.size(); }

  friend bool operator==(const GroundModel&, const GroundModel&) = default;

 private:
  void check_form(const LinearForm& form, const std::string& tag) const
  {
    if (!std::isfinite(form.constant)) throw StructureError("non-finite constant (" + tag + ")");
    for (const auto& t : form.terms) {
      if (t.index >= variables_.size())
        throw StructureError("form references unknown variable " + std::to_string(t.index) + " (" + tag + ")");
      if (!std::isfinite(t.coef)) throw StructureError("non-finite coefficient (" + tag + ")");
    }
    if (form.has_duplicates()) throw StructureError("duplicate variable index in form (" + tag + ")");
  }

  std::vector<Variable> variables_;
  std::vector<HingePotential> potentials_;
  std::vector<EqualityConstraint> constraints_;
};

namespace detail {
inline void check_dimension(const GroundModel& model, std::span<const double> y)
{
  if (y.size() != model.num_variables())
    throw DimensionError("assignment has " + std::to_string(y.size()) + " values, model has " +
                         std::to_string(model.num_variables()) + " variables");
}
}  // namespace detail

/// Weighted energy sum_i w_i * max{l_i(y),0}^p_i. Bit-identical for any thread count.
inline double evaluate_objective(const GroundModel& model, std::span<const double> y, unsigned threads = 1)
{
  detail::check_dimension(model, y);
  const auto& pots = model.potentials();
  return detail::deterministic_sum(pots.size(), threads, [&](std::size_t i) { return pots[i].value(y); });
}

inline FeasibilityReport check_feasibility(const GroundModel& model, std::span<const double> y, double tol)
{
  if (!(tol > 0.0)) throw ConfigError("feasibility tolerance must be > 0");
  detail::check_dimension(model, y);
  FeasibilityReport rep;
  for (double v : y) {
    const double viol = v < Variable::lower ? Variable::lower - v : (v > Variable::upper ? v - Variable::upper : 0.0);
    rep.max_box_violation = std::max(rep.max_box_violation, viol);
  }
  for (const auto& c : model.constraints())
    rep.max_constraint_residual = std::max(rep.max_constraint_residual, std::abs(c.form.value(y)));
  rep.feasible = rep.max_box_violation <= tol && rep.max_constraint_residual <= tol;
  return rep;
}

/// A subgradient of the energy. At a kink (l = 0) the zero branch is taken.
inline std::vector<double> subgradient(const GroundModel& model, std::span<const double> y)
{
  detail::check_dimension(model, y);
  std::vector<double> g(y.size(), 0.0);
  for (const auto& pot : model.potentials()) {
    const double l = pot.form.value(y);
    if (l <= 0.0 || pot.weight == 0.0) continue;
    const double scale = pot.exponent == 1 ? pot.weight : 2.0 * pot.weight * l;
    for (const auto& t : pot.form.terms) g[t.index] += scale * t.coef;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Line-oriented text format:
//   VAR idx kind [args]
//   POT w p const idx:coef ... [# family tag]
//   CON const idx:coef ... [# tag]

namespace detail {

inline void write_terms(std::ostream& os, const LinearForm& form)
{
  os << format_double(form.constant);
  for (const auto& t : form.terms) os << ' ' << t.index << ':' << format_double(t.coef);
}

inline LinearForm read_terms(std::istringstream& in, std::size_t lineno)
{
  LinearForm form;
  std::string tok;
  if (!(in >> tok) || !parse_number(tok, form.constant)) throw ParseError("model", lineno, "bad constant");
  while (in >> tok) {
    const auto colon = tok.find(':');
    Term t;
    if (colon == std::string::npos || !parse_number(std::string_view(tok).substr(0, colon), t.index) ||
        !parse_number(std::string_view(tok).substr(colon + 1), t.coef))
      throw ParseError("model", lineno, "bad term '" + tok + "'");
    form.terms.push_back(t);
  }
  return form;
}

}  // namespace detail

inline void write_model(std::ostream& os, const GroundModel& model)
{
  for (const auto& v : model.variables()) {
    os << "VAR " << v.index << ' ';
    switch (v.info.kind) {
      case VariableKind::TargetRating: os << "rating " << raw(v.info.user) << ' ' << raw(v.info.item); break;
      case VariableKind::GroupAvg: os << "group_avg " << to_string(v.info.group); break;
      case VariableKind::GroupItemAvg:
        os << "group_item_avg " << to_string(v.info.group) << ' ' << raw(v.info.item);
        break;
    }
    os << '\n';
  }
  for (const auto& p : model.potentials()) {
    os << "POT " << format_double(p.weight) << ' ' << p.exponent << ' ';
    detail::write_terms(os, p.form);
    os << " # " << to_string(p.family);
    if (!p.tag.empty()) os << ' ' << p.tag;
    os << '\n';
  }
  for (const auto& c : model.constraints()) {
    os << "CON ";
    detail::write_terms(os, c.form);
    if (!c.tag.empty()) os << " # " << c.tag;
    os << '\n';
  }
}

inline GroundModel read_model(std::istream& is)
{
  GroundModel model;
  std::string line;
  std::size_t lineno = 0;
  auto parse_group = [&](const std::string& s) {
    if (s == "protected") return Group::Protected;
    if (s == "unprotected") return Group::Unprotected;
    throw ParseError("model", lineno, "bad group '" + s + "'");
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::string comment;
    if (auto hash = line.find(" # "); hash != std::string::npos) {
      comment = line.substr(hash + 3);
      line.resize(hash);
    }
    std::istringstream in(line);
    std::string head;
    in >> head;
    if (head == "VAR") {
      std::size_t idx = 0;
      std::string kind;
      if (!(in >> idx >> kind) || idx != model.num_variables())
        throw ParseError("model", lineno, "bad or out-of-order VAR line");
      if (kind == "rating") {
        std::int64_t u = 0, i = 0;
        if (!(in >> u >> i)) throw ParseError("model", lineno, "bad rating variable");
        model.add_variable(VariableInfo::rating(UserId{u}, ItemId{i}));
      } else if (kind == "group_avg") {
        std::string g;
        in >> g;
        model.add_variable(VariableInfo::group_avg(parse_group(g)));
      } else if (kind == "group_item_avg") {
        std::string g;
        std::int64_t i = 0;
        if (!(in >> g >> i)) throw ParseError("model", lineno, "bad group_item_avg variable");
        model.add_variable(VariableInfo::group_item_avg(parse_group(g), ItemId{i}));
      } else {
        throw ParseError("model", lineno, "unknown variable kind '" + kind + "'");
      }
    } else if (head == "POT") {
      HingePotential p;
      std::string w;
      if (!(in >> w >> p.exponent) || !parse_number(w, p.weight)) throw ParseError("model", lineno, "bad POT header");
      p.form = detail::read_terms(in, lineno);
      if (!comment.empty()) {
        const auto sp = comment.find(' ');
        p.family = rule_family_from_string(comment.substr(0, sp));
        if (sp != std::string::npos) p.tag = comment.substr(sp + 1);
      }
      model.add_potential(std::move(p));
    } else if (head == "CON") {
      EqualityConstraint c;
      c.form = detail::read_terms(in, lineno);
      c.tag = comment;
      model.add_constraint(std::move(c));
    } else {
      throw ParseError("model", lineno, "unknown record '" + head + "'");
    }
  }
  return model;
}

}  // namespace hyperfair
