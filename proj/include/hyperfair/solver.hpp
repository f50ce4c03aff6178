#pragma once

// MAP inference for GroundModel: minimize the hinge energy over [0,1]^n subject
// to the equality constraints.
//
// The default route substitutes every auxiliary (group average) variable by its
// defining average, which leaves a box-constrained convex problem, and solves
// that with consensus ADMM: one local copy block per potential with a closed
// form proximal step, and a consensus step that averages the copies and clamps
// to the box. Constraints can also be kept and handled as hyperplane-projection
// blocks (eliminate_aux = false). A projected subgradient method is provided as
// a slower, independent route.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hyperfair/hlmrf.hpp"
#include "hyperfair/parallel.hpp"

namespace hyperfair {

enum class Algorithm { Admm, ProjectedSubgradient };
enum class StepRule { Diminishing, Backtracking };

struct SolverConfig {
  double tol_obj = 1e-6;   ///< relative objective change over one window
  double tol_feas = 1e-6;  ///< residual bound for box, constraints and ADMM consensus
  int max_iter = 25000;
  int window = 50;
  Algorithm algorithm = Algorithm::Admm;
  StepRule step_rule = StepRule::Backtracking;  ///< projected subgradient only
  std::uint64_t seed = 0;
  double init_value = 0.5;  ///< starting value for every variable
  bool eliminate_aux = true;
  unsigned threads = 1;
  std::ostream* trace = nullptr;  ///< CSV: iteration,objective,max_residual,step_size

  void validate() const
  {
    if (!(tol_obj > 0.0) || !(tol_feas > 0.0)) throw ConfigError("solver tolerances must be > 0");
    if (max_iter < 1) throw ConfigError("max_iter must be >= 1");
    if (window < 1) throw ConfigError("window must be >= 1");
    if (!(init_value >= 0.0 && init_value <= 1.0)) throw ConfigError("init_value must lie in [0,1]");
  }
};

struct Solution {
  std::vector<double> y;
  double objective = 0.0;
  int iterations = 0;
  FeasibilityReport feasibility;
  bool converged = false;
  std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Auxiliary variable elimination

/// A reduced model plus the bookkeeping to map its assignments back.
struct EliminatedModel {
  GroundModel model;
  std::vector<std::size_t> original_index;  ///< reduced index -> original index
  /// Per original variable: its defining form over reduced indices. Kept
  /// variables map to the single term (reduced index, 1).
  std::vector<LinearForm> definition;

  std::vector<double> expand(std::span<const double> reduced) const
  {
    std::vector<double> y(definition.size());
    for (std::size_t i = 0; i < definition.size(); ++i) y[i] = definition[i].value(reduced);
    return y;
  }

  std::vector<double> restrict(std::span<const double> full) const
  {
    std::vector<double> r(original_index.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = full[original_index[i]];
    return r;
  }
};

/// Solves each constraint for its unique auxiliary variable and substitutes the
/// resulting average into every potential. The optimal value is unchanged.
inline EliminatedModel eliminate_aux(const GroundModel& model)
{
  const auto& vars = model.variables();
  const std::size_t n = vars.size();
  EliminatedModel out;

  // Original-index definitions before reindexing.
  std::vector<std::optional<LinearForm>> aux_def(n);
  for (const auto& con : model.constraints()) {
    std::optional<Term> aux;
    for (const auto& t : con.form.terms) {
      if (!vars[t.index].info.is_aux()) continue;
      if (aux) throw StructureError("constraint has more than one auxiliary variable (" + con.tag + ")");
      aux = t;
    }
    if (!aux || aux->coef == 0.0) throw StructureError("constraint has no auxiliary variable to solve for (" + con.tag + ")");
    if (aux_def[aux->index]) throw StructureError("auxiliary variable appears in two constraints (" + con.tag + ")");
    LinearForm def;
    def.constant = -con.form.constant / aux->coef;
    for (const auto& t : con.form.terms)
      if (t.index != aux->index) def.terms.push_back({t.index, -t.coef / aux->coef});
    aux_def[aux->index] = std::move(def);
  }

  std::vector<std::size_t> reduced_of(n, std::numeric_limits<std::size_t>::max());
  for (std::size_t i = 0; i < n; ++i) {
    if (aux_def[i]) continue;
    reduced_of[i] = out.model.add_variable(vars[i].info);
    out.original_index.push_back(i);
  }
  auto reindex = [&](const LinearForm& f) {
    LinearForm r;
    r.constant = f.constant;
    for (const auto& t : f.terms) {
      if (aux_def[t.index]) throw StructureError("auxiliary definition refers to another auxiliary variable");
      r.terms.push_back({reduced_of[t.index], t.coef});
    }
    return r.canonicalize();
  };

  out.definition.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    out.definition[i] = aux_def[i] ? reindex(*aux_def[i]) : LinearForm{{{reduced_of[i], 1.0}}, 0.0};

  for (const auto& pot : model.potentials()) {
    HingePotential p = pot;
    p.form.terms.clear();
    p.form.constant = pot.form.constant;
    for (const auto& t : pot.form.terms) {
      const auto& def = out.definition[t.index];
      p.form.constant += t.coef * def.constant;
      for (const auto& d : def.terms) p.form.terms.push_back({d.index, t.coef * d.coef});
    }
    p.form.canonicalize();
    out.model.add_potential(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace detail {

/// Flattened ADMM problem: one block per active potential or constraint.
struct AdmmProblem {
  enum class Kind : std::uint8_t { Linear, Squared, Hyperplane };
  struct Block {
    std::size_t offset = 0;
    std::size_t length = 0;
    double weight = 0.0;
    double constant = 0.0;
    double norm2 = 0.0;
    Kind kind = Kind::Linear;
  };
  std::vector<Block> blocks;
  std::vector<std::size_t> var;  // per copy
  std::vector<double> coef;      // per copy
  // CSR incidence: copies of variable j are copy_of[var_start[j] .. var_start[j+1]).
  std::vector<std::size_t> var_start;
  std::vector<std::size_t> copy_of;
  double rho0 = 1.0;

  static AdmmProblem build(const GroundModel& model)
  {
    AdmmProblem p;
    double wsum = 0.0;
    std::size_t wcount = 0;
    auto push = [&](const LinearForm& f, double w, Kind k) {
      Block b;
      b.offset = p.var.size();
      b.length = f.terms.size();
      b.weight = w;
      b.constant = f.constant;
      b.norm2 = f.squared_norm();
      b.kind = k;
      for (const auto& t : f.terms) {
        p.var.push_back(t.index);
        p.coef.push_back(t.coef);
      }
      p.blocks.push_back(b);
    };
    for (const auto& pot : model.potentials()) {
      if (pot.weight == 0.0 || pot.form.terms.empty()) continue;
      push(pot.form, pot.weight, pot.exponent == 1 ? Kind::Linear : Kind::Squared);
      wsum += pot.weight;
      ++wcount;
    }
    for (const auto& con : model.constraints()) push(con.form, 0.0, Kind::Hyperplane);
    p.rho0 = wcount > 0 ? wsum / static_cast<double>(wcount) : 1.0;

    const std::size_t n = model.num_variables();
    p.var_start.assign(n + 1, 0);
    for (auto v : p.var) ++p.var_start[v + 1];
    for (std::size_t j = 0; j < n; ++j) p.var_start[j + 1] += p.var_start[j];
    p.copy_of.resize(p.var.size());
    std::vector<std::size_t> fill(p.var_start.begin(), p.var_start.end() - 1);
    for (std::size_t k = 0; k < p.var.size(); ++k) p.copy_of[fill[p.var[k]]++] = k;
    return p;
  }
};

inline void check_finite(double v, const char* what)
{
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite value encountered in ") + what);
}

/// Consensus ADMM on a model; constraints (if any) become projection blocks.
inline Solution admm(const GroundModel& model, const SolverConfig& cfg, std::vector<double> y)
{
  const AdmmProblem prob = AdmmProblem::build(model);
  const std::size_t ncopies = prob.var.size();
  const std::size_t nvars = model.num_variables();

  std::vector<double> x(ncopies), u(ncopies, 0.0), y_prev(nvars);
  for (std::size_t k = 0; k < ncopies; ++k) x[k] = y[prob.var[k]];

  // Penalty relative to the mean potential weight; scaling all weights
  // scales rho identically and leaves the iterates unchanged.
  double mu = 1.0;
  double rho = prob.rho0;

  Solution sol;
  std::vector<double> window_obj;
  double primal = 0.0, dual = 0.0;

  auto local_step = [&](std::size_t bb, std::size_t be) {
    for (std::size_t b = bb; b < be; ++b) {
      const auto& blk = prob.blocks[b];
      const std::size_t o = blk.offset;
      double v = blk.constant;
      for (std::size_t t = 0; t < blk.length; ++t) {
        const double z = y[prob.var[o + t]] - u[o + t];
        x[o + t] = z;
        v += prob.coef[o + t] * z;
      }
      double step = 0.0;
      switch (blk.kind) {
        case AdmmProblem::Kind::Linear:
          if (v > 0.0) {
            const double full = blk.weight / rho;
            step = (v - full * blk.norm2 >= 0.0) ? full : v / blk.norm2;
          }
          break;
        case AdmmProblem::Kind::Squared:
          if (v > 0.0) step = 2.0 * blk.weight * v / (rho + 2.0 * blk.weight * blk.norm2);
          break;
        case AdmmProblem::Kind::Hyperplane:
          step = v / blk.norm2;
          break;
      }
      if (step != 0.0)
        for (std::size_t t = 0; t < blk.length; ++t) x[o + t] -= step * prob.coef[o + t];
    }
  };

  auto consensus_step = [&](std::size_t jb, std::size_t je) {
    for (std::size_t j = jb; j < je; ++j) {
      const std::size_t s = prob.var_start[j], e = prob.var_start[j + 1];
      if (s == e) continue;
      double acc = 0.0;
      for (std::size_t c = s; c < e; ++c) {
        const std::size_t k = prob.copy_of[c];
        acc += x[k] + u[k];
      }
      y[j] = std::clamp(acc / static_cast<double>(e - s), Variable::lower, Variable::upper);
    }
  };

  const int check_every = std::min(cfg.window, 10);
  int it = 0;
  for (it = 1; it <= cfg.max_iter; ++it) {
    y_prev = y;
    parallel_for(prob.blocks.size(), cfg.threads, local_step, 256);
    parallel_for(nvars, cfg.threads, consensus_step, 1024);
    for (std::size_t k = 0; k < ncopies; ++k) u[k] += x[k] - y[prob.var[k]];

    const bool checkpoint = it % check_every == 0 || it == cfg.max_iter;
    if (!checkpoint && !cfg.trace) continue;

    primal = 0.0;
    double primal2 = 0.0, dual2 = 0.0;
    for (std::size_t k = 0; k < ncopies; ++k) {
      const double r = x[k] - y[prob.var[k]];
      primal = std::max(primal, std::abs(r));
      primal2 += r * r;
    }
    dual = 0.0;
    for (std::size_t j = 0; j < nvars; ++j) {
      const double d = y[j] - y_prev[j];
      dual = std::max(dual, std::abs(d));
      dual2 += d * d * static_cast<double>(prob.var_start[j + 1] - prob.var_start[j]);
    }
    check_finite(primal + dual, "ADMM residuals");

    if (cfg.trace) {
      const double f = evaluate_objective(model, y, cfg.threads);
      *cfg.trace << it << ',' << format_double(f) << ',' << format_double(std::max(primal, dual)) << ','
                 << format_double(rho) << '\n';
    }
    if (!checkpoint) continue;

    // Residual balancing on scale-free quantities.
    if (it % (5 * check_every) == 0) {
      const double r = std::sqrt(primal2), s = mu * std::sqrt(dual2);
      double factor = 1.0;
      if (r > 10.0 * s && mu < 1e6) factor = 2.0;
      else if (s > 10.0 * r && mu > 1e-6) factor = 0.5;
      if (factor != 1.0) {
        mu *= factor;
        rho = prob.rho0 * mu;
        for (auto& uk : u) uk /= factor;
      }
    }

    if (it % cfg.window == 0) {
      const double f = evaluate_objective(model, y, cfg.threads);
      check_finite(f, "objective");
      window_obj.push_back(f);
      if (window_obj.size() >= 2 && primal <= cfg.tol_feas && dual <= cfg.tol_feas) {
        const double prev = window_obj[window_obj.size() - 2];
        if (std::abs(f - prev) <= cfg.tol_obj * std::abs(f) + 1e-15) {
          const auto rep = check_feasibility(model, y, cfg.tol_feas);
          if (rep.feasible) {
            sol.converged = true;
            break;
          }
        }
      }
    }
  }
  // A problem with no active blocks is solved at the starting point.
  if (prob.blocks.empty()) sol.converged = true;
  sol.iterations = std::min(it, cfg.max_iter);
  sol.y = std::move(y);
  return sol;
}

inline Solution projected_subgradient(const GroundModel& model, const SolverConfig& cfg, std::vector<double> y)
{
  if (!model.constraints().empty())
    throw StructureError("projected subgradient requires a constraint-free model; eliminate auxiliaries first");
  const std::size_t n = model.num_variables();

  // Coordinate-wise bound on the subgradient magnitude sets the base step.
  std::vector<double> lip(n, 0.0);
  for (const auto& pot : model.potentials()) {
    double l1 = 0.0;
    for (const auto& t : pot.form.terms) l1 += std::abs(t.coef);
    const double scale = pot.exponent == 1 ? pot.weight : 2.0 * pot.weight * (l1 + std::abs(pot.form.constant));
    for (const auto& t : pot.form.terms) lip[t.index] += scale * std::abs(t.coef);
  }
  const double lmax = std::max(1e-12, *std::max_element(lip.begin(), lip.end()));

  Solution sol;
  double f = evaluate_objective(model, y, cfg.threads);
  std::vector<double> best = y, trial(n);
  double best_f = f, step = 1.0 / lmax, window_start = f;
  int it = 0;
  for (it = 1; it <= cfg.max_iter; ++it) {
    const auto g = subgradient(model, y);
    auto project = [&](double a) {
      for (std::size_t j = 0; j < n; ++j) trial[j] = std::clamp(y[j] - a * g[j], 0.0, 1.0);
    };
    if (cfg.step_rule == StepRule::Diminishing) {
      step = 1.0 / (lmax * std::sqrt(static_cast<double>(it)));
      project(step);
      y.swap(trial);
      f = evaluate_objective(model, y, cfg.threads);
    } else {
      step = std::min(step * 2.0, 1.0 / lmax * 1e3);
      double ft = 0.0;
      int halvings = 0;
      for (;; ++halvings) {
        project(step);
        ft = evaluate_objective(model, trial, cfg.threads);
        double decrease = 0.0;
        for (std::size_t j = 0; j < n; ++j) decrease += g[j] * (y[j] - trial[j]);
        if (ft <= f - 1e-4 * decrease || halvings >= 40) break;
        step *= 0.5;
      }
      if (ft < f) {
        y.swap(trial);
        f = ft;
      } else {
        // Stalled at a kink: fall back to a diminishing step.
        step = 1.0 / (lmax * std::sqrt(static_cast<double>(it)));
        project(step);
        y.swap(trial);
        f = evaluate_objective(model, y, cfg.threads);
      }
    }
    check_finite(f, "objective");
    if (f < best_f) {
      best_f = f;
      best = y;
    }
    if (cfg.trace) *cfg.trace << it << ',' << format_double(f) << ",0," << format_double(step) << '\n';
    if (it % cfg.window == 0) {
      if (std::abs(window_start - best_f) <= cfg.tol_obj * std::abs(best_f) + 1e-15) {
        sol.converged = true;
        break;
      }
      window_start = best_f;
    }
  }
  sol.iterations = std::min(it, cfg.max_iter);
  sol.y = std::move(best);
  return sol;
}

inline Solution solve_from(const GroundModel& model, const SolverConfig& cfg, std::vector<double> y0)
{
  cfg.validate();
  Solution sol;
  if (cfg.eliminate_aux || cfg.algorithm == Algorithm::ProjectedSubgradient) {
    const auto elim = eliminate_aux(model);
    auto reduced = elim.restrict(y0);
    sol = cfg.algorithm == Algorithm::Admm ? admm(elim.model, cfg, std::move(reduced))
                                           : projected_subgradient(elim.model, cfg, std::move(reduced));
    sol.y = elim.expand(sol.y);
  } else {
    sol = admm(model, cfg, std::move(y0));
  }
  sol.objective = evaluate_objective(model, sol.y, cfg.threads);
  check_finite(sol.objective, "objective");
  sol.feasibility = check_feasibility(model, sol.y, cfg.tol_feas);
  if (!sol.feasibility.feasible) sol.converged = false;
  if (!sol.converged) sol.warnings.push_back("solver stopped after " + std::to_string(sol.iterations) + " iterations without converging");
  return sol;
}

}  // namespace detail

/// MAP state of the model. Deterministic in (model, cfg).
inline Solution solve(const GroundModel& model, const SolverConfig& cfg = {})
{
  return detail::solve_from(model, cfg, std::vector<double>(model.num_variables(), cfg.init_value));
}

/// Runs the solver from cfg.init_value and from n_starts - 1 random points in
/// the box. The energy is convex, so all runs must agree; disagreement beyond
/// 10 * tol_obj (relative) is recorded as a warning on the returned solution.
inline Solution solve_with_restarts(const GroundModel& model, const SolverConfig& cfg, int n_starts)
{
  if (n_starts < 1) throw ConfigError("n_starts must be >= 1");
  Solution best = solve(model, cfg);
  double lo = best.objective, hi = best.objective;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int r = 1; r < n_starts; ++r) {
    std::vector<double> y0(model.num_variables());
    for (auto& v : y0) v = unit(rng);
    Solution s = detail::solve_from(model, cfg, std::move(y0));
    lo = std::min(lo, s.objective);
    hi = std::max(hi, s.objective);
    if (s.objective < best.objective) best = std::move(s);
  }
  const double spread = hi - lo;
  if (spread > 10.0 * cfg.tol_obj * std::max(1.0, std::abs(lo)))
    best.warnings.push_back("restart objectives disagree by " + format_double(spread));
  return best;
}

}  // namespace hyperfair
