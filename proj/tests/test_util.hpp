#pragma once

// Test-only helpers: random models, finite differences and grid oracles. None
// of this goes through the solver.

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "hyperfair/hlmrf.hpp"

namespace testutil {

using namespace hyperfair;

inline std::vector<double> random_point(std::mt19937_64& rng, std::size_t n)
{
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> y(n);
  for (auto& v : y) v = unit(rng);
  return y;
}

/// Random rating-variable model with mixed exponents and 1..3 terms per potential.
inline GroundModel random_model(std::mt19937_64& rng, std::size_t nvars, std::size_t npots)
{
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, nvars - 1);
  GroundModel m;
  for (std::size_t j = 0; j < nvars; ++j) m.add_variable(VariableInfo::rating(UserId{static_cast<std::int64_t>(j)}, ItemId{1}));
  for (std::size_t i = 0; i < npots; ++i) {
    HingePotential p;
    p.weight = 0.1 + 3.0 * unit(rng);
    p.exponent = unit(rng) < 0.5 ? 1 : 2;
    const std::size_t nterms = 1 + static_cast<std::size_t>(unit(rng) * std::min<std::size_t>(3, nvars));
    std::vector<std::size_t> used;
    for (std::size_t t = 0; t < nterms; ++t) {
      std::size_t idx = pick(rng);
      if (std::find(used.begin(), used.end(), idx) != used.end()) continue;
      used.push_back(idx);
      p.form.terms.push_back({idx, unit(rng) < 0.5 ? -(0.2 + unit(rng)) : 0.2 + unit(rng)});
    }
    p.form.constant = unit(rng) - 0.5;
    m.add_potential(std::move(p));
  }
  return m;
}

inline GroundModel scale_weights(const GroundModel& m, double c)
{
  GroundModel out;
  for (const auto& v : m.variables()) out.add_variable(v.info);
  for (auto p : m.potentials()) {
    p.weight *= c;
    out.add_potential(std::move(p));
  }
  for (const auto& con : m.constraints()) out.add_constraint(con);
  return out;
}

inline bool near_kink(const GroundModel& m, const std::vector<double>& y, double margin)
{
  for (const auto& p : m.potentials())
    if (std::abs(p.form.value(y)) < margin) return true;
  return false;
}

inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double h)
{
  std::vector<double> g(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double orig = x[j];
    x[j] = orig + h;
    const double fp = f(x);
    x[j] = orig - h;
    const double fm = f(x);
    x[j] = orig;
    g[j] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline std::vector<double> central_difference(const GroundModel& m, const std::vector<double>& y, double h)
{
  return central_difference([&](const std::vector<double>& p) { return evaluate_objective(m, p); }, y, h);
}

/// Exhaustive grid minimum of f over [0,1]^dims at the given resolution.
inline std::pair<double, std::vector<double>> grid_minimum(const std::function<double(const std::vector<double>&)>& f,
                                                           std::size_t dims, double resolution)
{
  const auto steps = static_cast<std::size_t>(std::llround(1.0 / resolution));
  std::vector<std::size_t> idx(dims, 0);
  std::vector<double> p(dims), best_p(dims);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    for (std::size_t d = 0; d < dims; ++d) p[d] = static_cast<double>(idx[d]) / static_cast<double>(steps);
    const double v = f(p);
    if (v < best) {
      best = v;
      best_p = p;
    }
    std::size_t d = 0;
    while (d < dims && ++idx[d] > steps) idx[d++] = 0;
    if (d == dims) break;
  }
  return {best, best_p};
}

/// Grid search followed by successively finer grids around the incumbent.
inline std::pair<double, std::vector<double>> refined_grid_minimum(
    const std::function<double(const std::vector<double>&)>& f, std::size_t dims, double coarse, double fine)
{
  auto [best, p] = grid_minimum(f, dims, coarse);
  double res = coarse;
  while (res > fine * 1.0001) {
    const double next = std::max(fine, res / 20.0);
    const auto steps = static_cast<std::size_t>(std::llround(2.0 * res / next));
    std::vector<std::size_t> idx(dims, 0);
    std::vector<double> q(dims), center = p;
    while (true) {
      for (std::size_t d = 0; d < dims; ++d)
        q[d] = std::clamp(center[d] - res + static_cast<double>(idx[d]) * next, 0.0, 1.0);
      const double v = f(q);
      if (v < best) {
        best = v;
        p = q;
      }
      std::size_t d = 0;
      while (d < dims && ++idx[d] > steps) idx[d++] = 0;
      if (d == dims) break;
    }
    res = next;
  }
  return {best, p};
}

}  // namespace testutil
