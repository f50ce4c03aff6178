#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "hyperfair/solver.hpp"
#include "test_util.hpp"

using namespace hyperfair;

namespace {

std::size_t rating_var(GroundModel& m, int u)
{
  return m.add_variable(VariableInfo::rating(UserId{u}, ItemId{1}));
}

void add(GroundModel& m, double w, std::vector<Term> terms, double c, int p)
{
  m.add_potential({w, {std::move(terms), c}, p, RuleFamily::Other, ""});
}

// (0.7 - y)_+^2 + (y - 0.3)_+^2
GroundModel one_dim_model()
{
  GroundModel m;
  rating_var(m, 0);
  add(m, 1.0, {{0, -1.0}}, 0.7, 2);
  add(m, 1.0, {{0, 1.0}}, -0.3, 2);
  return m;
}

// max{y0 - y1, 0} + 10 (0.9 - y0)_+^2 + 10 (y1 - 0.1)_+^2
GroundModel two_dim_model()
{
  GroundModel m;
  rating_var(m, 0);
  rating_var(m, 1);
  add(m, 1.0, {{0, 1.0}, {1, -1.0}}, 0.0, 1);
  add(m, 10.0, {{0, -1.0}}, 0.9, 2);
  add(m, 10.0, {{1, 1.0}}, -0.1, 2);
  return m;
}

double objective_of(const GroundModel& m, const std::vector<double>& y) { return evaluate_objective(m, y); }

}  // namespace

TEST(EliminateAux, NoConstraintsIsIdentity)
{
  auto m = two_dim_model();
  auto e = eliminate_aux(m);
  EXPECT_EQ(e.model, m);
}

TEST(EliminateAux, SubstitutesAverage)
{
  GroundModel m;
  rating_var(m, 0);
  rating_var(m, 1);
  m.add_variable(VariableInfo::group_avg(Group::Protected));
  m.add_constraint({{{{2, 1.0}, {0, -0.5}, {1, -0.5}}, 0.0}, "avg"});
  add(m, 1.0, {{2, 1.0}}, -0.5, 1);

  auto e = eliminate_aux(m);
  ASSERT_EQ(e.model.num_variables(), 2u);
  ASSERT_EQ(e.model.potentials().size(), 1u);
  const auto& f = e.model.potentials()[0].form;
  ASSERT_EQ(f.terms.size(), 2u);
  EXPECT_EQ(f.terms[0].index, 0u);
  EXPECT_DOUBLE_EQ(f.terms[0].coef, 0.5);
  EXPECT_EQ(f.terms[1].index, 1u);
  EXPECT_DOUBLE_EQ(f.terms[1].coef, 0.5);
  EXPECT_DOUBLE_EQ(f.constant, -0.5);
  EXPECT_TRUE(e.model.constraints().empty());

  std::vector<double> reduced{0.2, 0.6};
  auto full = e.expand(reduced);
  EXPECT_DOUBLE_EQ(full[2], 0.4);
}

TEST(EliminateAux, RejectsUnsolvableConstraint)
{
  GroundModel m;
  rating_var(m, 0);
  rating_var(m, 1);
  m.add_constraint({{{{0, 1.0}, {1, -1.0}}, 0.0}, "no aux"});
  EXPECT_THROW(eliminate_aux(m), StructureError);

  GroundModel m2;
  rating_var(m2, 0);
  auto a = m2.add_variable(VariableInfo::group_avg(Group::Protected));
  m2.add_constraint({{{{a, 1.0}, {0, -1.0}}, 0.0}, "first"});
  m2.add_constraint({{{{a, 1.0}, {0, -1.0}}, 0.0}, "second"});
  EXPECT_THROW(eliminate_aux(m2), StructureError);
}

TEST(Solve, OneDimensionalOracle)
{
  auto m = one_dim_model();
  // Oracle frozen from a 1e-6 grid: argmin 0.5, min 0.08.
  auto [oracle, at] = testutil::refined_grid_minimum([&](auto& y) { return objective_of(m, y); }, 1, 1e-3, 1e-6);
  EXPECT_NEAR(oracle, 0.08, 1e-10);
  EXPECT_NEAR(at[0], 0.5, 1e-6);

  auto sol = solve(m);
  EXPECT_TRUE(sol.converged);
  EXPECT_NEAR(sol.y[0], 0.5, 1e-6);
  EXPECT_NEAR(sol.objective, 0.08, 1e-8);
}

TEST(Solve, EmptyModel)
{
  GroundModel m;
  rating_var(m, 0);
  auto sol = solve(m);
  EXPECT_TRUE(sol.converged);
  EXPECT_EQ(sol.objective, 0.0);
  EXPECT_TRUE(sol.feasibility.feasible);
}

TEST(Solve, TwoDimensionalGridOracle)
{
  auto m = two_dim_model();
  auto [oracle, at] = testutil::grid_minimum([&](auto& y) { return objective_of(m, y); }, 2, 1e-3);
  auto sol = solve(m);
  EXPECT_TRUE(sol.converged);
  EXPECT_NEAR(sol.objective, oracle, 1e-3);
  EXPECT_NEAR(sol.y[0], at[0], 1e-3);
  EXPECT_NEAR(sol.y[1], at[1], 1e-3);
}

TEST(Solve, ProjectedSubgradientAgreesOnOracleProblems)
{
  for (auto step : {StepRule::Diminishing, StepRule::Backtracking}) {
    SolverConfig cfg;
    cfg.algorithm = Algorithm::ProjectedSubgradient;
    cfg.step_rule = step;
    cfg.tol_obj = 1e-9;
    for (const auto& m : {one_dim_model(), two_dim_model()}) {
      auto [oracle, at] = testutil::grid_minimum([&](auto& y) { return objective_of(m, y); }, m.num_variables(), 1e-3);
      auto sol = solve(m, cfg);
      EXPECT_NEAR(sol.objective, oracle, 1e-3);
    }
  }
}

TEST(Solve, RandomSmallModelsMatchGridOracle)
{
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t n = 2 + trial % 2;
    auto m = testutil::random_model(rng, n, 5);
    auto [oracle, at] =
        testutil::grid_minimum([&](auto& y) { return objective_of(m, y); }, n, n == 2 ? 1e-3 : 1e-2);
    auto sol = solve(m);
    EXPECT_TRUE(sol.converged) << trial;
    // The solver can only be better than the grid; the grid is within its
    // resolution times the local slope of the true optimum.
    EXPECT_LE(sol.objective, oracle + 1e-9) << trial;
    EXPECT_NEAR(sol.objective, oracle, n == 2 ? 1e-3 : 5e-2) << trial;
  }
}

TEST(Solve, Deterministic)
{
  std::mt19937_64 rng(1);
  auto m = testutil::random_model(rng, 30, 120);
  auto a = solve(m), b = solve(m);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.objective, b.objective);
  EXPECT_EQ(a.iterations, b.iterations);

  SolverConfig threaded;
  threaded.threads = 3;
  auto c = solve(m, threaded);
  EXPECT_EQ(a.y, c.y);
}

TEST(Solve, WeightScalingLeavesArgminUnchanged)
{
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = testutil::random_model(rng, 6, 20);
    // Strongly convex: add a weak squared pull on every variable.
    for (std::size_t j = 0; j < 6; ++j) add(m, 0.5, {{j, 1.0}}, -0.4, 2), add(m, 0.5, {{j, -1.0}}, 0.4, 2);
    auto base = solve(m);
    for (double c : {0.01, 3.0, 250.0}) {
      auto scaled = solve(testutil::scale_weights(m, c));
      for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(scaled.y[j], base.y[j], 1e-4);
      EXPECT_NEAR(scaled.objective, c * base.objective, 1e-5 * c * std::max(1.0, base.objective));
    }
  }
}

TEST(Solve, ConstrainedAndEliminatedRoutesAgree)
{
  GroundModel m;
  for (int u = 0; u < 4; ++u) rating_var(m, u);
  const double pulls[] = {0.9, 0.8, 0.2, 0.1};
  for (std::size_t j = 0; j < 4; ++j) add(m, 1.0, {{j, -1.0}}, pulls[j], 2), add(m, 1.0, {{j, 1.0}}, -pulls[j], 2);
  auto g = m.add_variable(VariableInfo::group_avg(Group::Protected));
  auto ng = m.add_variable(VariableInfo::group_avg(Group::Unprotected));
  m.add_constraint({{{{g, 1.0}, {0, -0.5}, {1, -0.5}}, 0.0}, "c1"});
  m.add_constraint({{{{ng, 1.0}, {2, -0.5}, {3, -0.5}}, 0.0}, "c2"});
  add(m, 2.0, {{ng, 1.0}, {g, -1.0}}, 0.0, 1);
  add(m, 2.0, {{g, 1.0}, {ng, -1.0}}, 0.0, 1);

  auto elim = solve(m);
  SolverConfig direct;
  direct.eliminate_aux = false;
  auto cons = solve(m, direct);
  ASSERT_TRUE(elim.converged);
  ASSERT_TRUE(cons.converged);
  EXPECT_NEAR(elim.objective, cons.objective, 1e-5);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(elim.y[j], cons.y[j], 1e-4);
  EXPECT_NEAR(elim.y[g], 0.5 * (elim.y[0] + elim.y[1]), 1e-12);
}

TEST(Solve, ZeroWeightPotentialsAreInert)
{
  auto m = two_dim_model();
  auto with_zero = m;
  add(with_zero, 0.0, {{0, -1.0}}, 1.0, 1);
  auto a = solve(m), b = solve(with_zero);
  EXPECT_EQ(a.y, b.y);
}

TEST(Solve, MaxIterExceededIsNotAnError)
{
  auto m = two_dim_model();
  SolverConfig cfg;
  cfg.max_iter = 3;
  auto sol = solve(m, cfg);
  EXPECT_FALSE(sol.converged);
  EXPECT_EQ(sol.iterations, 3);
  EXPECT_FALSE(sol.warnings.empty());
}

TEST(Solve, InvalidConfig)
{
  auto m = two_dim_model();
  SolverConfig cfg;
  cfg.tol_obj = 0.0;
  EXPECT_THROW(solve(m, cfg), ConfigError);
  cfg = {};
  cfg.max_iter = 0;
  EXPECT_THROW(solve(m, cfg), ConfigError);
}

TEST(Solve, TraceIsCsv)
{
  auto m = two_dim_model();
  std::ostringstream trace;
  SolverConfig cfg;
  cfg.max_iter = 20;
  cfg.trace = &trace;
  solve(m, cfg);
  std::istringstream in(trace.str());
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
  }
  EXPECT_EQ(rows, 20);
}

TEST(SolveWithRestarts, SingleStartEqualsSolve)
{
  auto m = two_dim_model();
  auto a = solve(m), b = solve_with_restarts(m, {}, 1);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.objective, b.objective);
}

TEST(SolveWithRestarts, ConvexRestartsAgree)
{
  std::mt19937_64 rng(4);
  auto m = testutil::random_model(rng, 8, 30);
  auto sol = solve_with_restarts(m, {}, 5);
  EXPECT_TRUE(sol.warnings.empty()) << sol.warnings.front();
}

TEST(SolveWithRestarts, OracleArgmin)
{
  auto m = two_dim_model();
  auto [oracle, at] = testutil::grid_minimum([&](auto& y) { return objective_of(m, y); }, 2, 1e-3);
  auto sol = solve_with_restarts(m, {}, 3);
  EXPECT_NEAR(sol.y[0], at[0], 1e-3);
  EXPECT_NEAR(sol.y[1], at[1], 1e-3);
  EXPECT_THROW(solve_with_restarts(m, {}, 0), ConfigError);
}
