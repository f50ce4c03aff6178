#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "hyperfair/hlmrf.hpp"
#include "test_util.hpp"

using namespace hyperfair;

namespace {

GroundModel one_potential(double w, int p)
{
  GroundModel m;
  m.add_variable(VariableInfo::rating(UserId{1}, ItemId{1}));
  m.add_potential({w, {{{0, 1.0}}, -0.5}, p, RuleFamily::Other, "t"});
  return m;
}

}  // namespace

TEST(Objective, EmptyModelIsZero)
{
  GroundModel m;
  m.add_variable(VariableInfo::rating(UserId{1}, ItemId{1}));
  std::vector<double> y{0.3};
  EXPECT_EQ(evaluate_objective(m, y), 0.0);
}

TEST(Objective, LinearHinge)
{
  auto m = one_potential(2.0, 1);
  std::vector<double> y{0.8};
  EXPECT_NEAR(evaluate_objective(m, y), 0.6, 1e-15);
}

TEST(Objective, InactiveSquaredHinge)
{
  auto m = one_potential(1.0, 2);
  std::vector<double> y{0.2};
  EXPECT_EQ(evaluate_objective(m, y), 0.0);
}

TEST(Objective, DimensionMismatch)
{
  auto m = one_potential(1.0, 1);
  std::vector<double> y{0.2, 0.3};
  EXPECT_THROW(evaluate_objective(m, y), DimensionError);
  EXPECT_THROW(subgradient(m, y), DimensionError);
  EXPECT_THROW(check_feasibility(m, y, 1e-6), DimensionError);
}

TEST(Objective, ThreadCountDoesNotChangeBits)
{
  std::mt19937_64 rng(3);
  auto m = testutil::random_model(rng, 40, 20000);
  auto y = testutil::random_point(rng, 40);
  const double a = evaluate_objective(m, y, 1);
  const double b = evaluate_objective(m, y, 4);
  EXPECT_EQ(a, b);
}

TEST(Feasibility, NoConstraints)
{
  GroundModel m;
  m.add_variable(VariableInfo::rating(UserId{1}, ItemId{1}));
  std::vector<double> y{0.4};
  auto rep = check_feasibility(m, y, 1e-6);
  EXPECT_EQ(rep.max_box_violation, 0.0);
  EXPECT_EQ(rep.max_constraint_residual, 0.0);
  EXPECT_TRUE(rep.feasible);
}

TEST(Feasibility, AverageConstraint)
{
  GroundModel m;
  m.add_variable(VariableInfo::rating(UserId{1}, ItemId{1}));
  m.add_variable(VariableInfo::rating(UserId{2}, ItemId{1}));
  m.add_variable(VariableInfo::group_avg(Group::Protected));
  m.add_constraint({{{{2, 1.0}, {0, -0.5}, {1, -0.5}}, 0.0}, "avg"});

  std::vector<double> ok{0.2, 0.4, 0.3};
  EXPECT_NEAR(check_feasibility(m, ok, 1e-6).max_constraint_residual, 0.0, 1e-15);

  std::vector<double> bad{0.2, 0.4, 0.5};
  auto rep = check_feasibility(m, bad, 1e-6);
  EXPECT_NEAR(rep.max_constraint_residual, 0.2, 1e-12);
  EXPECT_FALSE(rep.feasible);
}

TEST(Feasibility, BoxViolationAndBadTolerance)
{
  GroundModel m;
  m.add_variable(VariableInfo::rating(UserId{1}, ItemId{1}));
  std::vector<double> y{1.25};
  EXPECT_NEAR(check_feasibility(m, y, 1e-6).max_box_violation, 0.25, 1e-15);
  EXPECT_THROW(check_feasibility(m, y, 0.0), ConfigError);
}

TEST(Subgradient, InactiveIsZero)
{
  auto m = one_potential(3.0, 1);
  std::vector<double> y{0.1};
  EXPECT_EQ(subgradient(m, y)[0], 0.0);
}

TEST(Subgradient, ActiveLinear)
{
  auto m = one_potential(3.0, 1);
  std::vector<double> y{0.9};
  EXPECT_EQ(subgradient(m, y)[0], 3.0);
}

TEST(Subgradient, KinkTakesZeroBranch)
{
  auto m = one_potential(3.0, 1);
  std::vector<double> y{0.5};
  EXPECT_EQ(subgradient(m, y)[0], 0.0);
}

TEST(Subgradient, MatchesCentralDifferences)
{
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    auto m = testutil::random_model(rng, 4, 6);
    auto y = testutil::random_point(rng, 4);
    if (testutil::near_kink(m, y, 1e-4)) continue;
    auto g = subgradient(m, y);
    auto fd = testutil::central_difference(m, y, 1e-6);
    for (std::size_t j = 0; j < y.size(); ++j)
      EXPECT_NEAR(g[j], fd[j], 1e-5 * std::max(1.0, std::abs(fd[j]))) << "trial " << trial << " coord " << j;
  }
}

TEST(Model, RejectsInvalidPotentials)
{
  GroundModel m;
  m.add_variable(VariableInfo::rating(UserId{1}, ItemId{1}));
  EXPECT_THROW(m.add_potential({-1.0, {{{0, 1.0}}, 0.0}, 1, RuleFamily::Other, ""}), StructureError);
  EXPECT_THROW(m.add_potential({1.0, {{{0, 1.0}}, 0.0}, 3, RuleFamily::Other, ""}), StructureError);
  EXPECT_THROW(m.add_potential({1.0, {{{1, 1.0}}, 0.0}, 1, RuleFamily::Other, ""}), StructureError);
  EXPECT_THROW(m.add_potential({1.0, {{{0, 1.0}, {0, 2.0}}, 0.0}, 1, RuleFamily::Other, ""}), StructureError);
  EXPECT_THROW(m.add_constraint({{{{0, 0.0}}, 0.0}, ""}), StructureError);
}

// Properties over random models.

TEST(ObjectiveProperty, Nonnegative)
{
  std::mt19937_64 rng(5);
  auto m = testutil::random_model(rng, 6, 30);
  std::normal_distribution<double> wide(0.5, 2.0);
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> y(6);
    for (auto& v : y) v = wide(rng);
    ASSERT_GE(evaluate_objective(m, y), 0.0);
  }
}

TEST(ObjectiveProperty, Convex)
{
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto m = testutil::random_model(rng, 5, 12);
    for (int k = 0; k < 20; ++k) {
      auto a = testutil::random_point(rng, 5), b = testutil::random_point(rng, 5);
      const double t = unit(rng);
      std::vector<double> mid(5);
      for (int j = 0; j < 5; ++j) mid[j] = t * a[j] + (1 - t) * b[j];
      ASSERT_LE(evaluate_objective(m, mid), t * evaluate_objective(m, a) + (1 - t) * evaluate_objective(m, b) + 1e-12);
    }
  }
}

TEST(ObjectiveProperty, WeightHomogeneity)
{
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto m = testutil::random_model(rng, 5, 12);
    const double c = 4.0;  // power of two: scaling is exact in floating point
    auto scaled = testutil::scale_weights(m, c);
    auto y = testutil::random_point(rng, 5);
    ASSERT_EQ(evaluate_objective(scaled, y), c * evaluate_objective(m, y));
  }
}

TEST(Serialization, RoundTripIsLossless)
{
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = testutil::random_model(rng, 7, 25);
    m.add_variable(VariableInfo::group_avg(Group::Protected));
    m.add_variable(VariableInfo::group_item_avg(Group::Unprotected, ItemId{42}));
    m.add_constraint({{{{7, 1.0}, {0, -1.0 / 3.0}, {1, -1.0 / 3.0}, {2, -1.0 / 3.0}}, 0.0}, "c1"});
    std::stringstream ss;
    write_model(ss, m);
    auto back = read_model(ss);
    ASSERT_EQ(back, m);
  }
}

TEST(Serialization, LineFormat)
{
  auto m = one_potential(2.0, 1);
  std::stringstream ss;
  write_model(ss, m);
  EXPECT_EQ(ss.str(), "VAR 0 rating 1 1\nPOT 2 1 -0.5 0:1 # other t\n");
}

TEST(Serialization, MalformedLineReportsLineNumber)
{
  std::stringstream ss("VAR 0 rating 1 1\nPOT x 1 0 0:1\n");
  try {
    read_model(ss);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}
