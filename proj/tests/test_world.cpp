#include "crowdplan/world.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <random>

using namespace crowdplan;

TEST(StepRobot, ZeroActionAdvancesOneFrame) {
  RobotState s;
  s.speed = 1.0;
  const RobotState n = step_robot(s, {0.0, 0.0}, 0.2);
  EXPECT_NEAR(n.position.x(), 0.2, 1e-15);
  EXPECT_NEAR(n.position.y(), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(n.speed, 1.0);
}

TEST(StepRobot, SpeedClampedAtZero) {
  RobotState s;
  const RobotState n = step_robot(s, {-0.05, 0.0}, 0.2);
  EXPECT_EQ(n.speed, 0.0);
  EXPECT_EQ(n.position, Vec2::Zero());
}

TEST(StepRobot, AccelerateAndTurn) {
  RobotState s;
  s.speed = 0.5;
  const RobotState n = step_robot(s, {0.05, 20.0}, 0.2);
  EXPECT_NEAR(n.speed, 0.55, 1e-12);
  EXPECT_NEAR(n.heading, 20.0 * std::numbers::pi / 180.0, 1e-12);
  EXPECT_NEAR(n.heading, 0.349, 1e-3);
  EXPECT_NEAR(n.position.x(), 0.55 * 0.2 * std::cos(n.heading), 1e-15);
  EXPECT_NEAR(n.position.y(), 0.55 * 0.2 * std::sin(n.heading), 1e-15);
}

TEST(StepRobot, SpeedStaysInRangeForRandomSequences) {
  std::mt19937_64 rng(7);
  const auto actions = action_space();
  std::uniform_int_distribution<std::size_t> pick(0, actions.size() - 1);
  for (int run = 0; run < 50; ++run) {
    RobotState s;
    for (int k = 0; k < 500; ++k) {
      s = step_robot(s, actions[pick(rng)], 0.2, 1.5);
      ASSERT_GE(s.speed, 0.0);
      ASSERT_LE(s.speed, 1.5);
      ASSERT_GT(s.heading, -std::numbers::pi);
      ASSERT_LE(s.heading, std::numbers::pi);
    }
  }
}

TEST(StepRobot, UpperSpeedClamp) {
  RobotState s;
  s.speed = 1.48;
  EXPECT_DOUBLE_EQ(step_robot(s, {0.05, 0.0}, 0.2, 1.5).speed, 1.5);
}

TEST(ActionSpace, TwentyFiveLexicographic) {
  const auto a = action_space();
  ASSERT_EQ(a.size(), 25u);
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_TRUE(action_less(a[i - 1], a[i]));
  EXPECT_EQ(a.front(), (RobotAction{-0.05, -20.0}));
  EXPECT_EQ(a[12], (RobotAction{0.0, 0.0}));
}

TEST(NormalizeAngle, RangeIsHalfOpen) {
  EXPECT_DOUBLE_EQ(normalize_angle(std::numbers::pi), std::numbers::pi);
  EXPECT_DOUBLE_EQ(normalize_angle(-std::numbers::pi), std::numbers::pi);
  EXPECT_NEAR(normalize_angle(3.0 * std::numbers::pi / 2.0), -std::numbers::pi / 2.0, 1e-12);
}

namespace {
Scene one_agent_scene(const Vec2& agent_pos, double agent_r = 0.3, double robot_r = 0.5) {
  Scene s;
  s.robot.radius = robot_r;
  AgentState a;
  a.position = agent_pos;
  a.radius = agent_r;
  s.agents.push_back(a);
  return s;
}
}  // namespace

TEST(Collision, HandExamples) {
  EXPECT_FALSE(check_collision(one_agent_scene({1.0, 0.0})).has_value());
  const auto hit = check_collision(one_agent_scene({0.7, 0.0}));
  ASSERT_TRUE(hit.has_value());
  EXPECT_EQ(hit->agent_id, 0);
  EXPECT_FALSE(check_collision(Scene{}).has_value());
}

TEST(Collision, ShrinkingRadiusNeverCreatesContact) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> pos(-2.0, 2.0), rad(0.05, 0.8), shrink(0.0, 1.0);
  for (int k = 0; k < 2000; ++k) {
    const Vec2 p(pos(rng), pos(rng));
    const double ra = rad(rng), rr = rad(rng);
    const bool before = check_collision(one_agent_scene(p, ra, rr)).has_value();
    const bool after = check_collision(one_agent_scene(p, ra * shrink(rng), rr)).has_value();
    if (!before) EXPECT_FALSE(after);
    const bool mirrored = check_collision(one_agent_scene(-p, ra, rr)).has_value();
    EXPECT_EQ(before, mirrored);
  }
}

TEST(Scenario, CircleCrossingGeometry) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Scene s = make_scenario(ScenarioKind::kCircleCrossing, 10, seed);
    ASSERT_EQ(s.agents.size(), 10u);
    EXPECT_NEAR(s.robot.position.norm(), 7.5, 1e-9);
    EXPECT_NEAR((s.goal + s.robot.position).norm(), 0.0, 1e-9);
    for (std::size_t i = 0; i < s.agents.size(); ++i) {
      EXPECT_NEAR(s.agents[i].position.norm(), 7.5, 1e-9);
      EXPECT_NEAR((s.agent_goals[i] + s.agents[i].position).norm(), 0.0, 1e-9);
    }
    EXPECT_FALSE(check_collision(s).has_value());
  }
}

TEST(Scenario, GroupCrossingDirections) {
  const Scene s = make_scenario(ScenarioKind::kGroupCrossing, 3, 11);
  ASSERT_EQ(s.agents.size(), 3u);
  EXPECT_LT(s.goal.x(), s.robot.position.x());  // robot right to left
  for (std::size_t i = 0; i < 3; ++i) EXPECT_GT(s.agent_goals[i].x(), s.agents[i].position.x());
}

TEST(Scenario, DeterministicAndNoOverlap) {
  for (auto kind : {ScenarioKind::kCircleCrossing, ScenarioKind::kGroupCrossing, ScenarioKind::kRandom}) {
    for (int n = 2; n <= 12; ++n) {
      const Scene a = make_scenario(kind, n, 42);
      const Scene b = make_scenario(kind, n, 42);
      ASSERT_EQ(a.agents.size(), static_cast<std::size_t>(n));
      EXPECT_EQ(a.robot.position, b.robot.position);
      for (std::size_t i = 0; i < a.agents.size(); ++i) {
        EXPECT_EQ(a.agents[i].position, b.agents[i].position);
        EXPECT_EQ(a.agent_goals[i], b.agent_goals[i]);
        EXPECT_GE((a.agents[i].position - a.robot.position).norm(), a.agents[i].radius + a.robot.radius);
        for (std::size_t j = 0; j < i; ++j) {
          EXPECT_GE((a.agents[i].position - a.agents[j].position).norm(), 2 * a.agents[i].radius);
        }
      }
    }
  }
}

TEST(Scenario, RejectsAgentCountOutsideRange) {
  EXPECT_THROW(make_scenario(ScenarioKind::kRandom, 1, 0), std::invalid_argument);
  EXPECT_THROW(make_scenario(ScenarioKind::kRandom, 13, 0), std::invalid_argument);
}

TEST(Scenario, NamesRoundTrip) {
  for (auto kind : {ScenarioKind::kCircleCrossing, ScenarioKind::kGroupCrossing, ScenarioKind::kRandom}) {
    EXPECT_EQ(scenario_from_string(to_string(kind)), kind);
  }
  EXPECT_THROW(scenario_from_string("nowhere"), std::invalid_argument);
}
