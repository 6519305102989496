#include "crowdplan/orca.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace crowdplan;

namespace {

AgentState agent(int id, Vec2 p, Vec2 v, double r = 0.3) {
  AgentState a;
  a.id = id;
  a.position = p;
  a.velocity = v;
  a.radius = r;
  return a;
}

// Self at the origin plus `n_others` neighbours clear of it, all with random
// velocities; returns the ORCA lines and a preferred velocity.
struct LpCase {
  std::vector<HalfPlane> lines;
  Vec2 pref;
};

LpCase random_case(std::mt19937_64& rng, int n_others, const OrcaConfig& cfg) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), dist(1.2, 4.0), ang(0.0, 6.283185307179586);
  auto rand_vel = [&] {
    Vec2 v(u(rng), u(rng));
    return Vec2(v * cfg.max_speed / std::sqrt(2.0));
  };
  const AgentState self = agent(0, Vec2::Zero(), rand_vel());
  LpCase c;
  for (int k = 0; k < n_others; ++k) {
    const double a = ang(rng);
    const AgentState other = agent(k + 1, dist(rng) * Vec2(std::cos(a), std::sin(a)), rand_vel());
    c.lines.push_back(orca_half_plane(self, other, cfg));
  }
  c.pref = rand_vel();
  return c;
}

}  // namespace

TEST(OrcaVelocity, NoNeighboursReturnsPreferred) {
  OrcaConfig cfg;
  const Vec2 pref(0.7, -0.4);
  const Vec2 v = orca_velocity(agent(0, {1, 2}, {0, 0}), {}, pref, cfg);
  EXPECT_EQ(v, pref);
}

TEST(OrcaVelocity, HeadOnEncounterIsMirrored) {
  OrcaConfig cfg;
  const AgentState a = agent(0, {-2.0, 0.0}, {1.0, 0.0});
  const AgentState b = agent(1, {2.0, 0.0}, {-1.0, 0.0});
  const Vec2 va = orca_velocity(a, std::vector<AgentState>{b}, {1.0, 0.0}, cfg);
  const Vec2 vb = orca_velocity(b, std::vector<AgentState>{a}, {-1.0, 0.0}, cfg);
  EXPECT_NEAR(va.x(), -vb.x(), 1e-6);
  EXPECT_NEAR(va.y(), -vb.y(), 1e-6);
  // Equal and opposite velocity changes.
  EXPECT_NEAR((va - a.velocity + (vb - b.velocity)).norm(), 0.0, 1e-6);
}

TEST(OrcaVelocity, ObstacleAheadForcesLateralMotion) {
  OrcaConfig cfg;
  cfg.time_horizon = 2.0;
  const AgentState self = agent(0, {0.0, 0.0}, {1.0, 0.0});
  const AgentState obstacle = agent(1, {1.0, 0.0}, {0.0, 0.0});
  const Vec2 v = orca_velocity(self, std::vector<AgentState>{obstacle}, {1.0, 0.0}, cfg);
  EXPECT_GT(std::abs(v.y()), 1e-3);
  const HalfPlane line = orca_half_plane(self, obstacle, cfg);
  const auto grid = oracle::grid_lp(std::vector<HalfPlane>{line}, cfg.max_speed, {1.0, 0.0}, 0.01);
  ASSERT_TRUE(grid.has_value());
  EXPECT_NEAR((v - *grid).norm(), 0.0, 0.01);
}

TEST(OrcaLp, MatchesGridSearchOnRandomCases) {
  OrcaConfig cfg;
  std::mt19937_64 rng(17);
  int compared = 0;
  for (int trial = 0; trial < 200 && compared < 20; ++trial) {
    const LpCase c = random_case(rng, 1 + trial % 3, cfg);
    const auto grid = oracle::grid_lp(c.lines, cfg.max_speed, c.pref);
    if (!grid) continue;
    const Vec2 v = solve_velocity_lp(c.lines, cfg.max_speed, c.pref);
    EXPECT_LE((v - *grid).norm(), 0.01) << "trial " << trial;
    ++compared;
  }
  EXPECT_EQ(compared, 20);
}

TEST(OrcaLp, FeasibleSolutionsSatisfyEveryHalfPlane) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int feasible = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<HalfPlane> lines;
    const int n = 1 + trial % 4;
    for (int k = 0; k < n; ++k) {
      // Lines passing near the origin keep most systems feasible.
      const Vec2 normal = Vec2(u(rng), u(rng)).normalized();
      lines.push_back({0.5 * Vec2(u(rng), u(rng)) - 0.3 * normal, normal});
    }
    const Vec2 pref(1.5 * u(rng), 1.5 * u(rng));
    Vec2 result = Vec2::Zero();
    const std::size_t fail = orca_detail::linear_program2(lines, 1.5, pref, false, result);
    if (fail < lines.size()) continue;
    ++feasible;
    for (const auto& l : lines) EXPECT_GE(l.normal.dot(result - l.point), -1e-6);
    EXPECT_LE(result.norm(), 1.5 + 1e-9);
  }
  EXPECT_GT(feasible, 1000);
}

TEST(OrcaLp, InfeasibleFallsBackToLeastViolation) {
  // Two opposing half-planes with an empty intersection.
  std::vector<HalfPlane> lines{{{0.0, 0.5}, {0.0, 1.0}}, {{0.0, -0.5}, {0.0, -1.0}}};
  const Vec2 v = solve_velocity_lp(lines, 1.5, {1.0, 0.0});
  EXPECT_NEAR(v.y(), 0.0, 1e-9);
  EXPECT_NEAR(lines[0].violation(v), lines[1].violation(v), 1e-9);
}

TEST(SimulateScene, EmptySceneStraightRobot) {
  Scene s;
  s.robot.speed = 1.0;
  s.goal = {10.0, 0.0};
  const Episode ep = simulate_scene(s, [](const Episode&) { return RobotAction{}; }, 10, OrcaConfig{});
  ASSERT_EQ(ep.size(), 11u);
  for (std::size_t k = 0; k < ep.size(); ++k) {
    EXPECT_NEAR(ep.frames[k].robot.position.x(), 0.2 * static_cast<double>(k), 1e-12);
    EXPECT_EQ(ep.frames[k].robot.position.y(), 0.0);
    EXPECT_EQ(ep.frames[k].timestep, static_cast<int>(k));
  }
}

TEST(SimulateScene, CircleCrossingAgentsReachAntipodes) {
  Scene s = make_scenario(ScenarioKind::kCircleCrossing, 10, 3);
  s.robot.position = {100.0, 100.0};  // parked out of range
  const Episode ep = simulate_scene(s, [](const Episode&) { return RobotAction{}; }, 150, OrcaConfig{});
  const Scene& last = ep.back();
  for (std::size_t i = 0; i < last.agents.size(); ++i) {
    EXPECT_LT((last.agents[i].position - s.agent_goals[i]).norm(), 0.05) << "agent " << i;
  }
  for (const auto& f : ep.frames) {
    for (std::size_t i = 0; i < f.agents.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        EXPECT_GE((f.agents[i].position - f.agents[j].position).norm(), 0.6 - 1e-6);
      }
    }
  }
}

TEST(SimulateScene, Deterministic) {
  const Scene s = make_scenario(ScenarioKind::kRandom, 6, 9);
  const auto policy = orca_robot_policy(OrcaConfig{}, 1.0);
  const Episode a = simulate_scene(s, policy, 40, OrcaConfig{});
  const Episode b = simulate_scene(s, policy, 40, OrcaConfig{});
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a.frames[k].robot.position, b.frames[k].robot.position);
    for (std::size_t i = 0; i < a.frames[k].agents.size(); ++i) {
      EXPECT_EQ(a.frames[k].agents[i].position, b.frames[k].agents[i].position);
    }
  }
}

TEST(SimulateScene, AgentsAvoidTheRobot) {
  // A robot standing on an agent's path deflects it; the offset breaks symmetry.
  Scene s;
  s.robot.position = {0.0, 0.0};
  s.goal = {0.0, 0.0};
  AgentState a = agent(0, {-4.0, 0.05}, {0.0, 0.0});
  s.agents.push_back(a);
  s.agent_goals.push_back({4.0, 0.05});
  const Episode ep = simulate_scene(s, [](const Episode&) { return RobotAction{}; }, 60, OrcaConfig{});
  double max_dev = 0.0;
  for (const auto& f : ep.frames) {
    max_dev = std::max(max_dev, std::abs(f.agents[0].position.y()));
    EXPECT_FALSE(check_collision(f).has_value());
  }
  EXPECT_GT(max_dev, 0.3);
}

TEST(GenerateDataset, ContractAndDeterminism) {
  const auto a = generate_dataset(10, 123);
  const auto b = generate_dataset(10, 123);
  ASSERT_EQ(a.size(), 10u);
  for (std::size_t e = 0; e < a.size(); ++e) {
    EXPECT_GE(a[e].size(), 28u);
    const auto n = a[e].frames.front().agents.size();
    EXPECT_GE(n, 2u);
    EXPECT_LE(n, 12u);
    EXPECT_FALSE(has_stuck_agent(a[e], 20, 0.1));
    ASSERT_EQ(a[e].size(), b[e].size());
    EXPECT_EQ(a[e].back().robot.position, b[e].back().robot.position);
  }
  EXPECT_THROW(generate_dataset(0, 1), std::invalid_argument);
}

TEST(GenerateDataset, StuckAgentDetected) {
  Episode ep;
  for (int k = 0; k < 30; ++k) {
    Scene s;
    s.timestep = k;
    AgentState a = agent(0, {0.001 * k, 0.0}, {0.0, 0.0});
    s.agents.push_back(a);
    s.agent_goals.push_back({5.0, 0.0});
    ep.frames.push_back(s);
  }
  EXPECT_TRUE(has_stuck_agent(ep, 20, 0.1));
}

TEST(OrcaConfig, Validation) {
  OrcaConfig c;
  c.pref_speed = 2.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = OrcaConfig{};
  c.time_horizon = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
