#pragma once

// 2D world model: agent/robot kinematics, collision geometry, scenario
// construction and episode recording.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace crowdplan {

using Vec2 = Eigen::Vector2d;

inline constexpr double kFrameDt = 0.2;  // 5 Hz

struct WorldConfig {
  double v_max_agent = 1.5;
  double v_max_robot = 1.5;
  double agent_radius = 0.3;
  double robot_radius = 0.5;
  double goal_radius = 0.5;
  double dt = kFrameDt;
};

struct AgentState {
  int id = 0;
  Vec2 position = Vec2::Zero();
  Vec2 velocity = Vec2::Zero();
  double radius = 0.3;
};

struct RobotState {
  Vec2 position = Vec2::Zero();
  double heading = 0.0;  // (-pi, pi]
  double speed = 0.0;
  double radius = 0.5;

  Vec2 velocity() const { return speed * Vec2(std::cos(heading), std::sin(heading)); }
};

/// Discrete robot command applied over one frame: `accel` in m/s per frame,
/// `yaw_change` in degrees per frame.
struct RobotAction {
  double accel = 0.0;
  double yaw_change = 0.0;

  friend bool operator==(const RobotAction&, const RobotAction&) = default;
};

inline constexpr std::array<double, 5> kAccelSet{-0.05, -0.01, 0.0, 0.01, 0.05};
inline constexpr std::array<double, 5> kYawChangeSet{-20.0, -5.0, 0.0, 5.0, 20.0};

/// The 25 actions in lexicographic (accel, yaw_change) order.
inline std::vector<RobotAction> action_space() {
  std::vector<RobotAction> actions;
  actions.reserve(kAccelSet.size() * kYawChangeSet.size());
  for (double a : kAccelSet) {
    for (double y : kYawChangeSet) actions.push_back({a, y});
  }
  return actions;
}

inline bool action_less(const RobotAction& a, const RobotAction& b) {
  if (a.accel != b.accel) return a.accel < b.accel;
  return a.yaw_change < b.yaw_change;
}

inline double normalize_angle(double angle) {
  double a = std::remainder(angle, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

/// Unicycle step: speed and heading are updated first, then the position is
/// advanced with the updated values.
inline RobotState step_robot(const RobotState& state, const RobotAction& action, double dt,
                             double v_max_robot = WorldConfig{}.v_max_robot) {
  RobotState next = state;
  next.speed = std::clamp(state.speed + action.accel, 0.0, v_max_robot);
  next.heading = normalize_angle(state.heading + action.yaw_change * std::numbers::pi / 180.0);
  next.position = state.position + next.speed * dt * Vec2(std::cos(next.heading), std::sin(next.heading));
  return next;
}

enum class ScenarioKind { kCircleCrossing, kGroupCrossing, kRandom };

inline std::string to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::kCircleCrossing: return "circle_crossing";
    case ScenarioKind::kGroupCrossing: return "group_crossing";
    case ScenarioKind::kRandom: return "random";
  }
  return "unknown";
}

inline ScenarioKind scenario_from_string(const std::string& s) {
  if (s == "circle_crossing" || s == "circle") return ScenarioKind::kCircleCrossing;
  if (s == "group_crossing" || s == "group") return ScenarioKind::kGroupCrossing;
  if (s == "random") return ScenarioKind::kRandom;
  throw std::invalid_argument("unknown scenario kind '" + s + "'");
}

struct Scene {
  std::vector<AgentState> agents;
  std::vector<Vec2> agent_goals;  // parallel to `agents`; used by the simulator only
  RobotState robot;
  Vec2 goal = Vec2::Zero();
  int timestep = 0;
  double dt = kFrameDt;

  const AgentState* find_agent(int id) const {
    for (const auto& a : agents) {
      if (a.id == id) return &a;
    }
    return nullptr;
  }
};

struct EpisodeMetadata {
  std::string scenario;
  std::uint64_t seed = 0;
  double frame_rate = 1.0 / kFrameDt;
};

struct Episode {
  std::vector<Scene> frames;
  EpisodeMetadata metadata;

  std::size_t size() const { return frames.size(); }
  bool empty() const { return frames.empty(); }
  const Scene& back() const { return frames.back(); }
};

struct Collision {
  int agent_id = -1;
  double distance = 0.0;
};

/// Robot-vs-agent overlap test. Returns the first offending agent, if any.
inline std::optional<Collision> check_collision(const Scene& scene) {
  for (const auto& a : scene.agents) {
    const double dist = (scene.robot.position - a.position).norm();
    if (dist < scene.robot.radius + a.radius) return Collision{a.id, dist};
  }
  return std::nullopt;
}

namespace detail {

inline bool clear_of(const std::vector<Vec2>& placed, const Vec2& p, double min_sep) {
  for (const auto& q : placed) {
    if ((p - q).norm() < min_sep) return false;
  }
  return true;
}

}  // namespace detail

inline constexpr int kMinScenarioAgents = 2;
inline constexpr int kMaxScenarioAgents = 12;
inline constexpr double kCircleRadius = 7.5;  // 15 m wide arena

/// Builds a deterministic starting scene. Agents carry goals for the
/// simulator; the robot starts at rest facing its goal.
///
/// circle_crossing: robot and agents on the 7.5 m circle, every goal antipodal.
/// group_crossing: robot travels right-to-left through a group of three agents
///   walking left-to-right; any further agents cross at random.
/// random: bodies scattered on an annulus, goals roughly across the centre.
inline Scene make_scenario(ScenarioKind kind, int n_agents, std::uint64_t seed, const WorldConfig& cfg = {}) {
  if (n_agents < kMinScenarioAgents || n_agents > kMaxScenarioAgents) {
    throw std::invalid_argument("n_agents must lie in [2, 12], got " + std::to_string(n_agents));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;

  Scene scene;
  scene.dt = cfg.dt;
  scene.robot.radius = cfg.robot_radius;
  const double min_sep = 2.0 * cfg.robot_radius + 0.2;

  auto add_agent = [&](const Vec2& pos, const Vec2& goal) {
    AgentState a;
    a.id = static_cast<int>(scene.agents.size());
    a.position = pos;
    a.radius = cfg.agent_radius;
    scene.agents.push_back(a);
    scene.agent_goals.push_back(goal);
  };

  switch (kind) {
    case ScenarioKind::kCircleCrossing: {
      const int slots = n_agents + 1;
      const double slot = two_pi / slots;
      const double rotation = unit(rng) * two_pi;
      const double robot_angle = rotation;
      scene.robot.position = kCircleRadius * Vec2(std::cos(robot_angle), std::sin(robot_angle));
      scene.goal = -scene.robot.position;
      for (int i = 1; i < slots; ++i) {
        const double jitter = (unit(rng) - 0.5) * 0.5 * slot;
        const double angle = robot_angle + i * slot + jitter;
        const Vec2 p = kCircleRadius * Vec2(std::cos(angle), std::sin(angle));
        add_agent(p, -p);
      }
      break;
    }
    case ScenarioKind::kGroupCrossing: {
      scene.robot.position = Vec2(7.0, (unit(rng) - 0.5) * 1.0);
      scene.goal = Vec2(-7.0, scene.robot.position.y());
      const int group = std::min(n_agents, 3);
      const Vec2 centre(-4.5 + (unit(rng) - 0.5), (unit(rng) - 0.5) * 0.6);
      const std::array<Vec2, 3> formation{Vec2(0.0, 0.0), Vec2(-0.9, 0.75), Vec2(-0.9, -0.75)};
      for (int i = 0; i < group; ++i) {
        const Vec2 p = centre + formation[static_cast<std::size_t>(i)];
        add_agent(p, Vec2(8.0, p.y()));
      }
      std::vector<Vec2> placed{scene.robot.position};
      for (const auto& a : scene.agents) placed.push_back(a.position);
      std::vector<Vec2> goals{scene.goal};
      for (const auto& g : scene.agent_goals) goals.push_back(g);
      for (int i = group; i < n_agents; ++i) {
        for (int attempt = 0;; ++attempt) {
          const double angle = unit(rng) * two_pi;
          const double r = 6.0 + unit(rng) * 1.5;
          const Vec2 p = r * Vec2(std::cos(angle), std::sin(angle));
          const Vec2 g = -p + Vec2((unit(rng) - 0.5) * 2.0, (unit(rng) - 0.5) * 2.0);
          if ((detail::clear_of(placed, p, min_sep) && detail::clear_of(goals, g, min_sep)) || attempt > 1000) {
            placed.push_back(p);
            goals.push_back(g);
            add_agent(p, g);
            break;
          }
        }
      }
      break;
    }
    case ScenarioKind::kRandom: {
      std::vector<Vec2> placed;
      std::vector<Vec2> goals;
      auto draw = [&](Vec2& p, Vec2& g) {
        for (int attempt = 0;; ++attempt) {
          const double angle = unit(rng) * two_pi;
          const double r = 4.0 + unit(rng) * 3.0;
          p = r * Vec2(std::cos(angle), std::sin(angle));
          const double goal_angle = angle + std::numbers::pi + (unit(rng) - 0.5) * 1.2;
          const double goal_r = 4.0 + unit(rng) * 3.0;
          g = goal_r * Vec2(std::cos(goal_angle), std::sin(goal_angle));
          if ((detail::clear_of(placed, p, min_sep) && detail::clear_of(goals, g, min_sep)) || attempt > 1000) {
            placed.push_back(p);
            goals.push_back(g);
            return;
          }
        }
      };
      Vec2 p, g;
      draw(p, g);
      scene.robot.position = p;
      scene.goal = g;
      for (int i = 0; i < n_agents; ++i) {
        draw(p, g);
        add_agent(p, g);
      }
      break;
    }
  }
  const Vec2 to_goal = scene.goal - scene.robot.position;
  scene.robot.heading = normalize_angle(std::atan2(to_goal.y(), to_goal.x()));
  scene.robot.speed = 0.0;
  return scene;
}

}  // namespace crowdplan
