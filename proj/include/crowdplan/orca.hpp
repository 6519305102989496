#pragma once

// Optimal reciprocal collision avoidance: per-agent velocity selection by
// linear programming over pairwise half-plane constraints, plus the scene
// simulator and the training-data generator built on it.

#include "crowdplan/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace crowdplan {

struct OrcaConfig {
  double time_horizon = 2.0;
  double neighbor_dist = 10.0;
  double max_speed = 1.5;
  double pref_speed = 1.0;
  double time_step = kFrameDt;  // used when bodies already overlap
  double robot_responsibility = 0.5;  // avoidance share an agent takes against the robot (id -1)
  double safety_margin = 0.2;          // added to every combined radius inside the velocity LP

  void validate() const {
    if (!(time_horizon > 0 && neighbor_dist > 0 && max_speed > 0 && pref_speed > 0 && time_step > 0)) {
      throw std::invalid_argument("OrcaConfig: all parameters must be strictly positive");
    }
    if (max_speed < pref_speed) throw std::invalid_argument("OrcaConfig: max_speed < pref_speed");
    if (!(safety_margin >= 0)) throw std::invalid_argument("OrcaConfig: safety_margin must be >= 0");
    if (!(robot_responsibility > 0 && robot_responsibility <= 1)) {
      throw std::invalid_argument("OrcaConfig: robot_responsibility must lie in (0, 1]");
    }
  }
};

/// Admissible set {v : normal . (v - point) >= 0}.
struct HalfPlane {
  Vec2 point = Vec2::Zero();
  Vec2 normal = Vec2(0.0, 1.0);

  /// Boundary direction; the admissible side lies to its left.
  Vec2 direction() const { return Vec2(normal.y(), -normal.x()); }
  double violation(const Vec2& v) const { return std::max(0.0, -normal.dot(v - point)); }
  bool contains(const Vec2& v, double tol = 0.0) const { return normal.dot(v - point) >= -tol; }

  static HalfPlane from_direction(const Vec2& point, const Vec2& direction) {
    return HalfPlane{point, Vec2(-direction.y(), direction.x())};
  }
};

namespace orca_detail {

inline constexpr double kEps = 1e-9;

inline double det(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

// Optimises along the boundary of `lines[line_no]` subject to the preceding
// lines and the speed disk.
inline bool linear_program1(std::span<const HalfPlane> lines, std::size_t line_no, double radius,
                            const Vec2& opt_velocity, bool direction_opt, Vec2& result) {
  const Vec2 point = lines[line_no].point;
  const Vec2 dir = lines[line_no].direction();
  const double dot = point.dot(dir);
  const double discriminant = dot * dot + radius * radius - point.squaredNorm();
  if (discriminant < 0.0) return false;

  const double sqrt_disc = std::sqrt(discriminant);
  double t_left = -dot - sqrt_disc;
  double t_right = -dot + sqrt_disc;

  for (std::size_t i = 0; i < line_no; ++i) {
    const Vec2 dir_i = lines[i].direction();
    const double denominator = det(dir, dir_i);
    const double numerator = det(dir_i, point - lines[i].point);
    if (std::abs(denominator) <= kEps) {
      if (numerator < 0.0) return false;
      continue;
    }
    const double t = numerator / denominator;
    if (denominator >= 0.0) {
      t_right = std::min(t_right, t);
    } else {
      t_left = std::max(t_left, t);
    }
    if (t_left > t_right) return false;
  }

  if (direction_opt) {
    result = opt_velocity.dot(dir) > 0.0 ? point + t_right * dir : point + t_left * dir;
  } else {
    const double t = dir.dot(opt_velocity - point);
    result = point + std::clamp(t, t_left, t_right) * dir;
  }
  return true;
}

// Returns lines.size() on success, otherwise the index of the first line
// that could not be satisfied.
inline std::size_t linear_program2(std::span<const HalfPlane> lines, double radius, const Vec2& opt_velocity,
                                   bool direction_opt, Vec2& result) {
  if (direction_opt) {
    result = opt_velocity * radius;
  } else if (opt_velocity.squaredNorm() > radius * radius) {
    result = opt_velocity.normalized() * radius;
  } else {
    result = opt_velocity;
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (det(lines[i].direction(), lines[i].point - result) > 0.0) {
      const Vec2 previous = result;
      if (!linear_program1(lines, i, radius, opt_velocity, direction_opt, result)) {
        result = previous;
        return i;
      }
    }
  }
  return lines.size();
}

// Infeasible case: minimise the largest constraint violation.
inline void linear_program3(std::span<const HalfPlane> lines, std::size_t begin_line, double radius, Vec2& result) {
  double distance = 0.0;
  std::vector<HalfPlane> projected;
  for (std::size_t i = begin_line; i < lines.size(); ++i) {
    const Vec2 dir_i = lines[i].direction();
    if (det(dir_i, lines[i].point - result) <= distance) continue;

    projected.clear();
    for (std::size_t j = 0; j < i; ++j) {
      const Vec2 dir_j = lines[j].direction();
      const double determinant = det(dir_i, dir_j);
      Vec2 point;
      if (std::abs(determinant) <= kEps) {
        if (dir_i.dot(dir_j) > 0.0) continue;
        point = 0.5 * (lines[i].point + lines[j].point);
      } else {
        point = lines[i].point + (det(dir_j, lines[i].point - lines[j].point) / determinant) * dir_i;
      }
      projected.push_back(HalfPlane::from_direction(point, (dir_j - dir_i).normalized()));
    }
    const Vec2 previous = result;
    if (linear_program2(projected, radius, Vec2(-dir_i.y(), dir_i.x()), true, result) < projected.size()) {
      result = previous;
    }
    distance = det(dir_i, lines[i].point - result);
  }
}

}  // namespace orca_detail

/// Velocity closest to `preferred` inside every half-plane and the disk of
/// radius `max_speed`; when the constraints are infeasible, the velocity that
/// minimises the largest violation.
inline Vec2 solve_velocity_lp(std::span<const HalfPlane> lines, double max_speed, const Vec2& preferred) {
  Vec2 result = Vec2::Zero();
  const std::size_t fail = orca_detail::linear_program2(lines, max_speed, preferred, false, result);
  if (fail < lines.size()) orca_detail::linear_program3(lines, fail, max_speed, result);
  return result;
}

/// ORCA half-plane induced on `self` by `other`. `responsibility` is the share
/// of the avoidance `self` takes (0.5 reciprocal, 1.0 for a static obstacle).
inline HalfPlane orca_half_plane(const AgentState& self, const AgentState& other, const OrcaConfig& cfg,
                                 double responsibility = 0.5) {
  const Vec2 rel_pos = other.position - self.position;
  const Vec2 rel_vel = self.velocity - other.velocity;
  const double dist_sq = rel_pos.squaredNorm();
  const double combined_radius = self.radius + other.radius + cfg.safety_margin;
  const double combined_radius_sq = combined_radius * combined_radius;
  const double inv_horizon = 1.0 / cfg.time_horizon;

  Vec2 direction;
  Vec2 u;
  if (dist_sq > combined_radius_sq) {
    const Vec2 w = rel_vel - inv_horizon * rel_pos;
    const double w_length_sq = w.squaredNorm();
    const double dot1 = w.dot(rel_pos);
    if (dot1 < 0.0 && dot1 * dot1 > combined_radius_sq * w_length_sq) {
      // Cut-off circle.
      const double w_length = std::sqrt(w_length_sq);
      const Vec2 unit_w = w / w_length;
      direction = Vec2(unit_w.y(), -unit_w.x());
      u = (combined_radius * inv_horizon - w_length) * unit_w;
    } else {
      // Legs of the truncated cone.
      const double leg = std::sqrt(dist_sq - combined_radius_sq);
      if (orca_detail::det(rel_pos, w) > 0.0) {
        direction = Vec2(rel_pos.x() * leg - rel_pos.y() * combined_radius,
                         rel_pos.x() * combined_radius + rel_pos.y() * leg) /
                    dist_sq;
      } else {
        direction = -Vec2(rel_pos.x() * leg + rel_pos.y() * combined_radius,
                          -rel_pos.x() * combined_radius + rel_pos.y() * leg) /
                    dist_sq;
      }
      u = rel_vel.dot(direction) * direction - rel_vel;
    }
  } else {
    // Already overlapping: resolve within one time step.
    const double inv_step = 1.0 / cfg.time_step;
    const Vec2 w = rel_vel - inv_step * rel_pos;
    const double w_length = w.norm();
    const Vec2 unit_w = w_length > 0.0 ? Vec2(w / w_length) : Vec2(-rel_pos.normalized());
    direction = Vec2(unit_w.y(), -unit_w.x());
    u = (combined_radius * inv_step - w_length) * unit_w;
  }
  return HalfPlane::from_direction(self.velocity + responsibility * u, direction);
}

/// New velocity for `agent` given its neighbours (the robot included, as an
/// agent) and its preferred velocity.
inline Vec2 orca_velocity(const AgentState& agent, std::span<const AgentState> neighbors, const Vec2& pref_velocity,
                          const OrcaConfig& cfg) {
  std::vector<HalfPlane> lines;
  lines.reserve(neighbors.size());
  const double range_sq = cfg.neighbor_dist * cfg.neighbor_dist;
  for (const auto& other : neighbors) {
    if ((other.position - agent.position).squaredNorm() > range_sq) continue;
    lines.push_back(orca_half_plane(agent, other, cfg, other.id == -1 ? cfg.robot_responsibility : 0.5));
  }
  return solve_velocity_lp(lines, cfg.max_speed, pref_velocity);
}

/// Velocity toward `goal` at `pref_speed`, slowing so the goal is not overshot.
inline Vec2 preferred_velocity(const Vec2& position, const Vec2& goal, double pref_speed, double dt) {
  const Vec2 to_goal = goal - position;
  const double dist = to_goal.norm();
  if (dist < 1e-9) return Vec2::Zero();
  const double speed = std::min(pref_speed, dist / dt);
  return to_goal * (speed / dist);
}

inline AgentState robot_as_agent(const RobotState& robot) {
  AgentState a;
  a.id = -1;
  a.position = robot.position;
  a.velocity = robot.velocity();
  a.radius = robot.radius;
  return a;
}

/// Maps a desired planar velocity onto the discrete action whose post-step
/// velocity vector is closest to it. Ties resolve to the earlier action in
/// lexicographic order.
inline RobotAction project_to_action(const RobotState& robot, const Vec2& desired, double v_max_robot,
                                     double dt = kFrameDt) {
  RobotAction best;
  double best_err = std::numeric_limits<double>::infinity();
  for (const auto& action : action_space()) {
    const RobotState next = step_robot(robot, action, dt, v_max_robot);
    const double err = (next.velocity() - desired).squaredNorm();
    if (err < best_err - 1e-12) {
      best_err = err;
      best = action;
    }
  }
  return best;
}

/// Robot command chosen from the episode so far (the last frame is the
/// current observation).
using RobotPolicy = std::function<RobotAction(const Episode& history)>;

/// Steps a scene forward: every agent takes its ORCA velocity toward its goal
/// with the robot among its neighbours; the robot follows the supplied action.
class OrcaWorld {
 public:
  OrcaWorld(Scene initial, OrcaConfig cfg, WorldConfig world = {}) : cfg_(cfg), world_(world) {
    cfg_.validate();
    if (initial.agent_goals.size() != initial.agents.size()) {
      throw std::invalid_argument("OrcaWorld: every agent needs a goal");
    }
    episode_.frames.push_back(std::move(initial));
  }

  const Scene& current() const { return episode_.frames.back(); }
  const Episode& episode() const { return episode_; }
  Episode& episode() { return episode_; }
  const OrcaConfig& config() const { return cfg_; }
  const WorldConfig& world_config() const { return world_; }

  const Scene& step(const RobotAction& action) {
    const Scene& now = episode_.frames.back();
    Scene next = now;
    std::vector<AgentState> neighbors;
    neighbors.reserve(now.agents.size());
    for (std::size_t i = 0; i < now.agents.size(); ++i) {
      const AgentState& self = now.agents[i];
      neighbors.clear();
      for (std::size_t j = 0; j < now.agents.size(); ++j) {
        if (j != i) neighbors.push_back(now.agents[j]);
      }
      neighbors.push_back(robot_as_agent(now.robot));
      const Vec2 pref = preferred_velocity(self.position, now.agent_goals[i], cfg_.pref_speed, now.dt);
      next.agents[i].velocity = orca_velocity(self, neighbors, pref, cfg_);
      next.agents[i].position = self.position + next.agents[i].velocity * now.dt;
    }
    next.robot = step_robot(now.robot, action, now.dt, world_.v_max_robot);
    next.timestep = now.timestep + 1;
    episode_.frames.push_back(std::move(next));
    return episode_.frames.back();
  }

 private:
  OrcaConfig cfg_;
  WorldConfig world_;
  Episode episode_;
};

/// Runs `steps` frames; the returned episode has steps + 1 frames.
/// Collisions are recorded in the frames, not treated as failures.
inline Episode simulate_scene(const Scene& scene, const RobotPolicy& robot_policy, int steps, const OrcaConfig& cfg,
                              const WorldConfig& world = {}) {
  if (steps < 1) throw std::invalid_argument("simulate_scene: steps must be >= 1");
  OrcaWorld sim(scene, cfg, world);
  for (int s = 0; s < steps; ++s) sim.step(robot_policy(sim.episode()));
  return sim.episode();
}

/// Scripted robot for data generation: ORCA toward its own goal (treating
/// agents as reciprocal partners), projected onto the discrete action set.
inline RobotPolicy orca_robot_policy(OrcaConfig cfg, double pref_speed, WorldConfig world = {}) {
  return [cfg, pref_speed, world](const Episode& history) {
    const Scene& now = history.back();
    const AgentState self = robot_as_agent(now.robot);
    const Vec2 pref = preferred_velocity(now.robot.position, now.goal, pref_speed, now.dt);
    OrcaConfig robot_cfg = cfg;
    robot_cfg.max_speed = world.v_max_robot;
    const Vec2 desired = orca_velocity(self, now.agents, pref, robot_cfg);
    return project_to_action(now.robot, desired, world.v_max_robot, now.dt);
  };
}

struct DatasetConfig {
  int frames = 50;  // frames per episode (>= 29)
  int min_agents = 2;
  int max_agents = 12;
  int stuck_window = 20;
  double stuck_distance = 0.1;
  OrcaConfig orca;
  WorldConfig world;
};

/// True if some agent that has not reached its goal moves less than
/// `distance` over any `window`-frame span.
inline bool has_stuck_agent(const Episode& ep, int window, double distance, double goal_tolerance = 0.3) {
  if (ep.size() <= static_cast<std::size_t>(window)) return false;
  const auto& first = ep.frames.front();
  for (std::size_t a = 0; a < first.agents.size(); ++a) {
    const Vec2 goal = first.agent_goals[a];
    for (std::size_t t = static_cast<std::size_t>(window); t < ep.size(); ++t) {
      const Vec2 p_now = ep.frames[t].agents[a].position;
      const Vec2 p_then = ep.frames[t - static_cast<std::size_t>(window)].agents[a].position;
      if ((p_now - goal).norm() <= goal_tolerance) continue;
      if ((p_now - p_then).norm() < distance) return true;
    }
  }
  return false;
}

/// Scenes of every kind with 2-12 agents and a scripted robot, deterministic per
/// seed. Episodes with a stuck agent are regenerated from the next sub-seed.
inline Episode generate_episode(std::uint64_t seed, const DatasetConfig& cfg) {
  for (std::uint64_t sub = 0;; ++sub) {
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + sub);
    std::uniform_int_distribution<int> n_dist(cfg.min_agents, cfg.max_agents);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int n = n_dist(rng);
    const auto kind = static_cast<ScenarioKind>(std::uniform_int_distribution<int>(0, 2)(rng));
    Scene scene = make_scenario(kind, n, rng(), cfg.world);
    scene.robot.speed = 0.3 + unit(rng) * 0.9;
    for (std::size_t i = 0; i < scene.agents.size(); ++i) {
      scene.agents[i].velocity =
          preferred_velocity(scene.agents[i].position, scene.agent_goals[i], cfg.orca.pref_speed, scene.dt);
    }
    const double robot_pref = 0.6 + unit(rng) * 0.8;
    Episode ep = simulate_scene(scene, orca_robot_policy(cfg.orca, robot_pref, cfg.world), cfg.frames - 1, cfg.orca,
                                cfg.world);
    if (sub < 64 && has_stuck_agent(ep, cfg.stuck_window, cfg.stuck_distance)) continue;
    ep.metadata.scenario = to_string(kind);
    ep.metadata.seed = seed;
    ep.metadata.frame_rate = 1.0 / scene.dt;
    return ep;
  }
}

inline std::vector<Episode> generate_dataset(int n_scenes, std::uint64_t seed, const DatasetConfig& cfg = {}) {
  if (n_scenes < 1) throw std::invalid_argument("generate_dataset: n_scenes must be >= 1");
  if (cfg.min_agents < kMinScenarioAgents || cfg.max_agents > kMaxScenarioAgents || cfg.min_agents > cfg.max_agents) {
    throw std::invalid_argument("generate_dataset: agent range must lie within [2, 12]");
  }
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(n_scenes));
  for (int i = 0; i < n_scenes; ++i) {
    out.push_back(generate_episode(seed + static_cast<std::uint64_t>(i) * 1000003ULL, cfg));
  }
  return out;
}

}  // namespace crowdplan
