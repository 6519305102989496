#pragma once

// Comparator planners: a reactive potential field and constant-velocity
// propagation plugged into the tree search in place of the learned model.

#include "crowdplan/orca.hpp"
#include "crowdplan/planner.hpp"
#include "crowdplan/world.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace crowdplan {

struct PfConfig {
  double k_att = 1.0;      // 1/s
  double k_rep = 0.5;      // m^3/s
  double rep_range = 2.0;  // meters of free space between body surfaces
  double att_range = 1.0;  // beyond this goal distance the attraction has constant magnitude
  double min_clearance = 0.01;

  void validate() const {
    if (!(k_att > 0) || !(k_rep > 0) || !(rep_range > 0) || !(att_range > 0) || !(min_clearance > 0)) {
      throw std::invalid_argument("PfConfig: gains and ranges must be positive");
    }
  }
};

/// Attraction toward the goal (quadratic well within att_range, conic
/// beyond) plus Khatib-style repulsion from every agent whose clearance
/// (centre distance minus both radii) is below rep_range. The result is
/// limited to the robot's top speed.
inline Vec2 pf_desired_velocity(const Scene& scene, const PfConfig& cfg = {}, const WorldConfig& world = {}) {
  cfg.validate();
  const Vec2 r = scene.robot.position;
  const Vec2 to_goal = scene.goal - r;
  const double goal_dist = to_goal.norm();
  Vec2 v = goal_dist <= cfg.att_range ? Vec2(cfg.k_att * to_goal) : Vec2(cfg.k_att * cfg.att_range * to_goal / goal_dist);
  for (const auto& a : scene.agents) {
    const Vec2 away = r - a.position;
    const double dist = away.norm();
    if (dist < 1e-12) continue;
    const double clearance = std::max(dist - scene.robot.radius - a.radius, cfg.min_clearance);
    if (clearance >= cfg.rep_range) continue;
    v += cfg.k_rep * (1.0 / clearance - 1.0 / cfg.rep_range) / (clearance * clearance) * (away / dist);
  }
  const double speed = v.norm();
  if (speed > world.v_max_robot) v *= world.v_max_robot / speed;
  return v;
}

inline RobotAction pf_action(const Scene& scene, const PfConfig& cfg = {}, const WorldConfig& world = {}) {
  return project_to_action(scene.robot, pf_desired_velocity(scene, cfg, world), world.v_max_robot, scene.dt);
}

inline PlanFn pf_planner(PfConfig cfg = {}, WorldConfig world = {}) {
  cfg.validate();
  return [cfg, world](const Episode& history) {
    PlanResult res;
    res.best_action = pf_action(history.back(), cfg, world);
    res.best_plan = {res.best_action};
    return res;
  };
}

/// Constant-velocity position after `steps` frames.
inline Vec2 cv_transition(const Vec2& position, const Vec2& velocity, double dt, int steps = 1) {
  return position + velocity * (dt * steps);
}

/// Constant-velocity prediction as a tree transition. Velocities come from
/// the last two observations; uncertainty is the constant `u_cv` (m^2).
class CvTransition {
 public:
  using Scalar = double;
  struct Scratch {};

  explicit CvTransition(const PlanningRoot& root, double u_cv = 0.1) : dt_(root.dt), u_cv_(u_cv) {
    if (!(u_cv >= 0)) throw std::invalid_argument("CvTransition: u_cv must be >= 0");
    for (std::size_t i = 0; i < root.agents_now.size(); ++i) {
      velocity_.push_back((root.agents_now[i] - root.agents_prev[i]) / root.dt);
    }
  }

  std::size_t state_size() const { return 0; }
  std::size_t agent_count() const { return velocity_.size(); }
  std::span<const Vec2> velocities() const { return velocity_; }
  void root_state(std::span<double>) const {}
  Scratch make_scratch() const { return {}; }

  void step(Scratch&, const StepInput<double>& in, const StepOutput<double>& out) const {
    for (std::size_t j = 0; j < velocity_.size(); ++j) {
      out.means[j] = cv_transition(in.parent_means[j], velocity_[j], dt_);
      out.u[j] = u_cv_;
    }
  }

 private:
  double dt_;
  double u_cv_;
  std::vector<Vec2> velocity_;
};

inline PlanFn mcts_cv_planner(SearchConfig cfg, double u_cv = 0.1) {
  cfg.validate();
  return [cfg, u_cv](const Episode& history) {
    const PlanningRoot root = root_from_history(history);
    const CvTransition tr(root, u_cv);
    SearchConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(root.timestep) * 0x9E3779B97F4A7C15ULL;
    return search(root, tr, c);
  };
}

}  // namespace crowdplan
