#pragma once

// Anytime Monte Carlo tree search over the discrete robot action space.
//
// Each iteration selects up to K nodes by UCT descent with virtual visits,
// expands one untried action at each, advances every new child by a single
// prediction step (no rollout), scores it with a state-evaluation cost and
// backs the reward up to the root. The prediction step is supplied by a
// transition type, so the same search runs on the learned decoder or on
// constant-velocity propagation.

#include "crowdplan/kvconfig.hpp"
#include "crowdplan/orca.hpp"
#include "crowdplan/seqmodel.hpp"
#include "crowdplan/world.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace crowdplan {

inline constexpr int kActionCount = 25;

enum class SefKind { kSef1, kSef2 };

inline std::string to_string(SefKind k) { return k == SefKind::kSef1 ? "sef1" : "sef2"; }

inline SefKind sef_from_string(const std::string& s) {
  if (s == "sef1" || s == "SEF1") return SefKind::kSef1;
  if (s == "sef2" || s == "SEF2") return SefKind::kSef2;
  throw std::invalid_argument("unknown sef '" + s + "' (expected sef1 or sef2)");
}

struct SearchConfig {
  std::int64_t budget_ns = 300'000'000;
  std::optional<int> iterations;  // when set, run exactly this many batches and ignore the budget
  int k_parallel = 50;
  double c_uct = std::numbers::sqrt2 / 2.0;
  double d_threshold = 2.0;  // meters
  SefKind sef = SefKind::kSef1;
  int max_depth = 8;
  double alpha_eps = 0.05;  // meters; caps the proximity weight at 1/alpha_eps
  // A simulated state whose robot lies closer than this to a predicted agent
  // position scores reward 0 and is not expanded further; 0 disables.
  double collision_radius = 0.8;
  std::uint64_t seed = 0;
  int threads = 1;  // workers for the simulation stage

  void validate() const {
    if (budget_ns <= 0) throw std::invalid_argument("SearchConfig: budget must be positive");
    if (iterations && *iterations < 0) throw std::invalid_argument("SearchConfig: iterations must be >= 0");
    if (k_parallel < 1) throw std::invalid_argument("SearchConfig: k_parallel must be >= 1");
    if (c_uct < 0) throw std::invalid_argument("SearchConfig: c_uct must be >= 0");
    if (d_threshold < 0) throw std::invalid_argument("SearchConfig: d_threshold must be >= 0");
    if (max_depth < 1 || max_depth > kPredictionSteps) throw std::invalid_argument("SearchConfig: max_depth must lie in [1, 8]");
    if (!(alpha_eps > 0)) throw std::invalid_argument("SearchConfig: alpha_eps must be positive");
    if (!(collision_radius >= 0)) throw std::invalid_argument("SearchConfig: collision_radius must be >= 0");
    if (threads < 1) throw std::invalid_argument("SearchConfig: threads must be >= 1");
  }
};

/// Reads the keys budget_ns, budget_ms, iterations, k_parallel, c_uct,
/// d_threshold, sef, max_depth, alpha_eps, seed and threads on top of `base`.
inline SearchConfig search_config_from(const KvConfig& kv, SearchConfig base = {}) {
  kv.read("budget_ns", base.budget_ns);
  if (const auto ms = kv.get("budget_ms")) {
    double v = 0;
    KvConfig one;
    one.set("budget_ms", *ms);
    one.read("budget_ms", v);
    base.budget_ns = static_cast<std::int64_t>(std::llround(v * 1e6));
  }
  if (const auto it = kv.get("iterations")) {
    if (*it == "none" || it->empty()) {
      base.iterations.reset();
    } else {
      int n = 0;
      KvConfig one;
      one.set("iterations", *it);
      one.read("iterations", n);
      base.iterations = n;
    }
  }
  kv.read("k_parallel", base.k_parallel);
  kv.read("c_uct", base.c_uct);
  kv.read("d_threshold", base.d_threshold);
  if (const auto s = kv.get("sef")) base.sef = sef_from_string(*s);
  kv.read("max_depth", base.max_depth);
  kv.read("alpha_eps", base.alpha_eps);
  kv.read("collision_radius", base.collision_radius);
  kv.read("seed", base.seed);
  kv.read("threads", base.threads);
  base.validate();
  return base;
}

inline void write_search_config(std::ostream& out, const SearchConfig& c) {
  out << "budget_ns = " << c.budget_ns << '\n';
  out << "iterations = " << (c.iterations ? std::to_string(*c.iterations) : std::string("none")) << '\n';
  out << "k_parallel = " << c.k_parallel << '\n';
  out << "c_uct = " << fmt_fixed(c.c_uct, 9) << '\n';
  out << "d_threshold = " << fmt_fixed(c.d_threshold, 6) << '\n';
  out << "sef = " << to_string(c.sef) << '\n';
  out << "max_depth = " << c.max_depth << '\n';
  out << "alpha_eps = " << fmt_fixed(c.alpha_eps, 6) << '\n';
  out << "collision_radius = " << fmt_fixed(c.collision_radius, 6) << '\n';
  out << "seed = " << c.seed << '\n';
  out << "threads = " << c.threads << '\n';
}

// ---------------------------------------------------------------------------
// Node value and state evaluation

/// V = w/n_eff + c sqrt(ln(parent_n_eff) / n_eff); +inf when n_eff is 0.
inline double uct_value(double w, double n_eff, double parent_n_eff, double c) {
  if (n_eff <= 0) return std::numeric_limits<double>::infinity();
  const double explore = parent_n_eff > 1 ? std::sqrt(std::log(parent_n_eff) / n_eff) : 0.0;
  return w / n_eff + c * explore;
}

/// 1/distance inside the gate, 0 outside; distance floored at `eps`.
inline double proximity_weight(double distance, double d_threshold, double eps) {
  if (distance > d_threshold) return 0.0;
  return 1.0 / std::max(distance, eps);
}

/// ||R - G||^2 + sum_i alpha_i U_i (meters, m^2).
inline double sef1(const Vec2& robot, const Vec2& goal, std::span<const Vec2> agents, std::span<const double> u,
                   double d_threshold, double eps = 0.05) {
  if (agents.size() != u.size()) throw std::invalid_argument("sef1: agents and uncertainties differ in length");
  double cost = (robot - goal).squaredNorm();
  for (std::size_t i = 0; i < agents.size(); ++i) {
    cost += proximity_weight((agents[i] - robot).norm(), d_threshold, eps) * u[i];
  }
  return cost;
}

/// As sef1 with every agent term scaled by (1 + |acceleration|).
inline double sef2(const Vec2& robot, const Vec2& goal, std::span<const Vec2> agents, std::span<const double> u,
                   std::span<const double> accel, double d_threshold, double eps = 0.05) {
  if (agents.size() != u.size() || agents.size() != accel.size()) {
    throw std::invalid_argument("sef2: per-agent inputs differ in length");
  }
  double cost = (robot - goal).squaredNorm();
  for (std::size_t i = 0; i < agents.size(); ++i) {
    cost += proximity_weight((agents[i] - robot).norm(), d_threshold, eps) * u[i] * (1.0 + std::abs(accel[i]));
  }
  return cost;
}

inline double reward_from_cost(double cost) { return 1.0 / (1.0 + cost); }

/// Second difference of three consecutive positions, in m/s^2.
inline double accel_magnitude(const Vec2& p0, const Vec2& p1, const Vec2& p2, double dt) {
  return (p2 - 2.0 * p1 + p0).norm() / (dt * dt);
}

// ---------------------------------------------------------------------------
// Root state and transitions

/// What the planner knows at the current frame t.
struct PlanningRoot {
  RobotState robot;
  Vec2 goal = Vec2::Zero();
  std::vector<int> agent_ids;
  std::vector<Vec2> agents_now;   // X^t, meters
  std::vector<Vec2> agents_prev;  // X^{t-1}, meters (X^t when not observed)
  double dt = kFrameDt;
  int timestep = 0;
};

inline PlanningRoot root_from_history(const Episode& history) {
  if (history.empty()) throw std::invalid_argument("root_from_history: empty history");
  const Scene& now = history.back();
  PlanningRoot root;
  root.robot = now.robot;
  root.goal = now.goal;
  root.dt = now.dt;
  root.timestep = now.timestep;
  const Scene* prev = history.size() >= 2 ? &history.frames[history.size() - 2] : nullptr;
  for (const auto& a : now.agents) {
    root.agent_ids.push_back(a.id);
    root.agents_now.push_back(a.position);
    const AgentState* p = prev ? prev->find_agent(a.id) : nullptr;
    root.agents_prev.push_back(p ? p->position : a.position);
  }
  return root;
}

/// Inputs to one single-step simulation.
template <class Scalar>
struct StepInput {
  bool parent_is_root = false;
  int child_depth = 1;
  std::span<const Scalar> parent_state;
  std::span<const Vec2> parent_means;  // meters
  const RobotState* parent_robot = nullptr;
  const RobotState* child_robot = nullptr;
};

template <class Scalar>
struct StepOutput {
  std::span<Scalar> state;
  std::span<Vec2> means;  // meters
  std::span<double> u;    // m^2
};

/// A single-step predictor usable inside the tree. `step` must be callable
/// concurrently with distinct scratch objects.
template <class T>
concept Transition = requires(const T& t, typename T::Scratch& scratch, const StepInput<typename T::Scalar>& in,
                              const StepOutput<typename T::Scalar>& out, std::span<typename T::Scalar> root) {
  { t.state_size() } -> std::convertible_to<std::size_t>;
  { t.agent_count() } -> std::convertible_to<std::size_t>;
  t.root_state(root);
  { t.make_scratch() } -> std::same_as<typename T::Scratch>;
  t.step(scratch, in, out);
};

/// The learned decoder as a transition. Node state is each agent's
/// (h1, c1, h2, c2) stacked agent after agent.
template <class T = float>
class RnnTransition {
 public:
  using Scalar = T;
  struct Scratch {
    ColumnDecoder<T> decoder;
    VectorT<T> input;
  };

  /// `root_hidden` holds one column per agent, in the order of `root.agent_ids`.
  RnnTransition(const ModelParams<double>& model, const PlanningRoot& root, const HiddenState<T>& root_hidden)
      : params_(model.template cast<T>()), norm_(model.meta.norm), delta_t_(model.meta.delta_t) {
    if (delta_t_ && *delta_t_ > 1) {
      throw std::invalid_argument("RnnTransition: planning supports delta_t of none, 0 or 1, got " +
                                  std::to_string(*delta_t_));
    }
    if (root_hidden.n_agents() != static_cast<int>(root.agents_now.size()) ||
        root_hidden.hidden() != params_.shape().hidden) {
      throw ShapeError("RnnTransition: root hidden state does not match the scene");
    }
    const Eigen::Index H = params_.shape().hidden;
    root_state_.resize(static_cast<std::size_t>(4 * H * root_hidden.n_agents()));
    for (int j = 0; j < root_hidden.n_agents(); ++j) {
      T* dst = root_state_.data() + static_cast<std::size_t>(4 * H * j);
      Eigen::Map<VectorT<T>>(dst, H) = root_hidden.h1.col(j);
      Eigen::Map<VectorT<T>>(dst + H, H) = root_hidden.c1.col(j);
      Eigen::Map<VectorT<T>>(dst + 2 * H, H) = root_hidden.h2.col(j);
      Eigen::Map<VectorT<T>>(dst + 3 * H, H) = root_hidden.c2.col(j);
    }
    for (const auto& x : root.agents_now) root_obs_.push_back(norm_.apply(x));
  }

  std::size_t state_size() const { return root_state_.size(); }
  std::size_t agent_count() const { return root_obs_.size(); }
  const ModelParams<T>& params() const { return params_; }

  void root_state(std::span<T> out) const { std::copy(root_state_.begin(), root_state_.end(), out.begin()); }

  Scratch make_scratch() const { return Scratch{ColumnDecoder<T>(params_), VectorT<T>(params_.shape().input_width)}; }

  void step(Scratch& s, const StepInput<T>& in, const StepOutput<T>& out) const {
    const std::size_t block = static_cast<std::size_t>(4 * params_.shape().hidden);
    const int width = params_.shape().input_width;
    Vec2 robot_channel = Vec2::Zero();
    if (delta_t_) robot_channel = norm_.apply(*delta_t_ == 0 ? in.parent_robot->position : in.child_robot->position);
    for (std::size_t j = 0; j < root_obs_.size(); ++j) {
      const Vec2 agent_channel = in.parent_is_root ? root_obs_[j] : Vec2::Zero();
      s.input(0) = static_cast<T>(agent_channel.x());
      s.input(1) = static_cast<T>(agent_channel.y());
      if (width == 4) {
        s.input(2) = static_cast<T>(robot_channel.x());
        s.input(3) = static_cast<T>(robot_channel.y());
      }
      const GaussianParams g = s.decoder.step(std::span<const T>(s.input.data(), static_cast<std::size_t>(width)),
                                              in.parent_state.subspan(j * block, block), out.state.subspan(j * block, block));
      out.means[j] = norm_.invert(g.mu);
      out.u[j] = uncertainty(g) * norm_.area_scale();
    }
  }

 private:
  ModelParams<T> params_;
  NormStats norm_;
  std::optional<int> delta_t_;
  std::vector<T> root_state_;
  std::vector<Vec2> root_obs_;
};

/// Encodes each agent's observed track (frames before the current one, at
/// most `max_history` of them) into its root hidden state. Agents without
/// history start from zeros.
template <class T = float>
HiddenState<T> encode_history(const ModelParams<T>& p, const NormStats& norm, std::optional<int> delta_t,
                              const Episode& history, std::span<const int> agent_ids,
                              int max_history = kMaxEncoderSteps) {
  const int H = p.shape().hidden;
  HiddenState<T> out = HiddenState<T>::zeros(H, static_cast<int>(agent_ids.size()));
  const int t = static_cast<int>(history.size()) - 1;
  const int ahead = delta_t.value_or(0);
  for (std::size_t j = 0; j < agent_ids.size(); ++j) {
    // Longest run of frames ending at t-1 where the agent is visible and the
    // robot lookahead frame is already observed.
    int first = t;
    while (first - 1 >= 0 && t - (first - 1) <= max_history && first - 1 + ahead <= t &&
           history.frames[static_cast<std::size_t>(first - 1)].find_agent(agent_ids[j])) {
      --first;
    }
    if (first >= t) continue;
    std::vector<MatrixT<T>> inputs;
    for (int f = first; f < t; ++f) {
      MatrixT<T> m(p.shape().input_width, 1);
      const Vec2 x = norm.apply(history.frames[static_cast<std::size_t>(f)].find_agent(agent_ids[j])->position);
      m(0, 0) = static_cast<T>(x.x());
      m(1, 0) = static_cast<T>(x.y());
      if (p.shape().input_width == 4) {
        const Vec2 r = norm.apply(history.frames[static_cast<std::size_t>(f + ahead)].robot.position);
        m(2, 0) = static_cast<T>(r.x());
        m(3, 0) = static_cast<T>(r.y());
      }
      inputs.push_back(std::move(m));
    }
    const HiddenState<T> h = encode(p, inputs);
    out.h1.col(static_cast<Eigen::Index>(j)) = h.h1.col(0);
    out.c1.col(static_cast<Eigen::Index>(j)) = h.c1.col(0);
    out.h2.col(static_cast<Eigen::Index>(j)) = h.h2.col(0);
    out.c2.col(static_cast<Eigen::Index>(j)) = h.c2.col(0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tree

struct TreeNode {
  int parent = -1;
  int action = -1;  // index into action_space(); -1 at the root
  int depth = 0;
  double w = 0.0;
  long n = 0;
  int virtual_visits = 0;
  long evaluations = 0;  // rollouts that ended at this node
  double reward = 0.0;   // this node's own state evaluation
  double cost = 0.0;
  bool pending = false;  // expanded in the current batch, not simulated yet
  bool terminal = false;  // predicted contact; never expanded
  std::uint32_t tried = 0;
  int n_tried = 0;
  int reserved = 0;  // expansions claimed by selections in the current batch
  std::array<int, kActionCount> children;
  RobotState robot;

  TreeNode() { children.fill(-1); }
  double n_eff() const { return static_cast<double>(n + virtual_visits); }
  double mean() const { return n > 0 ? w / static_cast<double>(n) : 0.0; }
};

inline double uct_value(const TreeNode& node, double parent_n_eff, double c) {
  return uct_value(node.w, node.n_eff(), parent_n_eff, c);
}

struct RootStat {
  RobotAction action;
  double w = 0.0;
  long n = 0;
};

struct PlanResult {
  RobotAction best_action;
  std::vector<RobotAction> best_plan;
  int iterations = 0;
  std::vector<RootStat> root_values;  // all 25 actions in lexicographic order
  std::size_t nodes = 0;
  std::string warning;
};

/// One selected path end: a node to expand, or a terminal-depth node whose
/// evaluation is backed up again.
struct Selection {
  int node = -1;
  bool expand = false;
};

template <Transition Tr>
class Mcts {
 public:
  using Scalar = typename Tr::Scalar;

  Mcts(PlanningRoot root, const Tr& transition, SearchConfig cfg)
      : root_(std::move(root)), tr_(&transition), cfg_(cfg), rng_(cfg.seed), actions_(action_space()) {
    cfg_.validate();
    if (tr_->agent_count() != root_.agents_now.size() || root_.agents_prev.size() != root_.agents_now.size()) {
      throw std::invalid_argument("Mcts: transition and root disagree on the agent count");
    }
    n_agents_ = root_.agents_now.size();
    state_size_ = tr_->state_size();
    TreeNode r;
    r.robot = root_.robot;
    nodes_.push_back(r);
    states_.resize(state_size_);
    tr_->root_state(std::span<Scalar>(states_.data(), state_size_));
    means_.assign(root_.agents_now.begin(), root_.agents_now.end());
    u_.assign(n_agents_, 0.0);
    for (int i = 0; i < cfg_.threads; ++i) scratch_.push_back(tr_->make_scratch());
  }

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  const SearchConfig& config() const { return cfg_; }
  const PlanningRoot& root() const { return root_; }
  int iterations() const { return iterations_; }
  std::span<const Vec2> means(int i) const {
    return std::span<const Vec2>(means_).subspan(static_cast<std::size_t>(i) * n_agents_, n_agents_);
  }
  std::span<const double> uncertainties(int i) const {
    return std::span<const double>(u_).subspan(static_cast<std::size_t>(i) * n_agents_, n_agents_);
  }

  /// Up to k selections by repeated UCT descent. Each selection adds one
  /// virtual visit to every node on its path, so later descents in the same
  /// batch spread out. Returns fewer than k when no selectable node remains.
  std::vector<Selection> select_k(int k) {
    std::vector<Selection> out;
    std::vector<int> path;
    for (int s = 0; s < k; ++s) {
      path.clear();
      int cur = 0;
      bool found = false;
      bool expand = false;
      while (true) {
        path.push_back(cur);
        TreeNode& nd = nodes_[static_cast<std::size_t>(cur)];
        if (nd.depth >= cfg_.max_depth || nd.terminal) {
          found = cur != 0;
          break;
        }
        if (nd.n_tried + nd.reserved < kActionCount) {
          found = true;
          expand = true;
          break;
        }
        const int next = best_uct_child(cur);
        if (next < 0) break;
        cur = next;
      }
      if (!found) break;
      for (int p : path) ++nodes_[static_cast<std::size_t>(p)].virtual_visits;
      if (expand) ++nodes_[static_cast<std::size_t>(cur)].reserved;
      out.push_back({cur, expand});
    }
    return out;
  }

  /// Adds a child for a uniformly random untried action. Speeds are clamped
  /// by the kinematics, so every action is valid. The child's state is
  /// filled in by simulate_batch.
  std::optional<int> expand(int parent) {
    TreeNode& p = nodes_[static_cast<std::size_t>(parent)];
    if (p.depth >= cfg_.max_depth || p.terminal || p.n_tried >= kActionCount) return std::nullopt;
    if (p.reserved > 0) --p.reserved;
    const int remaining = kActionCount - p.n_tried;
    int pick = std::uniform_int_distribution<int>(0, remaining - 1)(rng_);
    int action = -1;
    for (int a = 0; a < kActionCount; ++a) {
      if (p.tried & (1u << a)) continue;
      if (pick-- == 0) {
        action = a;
        break;
      }
    }
    p.tried |= 1u << action;
    ++p.n_tried;
    TreeNode child;
    child.parent = parent;
    child.action = action;
    child.depth = p.depth + 1;
    child.pending = true;
    child.robot = step_robot(p.robot, actions_[static_cast<std::size_t>(action)], root_.dt);
    const int idx = static_cast<int>(nodes_.size());
    nodes_[static_cast<std::size_t>(parent)].children[static_cast<std::size_t>(action)] = idx;
    nodes_.push_back(child);
    states_.resize(states_.size() + state_size_);
    means_.resize(means_.size() + n_agents_);
    u_.resize(u_.size() + n_agents_);
    return idx;
  }

  /// Single-step simulation and evaluation of freshly expanded children.
  /// Children are independent; with threads > 1 they are split across workers.
  void simulate_batch(std::span<const int> children) {
    const std::size_t workers = std::min<std::size_t>(scratch_.size(), children.size());
    if (workers <= 1) {
      for (int c : children) simulate_one(scratch_.front(), c);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t i = w; i < children.size(); i += workers) simulate_one(scratch_[w], children[i]);
        });
      }
      for (auto& t : pool) t.join();
    }
    for (int c : children) nodes_[static_cast<std::size_t>(c)].pending = false;
  }

  /// Adds `node`'s reward along its path to the root, clearing virtual visits.
  void backup(int node) {
    const double r = nodes_[static_cast<std::size_t>(node)].reward;
    ++nodes_[static_cast<std::size_t>(node)].evaluations;
    for (int cur = node; cur >= 0; cur = nodes_[static_cast<std::size_t>(cur)].parent) {
      TreeNode& nd = nodes_[static_cast<std::size_t>(cur)];
      ++nd.n;
      nd.w += r;
      nd.virtual_visits = 0;
    }
  }

  /// One select / expand / simulate / backup batch. Returns false when the
  /// tree is exhausted.
  bool iterate() {
    const auto sel = select_k(cfg_.k_parallel);
    if (sel.empty()) return false;
    std::vector<int> leaves;
    std::vector<int> fresh;
    leaves.reserve(sel.size());
    for (const auto& s : sel) {
      if (s.expand) {
        const auto child = expand(s.node);
        if (!child) continue;
        fresh.push_back(*child);
        leaves.push_back(*child);
      } else {
        leaves.push_back(s.node);
      }
    }
    simulate_batch(fresh);
    for (int leaf : leaves) backup(leaf);
    for (auto& nd : nodes_) {
      nd.virtual_visits = 0;
      nd.reserved = 0;
    }
    ++iterations_;
    return true;
  }

  /// Runs until the budget expires (checked between batches) or, in
  /// iteration-count mode, for exactly that many batches.
  PlanResult run() {
    const auto start = std::chrono::steady_clock::now();
    const auto budget = std::chrono::nanoseconds(cfg_.budget_ns);
    while (true) {
      if (cfg_.iterations) {
        if (iterations_ >= *cfg_.iterations) break;
      } else if (std::chrono::steady_clock::now() - start >= budget) {
        break;
      }
      if (!iterate()) break;
    }
    return result();
  }

  PlanResult result() const {
    PlanResult res;
    res.iterations = iterations_;
    res.nodes = nodes_.size();
    for (int a = 0; a < kActionCount; ++a) {
      RootStat st;
      st.action = actions_[static_cast<std::size_t>(a)];
      const int c = nodes_.front().children[static_cast<std::size_t>(a)];
      if (c >= 0) {
        st.w = nodes_[static_cast<std::size_t>(c)].w;
        st.n = nodes_[static_cast<std::size_t>(c)].n;
      }
      res.root_values.push_back(st);
    }
    const int best = best_child(0);
    if (best < 0) {
      res.best_action = RobotAction{};
      res.warning = "no search iteration completed; holding speed";
      return res;
    }
    res.best_action = actions_[static_cast<std::size_t>(nodes_[static_cast<std::size_t>(best)].action)];
    for (int cur = best; cur >= 0; cur = best_child(cur)) {
      res.best_plan.push_back(actions_[static_cast<std::size_t>(nodes_[static_cast<std::size_t>(cur)].action)]);
    }
    return res;
  }

  /// Visited child with the highest mean reward; ties go to more visits,
  /// then to the lexicographically smaller action. -1 when none.
  int best_child(int parent) const {
    int best = -1;
    for (int a = 0; a < kActionCount; ++a) {
      const int c = nodes_[static_cast<std::size_t>(parent)].children[static_cast<std::size_t>(a)];
      if (c < 0 || nodes_[static_cast<std::size_t>(c)].n == 0) continue;
      if (best < 0) {
        best = c;
        continue;
      }
      const TreeNode& x = nodes_[static_cast<std::size_t>(c)];
      const TreeNode& y = nodes_[static_cast<std::size_t>(best)];
      if (x.mean() > y.mean() || (x.mean() == y.mean() && x.n > y.n)) best = c;
    }
    return best;
  }

 private:
  int best_uct_child(int parent) const {
    const TreeNode& p = nodes_[static_cast<std::size_t>(parent)];
    int best = -1;
    double best_v = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < kActionCount; ++a) {
      const int c = p.children[static_cast<std::size_t>(a)];
      if (c < 0) continue;
      const TreeNode& ch = nodes_[static_cast<std::size_t>(c)];
      if (ch.pending) continue;
      const double v = uct_value(ch, p.n_eff(), cfg_.c_uct);
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    return best;
  }

  // Positions two steps above `node` (the root's parent is X^{t-1}).
  std::span<const Vec2> grandparent_means(int node) const {
    const int parent = nodes_[static_cast<std::size_t>(node)].parent;
    const int gp = nodes_[static_cast<std::size_t>(parent)].parent;
    if (gp < 0) return root_.agents_prev;
    return means(gp);
  }

  void simulate_one(typename Tr::Scratch& scratch, int c) {
    TreeNode& ch = nodes_[static_cast<std::size_t>(c)];
    const TreeNode& p = nodes_[static_cast<std::size_t>(ch.parent)];
    const std::size_t ci = static_cast<std::size_t>(c);
    const std::size_t pi = static_cast<std::size_t>(ch.parent);
    StepInput<Scalar> in;
    in.parent_is_root = ch.parent == 0;
    in.child_depth = ch.depth;
    in.parent_state = std::span<const Scalar>(states_.data() + pi * state_size_, state_size_);
    in.parent_means = means(ch.parent);
    in.parent_robot = &p.robot;
    in.child_robot = &ch.robot;
    StepOutput<Scalar> out;
    out.state = std::span<Scalar>(states_.data() + ci * state_size_, state_size_);
    out.means = std::span<Vec2>(means_.data() + ci * n_agents_, n_agents_);
    out.u = std::span<double>(u_.data() + ci * n_agents_, n_agents_);
    tr_->step(scratch, in, out);
    if (cfg_.sef == SefKind::kSef1) {
      ch.cost = sef1(ch.robot.position, root_.goal, out.means, out.u, cfg_.d_threshold, cfg_.alpha_eps);
    } else {
      const auto p1 = means(ch.parent);
      const auto p0 = grandparent_means(c);
      std::vector<double> acc(n_agents_);
      for (std::size_t i = 0; i < n_agents_; ++i) acc[i] = accel_magnitude(p0[i], p1[i], out.means[i], root_.dt);
      ch.cost = sef2(ch.robot.position, root_.goal, out.means, out.u, acc, cfg_.d_threshold, cfg_.alpha_eps);
    }
    ch.reward = reward_from_cost(ch.cost);
    if (cfg_.collision_radius > 0) {
      for (const Vec2& m : out.means) {
        if ((m - ch.robot.position).norm() < cfg_.collision_radius) {
          ch.terminal = true;
          ch.reward = 0.0;
          break;
        }
      }
    }
  }

  PlanningRoot root_;
  const Tr* tr_;
  SearchConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<RobotAction> actions_;
  std::size_t n_agents_ = 0;
  std::size_t state_size_ = 0;
  std::vector<TreeNode> nodes_;
  std::vector<Scalar> states_;
  std::vector<Vec2> means_;
  std::vector<double> u_;
  std::vector<typename Tr::Scratch> scratch_;
  int iterations_ = 0;
};

template <Transition Tr>
PlanResult search(const PlanningRoot& root, const Tr& transition, const SearchConfig& cfg) {
  Mcts<Tr> tree(root, transition, cfg);
  return tree.run();
}

/// Builds the learned-model transition for the current frame of `history`.
template <class T = float>
RnnTransition<T> make_rnn_transition(const ModelParams<double>& model, const ModelParams<T>& model_t,
                                     const PlanningRoot& root, const Episode& history) {
  const HiddenState<T> h = encode_history(model_t, model.meta.norm, model.meta.delta_t, history, root.agent_ids);
  return RnnTransition<T>(model, root, h);
}

// ---------------------------------------------------------------------------
// Receding horizon

enum class Outcome { kSuccess, kCollision, kTimeout };

inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::kSuccess: return "success";
    case Outcome::kCollision: return "collision";
    case Outcome::kTimeout: return "timeout";
  }
  return "unknown";
}

inline Outcome outcome_from_string(const std::string& s) {
  if (s == "success") return Outcome::kSuccess;
  if (s == "collision") return Outcome::kCollision;
  if (s == "timeout") return Outcome::kTimeout;
  throw std::invalid_argument("unknown outcome '" + s + "'");
}

/// Chooses the next action from the observed history (last frame = now).
using PlanFn = std::function<PlanResult(const Episode& history)>;

struct RunResult {
  Episode episode;
  Outcome outcome = Outcome::kTimeout;
  std::vector<double> cycle_seconds;
  int planner_iterations = 0;  // summed over cycles
  std::vector<std::string> warnings;
};

inline nlohmann::json plan_trace_line(int step, const Scene& now, const PlanResult& plan) {
  nlohmann::json j;
  j["step"] = step;
  j["robot"] = {now.robot.position.x(), now.robot.position.y(), now.robot.heading, now.robot.speed};
  j["iterations"] = plan.iterations;
  j["action"] = {plan.best_action.accel, plan.best_action.yaw_change};
  nlohmann::json root = nlohmann::json::array();
  for (const auto& r : plan.root_values) root.push_back({r.action.accel, r.action.yaw_change, r.w, r.n});
  j["root"] = root;
  nlohmann::json best = nlohmann::json::array();
  for (const auto& a : plan.best_plan) best.push_back({a.accel, a.yaw_change});
  j["plan"] = best;
  if (!plan.warning.empty()) j["warning"] = plan.warning;
  return j;
}

/// Plan, execute the first action, observe, repeat. Stops on reaching the
/// goal, on a robot-agent collision or after `max_steps` cycles.
inline RunResult receding_horizon(OrcaWorld& world, const PlanFn& planner, int max_steps,
                                  std::ostream* trace = nullptr) {
  RunResult res;
  const double goal_radius = world.world_config().goal_radius;
  auto at_goal = [&](const Scene& s) { return (s.robot.position - s.goal).norm() <= goal_radius; };
  if (check_collision(world.current())) {
    res.outcome = Outcome::kCollision;
  } else if (at_goal(world.current())) {
    res.outcome = Outcome::kSuccess;
  } else {
    res.outcome = Outcome::kTimeout;
    for (int step = 0; step < max_steps; ++step) {
      const auto t0 = std::chrono::steady_clock::now();
      const PlanResult plan = planner(world.episode());
      res.cycle_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      res.planner_iterations += plan.iterations;
      if (!plan.warning.empty()) res.warnings.push_back("step " + std::to_string(step) + ": " + plan.warning);
      if (trace) *trace << plan_trace_line(step, world.current(), plan).dump() << '\n';
      const Scene& next = world.step(plan.best_action);
      if (check_collision(next)) {
        res.outcome = Outcome::kCollision;
        break;
      }
      if (at_goal(next)) {
        res.outcome = Outcome::kSuccess;
        break;
      }
    }
  }
  res.episode = world.episode();
  return res;
}

/// MCTS with the learned decoder. The per-cycle seed is derived from the
/// configured seed and the frame index.
inline PlanFn mcts_rnn_planner(std::shared_ptr<const ModelParams<double>> model, SearchConfig cfg) {
  if (!model) throw std::invalid_argument("mcts_rnn_planner: no model");
  cfg.validate();
  auto model_f = std::make_shared<const ModelParams<float>>(model->cast<float>());
  return [model, model_f, cfg](const Episode& history) {
    const PlanningRoot root = root_from_history(history);
    const auto tr = make_rnn_transition<float>(*model, *model_f, root, history);
    SearchConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(root.timestep) * 0x9E3779B97F4A7C15ULL;
    return search(root, tr, c);
  };
}

}  // namespace crowdplan
