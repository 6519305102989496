#pragma once

// Trajectory datasets: CSV ingestion, normalisation, windowing into
// encoder/decoder samples, episode-level k-fold splits, and displacement
// metrics.

#include "crowdplan/world.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <cctype>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdplan {

inline constexpr int kPredictionSteps = 8;
inline constexpr int kMinEncoderSteps = 8;
inline constexpr int kMaxEncoderSteps = 20;

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// CSV episodes: `frame,id,kind,x,y`, kind in {agent, robot}. An optional
// leading comment `# frame_rate=<hz>` declares the source rate (default 5 Hz).

namespace trajdata_detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

struct Track {
  std::map<long, Vec2> points;  // source frame -> position
};

inline std::optional<Vec2> interpolate(const Track& track, double frame) {
  auto hi = track.points.lower_bound(static_cast<long>(std::ceil(frame)));
  if (hi == track.points.end()) return std::nullopt;
  if (static_cast<double>(hi->first) == frame) return hi->second;
  if (hi == track.points.begin()) return std::nullopt;
  auto lo = std::prev(hi);
  // Gaps longer than one source frame are not bridged.
  if (hi->first - lo->first > 1) return std::nullopt;
  const double t = (frame - static_cast<double>(lo->first)) / static_cast<double>(hi->first - lo->first);
  return Vec2((1.0 - t) * lo->second + t * hi->second);
}

}  // namespace trajdata_detail

/// Parses one episode. Sources recorded at another rate are resampled to
/// 5 Hz by linear interpolation. Velocities and robot heading/speed are
/// reconstructed by finite differences.
inline Episode parse_episode_csv(std::istream& in, const WorldConfig& world = {},
                                 std::optional<double> source_rate = std::nullopt) {
  using namespace trajdata_detail;
  std::string line;
  std::size_t line_no = 0;
  double rate = 1.0 / kFrameDt;
  bool header_seen = false;
  std::map<int, Track> agents;
  Track robot;
  long last_frame = std::numeric_limits<long>::min();

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '#') {
      const auto pos = t.find("frame_rate=");
      if (pos != std::string::npos) {
        try {
          rate = std::stod(t.substr(pos + 11));
        } catch (const std::exception&) {
          throw ParseError("bad frame_rate comment", line_no);
        }
        if (!(rate > 0)) throw ParseError("frame_rate must be positive", line_no);
      }
      continue;
    }
    if (!header_seen) {
      if (t != "frame,id,kind,x,y") throw ParseError("expected header 'frame,id,kind,x,y'", line_no);
      header_seen = true;
      continue;
    }
    const auto cells = split_csv(t);
    if (cells.size() != 5) throw ParseError("expected 5 fields, got " + std::to_string(cells.size()), line_no);
    long frame = 0;
    int id = 0;
    double x = 0, y = 0;
    try {
      std::size_t used = 0;
      frame = std::stol(cells[0], &used);
      if (used != cells[0].size()) throw std::invalid_argument("frame");
      id = std::stoi(cells[1], &used);
      if (used != cells[1].size()) throw std::invalid_argument("id");
      x = std::stod(cells[3]);
      y = std::stod(cells[4]);
    } catch (const std::exception&) {
      throw ParseError("malformed numeric field", line_no);
    }
    if (!std::isfinite(x) || !std::isfinite(y)) throw ParseError("non-finite coordinate", line_no);
    if (frame < last_frame) throw FormatError("frames are not monotone at line " + std::to_string(line_no));
    last_frame = frame;
    const std::string kind = trim(cells[2]);
    Track* track = nullptr;
    if (kind == "agent") {
      track = &agents[id];
    } else if (kind == "robot") {
      track = &robot;
    } else {
      throw ParseError("kind must be 'agent' or 'robot'", line_no);
    }
    if (!track->points.emplace(frame, Vec2(x, y)).second) {
      throw FormatError("duplicate frame " + std::to_string(frame) + " for one track at line " +
                        std::to_string(line_no));
    }
  }
  if (!header_seen) throw ParseError("missing header", line_no + 1);
  if (source_rate) rate = *source_rate;
  if (robot.points.empty()) throw FormatError("episode has no robot track");

  const double step = rate * kFrameDt;  // source frames per output frame
  const double first = static_cast<double>(robot.points.begin()->first);
  const double last = static_cast<double>(robot.points.rbegin()->first);

  Episode ep;
  ep.metadata.frame_rate = 1.0 / kFrameDt;
  ep.metadata.scenario = "csv";
  std::vector<double> sample_frames;
  for (double f = first; f <= last + 1e-9; f += step) sample_frames.push_back(f);

  for (std::size_t k = 0; k < sample_frames.size(); ++k) {
    const double f = sample_frames[k];
    const auto rpos = interpolate(robot, f);
    if (!rpos) throw FormatError("robot track has a gap near frame " + std::to_string(static_cast<long>(f)));
    Scene scene;
    scene.timestep = static_cast<int>(k);
    scene.dt = kFrameDt;
    scene.robot.position = *rpos;
    scene.robot.radius = world.robot_radius;
    for (const auto& [id, track] : agents) {
      if (const auto p = interpolate(track, f)) {
        AgentState a;
        a.id = id;
        a.position = *p;
        a.radius = world.agent_radius;
        scene.agents.push_back(a);
        scene.agent_goals.push_back(*p);
      }
    }
    scene.goal = robot.points.rbegin()->second;
    ep.frames.push_back(std::move(scene));
  }

  // Finite-difference kinematics.
  for (std::size_t k = 0; k < ep.frames.size(); ++k) {
    Scene& s = ep.frames[k];
    if (k > 0) {
      const Scene& prev = ep.frames[k - 1];
      const Vec2 d = s.robot.position - prev.robot.position;
      s.robot.speed = std::min(d.norm() / kFrameDt, world.v_max_robot);
      s.robot.heading = d.norm() > 1e-9 ? normalize_angle(std::atan2(d.y(), d.x())) : prev.robot.heading;
      for (auto& a : s.agents) {
        if (const auto* p = prev.find_agent(a.id)) a.velocity = (a.position - p->position) / kFrameDt;
      }
    }
  }
  if (ep.frames.size() > 1) ep.frames[0].robot.heading = ep.frames[1].robot.heading;
  return ep;
}

inline Episode load_episode_csv(const std::filesystem::path& path, const WorldConfig& world = {},
                                std::optional<double> source_rate = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_episode_csv(in, world, source_rate);
}

inline void write_episode_csv(std::ostream& out, const Episode& ep) {
  out << "frame,id,kind,x,y\n";
  out << std::setprecision(17);
  for (std::size_t k = 0; k < ep.frames.size(); ++k) {
    const Scene& s = ep.frames[k];
    for (const auto& a : s.agents) out << k << ',' << a.id << ",agent," << a.position.x() << ',' << a.position.y() << '\n';
    out << k << ",-1,robot," << s.robot.position.x() << ',' << s.robot.position.y() << '\n';
  }
}

inline void save_episode_csv(const std::filesystem::path& path, const Episode& ep) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_episode_csv(out, ep);
}

/// Episode files in a directory, in lexicographic filename order.
inline std::vector<Episode> load_episode_dir(const std::filesystem::path& dir, const WorldConfig& world = {}) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Episode> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_episode_csv(f, world));
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation

/// Per-axis affine normalisation shared by the agent and robot channels.
struct NormStats {
  Vec2 mean = Vec2::Zero();
  Vec2 std = Vec2::Ones();

  Vec2 apply(const Vec2& p) const { return (p - mean).cwiseQuotient(std); }
  Vec2 invert(const Vec2& q) const { return q.cwiseProduct(std) + mean; }
  double area_scale() const { return std.x() * std.y(); }
};

/// Population mean/std over every agent and robot position in the episodes.
inline NormStats fit_normalizer(const std::vector<const Episode*>& episodes) {
  if (episodes.empty()) throw std::invalid_argument("fit_normalizer: no episodes");
  Vec2 sum = Vec2::Zero();
  double count = 0;
  for (const Episode* ep : episodes) {
    for (const Scene& s : ep->frames) {
      for (const auto& a : s.agents) sum += a.position;
      sum += s.robot.position;
      count += static_cast<double>(s.agents.size() + 1);
    }
  }
  if (count == 0) throw std::invalid_argument("fit_normalizer: no positions");
  NormStats out;
  out.mean = sum / count;
  Vec2 sq = Vec2::Zero();
  for (const Episode* ep : episodes) {
    for (const Scene& s : ep->frames) {
      for (const auto& a : s.agents) sq += (a.position - out.mean).cwiseAbs2();
      sq += (s.robot.position - out.mean).cwiseAbs2();
    }
  }
  out.std = (sq / count).cwiseSqrt();
  if (!(out.std.x() > 1e-12) || !(out.std.y() > 1e-12)) {
    throw std::invalid_argument("fit_normalizer: zero-variance dimension");
  }
  return out;
}

inline NormStats fit_normalizer(const std::vector<Episode>& episodes) {
  std::vector<const Episode*> ptrs;
  for (const auto& e : episodes) ptrs.push_back(&e);
  return fit_normalizer(ptrs);
}

// ---------------------------------------------------------------------------
// Samples

/// One encoder/decoder training window, normalised.
///
/// Frames s .. s+L are observed (T_obs = s+L); the encoder consumes frames
/// s .. s+L-1 paired with the robot position Delta-t frames ahead, the
/// decoder is seeded with X at T_obs and predicts frames T_obs+1 .. T_obs+8.
struct Sample {
  std::vector<int> agent_ids;
  int l_enc = 0;
  std::optional<int> delta_t;
  std::vector<Eigen::Matrix2Xd> agent_pos;  // l_enc + 1 + 8 frames, 2 x N each
  Eigen::Matrix2Xd robot_ahead;             // 2 x (l_enc + 8): robot at tau + delta_t
  Vec2 robot_at_obs = Vec2::Zero();         // meters, for distance filtering
  std::size_t episode = 0;
  int start_frame = 0;

  int n_agents() const { return static_cast<int>(agent_ids.size()); }
  int input_width() const { return delta_t ? 4 : 2; }

  /// width x N encoder input at step k (0 <= k < l_enc).
  Eigen::MatrixXd enc_input(int k) const {
    Eigen::MatrixXd m(input_width(), n_agents());
    m.topRows<2>() = agent_pos[static_cast<std::size_t>(k)];
    if (delta_t) m.bottomRows<2>() = robot_ahead.col(k).replicate(1, n_agents());
    return m;
  }
  const Eigen::Matrix2Xd& dec_seed() const { return agent_pos[static_cast<std::size_t>(l_enc)]; }
  /// Robot action channel for decoder step j (0 <= j < 8).
  Vec2 dec_robot(int j) const { return robot_ahead.col(l_enc + j); }
  const Eigen::Matrix2Xd& target(int j) const { return agent_pos[static_cast<std::size_t>(l_enc + 1 + j)]; }

  /// Same prediction window with only the last `l` encoder steps.
  Sample truncated(int l) const {
    if (l < 1 || l > l_enc) throw std::invalid_argument("Sample::truncated: bad length");
    Sample out = *this;
    const int drop = l_enc - l;
    out.l_enc = l;
    out.start_frame = start_frame + drop;
    out.agent_pos.erase(out.agent_pos.begin(), out.agent_pos.begin() + drop);
    out.robot_ahead = robot_ahead.rightCols(robot_ahead.cols() - drop);
    return out;
  }
};

/// Frames needed by one window with `l_enc` encoder steps.
inline int window_frames(int l_enc, std::optional<int> delta_t) {
  const int agents_need = l_enc + 1 + kPredictionSteps;
  const int robot_need = l_enc + kPredictionSteps + delta_t.value_or(0);
  return std::max(agents_need, robot_need);
}

struct WindowOptions {
  int l_min = kMaxEncoderSteps;
  int l_max = kMaxEncoderSteps;
  int stride = 1;
};

/// Sliding windows over each episode for every encoder length in
/// [l_min, l_max]. An agent enters a window only if it is present in every
/// frame the window spans.
inline std::vector<Sample> make_samples(const std::vector<const Episode*>& episodes, std::optional<int> delta_t,
                                        const NormStats& norm, const WindowOptions& opt = {}) {
  if (delta_t && *delta_t < 0) throw std::invalid_argument("make_samples: delta_t must be >= 0");
  if (opt.l_min < 1 || opt.l_max < opt.l_min || opt.stride < 1) {
    throw std::invalid_argument("make_samples: bad window options");
  }
  std::vector<Sample> out;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Episode& ep = *episodes[e];
    const int n_frames = static_cast<int>(ep.size());
    for (int l = opt.l_min; l <= opt.l_max; ++l) {
      const int span = window_frames(l, delta_t);
      for (int s = 0; s + span <= n_frames; s += opt.stride) {
        const int agent_frames = l + 1 + kPredictionSteps;
        std::vector<int> ids;
        for (const auto& a : ep.frames[static_cast<std::size_t>(s)].agents) {
          bool present = true;
          for (int f = s + 1; f < s + agent_frames && present; ++f) {
            present = ep.frames[static_cast<std::size_t>(f)].find_agent(a.id) != nullptr;
          }
          if (present) ids.push_back(a.id);
        }
        if (ids.empty()) continue;
        Sample smp;
        smp.agent_ids = ids;
        smp.l_enc = l;
        smp.delta_t = delta_t;
        smp.episode = e;
        smp.start_frame = s;
        smp.agent_pos.resize(static_cast<std::size_t>(agent_frames));
        for (int f = 0; f < agent_frames; ++f) {
          const Scene& sc = ep.frames[static_cast<std::size_t>(s + f)];
          Eigen::Matrix2Xd m(2, static_cast<Eigen::Index>(ids.size()));
          for (std::size_t i = 0; i < ids.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = norm.apply(sc.find_agent(ids[i])->position);
          smp.agent_pos[static_cast<std::size_t>(f)] = std::move(m);
        }
        const int ahead = delta_t.value_or(0);
        smp.robot_ahead.resize(2, l + kPredictionSteps);
        for (int k = 0; k < l + kPredictionSteps; ++k) {
          smp.robot_ahead.col(k) = norm.apply(ep.frames[static_cast<std::size_t>(s + k + ahead)].robot.position);
        }
        smp.robot_at_obs = ep.frames[static_cast<std::size_t>(s + l)].robot.position;
        out.push_back(std::move(smp));
      }
    }
  }
  return out;
}

inline std::vector<Sample> make_samples(const std::vector<Episode>& episodes, std::optional<int> delta_t,
                                        const NormStats& norm, const WindowOptions& opt = {}) {
  std::vector<const Episode*> ptrs;
  for (const auto& e : episodes) ptrs.push_back(&e);
  return make_samples(ptrs, delta_t, norm, opt);
}

// ---------------------------------------------------------------------------
// Episode-level k-fold split

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct KFold {
  std::vector<std::vector<std::size_t>> folds;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  /// Fold `test_fold` held out; 20% of the remaining episodes for validation.
  FoldSplit split(std::size_t test_fold) const {
    if (test_fold >= folds.size()) throw std::out_of_range("KFold::split: fold index");
    FoldSplit out;
    out.test = folds[test_fold];
    std::vector<std::size_t> rest;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      if (f != test_fold) rest.insert(rest.end(), folds[f].begin(), folds[f].end());
    }
    std::mt19937_64 rng(seed ^ (0xA5A5A5A5ULL + test_fold));
    std::shuffle(rest.begin(), rest.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(rest.size())));
    out.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
    out.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
  }
};

inline KFold kfold_split(std::size_t n_episodes, int k, std::uint64_t seed, double val_fraction = 0.2) {
  if (k < 2) throw std::invalid_argument("kfold_split: k must be >= 2");
  if (n_episodes < static_cast<std::size_t>(k)) {
    throw std::invalid_argument("kfold_split: fewer episodes (" + std::to_string(n_episodes) + ") than folds (" +
                                std::to_string(k) + ")");
  }
  std::vector<std::size_t> idx(n_episodes);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  KFold out;
  out.seed = seed;
  out.val_fraction = val_fraction;
  out.folds.resize(static_cast<std::size_t>(k));
  const std::size_t base = n_episodes / static_cast<std::size_t>(k);
  const std::size_t extra = n_episodes % static_cast<std::size_t>(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < out.folds.size(); ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    out.folds[f].assign(idx.begin() + static_cast<std::ptrdiff_t>(pos), idx.begin() + static_cast<std::ptrdiff_t>(pos + len));
    std::sort(out.folds[f].begin(), out.folds[f].end());
    pos += len;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Displacement metrics (meters)

struct DisplacementError {
  double ade = 0.0;
  double fde = 0.0;
  std::size_t n_agents = 0;
};

/// Pools displacement errors over many windows. Agents enter only if their
/// ground-truth distance to the robot at T_obs is within the filter radius.
class DisplacementAccumulator {
 public:
  explicit DisplacementAccumulator(std::optional<double> filter_m = std::nullopt) : filter_(filter_m) {}

  /// `pred` and `truth` hold one 2 x N matrix per prediction step.
  void add(const std::vector<Eigen::Matrix2Xd>& pred, const std::vector<Eigen::Matrix2Xd>& truth,
           const Eigen::Matrix2Xd& truth_at_obs, const Vec2& robot_at_obs) {
    if (pred.size() != truth.size() || pred.empty()) throw std::invalid_argument("ade_fde: step count mismatch");
    const Eigen::Index n = truth.front().cols();
    for (std::size_t t = 0; t < pred.size(); ++t) {
      if (pred[t].cols() != n || truth[t].cols() != n) throw std::invalid_argument("ade_fde: agent count mismatch");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      if (filter_ && (truth_at_obs.col(i) - robot_at_obs).norm() > *filter_) continue;
      for (std::size_t t = 0; t < pred.size(); ++t) {
        const double err = (pred[t].col(i) - truth[t].col(i)).norm();
        sum_ += err;
        ++pairs_;
        if (t + 1 == pred.size()) final_sum_ += err;
      }
      ++agents_;
    }
  }

  /// Absent when no agent passed the filter.
  std::optional<DisplacementError> result() const {
    if (agents_ == 0) return std::nullopt;
    return DisplacementError{sum_ / static_cast<double>(pairs_), final_sum_ / static_cast<double>(agents_), agents_};
  }

 private:
  std::optional<double> filter_;
  double sum_ = 0.0;
  double final_sum_ = 0.0;
  std::size_t pairs_ = 0;
  std::size_t agents_ = 0;
};

inline std::optional<DisplacementError> ade_fde(const std::vector<Eigen::Matrix2Xd>& pred,
                                                const std::vector<Eigen::Matrix2Xd>& truth,
                                                const Eigen::Matrix2Xd& truth_at_obs, const Vec2& robot_at_obs,
                                                std::optional<double> filter_m = std::nullopt) {
  DisplacementAccumulator acc(filter_m);
  acc.add(pred, truth, truth_at_obs, robot_at_obs);
  return acc.result();
}

/// Fixed-precision decimal used in every CSV the tools emit.
inline std::string fmt_fixed(double v, int digits = 6) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  std::string s = ss.str();
  if (s == "-" + std::string("0.") + std::string(static_cast<std::size_t>(digits), '0')) s.erase(0, 1);
  return s;
}

struct MetricsRow {
  std::optional<int> delta_t;
  std::optional<double> filter_m;
  std::optional<DisplacementError> error;
};

inline std::string delta_t_label(std::optional<int> dt) { return dt ? std::to_string(*dt) : "none"; }

/// `delta_t,filter_m,ade,fde,n_agents`; filter_m empty when unfiltered, metric
/// cells empty when no agent passed the filter.
inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "delta_t,filter_m,ade,fde,n_agents\n";
  for (const auto& r : rows) {
    out << delta_t_label(r.delta_t) << ',' << (r.filter_m ? fmt_fixed(*r.filter_m, 1) : "") << ',';
    if (r.error) {
      out << fmt_fixed(r.error->ade) << ',' << fmt_fixed(r.error->fde) << ',' << r.error->n_agents << '\n';
    } else {
      out << ",,0\n";
    }
  }
}

}  // namespace crowdplan
