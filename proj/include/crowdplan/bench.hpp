#pragma once

// Experiment harness: the lookahead sweep for the prediction model, the
// planner comparison, their summaries and the report files (CSV, JSON, text
// table, SVG plots).

#include "crowdplan/baselines.hpp"
#include "crowdplan/kvconfig.hpp"
#include "crowdplan/orca.hpp"
#include "crowdplan/planner.hpp"
#include "crowdplan/seqmodel.hpp"
#include "crowdplan/trajdata.hpp"
#include "crowdplan/world.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace crowdplan {

using LogFn = std::function<void(const std::string&)>;

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::optional<int> parse_delta_t(const std::string& s) {
  if (s == "none" || s == "None" || s == "-") return std::nullopt;
  std::size_t pos = 0;
  const int v = std::stoi(s, &pos);
  if (pos != s.size() || v < 0) throw std::invalid_argument("bad delta_t '" + s + "'");
  return v;
}

inline std::optional<double> parse_threshold(const std::string& s) {
  if (s == "inf" || s == "none" || s.empty()) return std::nullopt;
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size() || !(v > 0)) throw std::invalid_argument("bad distance threshold '" + s + "'");
  return v;
}

inline std::string threshold_label(std::optional<double> t) { return t ? fmt_fixed(*t, 1) : ""; }

// ---------------------------------------------------------------------------
// Lookahead sweep

struct SweepConfig {
  std::vector<std::optional<int>> delta_ts{std::nullopt, 0, 1, 2, 3, 4, 5};
  std::vector<std::optional<double>> thresholds{std::nullopt, 5.0, 2.0, 1.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int folds = 5;
  std::size_t test_fold = 0;
  std::uint64_t split_seed = 0;
  TrainConfig train;
  int window_stride = 1;  // training and validation windows
  int eval_stride = 1;    // test windows
  std::filesystem::path model_dir;  // when set, trained models and curves are written (and reused) here
};

struct SweepRow {
  std::optional<int> delta_t;
  std::optional<double> filter_m;
  std::uint64_t seed = 0;
  std::optional<DisplacementError> error;
  bool diverged = false;
};

struct FoldData {
  FoldSplit split;
  NormStats norm;
};

inline FoldData prepare_fold(const std::vector<Episode>& episodes, int folds, std::size_t test_fold,
                             std::uint64_t split_seed) {
  FoldData fd;
  fd.split = kfold_split(episodes.size(), folds, split_seed).split(test_fold);
  std::vector<const Episode*> train;
  for (auto i : fd.split.train) train.push_back(&episodes[i]);
  fd.norm = fit_normalizer(train);
  return fd;
}

inline std::vector<const Episode*> pick(const std::vector<Episode>& episodes, const std::vector<std::size_t>& idx) {
  std::vector<const Episode*> out;
  for (auto i : idx) out.push_back(&episodes[i]);
  return out;
}

/// Trains one model on the training part of `fold`, choosing the epoch by
/// validation loss.
inline TrainResult train_on_fold(const std::vector<Episode>& episodes, const FoldData& fold,
                                 std::optional<int> delta_t, TrainConfig cfg, int window_stride = 1,
                                 const std::function<void(const CurvePoint&)>& on_epoch = {}) {
  const WindowOptions opt{cfg.l_max, cfg.l_max, window_stride};
  const auto train_samples = make_samples(pick(episodes, fold.split.train), delta_t, fold.norm, opt);
  const auto val_samples = make_samples(pick(episodes, fold.split.val), delta_t, fold.norm, opt);
  if (train_samples.empty()) throw std::runtime_error("train_on_fold: no training windows (episodes too short?)");
  return train<float>(train_samples, val_samples, cfg, ModelMeta{delta_t, fold.norm}, nullptr, on_epoch);
}

/// ADE/FDE of mean rollouts on the given episodes, one entry per threshold.
inline std::vector<DisplacementAccumulator> evaluate_model(const ModelParams<double>& model,
                                                           const std::vector<const Episode*>& episodes,
                                                           const std::vector<std::optional<double>>& thresholds,
                                                           int stride = 1) {
  std::vector<DisplacementAccumulator> acc;
  for (const auto& t : thresholds) acc.emplace_back(t);
  const WindowOptions opt{kMaxEncoderSteps, kMaxEncoderSteps, stride};
  const auto samples = make_samples(episodes, model.meta.delta_t, model.meta.norm, opt);
  for (const auto& s : samples) {
    const auto pred = predict_rollout(model, s);
    const auto [truth, at_obs] = sample_truth(s, model.meta.norm);
    for (auto& a : acc) a.add(pred, truth, at_obs, s.robot_at_obs);
  }
  return acc;
}

inline std::string model_stem(std::optional<int> delta_t, std::uint64_t seed) {
  return "model_dt-" + delta_t_label(delta_t) + "_seed-" + std::to_string(seed);
}

/// Trains (or loads from cfg.model_dir) one model per (delta_t, seed) on the
/// training folds and evaluates it on the held-out fold.
inline std::vector<SweepRow> run_delta_t_sweep(const std::vector<Episode>& episodes, const SweepConfig& cfg,
                                               const LogFn& log = {}) {
  if (cfg.delta_ts.empty() || cfg.thresholds.empty() || cfg.seeds.empty()) {
    throw std::invalid_argument("run_delta_t_sweep: empty delta_t, threshold or seed list");
  }
  const FoldData fold = prepare_fold(episodes, cfg.folds, cfg.test_fold, cfg.split_seed);
  const auto test = pick(episodes, fold.split.test);
  std::vector<SweepRow> rows;
  for (const auto& dt : cfg.delta_ts) {
    for (const auto seed : cfg.seeds) {
      const std::string stem = model_stem(dt, seed);
      std::optional<ModelParams<double>> model;
      bool diverged = false;
      const auto model_path = cfg.model_dir.empty() ? std::filesystem::path() : cfg.model_dir / (stem + ".cprnn");
      if (!model_path.empty() && std::filesystem::exists(model_path)) {
        model = load_model(model_path);
        if (log) log("loaded " + model_path.string());
      } else {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        try {
          auto res = train_on_fold(episodes, fold, dt, tc, cfg.window_stride, [&](const CurvePoint& p) {
            if (log) {
              log(stem + " epoch " + std::to_string(p.epoch) + " train " + fmt_fixed(p.train_loss, 4) + " val " +
                  fmt_fixed(p.val_loss, 4));
            }
          });
          model = std::move(res.params);
          if (!model_path.empty()) {
            std::filesystem::create_directories(cfg.model_dir);
            save_model(model_path, *model);
            std::ofstream curve(cfg.model_dir / (stem + "_curve.csv"));
            write_curve_csv(curve, res.curve);
          }
        } catch (const TrainingDiverged& e) {
          diverged = true;
          if (log) log(stem + " diverged: " + e.what());
        }
      }
      std::vector<DisplacementAccumulator> acc;
      if (model) acc = evaluate_model(*model, test, cfg.thresholds, cfg.eval_stride);
      for (std::size_t t = 0; t < cfg.thresholds.size(); ++t) {
        SweepRow r;
        r.delta_t = dt;
        r.filter_m = cfg.thresholds[t];
        r.seed = seed;
        r.diverged = diverged;
        if (model) r.error = acc[t].result();
        rows.push_back(r);
      }
    }
  }
  return rows;
}

/// `delta_t,filter_m,seed,ade,fde`. A diverged run has "diverged" in both
/// metric cells; an empty filtered set leaves them blank.
inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "delta_t,filter_m,seed,ade,fde\n";
  for (const auto& r : rows) {
    out << delta_t_label(r.delta_t) << ',' << threshold_label(r.filter_m) << ',' << r.seed << ',';
    if (r.diverged) {
      out << "diverged,diverged\n";
    } else if (r.error) {
      out << fmt_fixed(r.error->ade) << ',' << fmt_fixed(r.error->fde) << '\n';
    } else {
      out << ",\n";
    }
  }
}

inline std::vector<SweepRow> read_sweep_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || KvConfig::strip(line) != "delta_t,filter_m,seed,ade,fde") {
    throw FormatError("sweep CSV: missing header");
  }
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (KvConfig::strip(line).empty()) continue;
    const auto f = trajdata_detail::split_csv(line);
    if (f.size() != 5) throw FormatError("sweep CSV: expected 5 fields");
    SweepRow r;
    r.delta_t = parse_delta_t(f[0]);
    r.filter_m = parse_threshold(f[1]);
    r.seed = std::stoull(f[2]);
    if (f[3] == "diverged") {
      r.diverged = true;
    } else if (!f[3].empty()) {
      r.error = DisplacementError{std::stod(f[3]), std::stod(f[4]), 0};
    }
    rows.push_back(r);
  }
  return rows;
}

/// Pools the seeds of each (delta_t, threshold) cell, weighting by agent count.
inline std::vector<MetricsRow> pooled_metrics(const std::vector<SweepRow>& rows) {
  std::vector<MetricsRow> out;
  std::vector<std::array<double, 3>> acc;  // sum ade*n, sum fde*n, sum n
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const MetricsRow& m) { return m.delta_t == r.delta_t && m.filter_m == r.filter_m; });
    if (it == out.end()) {
      out.push_back({r.delta_t, r.filter_m, std::nullopt});
      acc.push_back({0.0, 0.0, 0.0});
      it = out.end() - 1;
    }
    if (r.diverged || !r.error) continue;
    auto& a = acc[static_cast<std::size_t>(it - out.begin())];
    const double n = static_cast<double>(r.error->n_agents);
    a[0] += r.error->ade * n;
    a[1] += r.error->fde * n;
    a[2] += n;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (acc[i][2] > 0) {
      out[i].error = DisplacementError{acc[i][0] / acc[i][2], acc[i][1] / acc[i][2],
                                       static_cast<std::size_t>(acc[i][2])};
    }
  }
  return out;
}

/// Median over seeds of one metric per (delta_t, threshold), in input order.
struct SweepSummary {
  std::optional<int> delta_t;
  std::optional<double> filter_m;
  std::optional<double> median_ade;
  std::optional<double> median_fde;
  int runs = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<SweepSummary> summarize_sweep(const std::vector<SweepRow>& rows) {
  std::vector<SweepSummary> out;
  std::vector<std::pair<std::vector<double>, std::vector<double>>> vals;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const SweepSummary& s) { return s.delta_t == r.delta_t && s.filter_m == r.filter_m; });
    if (it == out.end()) {
      out.push_back({r.delta_t, r.filter_m, std::nullopt, std::nullopt, 0});
      vals.emplace_back();
      it = out.end() - 1;
    }
    auto& v = vals[static_cast<std::size_t>(it - out.begin())];
    if (r.error && !r.diverged) {
      v.first.push_back(r.error->ade);
      v.second.push_back(r.error->fde);
      ++it->runs;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!vals[i].first.empty()) {
      out[i].median_ade = median(vals[i].first);
      out[i].median_fde = median(vals[i].second);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Planner comparison

enum class PlannerKind { kMctsRnn, kMctsRnnSef2, kMctsCv, kPf };

inline std::string to_string(PlannerKind p) {
  switch (p) {
    case PlannerKind::kMctsRnn: return "mcts-rnn";
    case PlannerKind::kMctsRnnSef2: return "mcts-rnn-sef2";
    case PlannerKind::kMctsCv: return "mcts-cv";
    case PlannerKind::kPf: return "pf";
  }
  return "unknown";
}

inline PlannerKind planner_from_string(const std::string& s) {
  if (s == "mcts-rnn") return PlannerKind::kMctsRnn;
  if (s == "mcts-rnn-sef2") return PlannerKind::kMctsRnnSef2;
  if (s == "mcts-cv") return PlannerKind::kMctsCv;
  if (s == "pf") return PlannerKind::kPf;
  throw std::invalid_argument("unknown planner '" + s + "' (expected mcts-rnn, mcts-rnn-sef2, mcts-cv or pf)");
}

inline bool uses_model(PlannerKind p) { return p == PlannerKind::kMctsRnn || p == PlannerKind::kMctsRnnSef2; }

inline constexpr std::array<double, 3> kDisturbanceThresholds{1.0, 0.5, 0.25};  // m/s^2

struct BenchConfig {
  std::vector<PlannerKind> planners{PlannerKind::kMctsRnn, PlannerKind::kMctsRnnSef2, PlannerKind::kMctsCv,
                                    PlannerKind::kPf};
  int episodes = 100;  // per seed
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int agents_min = kMinScenarioAgents;
  int agents_max = kMaxScenarioAgents;
  std::vector<ScenarioKind> scenarios{ScenarioKind::kCircleCrossing, ScenarioKind::kGroupCrossing,
                                      ScenarioKind::kRandom};
  int max_frames = 200;
  SearchConfig search = [] {
    SearchConfig s;
    s.iterations = 30;
    return s;
  }();
  PfConfig pf;
  double u_cv = 0.1;  // m^2
  OrcaConfig orca;
  WorldConfig world;
  std::filesystem::path model_path;
  int threads = 1;  // episodes in flight
  double near_radius = 2.0;  // meters, for disturbance
  int freeze_window = 10;    // frames
  double freeze_progress = 0.2;  // meters of goal progress per window

  void validate() const {
    if (planners.empty()) throw std::invalid_argument("bench: no planners");
    if (episodes < 1) throw std::invalid_argument("bench: episodes must be >= 1");
    if (seeds.empty()) throw std::invalid_argument("bench: no seeds");
    if (agents_min < kMinScenarioAgents || agents_max > kMaxScenarioAgents || agents_min > agents_max) {
      throw std::invalid_argument("bench: agent range must lie within [2, 12]");
    }
    if (scenarios.empty()) throw std::invalid_argument("bench: no scenarios");
    if (max_frames < 1) throw std::invalid_argument("bench: max_frames must be >= 1");
    if (threads < 1) throw std::invalid_argument("bench: threads must be >= 1");
    search.validate();
    pf.validate();
    orca.validate();
  }
};

/// Reads an experiment file. Keys: planners, episodes, seeds, agents_min,
/// agents_max, scenarios, max_frames, model, threads, u_cv, pf_k_att,
/// pf_k_rep, pf_rep_range, pf_att_range, orca_safety_margin, and every
/// planner search key (see search_config_from).
inline BenchConfig bench_config_from(const KvConfig& kv, BenchConfig base = {}) {
  if (kv.has("planners")) {
    std::vector<std::string> names;
    kv.read_list("planners", names);
    base.planners.clear();
    for (const auto& n : names) base.planners.push_back(planner_from_string(n));
  }
  kv.read("episodes", base.episodes);
  kv.read_list("seeds", base.seeds);
  kv.read("agents_min", base.agents_min);
  kv.read("agents_max", base.agents_max);
  if (kv.has("scenarios")) {
    std::vector<std::string> names;
    kv.read_list("scenarios", names);
    base.scenarios.clear();
    for (const auto& n : names) base.scenarios.push_back(scenario_from_string(n));
  }
  kv.read("max_frames", base.max_frames);
  if (const auto v = kv.get("model")) base.model_path = *v;
  kv.read("threads", base.threads);
  kv.read("u_cv", base.u_cv);
  kv.read("pf_k_att", base.pf.k_att);
  kv.read("pf_k_rep", base.pf.k_rep);
  kv.read("pf_rep_range", base.pf.rep_range);
  kv.read("pf_att_range", base.pf.att_range);
  kv.read("orca_safety_margin", base.orca.safety_margin);
  base.search = search_config_from(kv, base.search);
  base.validate();
  return base;
}

struct EpisodeSpec {
  std::uint64_t seed = 0;
  int index = 0;
  ScenarioKind kind = ScenarioKind::kRandom;
  int n_agents = 2;
  std::uint64_t scene_seed = 0;
};

/// Scenario for episode `index` of bench seed `seed`; identical for every
/// planner so comparisons are paired.
inline EpisodeSpec episode_spec(const BenchConfig& cfg, std::uint64_t seed, int index) {
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
  EpisodeSpec s;
  s.seed = seed;
  s.index = index;
  s.kind = cfg.scenarios[std::uniform_int_distribution<std::size_t>(0, cfg.scenarios.size() - 1)(rng)];
  s.n_agents = std::uniform_int_distribution<int>(cfg.agents_min, cfg.agents_max)(rng);
  s.scene_seed = rng();
  return s;
}

struct DisturbanceCounts {
  long near_pairs = 0;
  std::array<long, 3> exceed{0, 0, 0};
};

/// Counts (agent, frame) pairs with the agent within `near_radius` of the
/// robot, and how many of those have a second-difference acceleration above
/// each threshold.
inline DisturbanceCounts disturbance_counts(const Episode& ep, double near_radius,
                                            const std::array<double, 3>& thresholds = kDisturbanceThresholds) {
  DisturbanceCounts c;
  for (std::size_t f = 1; f + 1 < ep.size(); ++f) {
    const Scene& now = ep.frames[f];
    for (const auto& a : now.agents) {
      if ((a.position - now.robot.position).norm() > near_radius) continue;
      const AgentState* prev = ep.frames[f - 1].find_agent(a.id);
      const AgentState* next = ep.frames[f + 1].find_agent(a.id);
      if (!prev || !next) continue;
      const double acc = accel_magnitude(prev->position, a.position, next->position, now.dt);
      ++c.near_pairs;
      for (std::size_t t = 0; t < thresholds.size(); ++t) {
        if (acc > thresholds[t]) ++c.exceed[t];
      }
    }
  }
  return c;
}

/// True when, away from the goal, the robot gains less than `progress`
/// meters toward it over some `window`-frame span.
inline bool detect_freezing(const Episode& ep, int window, double progress, double goal_radius) {
  const auto w = static_cast<std::size_t>(window);
  for (std::size_t f = w; f < ep.size(); ++f) {
    const Scene& a = ep.frames[f - w];
    const Scene& b = ep.frames[f];
    const double d_then = (a.robot.position - a.goal).norm();
    const double d_now = (b.robot.position - b.goal).norm();
    if (d_now > goal_radius && d_then - d_now < progress) return true;
  }
  return false;
}

inline double path_length(const Episode& ep) {
  double len = 0.0;
  for (std::size_t f = 1; f < ep.size(); ++f) len += (ep.frames[f].robot.position - ep.frames[f - 1].robot.position).norm();
  return len;
}

struct EpisodeRecord {
  std::string planner;
  std::uint64_t seed = 0;
  int index = 0;
  std::string scenario;
  int n_agents = 0;
  Outcome outcome = Outcome::kTimeout;
  int frames = 0;
  double path_length = 0.0;
  double reported_time = 0.0;  // seconds per cycle as shown in the table
  double measured_time = 0.0;  // seconds per cycle, wall clock (not written to CSV)
  DisturbanceCounts disturbance;
  bool frozen = false;
  std::string error;
};

inline PlanFn make_planner(PlannerKind kind, const BenchConfig& cfg, std::shared_ptr<const ModelParams<double>> model,
                           std::uint64_t seed) {
  SearchConfig sc = cfg.search;
  sc.seed = seed;
  switch (kind) {
    case PlannerKind::kMctsRnn:
      sc.sef = SefKind::kSef1;
      return mcts_rnn_planner(std::move(model), sc);
    case PlannerKind::kMctsRnnSef2:
      sc.sef = SefKind::kSef2;
      return mcts_rnn_planner(std::move(model), sc);
    case PlannerKind::kMctsCv:
      return mcts_cv_planner(sc, cfg.u_cv);
    case PlannerKind::kPf:
      return pf_planner(cfg.pf, cfg.world);
  }
  throw std::logic_error("make_planner: unhandled planner");
}

/// Runs one planner on one scenario. Failures inside the episode are caught
/// and reported in the record.
inline std::pair<EpisodeRecord, RunResult> run_bench_episode(PlannerKind kind, const EpisodeSpec& spec,
                                                             const BenchConfig& cfg,
                                                             std::shared_ptr<const ModelParams<double>> model,
                                                             std::ostream* trace = nullptr) {
  EpisodeRecord rec;
  rec.planner = to_string(kind);
  rec.seed = spec.seed;
  rec.index = spec.index;
  rec.scenario = to_string(spec.kind);
  rec.n_agents = spec.n_agents;
  RunResult run;
  try {
    OrcaWorld world(make_scenario(spec.kind, spec.n_agents, spec.scene_seed, cfg.world), cfg.orca, cfg.world);
    const PlanFn planner = make_planner(kind, cfg, model, mix_seed(spec.seed, 0x5EA2C4ULL + static_cast<std::uint64_t>(spec.index)));
    run = receding_horizon(world, planner, cfg.max_frames, trace);
    rec.outcome = run.outcome;
    rec.frames = static_cast<int>(run.episode.size());
    rec.path_length = path_length(run.episode);
    rec.disturbance = disturbance_counts(run.episode, cfg.near_radius);
    rec.frozen = detect_freezing(run.episode, cfg.freeze_window, cfg.freeze_progress, cfg.world.goal_radius);
    double total = 0.0;
    for (double s : run.cycle_seconds) total += s;
    rec.measured_time = run.cycle_seconds.empty() ? 0.0 : total / static_cast<double>(run.cycle_seconds.size());
  } catch (const std::exception& e) {
    rec.outcome = Outcome::kTimeout;
    rec.error = e.what();
  }
  if (kind == PlannerKind::kPf) {
    rec.reported_time = std::round(rec.measured_time * 100.0) / 100.0;
  } else {
    rec.reported_time = static_cast<double>(cfg.search.budget_ns) * 1e-9;
  }
  return {rec, run};
}

/// Every planner on every (seed, episode) scenario. Results are ordered by
/// planner, seed and episode regardless of the worker count.
inline std::vector<EpisodeRecord> run_planner_bench(const BenchConfig& cfg,
                                                    std::shared_ptr<const ModelParams<double>> model,
                                                    const LogFn& log = {}) {
  cfg.validate();
  for (auto p : cfg.planners) {
    if (uses_model(p) && !model) throw std::invalid_argument("bench: planner " + to_string(p) + " needs a model");
  }
  struct Job {
    PlannerKind kind;
    EpisodeSpec spec;
  };
  std::vector<Job> jobs;
  for (auto p : cfg.planners) {
    for (auto seed : cfg.seeds) {
      for (int i = 0; i < cfg.episodes; ++i) jobs.push_back({p, episode_spec(cfg, seed, i)});
    }
  }
  std::vector<EpisodeRecord> out(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      out[j] = run_bench_episode(jobs[j].kind, jobs[j].spec, cfg, model).first;
      if (log) {
        std::lock_guard<std::mutex> lock(log_mutex);
        const auto& r = out[j];
        log(r.planner + " seed " + std::to_string(r.seed) + " ep " + std::to_string(r.index) + " " + r.scenario + "(" +
            std::to_string(r.n_agents) + "): " + to_string(r.outcome) + (r.error.empty() ? "" : " [" + r.error + "]"));
      }
    }
  };
  if (cfg.threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < cfg.threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return out;
}

inline void write_episodes_csv(std::ostream& out, const std::vector<EpisodeRecord>& recs) {
  out << "planner,seed,episode,scenario,n_agents,outcome,frames,path_length,time,near_pairs,exceed_1.0,exceed_0.5,"
         "exceed_0.25,frozen,error\n";
  for (const auto& r : recs) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << r.planner << ',' << r.seed << ',' << r.index << ',' << r.scenario << ',' << r.n_agents << ','
        << to_string(r.outcome) << ',' << r.frames << ',' << fmt_fixed(r.path_length) << ','
        << fmt_fixed(r.reported_time, 2) << ',' << r.disturbance.near_pairs << ',' << r.disturbance.exceed[0] << ','
        << r.disturbance.exceed[1] << ',' << r.disturbance.exceed[2] << ',' << (r.frozen ? 1 : 0) << ',' << err
        << '\n';
  }
}

inline std::vector<EpisodeRecord> read_episodes_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("planner,seed,episode,", 0) != 0) {
    throw FormatError("episodes CSV: missing header");
  }
  std::vector<EpisodeRecord> out;
  while (std::getline(in, line)) {
    if (KvConfig::strip(line).empty()) continue;
    const auto f = trajdata_detail::split_csv(line);
    if (f.size() != 15) throw FormatError("episodes CSV: expected 15 fields");
    EpisodeRecord r;
    r.planner = f[0];
    r.seed = std::stoull(f[1]);
    r.index = std::stoi(f[2]);
    r.scenario = f[3];
    r.n_agents = std::stoi(f[4]);
    r.outcome = outcome_from_string(f[5]);
    r.frames = std::stoi(f[6]);
    r.path_length = std::stod(f[7]);
    r.reported_time = std::stod(f[8]);
    r.disturbance.near_pairs = std::stol(f[9]);
    for (int t = 0; t < 3; ++t) r.disturbance.exceed[static_cast<std::size_t>(t)] = std::stol(f[static_cast<std::size_t>(10 + t)]);
    r.frozen = f[13] == "1";
    r.error = f[14];
    out.push_back(r);
  }
  return out;
}

struct TableRow {
  std::string planner;
  int episodes = 0;
  double success = 0.0;    // %
  double collision = 0.0;  // %
  double timeout = 0.0;    // %
  double frozen = 0.0;     // % of episodes
  std::optional<double> length;  // mean over successful episodes, meters
  double time = 0.0;       // seconds per cycle
  std::array<double, 3> disturbance{0.0, 0.0, 0.0};  // % of near pairs
  int failed = 0;          // episodes that raised an error
};

/// One row per planner, in first-appearance order.
inline std::vector<TableRow> summarize(const std::vector<EpisodeRecord>& recs) {
  std::vector<TableRow> rows;
  struct Acc {
    int success = 0, collision = 0, timeout = 0, frozen = 0, failed = 0;
    double length = 0.0, time = 0.0;
    DisturbanceCounts dist;
  };
  std::vector<Acc> acc;
  for (const auto& r : recs) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const TableRow& t) { return t.planner == r.planner; });
    if (it == rows.end()) {
      rows.push_back(TableRow{});
      rows.back().planner = r.planner;
      acc.emplace_back();
      it = rows.end() - 1;
    }
    Acc& a = acc[static_cast<std::size_t>(it - rows.begin())];
    ++it->episodes;
    switch (r.outcome) {
      case Outcome::kSuccess:
        ++a.success;
        a.length += r.path_length;
        break;
      case Outcome::kCollision: ++a.collision; break;
      case Outcome::kTimeout: ++a.timeout; break;
    }
    a.frozen += r.frozen ? 1 : 0;
    a.failed += r.error.empty() ? 0 : 1;
    a.time += r.reported_time;
    a.dist.near_pairs += r.disturbance.near_pairs;
    for (std::size_t t = 0; t < 3; ++t) a.dist.exceed[t] += r.disturbance.exceed[t];
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Acc& a = acc[i];
    TableRow& t = rows[i];
    const double n = t.episodes;
    t.success = 100.0 * a.success / n;
    t.collision = 100.0 * a.collision / n;
    t.timeout = 100.0 * a.timeout / n;
    t.frozen = 100.0 * a.frozen / n;
    if (a.success > 0) t.length = a.length / a.success;
    t.time = a.time / n;
    for (std::size_t k = 0; k < 3; ++k) {
      t.disturbance[k] = a.dist.near_pairs > 0 ? 100.0 * static_cast<double>(a.dist.exceed[k]) / static_cast<double>(a.dist.near_pairs) : 0.0;
    }
    t.failed = a.failed;
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report files

inline std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }
inline std::string lpad(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }

inline void write_table_csv(std::ostream& out, const std::vector<TableRow>& rows) {
  out << "planner,success,collision,length,time,disturbance_1.0,disturbance_0.5,disturbance_0.25\n";
  for (const auto& r : rows) {
    out << r.planner << ',' << fmt_fixed(r.success, 1) << ',' << fmt_fixed(r.collision, 1) << ','
        << (r.length ? fmt_fixed(*r.length, 2) : "") << ',' << fmt_fixed(r.time, 2) << ','
        << fmt_fixed(r.disturbance[0], 1) << ',' << fmt_fixed(r.disturbance[1], 1) << ','
        << fmt_fixed(r.disturbance[2], 1) << '\n';
  }
}

inline void write_outcomes_csv(std::ostream& out, const std::vector<TableRow>& rows) {
  out << "planner,episodes,success,collision,timeout,frozen,failed\n";
  for (const auto& r : rows) {
    out << r.planner << ',' << r.episodes << ',' << fmt_fixed(r.success, 1) << ',' << fmt_fixed(r.collision, 1) << ','
        << fmt_fixed(r.timeout, 1) << ',' << fmt_fixed(r.frozen, 1) << ',' << r.failed << '\n';
  }
}

inline nlohmann::ordered_json table_json(const std::vector<TableRow>& rows, bool incomplete) {
  nlohmann::ordered_json j;
  j["incomplete"] = incomplete;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["planner"] = r.planner;
    o["episodes"] = r.episodes;
    o["success"] = std::stod(fmt_fixed(r.success, 1));
    o["collision"] = std::stod(fmt_fixed(r.collision, 1));
    o["timeout"] = std::stod(fmt_fixed(r.timeout, 1));
    o["frozen"] = std::stod(fmt_fixed(r.frozen, 1));
    if (r.length) {
      o["length"] = std::stod(fmt_fixed(*r.length, 2));
    } else {
      o["length"] = nullptr;
    }
    o["time"] = std::stod(fmt_fixed(r.time, 2));
    o["disturbance"] = {{"1.0", std::stod(fmt_fixed(r.disturbance[0], 1))},
                        {"0.5", std::stod(fmt_fixed(r.disturbance[1], 1))},
                        {"0.25", std::stod(fmt_fixed(r.disturbance[2], 1))}};
    o["failed"] = r.failed;
    j["rows"].push_back(o);
  }
  return j;
}

inline void write_table_text(std::ostream& out, const std::vector<TableRow>& rows, bool incomplete) {
  if (incomplete) out << "INCOMPLETE: some episodes failed; see episodes.csv\n";
  out << pad("Method", 16) << lpad("Success %", 11) << lpad("Collision %", 13) << lpad("Length (m)", 12)
      << lpad("Time (s)", 10) << lpad("Dist@1.0 %", 12) << lpad("Dist@0.5 %", 12) << lpad("Dist@0.25 %", 13) << '\n';
  for (const auto& r : rows) {
    out << pad(r.planner, 16) << lpad(fmt_fixed(r.success, 1), 11) << lpad(fmt_fixed(r.collision, 1), 13)
        << lpad(r.length ? fmt_fixed(*r.length, 2) : "-", 12) << lpad(fmt_fixed(r.time, 2), 10)
        << lpad(fmt_fixed(r.disturbance[0], 1), 12) << lpad(fmt_fixed(r.disturbance[1], 1), 12)
        << lpad(fmt_fixed(r.disturbance[2], 1), 13) << '\n';
  }
}

namespace svg_detail {

inline const std::array<const char*, 8> kPalette{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string num(double v) { return fmt_fixed(v, 2); }

}  // namespace svg_detail

/// Robot paths of several runs of the same scenario over the agents' tracks
/// from the first run.
inline std::string trajectory_svg(const std::string& title,
                                  const std::vector<std::pair<std::string, Episode>>& runs) {
  using namespace svg_detail;
  if (runs.empty()) throw std::invalid_argument("trajectory_svg: no runs");
  double lo_x = 1e300, lo_y = 1e300, hi_x = -1e300, hi_y = -1e300;
  auto grow = [&](const Vec2& p) {
    lo_x = std::min(lo_x, p.x());
    lo_y = std::min(lo_y, p.y());
    hi_x = std::max(hi_x, p.x());
    hi_y = std::max(hi_y, p.y());
  };
  for (const auto& [label, ep] : runs) {
    for (const auto& f : ep.frames) {
      grow(f.robot.position);
      grow(f.goal);
      for (const auto& a : f.agents) grow(a.position);
    }
  }
  const double margin = 1.0;
  lo_x -= margin, lo_y -= margin, hi_x += margin, hi_y += margin;
  const double scale = 600.0 / std::max(hi_x - lo_x, hi_y - lo_y);
  const double w = (hi_x - lo_x) * scale, h = (hi_y - lo_y) * scale;
  auto X = [&](double x) { return num((x - lo_x) * scale); };
  auto Y = [&](double y) { return num(40.0 + (hi_y - y) * scale); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w) << "\" height=\"" << num(h + 40.0 + 20.0 * runs.size())
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"8\" y=\"20\" font-size=\"15\">" << esc(title) << "</text>\n";
  const Episode& first = runs.front().second;
  if (!first.empty()) {
    for (const auto& a0 : first.frames.front().agents) {
      std::string pts;
      for (const auto& f : first.frames) {
        if (const AgentState* a = f.find_agent(a0.id)) pts += X(a->position.x()) + "," + Y(a->position.y()) + " ";
      }
      s << "<polyline fill=\"none\" stroke=\"#999999\" stroke-width=\"1\" points=\"" << pts << "\"/>\n";
      s << "<circle cx=\"" << X(a0.position.x()) << "\" cy=\"" << Y(a0.position.y()) << "\" r=\"3\" fill=\"#999999\"/>\n";
    }
    const Vec2 g = first.frames.front().goal;
    s << "<rect x=\"" << num((g.x() - lo_x) * scale - 5) << "\" y=\"" << num(40.0 + (hi_y - g.y()) * scale - 5)
      << "\" width=\"10\" height=\"10\" fill=\"none\" stroke=\"black\"/>\n";
  }
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& [label, ep] = runs[i];
    const char* color = kPalette[i % kPalette.size()];
    std::string pts;
    for (const auto& f : ep.frames) pts += X(f.robot.position.x()) + "," + Y(f.robot.position.y()) + " ";
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts << "\"/>\n";
    s << "<text x=\"8\" y=\"" << num(h + 55.0 + 20.0 * static_cast<double>(i)) << "\" fill=\"" << color << "\">"
      << esc(label) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

/// Grouped bars of median ADE and FDE over seeds: one group per distance
/// threshold, one bar per lookahead.
inline std::string sweep_bars_svg(const std::vector<SweepSummary>& sums) {
  using namespace svg_detail;
  if (sums.empty()) throw std::invalid_argument("sweep_bars_svg: no rows");
  std::vector<std::optional<double>> thresholds;
  std::vector<std::optional<int>> dts;
  for (const auto& s : sums) {
    if (std::find(thresholds.begin(), thresholds.end(), s.filter_m) == thresholds.end()) thresholds.push_back(s.filter_m);
    if (std::find(dts.begin(), dts.end(), s.delta_t) == dts.end()) dts.push_back(s.delta_t);
  }
  double vmax = 0.0;
  for (const auto& s : sums) {
    if (s.median_ade) vmax = std::max(vmax, *s.median_ade);
    if (s.median_fde) vmax = std::max(vmax, *s.median_fde);
  }
  if (vmax <= 0) vmax = 1.0;
  const double bar = 14.0, gap = 24.0, panel_h = 220.0;
  const double group_w = bar * static_cast<double>(dts.size()) + gap;
  const double width = 80.0 + group_w * static_cast<double>(thresholds.size()) + 120.0;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(2 * panel_h + 120.0)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int panel = 0; panel < 2; ++panel) {
    const double top = 40.0 + panel * (panel_h + 40.0);
    const double base = top + panel_h;
    s << "<text x=\"8\" y=\"" << num(top - 12) << "\" font-size=\"14\">" << (panel == 0 ? "ADE (m)" : "FDE (m)")
      << ", median over seeds</text>\n";
    s << "<line x1=\"60\" y1=\"" << num(base) << "\" x2=\"" << num(width - 110) << "\" y2=\"" << num(base)
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"4\" y=\"" << num(top + 4) << "\">" << fmt_fixed(vmax, 2) << "</text>\n";
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const double gx = 70.0 + group_w * static_cast<double>(t);
      s << "<text x=\"" << num(gx) << "\" y=\"" << num(base + 14) << "\">"
        << (thresholds[t] ? "&lt;= " + fmt_fixed(*thresholds[t], 0) + " m" : std::string("all")) << "</text>\n";
      for (std::size_t d = 0; d < dts.size(); ++d) {
        const auto it = std::find_if(sums.begin(), sums.end(), [&](const SweepSummary& x) {
          return x.filter_m == thresholds[t] && x.delta_t == dts[d];
        });
        const auto v = panel == 0 ? it->median_ade : it->median_fde;
        if (!v) continue;
        const double hgt = panel_h * *v / vmax;
        s << "<rect x=\"" << num(gx + bar * static_cast<double>(d)) << "\" y=\"" << num(base - hgt) << "\" width=\""
          << num(bar - 2) << "\" height=\"" << num(hgt) << "\" fill=\"" << kPalette[d % kPalette.size()] << "\"/>\n";
      }
    }
  }
  for (std::size_t d = 0; d < dts.size(); ++d) {
    const double y = 50.0 + 16.0 * static_cast<double>(d);
    s << "<rect x=\"" << num(width - 100) << "\" y=\"" << num(y - 9) << "\" width=\"10\" height=\"10\" fill=\""
      << kPalette[d % kPalette.size()] << "\"/>\n";
    s << "<text x=\"" << num(width - 85) << "\" y=\"" << num(y) << "\">dt=" << delta_t_label(dts[d]) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

/// Writes summary.csv, summary.json, summary.txt and outcomes.csv from the
/// episode records. An error in any episode marks the report incomplete.
inline void emit_report(const std::vector<EpisodeRecord>& recs, const std::filesystem::path& out_dir) {
  if (recs.empty()) throw std::invalid_argument("emit_report: no results");
  const auto rows = summarize(recs);
  bool incomplete = false;
  for (const auto& r : rows) incomplete = incomplete || r.failed > 0;
  std::ostringstream csv, outcomes, txt;
  write_table_csv(csv, rows);
  write_outcomes_csv(outcomes, rows);
  write_table_text(txt, rows, incomplete);
  write_text_file(out_dir / "summary.csv", csv.str());
  write_text_file(out_dir / "outcomes.csv", outcomes.str());
  write_text_file(out_dir / "summary.txt", txt.str());
  write_text_file(out_dir / "summary.json", table_json(rows, incomplete).dump(2) + "\n");
}

inline void emit_sweep_report(const std::vector<SweepRow>& rows, const std::filesystem::path& out_dir) {
  if (rows.empty()) throw std::invalid_argument("emit_sweep_report: no results");
  const auto sums = summarize_sweep(rows);
  std::ostringstream csv;
  csv << "delta_t,filter_m,median_ade,median_fde,runs\n";
  for (const auto& s : sums) {
    csv << delta_t_label(s.delta_t) << ',' << threshold_label(s.filter_m) << ','
        << (s.median_ade ? fmt_fixed(*s.median_ade) : "") << ',' << (s.median_fde ? fmt_fixed(*s.median_fde) : "")
        << ',' << s.runs << '\n';
  }
  write_text_file(out_dir / "sweep_summary.csv", csv.str());
  write_text_file(out_dir / "sweep_ade.svg", sweep_bars_svg(sums));
}

}  // namespace crowdplan
