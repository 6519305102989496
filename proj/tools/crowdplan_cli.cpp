// crowdplan command line: dataset generation, model training, the lookahead
// sweep, the planner comparison, single planning runs and report rendering.

#include "crowdplan/bench.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace crowdplan;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app->add_option("--out-dir", c.out_dir, "Output directory")->capture_default_str();
  app->add_flag("--quiet", c.quiet, "No progress messages");
}

LogFn make_log(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

struct DataSource {
  std::string data_dir;
  int episodes = 200;
  int frames = 50;
};

void add_data_options(CLI::App* app, DataSource& d) {
  app->add_option("--data", d.data_dir, "Directory of trajectory CSVs (generated from --seed when omitted)");
  app->add_option("--episodes", d.episodes, "Episodes to generate when --data is omitted")->capture_default_str();
  app->add_option("--frames", d.frames, "Frames per generated episode")->capture_default_str();
}

std::vector<Episode> load_data(const DataSource& d, std::uint64_t seed) {
  if (!d.data_dir.empty()) {
    auto eps = load_episode_dir(d.data_dir);
    if (eps.empty()) throw std::runtime_error("no trajectory CSVs in " + d.data_dir);
    return eps;
  }
  DatasetConfig dc;
  dc.frames = d.frames;
  return generate_dataset(d.episodes, seed, dc);
}

struct TrainOptions {
  int epochs = 100;
  int batch = 16;
  double lr = 1e-3;
  std::size_t max_windows = 0;
  std::size_t max_val_windows = 0;
  int folds = 5;
  std::size_t fold = 0;
  std::uint64_t split_seed = 0;
  int window_stride = 1;
  int eval_stride = 1;
};

void add_train_options(CLI::App* app, TrainOptions& t) {
  app->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
  app->add_option("--batch", t.batch, "Windows per minibatch")->capture_default_str();
  app->add_option("--lr", t.lr, "Adam learning rate")->capture_default_str();
  app->add_option("--max-windows", t.max_windows, "Training windows per epoch (0: all)")->capture_default_str();
  app->add_option("--max-val-windows", t.max_val_windows, "Validation windows (0: all)")->capture_default_str();
  app->add_option("--folds", t.folds, "Cross-validation folds")->capture_default_str();
  app->add_option("--fold", t.fold, "Held-out test fold")->capture_default_str();
  app->add_option("--split-seed", t.split_seed, "Seed of the episode split")->capture_default_str();
  app->add_option("--window-stride", t.window_stride, "Stride between training windows")->capture_default_str();
  app->add_option("--eval-stride", t.eval_stride, "Stride between test windows")->capture_default_str();
}

TrainConfig to_train_config(const TrainOptions& t, std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = t.epochs;
  tc.batch_windows = t.batch;
  tc.adam.lr = t.lr;
  tc.max_windows_per_epoch = t.max_windows;
  tc.max_val_windows = t.max_val_windows;
  tc.seed = seed;
  return tc;
}

std::vector<std::optional<double>> default_thresholds() { return {std::nullopt, 5.0, 2.0, 1.0}; }

// gen-data -------------------------------------------------------------------

int cmd_gen_data(const Common& c, const DataSource& d, int min_agents, int max_agents) {
  DatasetConfig dc;
  dc.frames = d.frames;
  dc.min_agents = min_agents;
  dc.max_agents = max_agents;
  const auto eps = generate_dataset(d.episodes, c.seed, dc);
  const fs::path dir = fs::path(c.out_dir) / "episodes";
  fs::create_directories(dir);
  auto manifest = open_out(fs::path(c.out_dir) / "manifest.csv");
  manifest << "file,scenario,seed,frames,n_agents\n";
  for (std::size_t i = 0; i < eps.size(); ++i) {
    std::ostringstream name;
    name << "episode_" << std::setw(5) << std::setfill('0') << i << ".csv";
    save_episode_csv(dir / name.str(), eps[i]);
    manifest << name.str() << ',' << eps[i].metadata.scenario << ',' << eps[i].metadata.seed << ','
             << eps[i].size() << ',' << eps[i].frames.front().agents.size() << '\n';
  }
  if (!c.quiet) std::cerr << "wrote " << eps.size() << " episodes to " << dir.string() << '\n';
  return 0;
}

// train ----------------------------------------------------------------------

int cmd_train(const Common& c, const DataSource& d, const TrainOptions& t, const std::string& dt_text) {
  const auto log = make_log(c);
  const auto eps = load_data(d, c.seed);
  const auto delta_t = parse_delta_t(dt_text);
  const FoldData fold = prepare_fold(eps, t.folds, t.fold, t.split_seed);
  const auto res = train_on_fold(eps, fold, delta_t, to_train_config(t, c.seed), t.window_stride,
                                 [&](const CurvePoint& p) {
                                   if (log) {
                                     log("epoch " + std::to_string(p.epoch) + " train " + fmt_fixed(p.train_loss, 4) +
                                         " val " + fmt_fixed(p.val_loss, 4));
                                   }
                                 });
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  save_model(out / "model.cprnn", res.params);
  auto curve = open_out(out / "curve.csv");
  write_curve_csv(curve, res.curve);
  const auto thresholds = default_thresholds();
  const auto acc = evaluate_model(res.params, pick(eps, fold.split.test), thresholds, t.eval_stride);
  std::vector<MetricsRow> rows;
  for (std::size_t i = 0; i < acc.size(); ++i) rows.push_back(MetricsRow{delta_t, thresholds[i], acc[i].result()});
  auto metrics = open_out(out / "metrics.csv");
  write_metrics_csv(metrics, rows);
  if (log) log("best epoch " + std::to_string(res.best_epoch) + "; model written to " + (out / "model.cprnn").string());
  return 0;
}

// sweep-dt -------------------------------------------------------------------

int cmd_sweep(const Common& c, const DataSource& d, const TrainOptions& t, const std::vector<std::string>& dts,
              const std::vector<std::uint64_t>& seeds, const std::string& model_dir) {
  const auto eps = load_data(d, c.seed);
  SweepConfig sc;
  sc.delta_ts.clear();
  for (const auto& s : dts) sc.delta_ts.push_back(parse_delta_t(s));
  sc.seeds = seeds;
  sc.folds = t.folds;
  sc.test_fold = t.fold;
  sc.split_seed = t.split_seed;
  sc.train = to_train_config(t, c.seed);
  sc.window_stride = t.window_stride;
  sc.eval_stride = t.eval_stride;
  sc.model_dir = model_dir.empty() ? fs::path(c.out_dir) / "models" : fs::path(model_dir);
  const auto rows = run_delta_t_sweep(eps, sc, make_log(c));
  const fs::path out(c.out_dir);
  auto sweep = open_out(out / "sweep.csv");
  write_sweep_csv(sweep, rows);
  auto metrics = open_out(out / "metrics.csv");
  write_metrics_csv(metrics, pooled_metrics(rows));
  emit_sweep_report(rows, out);
  return 0;
}

// bench ----------------------------------------------------------------------

std::shared_ptr<const ModelParams<double>> maybe_load_model(const std::string& path) {
  if (path.empty()) return nullptr;
  return std::make_shared<const ModelParams<double>>(load_model(path));
}

void write_example_plots(const BenchConfig& cfg, std::shared_ptr<const ModelParams<double>> model,
                         const fs::path& out) {
  const std::array<std::pair<ScenarioKind, int>, 2> shows{
      {{ScenarioKind::kGroupCrossing, 3}, {ScenarioKind::kCircleCrossing, 10}}};
  for (const auto& [kind, n] : shows) {
    EpisodeSpec spec;
    spec.seed = cfg.seeds.front();
    spec.kind = kind;
    spec.n_agents = n;
    spec.scene_seed = mix_seed(cfg.seeds.front(), 0xF160ULL + static_cast<std::uint64_t>(n));
    std::vector<std::pair<std::string, Episode>> runs;
    for (auto p : cfg.planners) {
      auto [rec, run] = run_bench_episode(p, spec, cfg, model);
      runs.emplace_back(rec.planner + ": " + to_string(rec.outcome), std::move(run.episode));
    }
    const std::string title = to_string(kind) + ", " + std::to_string(n) + " agents";
    write_text_file(out / ("traj_" + to_string(kind) + "_" + std::to_string(n) + ".svg"), trajectory_svg(title, runs));
  }
}

int cmd_bench(const Common& c, const std::string& config_path, const std::string& model_path,
              std::optional<int> episodes, std::optional<int> threads, bool plots) {
  BenchConfig cfg;
  if (!config_path.empty()) {
    const auto kv = KvConfig::load(config_path);
    cfg = bench_config_from(kv);
    kv.reject_unknown();
  }
  if (!model_path.empty()) cfg.model_path = model_path;
  if (episodes) cfg.episodes = *episodes;
  if (threads) cfg.threads = *threads;
  for (auto& s : cfg.seeds) s += c.seed;
  cfg.validate();
  const auto model = maybe_load_model(cfg.model_path.string());
  const fs::path out(c.out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto recs = run_planner_bench(cfg, model, make_log(c));
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto csv = open_out(out / "episodes.csv");
  write_episodes_csv(csv, recs);
  csv.close();
  emit_report(recs, out);
  nlohmann::ordered_json timings;
  timings["wall_seconds"] = wall;
  for (const auto& r : recs) {
    auto& slot = timings["mean_cycle_seconds"][r.planner];
    slot = (slot.is_null() ? 0.0 : slot.get<double>()) + r.measured_time / static_cast<double>(cfg.episodes * cfg.seeds.size());
  }
  write_text_file(out / "timings.json", timings.dump(2) + "\n");
  if (plots) write_example_plots(cfg, model, out);
  std::ifstream txt(out / "summary.txt");
  std::cout << txt.rdbuf();
  return 0;
}

// plan -----------------------------------------------------------------------

int cmd_plan(const Common& c, const std::string& planner_name, const std::string& config_path,
             const std::string& model_path, const std::string& scenario, int agents, int max_frames) {
  const PlannerKind kind = planner_from_string(planner_name);
  BenchConfig cfg;
  cfg.search.iterations = 100;
  if (!config_path.empty()) {
    const auto kv = KvConfig::load(config_path);
    cfg.search = search_config_from(kv, cfg.search);
    kv.reject_unknown();
  }
  cfg.max_frames = max_frames;
  const auto model = maybe_load_model(model_path);
  if (uses_model(kind) && !model) throw std::runtime_error("planner " + planner_name + " needs --model");
  EpisodeSpec spec;
  spec.seed = c.seed;
  spec.kind = scenario_from_string(scenario);
  spec.n_agents = agents;
  spec.scene_seed = c.seed;
  const fs::path out(c.out_dir);
  auto trace = open_out(out / "trace.jsonl");
  auto [rec, run] = run_bench_episode(kind, spec, cfg, model, &trace);
  trace.close();
  if (!rec.error.empty()) throw std::runtime_error(rec.error);
  save_episode_csv(out / "trajectory.csv", run.episode);
  write_text_file(out / "plan.svg", trajectory_svg(planner_name + ", " + scenario + ", " + std::to_string(agents) +
                                                       " agents: " + to_string(rec.outcome),
                                                   {{planner_name, run.episode}}));
  std::ostringstream cfg_text;
  write_search_config(cfg_text, cfg.search);
  write_text_file(out / "planner.cfg", cfg_text.str());
  std::cout << to_string(rec.outcome) << " after " << run.episode.size() - 1 << " steps, path "
            << fmt_fixed(rec.path_length, 2) << " m\n";
  for (const auto& w : run.warnings) std::cerr << "warning: " << w << '\n';
  return 0;
}

// report ---------------------------------------------------------------------

int cmd_report(const Common& c, const std::string& episodes_csv, const std::string& sweep_csv) {
  if (episodes_csv.empty() && sweep_csv.empty()) throw std::runtime_error("report: give --episodes and/or --sweep");
  const fs::path out(c.out_dir);
  if (!episodes_csv.empty()) {
    std::ifstream in(episodes_csv);
    if (!in) throw std::runtime_error("cannot open " + episodes_csv);
    emit_report(read_episodes_csv(in), out);
    std::ifstream txt(out / "summary.txt");
    std::cout << txt.rdbuf();
  }
  if (!sweep_csv.empty()) {
    std::ifstream in(sweep_csv);
    if (!in) throw std::runtime_error("cannot open " + sweep_csv);
    emit_sweep_report(read_sweep_csv(in), out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Crowd navigation planning with learned trajectory prediction"};
  app.require_subcommand(1);

  Common common;
  DataSource data;
  TrainOptions topt;

  auto* gen = app.add_subcommand("gen-data", "Simulate ORCA crowd episodes and write trajectory CSVs");
  add_common(gen, common);
  gen->add_option("--episodes", data.episodes, "Episodes")->capture_default_str();
  gen->add_option("--frames", data.frames, "Frames per episode")->capture_default_str();
  int min_agents = kMinScenarioAgents, max_agents = kMaxScenarioAgents;
  gen->add_option("--min-agents", min_agents, "Fewest agents per episode")->capture_default_str();
  gen->add_option("--max-agents", max_agents, "Most agents per episode")->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "Train one prediction model on a cross-validation fold");
  add_common(train_cmd, common);
  add_data_options(train_cmd, data);
  add_train_options(train_cmd, topt);
  std::string dt_text = "1";
  train_cmd->add_option("--delta-t", dt_text, "Robot lookahead in frames, or 'none'")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep-dt", "Train and evaluate models across robot lookaheads");
  add_common(sweep, common);
  add_data_options(sweep, data);
  add_train_options(sweep, topt);
  std::vector<std::string> dts{"none", "0", "1", "2", "3", "4", "5"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string model_dir;
  sweep->add_option("--delta-ts", dts, "Lookaheads to compare")->delimiter(',')->capture_default_str();
  sweep->add_option("--seeds", seeds, "Training seeds")->delimiter(',')->capture_default_str();
  sweep->add_option("--model-dir", model_dir, "Model cache (default <out-dir>/models)");

  auto* bench = app.add_subcommand("bench", "Compare planners on paired scenarios");
  add_common(bench, common);
  std::string bench_config, model_path;
  std::optional<int> bench_episodes, bench_threads;
  bool plots = false;
  bench->add_option("--config", bench_config, "Experiment config (key = value)");
  bench->add_option("--model", model_path, "Prediction model for the mcts-rnn planners");
  bench->add_option("--episodes", bench_episodes, "Episodes per seed (overrides the config)");
  bench->add_option("--threads", bench_threads, "Episodes run in parallel (overrides the config)");
  bench->add_flag("--plots", plots, "Also render example trajectories");

  auto* plan = app.add_subcommand("plan", "Run one planner through one scenario");
  add_common(plan, common);
  std::string planner_name = "mcts-rnn", plan_config, scenario = "circle_crossing";
  int agents = 6, max_frames = 200;
  plan->add_option("--planner", planner_name, "mcts-rnn, mcts-rnn-sef2, mcts-cv or pf")->capture_default_str();
  plan->add_option("--config", plan_config, "Planner config (key = value)");
  plan->add_option("--model", model_path, "Prediction model for the mcts-rnn planners");
  plan->add_option("--scenario", scenario, "circle_crossing, group_crossing or random")->capture_default_str();
  plan->add_option("--agents", agents, "Number of agents")->capture_default_str();
  plan->add_option("--max-frames", max_frames, "Step limit")->capture_default_str();

  auto* report = app.add_subcommand("report", "Render tables and plots from saved results");
  add_common(report, common);
  std::string episodes_csv, sweep_csv;
  report->add_option("--episodes", episodes_csv, "episodes.csv written by bench");
  report->add_option("--sweep", sweep_csv, "sweep.csv written by sweep-dt");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(common, data, min_agents, max_agents);
    if (train_cmd->parsed()) return cmd_train(common, data, topt, dt_text);
    if (sweep->parsed()) return cmd_sweep(common, data, topt, dts, seeds, model_dir);
    if (bench->parsed()) return cmd_bench(common, bench_config, model_path, bench_episodes, bench_threads, plots);
    if (plan->parsed()) return cmd_plan(common, planner_name, plan_config, model_path, scenario, agents, max_frames);
    if (report->parsed()) return cmd_report(common, episodes_csv, sweep_csv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
