// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,3,9] [--cache-dir DIR] [--cli PATH] [--work-dir DIR]
//
// Trained prediction models are cached in --cache-dir and reused when the
// file for the same (lookahead, seed) already exists.

#include "crowdplan/baselines.hpp"
#include "crowdplan/bench.hpp"
#include "crowdplan/planner.hpp"
#include "crowdplan/seqmodel.hpp"
#include "crowdplan/trajdata.hpp"
#include "oracles.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace crowdplan;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Options {
  fs::path cache_dir = "acceptance_cache";
  fs::path work_dir = "acceptance_work";
  std::string cli;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) { return fmt_fixed(v, digits); }

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

// --- 1 ---------------------------------------------------------------------

Verdict gradients(const Options&) {
  const auto t0 = Clock::now();
  const auto eps = generate_dataset(4, 101);
  const NormStats norm = fit_normalizer(eps);
  const auto samples = make_samples(eps, 1, norm, WindowOptions{kMaxEncoderSteps, kMaxEncoderSteps, 5});
  if (samples.size() < 10) return {false, "too few windows"};
  std::mt19937_64 rng(7);
  auto p = ModelParams<double>::initialized(ModelShape{}, 13);
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (Eigen::Index k = 0; k < p.size(); ++k) p.flat()[k] += jitter(rng);
  std::uniform_int_distribution<Eigen::Index> pick_param(0, p.size() - 1);
  double worst = 0.0;
  int checked = 0;
  for (int s = 0; s < 10; ++s) {
    const Sample* one = &samples[static_cast<std::size_t>(s) * samples.size() / 10];
    std::vector<const Sample*> ptrs{one};
    const auto batch = make_batch<double>(ptrs);
    ModelParams<double> grad(p.shape());
    grad.flat().setZero();
    loss_and_gradient<double>(p, batch, &grad);
    std::vector<Eigen::Index> idx;
    for (int k = 0; k < 50; ++k) idx.push_back(pick_param(rng));
    worst = std::max(worst, oracle::max_fd_error(p, grad, idx, [&](const ModelParams<double>& q) {
                       return loss_and_gradient<double>(q, batch);
                     }));
    checked += 50;
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          std::to_string(checked) + " partials, max rel err " + fmt_fixed(worst * 1e6, 3) + "e-6, " + fmt(secs, 1) + " s"};
}

// --- 2 ---------------------------------------------------------------------

Verdict unit_values(const Options&) {
  std::vector<std::pair<std::string, bool>> checks;
  auto near = [&](const std::string& name, double got, double want, double tol) {
    checks.emplace_back(name, std::abs(got - want) <= tol);
  };
  const double c = std::numbers::sqrt2 / 2.0;
  near("uct(0,1,1)", uct_value(0.0, 1.0, 1.0, c), 0.0, 1e-9);
  near("uct(1,1,e)", uct_value(1.0, 1.0, std::numbers::e, c), 1.70711, 1e-5);
  near("uct(1,1,e) exact", uct_value(1.0, 1.0, std::numbers::e, c), 1.0 + c, 1e-12);

  GaussianParams g;
  g.mu = {0.4, -1.2};
  near("nll at mean", gaussian_nll(g, g.mu), std::log(2.0 * std::numbers::pi), 1e-12);
  GaussianParams g2 = g;
  g2.sigma = {2.0, 2.0};
  near("nll doubled sigma", gaussian_nll(g2, g.mu) - gaussian_nll(g, g.mu), 2.0 * std::log(2.0), 1e-12);
  GaussianParams g3;
  g3.mu = {0.3, 0.1};
  g3.sigma = {0.7, 1.9};
  const Vec2 t(1.0, -0.5);
  const double half = 0.5 * std::log(2.0 * std::numbers::pi);
  const double uni = half + std::log(0.7) + 0.5 * std::pow(0.7 / 0.7, 2) + half + std::log(1.9) +
                     0.5 * std::pow(0.6 / 1.9, 2);
  near("nll rho=0 factorises", gaussian_nll(g3, t), uni, 1e-9);

  GaussianParams gu;
  gu.sigma = {2.0, 3.0};
  gu.rho = 0.5;
  near("U", uncertainty(gu), std::sqrt(27.0), 1e-12);

  std::vector<Vec2> agents{{5.0, 0.0}};
  std::vector<double> u{1.0};
  near("sef1 far agent", sef1({0, 0}, {3, 4}, agents, u, 2.0), 25.0, 1e-9);
  agents.push_back({1.0, 0.0});
  u.push_back(2.0);
  near("sef1 near agent", sef1({0, 0}, {3, 4}, agents, u, 2.0), 27.0, 1e-9);
  std::vector<Vec2> one{{1.0, 0.0}};
  std::vector<double> u1{1.0}, acc{2.0};
  near("sef2 agent term", sef2({0, 0}, {0, 0}, one, u1, acc, 2.0), 3.0, 1e-9);

  std::string failed;
  for (const auto& [name, ok] : checks) {
    if (!ok) failed += (failed.empty() ? "" : ", ") + name;
  }
  return {failed.empty(), failed.empty() ? std::to_string(checks.size()) + " values exact" : "wrong: " + failed};
}

// --- 3 ---------------------------------------------------------------------

AgentState make_agent(int id, Vec2 p, Vec2 v) {
  AgentState a;
  a.id = id;
  a.position = p;
  a.velocity = v;
  return a;
}

Verdict orca_lp(const Options&) {
  const auto t0 = Clock::now();
  OrcaConfig cfg;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1.0, 1.0), dist(0.9, 4.0), ang(0.0, 2.0 * std::numbers::pi);
  auto rand_vel = [&] { return Vec2(Vec2(u(rng), u(rng)) * cfg.max_speed / std::numbers::sqrt2); };
  double worst = 0.0;
  int compared = 0, skipped = 0;
  std::array<int, 2> by_size{0, 0};
  for (int trial = 0; compared < 100 && trial < 2000; ++trial) {
    const int n_agents = 2 + (compared % 2);
    const AgentState self = make_agent(0, Vec2::Zero(), rand_vel());
    std::vector<AgentState> others;
    std::vector<HalfPlane> lines;
    for (int k = 1; k < n_agents; ++k) {
      const double a = ang(rng);
      others.push_back(make_agent(k, dist(rng) * Vec2(std::cos(a), std::sin(a)), rand_vel()));
      lines.push_back(orca_half_plane(self, others.back(), cfg));
    }
    const Vec2 pref = rand_vel();
    const auto grid = oracle::grid_lp(lines, cfg.max_speed, pref, 0.005);
    if (!grid) {
      ++skipped;
      continue;
    }
    const Vec2 v = orca_velocity(self, others, pref, cfg);
    worst = std::max(worst, (v - *grid).norm());
    ++by_size[static_cast<std::size_t>(n_agents - 2)];
    ++compared;
  }
  const AgentState a = make_agent(0, {-2.0, 0.0}, {1.0, 0.0});
  const AgentState b = make_agent(1, {2.0, 0.0}, {-1.0, 0.0});
  const Vec2 va = orca_velocity(a, std::vector<AgentState>{b}, {1.0, 0.0}, cfg);
  const Vec2 vb = orca_velocity(b, std::vector<AgentState>{a}, {-1.0, 0.0}, cfg);
  const double mirror = (va + vb).norm();
  const double secs = seconds_since(t0);
  const bool ok = compared == 100 && worst <= 0.01 && mirror <= 1e-6 && secs < 300.0;
  return {ok, std::to_string(by_size[0]) + " two-agent + " + std::to_string(by_size[1]) +
                  " three-agent cases (" + std::to_string(skipped) + " infeasible skipped), max |lp - grid| " +
                  fmt(worst, 5) + " m/s, head-on mirror error " + fmt_fixed(mirror * 1e9, 3) + "e-9, " + fmt(secs, 1) +
                  " s"};
}

// --- 4 ---------------------------------------------------------------------

SweepConfig acceptance_sweep(const Options& o) {
  SweepConfig sc;
  sc.delta_ts = {std::nullopt, 1};
  sc.thresholds = {2.0};
  sc.seeds = {0, 1, 2};
  sc.folds = 5;
  sc.test_fold = 0;
  sc.split_seed = 0;
  sc.train.epochs = 40;
  sc.train.batch_windows = 16;
  sc.train.max_windows_per_epoch = 8000;
  sc.train.max_val_windows = 2000;
  sc.model_dir = o.cache_dir / "models";
  return sc;
}

constexpr int kSweepEpisodes = 2000;

Verdict lookahead_sweep(const Options& o) {
  const auto t0 = Clock::now();
  const SweepConfig sc = acceptance_sweep(o);
  int cached = 0;
  for (const auto& dt : sc.delta_ts) {
    for (auto s : sc.seeds) cached += fs::exists(sc.model_dir / (model_stem(dt, s) + ".cprnn")) ? 1 : 0;
  }
  progress("generating " + std::to_string(kSweepEpisodes) + " episodes");
  const auto eps = generate_dataset(kSweepEpisodes, 0);
  const auto rows = run_delta_t_sweep(eps, sc, [](const std::string& m) { progress(m); });
  fs::create_directories(o.cache_dir);
  {
    std::ofstream out(o.cache_dir / "sweep.csv");
    write_sweep_csv(out, rows);
  }
  std::map<std::string, std::vector<double>> ade;
  int diverged = 0;
  for (const auto& r : rows) {
    if (r.diverged || !r.error) {
      ++diverged;
      continue;
    }
    ade[delta_t_label(r.delta_t)].push_back(r.error->ade);
  }
  if (ade["1"].empty() || ade["none"].empty()) return {false, "no usable runs (" + std::to_string(diverged) + " diverged)"};
  const double m1 = median(ade["1"]);
  const double m0 = median(ade["none"]);
  // Effect size: difference of medians relative to the no-robot model, and
  // the seed-pooled standardized mean difference.
  auto mean_sd = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
  };
  const auto [mu1, sd1] = mean_sd(ade["1"]);
  const auto [mu0, sd0] = mean_sd(ade["none"]);
  const double pooled = std::sqrt(0.5 * (sd1 * sd1 + sd0 * sd0));
  const std::string d = pooled > 0 ? fmt((mu0 - mu1) / pooled, 2) : "inf";
  const double secs = seconds_since(t0);
  const bool ok = m1 < m0 && diverged == 0 && secs <= 7200.0;
  return {ok, "median ADE@2m dt=1 " + fmt(m1) + " m vs dt=none " + fmt(m0) + " m (" +
                  fmt(100.0 * (m0 - m1) / m0, 1) + "% lower, Cohen's d " + d + ", " +
                  std::to_string(ade["1"].size()) + "+" + std::to_string(ade["none"].size()) + " seeds, " +
                  std::to_string(cached) + "/6 models from cache, " + fmt(secs / 60.0, 1) + " min)"};
}

std::shared_ptr<const ModelParams<double>> planning_model(const Options& o) {
  const SweepConfig sc = acceptance_sweep(o);
  const fs::path path = sc.model_dir / (model_stem(1, 0) + ".cprnn");
  if (!fs::exists(path)) {
    progress("training the dt=1 seed-0 model");
    SweepConfig only = sc;
    only.delta_ts = {1};
    only.seeds = {0};
    run_delta_t_sweep(generate_dataset(kSweepEpisodes, 0), only, [](const std::string& m) { progress(m); });
  }
  return std::make_shared<const ModelParams<double>>(load_model(path));
}

// --- 5 ---------------------------------------------------------------------

Verdict planner_bench(const Options& o) {
  const auto t0 = Clock::now();
  const auto model = planning_model(o);
  BenchConfig cfg;
  cfg.episodes = 100;
  cfg.seeds = {0, 1, 2};
  int done = 0;
  const int total = static_cast<int>(cfg.planners.size() * cfg.seeds.size()) * cfg.episodes;
  const auto recs = run_planner_bench(cfg, model, [&](const std::string&) {
    if (++done % 100 == 0) progress(std::to_string(done) + "/" + std::to_string(total) + " episodes");
  });
  fs::create_directories(o.cache_dir);
  {
    std::ofstream out(o.cache_dir / "bench_episodes.csv");
    write_episodes_csv(out, recs);
  }
  const auto rows = summarize(recs);
  std::ostringstream table;
  write_table_text(table, rows, false);
  std::cerr << table.str();
  auto row = [&](const std::string& name) {
    return *std::find_if(rows.begin(), rows.end(), [&](const TableRow& r) { return r.planner == name; });
  };
  const TableRow rnn = row("mcts-rnn"), sef2 = row("mcts-rnn-sef2"), cv = row("mcts-cv"), pf = row("pf");
  int pf_circle = 0, pf_circle_frozen = 0, failed = 0;
  for (const auto& r : recs) {
    failed += r.error.empty() ? 0 : 1;
    if (r.planner == "pf" && r.scenario == "circle_crossing") {
      ++pf_circle;
      pf_circle_frozen += r.frozen ? 1 : 0;
    }
  }
  const bool a = rnn.success >= 90.0 && rnn.collision <= 2.0;
  const bool b = pf.success <= 70.0 && pf_circle_frozen > 0;
  const bool c = sef2.disturbance[2] < rnn.disturbance[2];
  const bool d = cv.collision >= rnn.collision;
  const double secs = seconds_since(t0);
  auto mark = [](bool x) { return x ? "ok" : "FAIL"; };
  std::string detail = "(a) " + std::string(mark(a)) + " rnn success " + fmt(rnn.success, 1) + "% collision " +
                       fmt(rnn.collision, 1) + "%; (b) " + mark(b) + " pf success " + fmt(pf.success, 1) +
                       "%, frozen in " + std::to_string(pf_circle_frozen) + "/" + std::to_string(pf_circle) +
                       " circle crossings; (c) " + mark(c) + " dist@0.25 sef2 " + fmt(sef2.disturbance[2], 1) +
                       "% vs sef1 " + fmt(rnn.disturbance[2], 1) + "%; (d) " + mark(d) + " collisions cv " +
                       fmt(cv.collision, 1) + "% vs rnn " + fmt(rnn.collision, 1) + "%; " + std::to_string(failed) +
                       " errored; " + fmt(secs / 60.0, 1) + " min";
  return {a && b && c && d && failed == 0 && secs <= 7200.0, detail};
}

// --- 6 ---------------------------------------------------------------------

Verdict anytime(const Options& o) {
  const auto model = planning_model(o);
  PlanningRoot root;
  root.goal = {6.0, 4.0};
  const RnnTransition<float> tr(*model, root, HiddenState<float>::zeros(model->shape().hidden, 0));
  const std::array<int, 3> marks{50, 200, 800};
  std::array<std::vector<double>, 3> values;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SearchConfig cfg;
    cfg.seed = seed;
    Mcts<RnnTransition<float>> tree(root, tr, cfg);
    for (std::size_t m = 0; m < marks.size(); ++m) {
      while (tree.iterations() < marks[m]) tree.iterate();
      values[m].push_back(tree.node(tree.best_child(0)).mean());
    }
  }
  std::array<double, 3> med{};
  for (std::size_t m = 0; m < 3; ++m) med[m] = median(values[m]);
  const bool ok = med[0] <= med[1] && med[1] <= med[2];
  return {ok, "median best-action value " + fmt(med[0], 6) + " / " + fmt(med[1], 6) + " / " + fmt(med[2], 6) +
                  " at 50 / 200 / 800 iterations over 20 seeds"};
}

// --- 7 ---------------------------------------------------------------------

Verdict budget(const Options& o) {
  const auto model = planning_model(o);
  const auto model_f = model->cast<float>();
  OrcaWorld world(make_scenario(ScenarioKind::kCircleCrossing, 12, 5), OrcaConfig{});
  for (int k = 0; k < 10; ++k) world.step(RobotAction{});
  const Episode& hist = world.episode();
  std::vector<int> iters;
  std::vector<double> ms;
  for (int trial = 0; trial < 5; ++trial) {
    const auto t0 = Clock::now();
    const PlanningRoot root = root_from_history(hist);
    const auto tr = make_rnn_transition<float>(*model, model_f, root, hist);
    SearchConfig cfg;
    cfg.budget_ns = 300'000'000;
    cfg.k_parallel = 50;
    cfg.seed = static_cast<std::uint64_t>(trial);
    const auto res = search(root, tr, cfg);
    ms.push_back(1e3 * seconds_since(t0));
    iters.push_back(res.iterations);
  }
  std::vector<double> it_d(iters.begin(), iters.end());
  const double it_med = median(it_d), ms_med = median(ms);
  const double ms_max = *std::max_element(ms.begin(), ms.end());
  const bool ok = *std::min_element(iters.begin(), iters.end()) >= 20 && ms_max <= 350.0;
  return {ok, "12 agents, H=64, K=50: median " + fmt(it_med, 0) + " iterations (min " +
                  std::to_string(*std::min_element(iters.begin(), iters.end())) + "), median cycle " + fmt(ms_med, 1) +
                  " ms (max " + fmt(ms_max, 1) + " ms) over 5 cycles"};
}

// --- 8 ---------------------------------------------------------------------

std::map<std::string, std::string> read_csvs(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), dir).string()] = ss.str();
  }
  return out;
}

Verdict cli_determinism(const Options& o) {
  if (o.cli.empty() || !fs::exists(o.cli)) return {false, "CLI binary not found (pass --cli)"};
  const fs::path root = fs::absolute(o.work_dir) / "cli";
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream cfg(root / "bench.cfg");
    cfg << "planners = mcts-rnn, mcts-cv, pf\nepisodes = 2\nseeds = 0\nagents_max = 5\nmax_frames = 40\niterations = 4\n";
    std::ofstream plan(root / "plan.cfg");
    plan << "iterations = 5\nk_parallel = 20\n";
  }
  for (const std::string run : {"run1", "run2"}) {
    const fs::path out = root / run;
    const std::string q = "\"" + o.cli + "\"";
    const std::vector<std::string> cmds{
        q + " gen-data --seed 3 --episodes 4 --frames 40 --out-dir \"" + (out / "data").string() + "\"",
        q + " train --seed 3 --episodes 30 --epochs 2 --max-windows 64 --max-val-windows 32 --eval-stride 4 --out-dir \"" +
            (out / "train").string() + "\"",
        q + " sweep-dt --seed 3 --episodes 30 --delta-ts none,1 --seeds 0 --epochs 1 --max-windows 32 "
            "--max-val-windows 16 --eval-stride 4 --out-dir \"" +
            (out / "sweep").string() + "\"",
        q + " bench --seed 3 --config \"" + (root / "bench.cfg").string() + "\" --model \"" +
            (out / "train" / "model.cprnn").string() + "\" --out-dir \"" + (out / "bench").string() + "\"",
        q + " plan --seed 3 --planner mcts-cv --config \"" + (root / "plan.cfg").string() +
            "\" --agents 4 --max-frames 30 --out-dir \"" + (out / "plan").string() + "\"",
        q + " report --episodes \"" + (out / "bench" / "episodes.csv").string() + "\" --sweep \"" +
            (out / "sweep" / "sweep.csv").string() + "\" --out-dir \"" + (out / "report").string() + "\"",
    };
    for (const auto& cmd : cmds) {
      const std::string full = cmd + " --quiet >> \"" + (out.string() + ".log") + "\" 2>&1";
      fs::create_directories(out);
      if (std::system(full.c_str()) != 0) return {false, "command failed: " + cmd};
    }
  }
  const auto a = read_csvs(root / "run1");
  const auto b = read_csvs(root / "run2");
  std::string diff;
  for (const auto& [name, text] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != text) diff += (diff.empty() ? "" : ", ") + name;
  }
  if (a.size() != b.size()) diff += (diff.empty() ? "" : ", ") + std::string("file sets differ");
  return {diff.empty() && a.size() >= 10,
          diff.empty() ? std::to_string(a.size()) + " CSV files byte-identical across two runs" : "differs: " + diff};
}

// --- 9 ---------------------------------------------------------------------

Verdict invariants(const Options& o) {
  const auto t0 = Clock::now();
  PlanningRoot root;
  root.goal = {6.0, 1.0};
  root.agent_ids = {0, 1, 2};
  root.agents_now = {{1.5, 0.4}, {3.0, -1.0}, {2.0, 1.8}};
  root.agents_prev = {{1.7, 0.4}, {3.0, -0.8}, {2.1, 1.9}};
  const CvTransition cv(root);
  SearchConfig cfg;
  cfg.seed = 99;
  Mcts<CvTransition> tree(root, cv, cfg);
  constexpr int kIterations = 10'000;
  for (int i = 0; i < kIterations; ++i) {
    if (!tree.iterate()) return {false, "tree exhausted at iteration " + std::to_string(i)};
    const std::string v = oracle::tree_violation(tree, cfg.max_depth);
    if (!v.empty()) return {false, "iteration " + std::to_string(i) + ": " + v};
  }
  int deepest = 0;
  for (const auto& nd : tree.nodes()) deepest = std::max(deepest, nd.depth);
  const std::size_t nodes = tree.nodes().size();

  // Learned transition, shorter run.
  const auto model = planning_model(o);
  OrcaWorld world(make_scenario(ScenarioKind::kGroupCrossing, 6, 8), OrcaConfig{});
  for (int k = 0; k < 6; ++k) world.step(RobotAction{});
  const PlanningRoot rroot = root_from_history(world.episode());
  const auto tr = make_rnn_transition<float>(*model, model->cast<float>(), rroot, world.episode());
  Mcts<RnnTransition<float>> rtree(rroot, tr, cfg);
  for (int i = 0; i < 400; ++i) {
    rtree.iterate();
    const std::string v = oracle::tree_violation(rtree, cfg.max_depth);
    if (!v.empty()) return {false, "learned model, iteration " + std::to_string(i) + ": " + v};
  }
  return {true, std::to_string(kIterations) + " iterations (" + std::to_string(nodes) + " nodes, depth " +
                    std::to_string(deepest) + ") plus 400 with the learned model, checked after every iteration, " +
                    fmt(seconds_since(t0), 1) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Options opt;
  std::vector<int> only;
  std::string cache = opt.cache_dir.string(), work = opt.work_dir.string();
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_option("--cache-dir", cache, "Trained-model cache")->capture_default_str();
  app.add_option("--work-dir", work, "Scratch directory")->capture_default_str();
  app.add_option("--cli", opt.cli, "Path of the crowdplan CLI binary");
  CLI11_PARSE(app, argc, argv);
  opt.cache_dir = cache;
  opt.work_dir = work;

  const std::vector<std::pair<std::string, std::function<Verdict(const Options&)>>> criteria{
      {"analytic gradients match central differences", gradients},
      {"unit values of uct, nll, U, sef1, sef2", unit_values},
      {"ORCA velocity LP matches grid search", orca_lp},
      {"robot lookahead dt=1 beats no robot input at 2 m", lookahead_sweep},
      {"planner comparison trends", planner_bench},
      {"anytime: best-action value non-decreasing", anytime},
      {"300 ms budget: >= 20 iterations, <= 350 ms", budget},
      {"CLI CSV outputs byte-identical", cli_determinism},
      {"tree invariants after every iteration", invariants},
  };
  const std::set<int> wanted(only.begin(), only.end());
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    Verdict v;
    try {
      v = criteria[i].second(opt);
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += v.pass ? 0 : 1;
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << "  ["
              << v.detail << "]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
