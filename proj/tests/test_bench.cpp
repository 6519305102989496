#include "crowdplan/bench.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace crowdplan;

namespace {

Episode straight_robot(int frames, double step, Vec2 goal) {
  Episode ep;
  for (int k = 0; k < frames; ++k) {
    Scene s;
    s.timestep = k;
    s.robot.position = {step * k, 0.0};
    s.goal = goal;
    ep.frames.push_back(s);
  }
  return ep;
}

EpisodeRecord rec(const std::string& planner, Outcome o, double len, long near, std::array<long, 3> exceed) {
  EpisodeRecord r;
  r.planner = planner;
  r.scenario = "random";
  r.outcome = o;
  r.path_length = len;
  r.reported_time = 0.3;
  r.disturbance.near_pairs = near;
  r.disturbance.exceed = exceed;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(BenchHelpers, Parsing) {
  EXPECT_FALSE(parse_delta_t("none").has_value());
  EXPECT_EQ(parse_delta_t("3"), 3);
  EXPECT_THROW(parse_delta_t("-1"), std::invalid_argument);
  EXPECT_THROW(parse_delta_t("2x"), std::invalid_argument);
  EXPECT_FALSE(parse_threshold("inf").has_value());
  EXPECT_EQ(parse_threshold("2.0"), 2.0);
  EXPECT_THROW(parse_threshold("0"), std::invalid_argument);
  EXPECT_EQ(threshold_label(std::nullopt), "");
  EXPECT_EQ(threshold_label(5.0), "5.0");
  EXPECT_EQ(mix_seed(1, 2), mix_seed(1, 2));
  EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
}

TEST(BenchHelpers, PlannerNames) {
  for (auto p : {PlannerKind::kMctsRnn, PlannerKind::kMctsRnnSef2, PlannerKind::kMctsCv, PlannerKind::kPf}) {
    EXPECT_EQ(planner_from_string(to_string(p)), p);
  }
  EXPECT_EQ(to_string(PlannerKind::kMctsRnnSef2), "mcts-rnn-sef2");
  EXPECT_THROW(planner_from_string("astar"), std::invalid_argument);
  EXPECT_TRUE(uses_model(PlannerKind::kMctsRnn));
  EXPECT_FALSE(uses_model(PlannerKind::kMctsCv));
}

TEST(EpisodeSpecs, PairedAndInRange) {
  BenchConfig cfg;
  cfg.agents_min = 3;
  cfg.agents_max = 5;
  std::set<ScenarioKind> kinds;
  for (int i = 0; i < 60; ++i) {
    const auto a = episode_spec(cfg, 1, i);
    const auto b = episode_spec(cfg, 1, i);
    EXPECT_EQ(a.scene_seed, b.scene_seed);
    EXPECT_EQ(a.kind, b.kind);
    EXPECT_GE(a.n_agents, 3);
    EXPECT_LE(a.n_agents, 5);
    kinds.insert(a.kind);
  }
  EXPECT_EQ(kinds.size(), 3u);
  EXPECT_NE(episode_spec(cfg, 1, 0).scene_seed, episode_spec(cfg, 2, 0).scene_seed);
}

TEST(Disturbance, HandCounts) {
  Episode ep = straight_robot(4, 0.0, {9.0, 0.0});
  // Agent 0 stays near the robot and starts drifting sideways at frame 2.
  const std::array<Vec2, 4> near{Vec2(1.0, 0.0), Vec2(1.0, 0.0), Vec2(1.0, 0.03), Vec2(1.0, 0.06)};
  const std::array<Vec2, 4> far{Vec2(5.0, 0.0), Vec2(5.0, 1.0), Vec2(5.0, 0.0), Vec2(5.0, 1.0)};
  for (int k = 0; k < 4; ++k) {
    AgentState a;
    a.id = 0;
    a.position = near[static_cast<std::size_t>(k)];
    AgentState b;
    b.id = 1;
    b.position = far[static_cast<std::size_t>(k)];
    ep.frames[static_cast<std::size_t>(k)].agents = {a, b};
  }
  const auto c = disturbance_counts(ep, 2.0);
  // Interior frames 1 and 2 for agent 0: accelerations 0.75 and 0.0 m/s^2.
  EXPECT_EQ(c.near_pairs, 2);
  EXPECT_EQ(c.exceed[0], 0);
  EXPECT_EQ(c.exceed[1], 1);
  EXPECT_EQ(c.exceed[2], 1);
}

TEST(Freezing, DetectsStallAwayFromGoal) {
  EXPECT_FALSE(detect_freezing(straight_robot(30, 0.2, {10.0, 0.0}), 10, 0.2, 0.5));
  EXPECT_TRUE(detect_freezing(straight_robot(30, 0.01, {10.0, 0.0}), 10, 0.2, 0.5));
  // Parked on the goal is not freezing.
  EXPECT_FALSE(detect_freezing(straight_robot(30, 0.0, {0.0, 0.0}), 10, 0.2, 0.5));
  EXPECT_FALSE(detect_freezing(straight_robot(5, 0.0, {9.0, 0.0}), 10, 0.2, 0.5));
}

TEST(PathLength, SumsSegments) {
  EXPECT_NEAR(path_length(straight_robot(11, 0.3, {0, 0})), 3.0, 1e-12);
  EXPECT_EQ(path_length(Episode{}), 0.0);
}

TEST(Summary, HandExample) {
  std::vector<EpisodeRecord> recs{rec("a", Outcome::kSuccess, 10.0, 10, {1, 2, 3}),
                                  rec("a", Outcome::kSuccess, 12.0, 30, {1, 2, 5}),
                                  rec("a", Outcome::kCollision, 99.0, 0, {0, 0, 0}),
                                  rec("a", Outcome::kTimeout, 99.0, 0, {0, 0, 0}),
                                  rec("b", Outcome::kTimeout, 1.0, 0, {0, 0, 0})};
  recs[3].error = "boom";
  const auto rows = summarize(recs);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].planner, "a");
  EXPECT_EQ(rows[0].episodes, 4);
  EXPECT_EQ(rows[0].success, 50.0);
  EXPECT_EQ(rows[0].collision, 25.0);
  EXPECT_EQ(rows[0].timeout, 25.0);
  EXPECT_EQ(rows[0].length, 11.0);
  EXPECT_EQ(rows[0].failed, 1);
  EXPECT_NEAR(rows[0].disturbance[0], 5.0, 1e-12);
  EXPECT_NEAR(rows[0].disturbance[2], 20.0, 1e-12);
  EXPECT_FALSE(rows[1].length.has_value());

  std::ostringstream csv;
  write_table_csv(csv, rows);
  EXPECT_EQ(csv.str(),
            "planner,success,collision,length,time,disturbance_1.0,disturbance_0.5,disturbance_0.25\n"
            "a,50.0,25.0,11.00,0.30,5.0,10.0,20.0\n"
            "b,0.0,0.0,,0.30,0.0,0.0,0.0\n");
  const auto j = table_json(rows, true);
  EXPECT_TRUE(j["incomplete"].get<bool>());
  EXPECT_TRUE(j["rows"][1]["length"].is_null());
  std::ostringstream txt;
  write_table_text(txt, rows, true);
  EXPECT_EQ(txt.str().rfind("INCOMPLETE", 0), 0u);
}

TEST(EpisodesCsv, RoundTrip) {
  std::vector<EpisodeRecord> recs{rec("pf", Outcome::kCollision, 4.5, 7, {1, 2, 3})};
  recs[0].frozen = true;
  recs[0].error = "bad, thing";
  std::stringstream buf;
  write_episodes_csv(buf, recs);
  const auto back = read_episodes_csv(buf);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].planner, "pf");
  EXPECT_EQ(back[0].outcome, Outcome::kCollision);
  EXPECT_EQ(back[0].disturbance.exceed, recs[0].disturbance.exceed);
  EXPECT_TRUE(back[0].frozen);
  EXPECT_EQ(back[0].error, "bad; thing");
  std::istringstream bad("nope\n");
  EXPECT_THROW(read_episodes_csv(bad), FormatError);
}

TEST(SweepCsv, RoundTripAndPooling) {
  std::vector<SweepRow> rows;
  rows.push_back({1, 2.0, 0, DisplacementError{1.0, 2.0, 10}, false});
  rows.push_back({1, 2.0, 1, DisplacementError{2.0, 4.0, 30}, false});
  rows.push_back({1, 2.0, 2, std::nullopt, true});
  rows.push_back({std::nullopt, std::nullopt, 0, std::nullopt, false});
  std::stringstream buf;
  write_sweep_csv(buf, rows);
  EXPECT_EQ(buf.str(),
            "delta_t,filter_m,seed,ade,fde\n1,2.0,0,1.000000,2.000000\n1,2.0,1,2.000000,4.000000\n"
            "1,2.0,2,diverged,diverged\nnone,,0,,\n");
  const auto back = read_sweep_csv(buf);
  ASSERT_EQ(back.size(), 4u);
  EXPECT_TRUE(back[2].diverged);
  EXPECT_FALSE(back[3].error.has_value());
  EXPECT_FALSE(back[3].delta_t.has_value());

  const auto pooled = pooled_metrics(rows);
  ASSERT_EQ(pooled.size(), 2u);
  EXPECT_NEAR(pooled[0].error->ade, 1.75, 1e-12);
  EXPECT_EQ(pooled[0].error->n_agents, 40u);
  EXPECT_FALSE(pooled[1].error.has_value());

  const auto sum = summarize_sweep(rows);
  EXPECT_EQ(sum[0].runs, 2);
  EXPECT_NEAR(*sum[0].median_ade, 1.5, 1e-12);
  EXPECT_FALSE(sum[1].median_ade.has_value());
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_THROW(median({}), std::invalid_argument);
}

TEST(BenchConfig, FromKeyValues) {
  std::istringstream in(
      "planners = pf, mcts-cv\nepisodes = 4\nseeds = 5,6\nagents_min = 3\nagents_max = 4\nscenarios = random\n"
      "iterations = 7\npf_k_rep = 0.7\n");
  const auto kv = KvConfig::parse(in);
  const auto c = bench_config_from(kv);
  EXPECT_EQ(c.planners, (std::vector<PlannerKind>{PlannerKind::kPf, PlannerKind::kMctsCv}));
  EXPECT_EQ(c.episodes, 4);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{5, 6}));
  EXPECT_EQ(c.scenarios, (std::vector<ScenarioKind>{ScenarioKind::kRandom}));
  EXPECT_EQ(c.search.iterations, 7);
  EXPECT_EQ(c.pf.k_rep, 0.7);
  EXPECT_TRUE(kv.unused_keys().empty());
  std::istringstream bad("agents_max = 13\n");
  EXPECT_THROW(bench_config_from(KvConfig::parse(bad)), std::invalid_argument);
}

TEST(BenchRun, OrderedAndThreadIndependent) {
  BenchConfig cfg;
  cfg.planners = {PlannerKind::kPf, PlannerKind::kMctsCv};
  cfg.episodes = 2;
  cfg.seeds = {0};
  cfg.agents_max = 4;
  cfg.max_frames = 40;
  cfg.search.iterations = 3;
  const auto a = run_planner_bench(cfg, nullptr);
  cfg.threads = 3;
  const auto b = run_planner_bench(cfg, nullptr);
  ASSERT_EQ(a.size(), 4u);
  std::ostringstream sa, sb;
  write_episodes_csv(sa, a);
  write_episodes_csv(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a[0].planner, "pf");
  EXPECT_EQ(a[3].planner, "mcts-cv");
  EXPECT_EQ(a[1].index, 1);
  for (const auto& r : a) EXPECT_TRUE(r.error.empty()) << r.error;
  EXPECT_DOUBLE_EQ(a[2].reported_time, 0.3);
}

TEST(BenchRun, ModelPlannersNeedAModel) {
  BenchConfig cfg;
  cfg.planners = {PlannerKind::kMctsRnn};
  EXPECT_THROW(run_planner_bench(cfg, nullptr), std::invalid_argument);
}

TEST(Report, WritesFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "crowdplan_report_test";
  std::filesystem::remove_all(dir);
  std::vector<EpisodeRecord> recs{rec("pf", Outcome::kSuccess, 3.0, 1, {0, 0, 1})};
  emit_report(recs, dir);
  for (const char* f : {"summary.csv", "outcomes.csv", "summary.txt", "summary.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  EXPECT_EQ(slurp(dir / "summary.txt").find("INCOMPLETE"), std::string::npos);
  EXPECT_THROW(emit_report({}, dir), std::invalid_argument);
  std::vector<SweepRow> rows{{1, 2.0, 0, DisplacementError{1.0, 2.0, 10}, false}};
  emit_sweep_report(rows, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "sweep_summary.csv"));
  const std::string svg = slurp(dir / "sweep_ade.svg");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  std::filesystem::remove_all(dir);
}

TEST(Report, TrajectorySvgIsWellFormed) {
  const auto ep = straight_robot(5, 0.2, {1.0, 0.0});
  const std::string svg = trajectory_svg("a <b>", {{"pf", ep}});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("a &lt;b&gt;"), std::string::npos);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}
