#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "r3l/harness.hpp"

using namespace r3l;

namespace {

RunConfig tiny(env::TaskId task, Variant variant) {
  RunConfig c;
  c.task = task;
  c.variant = variant;
  c.obs_mode = env::ObsMode::State;
  c.epochs = 2;
  c.horizon = 20;
  c.initial_exploration = 100;
  c.replay_capacity = 5000;
  c.seed = 3;
  c.sac.hidden = {32, 32};
  c.sac.batch_size = 32;
  c.vice.hidden = {32, 32};
  c.vice.batch_size = 32;
  c.vice.goal_pool_size = 20;
  c.rnd.hidden = {32, 32};
  c.rnd.embedding_dim = 8;
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("r3l_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Minimal XML well-formedness check: balanced tags and quoted attributes.
bool well_formed_xml(const std::string& s) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  bool root_seen = false;
  while ((i = s.find('<', i)) != std::string::npos) {
    const std::size_t end = s.find('>', i);
    if (end == std::string::npos) return false;
    std::string tag = s.substr(i + 1, end - i - 1);
    i = end + 1;
    if (tag.starts_with("?")) continue;
    if (std::count(tag.begin(), tag.end(), '"') % 2) return false;
    if (tag.starts_with("/")) {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
      continue;
    }
    const bool self_closing = tag.ends_with("/");
    const std::string name = tag.substr(0, tag.find_first_of(" /"));
    if (stack.empty()) {
      if (root_seen) return false;
      root_seen = true;
    }
    if (!self_closing) stack.push_back(name);
  }
  return root_seen && stack.empty();
}

}  // namespace

TEST_CASE("config: defaults, round trip, strictness") {
  const ExperimentConfig d = parse_config("{}");
  CHECK(d.run.sac.hidden == std::vector<int>{512, 512});
  CHECK(d.run.epochs == 1000);
  CHECK(d.harness.eval_rollout == 200);
  CHECK(d.harness.matrix_cap == 500000);

  ExperimentConfig c = parse_config(R"({"task": "valve", "variant": "VICE_Only", "obs": "state",
      "reward": "true", "resets": "episodic", "sac": {"hidden": [64, 64], "batch_size": 128},
      "loop": {"N": 7, "H": 50, "seed": 11}, "harness": {"seeds": [4, 5]}})");
  CHECK(c.run.task == env::TaskId::Valve);
  CHECK(c.run.variant == Variant::VICE_Only);
  CHECK(c.run.reward_mode == RewardMode::True);
  CHECK(c.run.resets == ResetMode::Episodic);
  CHECK(c.run.sac.hidden == std::vector<int>{64, 64});
  CHECK(c.run.epochs == 7);
  CHECK(c.harness.seeds == std::vector<std::uint64_t>{4, 5});
  const std::string text = config_json(c);
  CHECK(config_json(parse_config(text)) == text);
  CHECK(config_digest(parse_config(text).run) == config_digest(c.run));
  RunConfig other = c.run;
  other.seed = 12;
  CHECK(config_digest(other) != config_digest(c.run));

  const ExperimentConfig rc = parse_config(R"({"variant": "ResetController", "loop": {"reset_choice": 3}})");
  CHECK(rc.run.reset_states == reposition_reset_choices()[2]);
  CHECK(config_json(parse_config(config_json(rc))) == config_json(rc));

  CHECK_THROWS_AS(parse_config(R"({"sac": {"hiden": [1]}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"colour": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"loop": {"H": "long"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"task": "juggle"})"), ConfigError);
  CHECK_THROWS_AS(parse_config("{"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"variant": "VICE_VAE", "obs": "state"})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"variant": "ResetController"})"), ConfigError);
}

TEST_CASE("R3L_SEED overrides the configured seed") {
  ExperimentConfig c = parse_config(R"({"loop": {"seed": 1}})");
  ::setenv("R3L_SEED", "77", 1);
  apply_seed_override(c);
  CHECK(c.run.seed == 77);
  ::setenv("R3L_SEED", "-3", 1);
  CHECK_THROWS_AS(apply_seed_override(c), ConfigError);
  ::unsetenv("R3L_SEED");
  apply_seed_override(c);
  CHECK(c.run.seed == 77);
}

TEST_CASE("zero-action policy succeeds exactly on the goal init") {
  for (env::TaskId task : {env::TaskId::Beads, env::TaskId::Valve, env::TaskId::Reposition}) {
    const auto zero = [task](const env::Observation&) { return env::Action(env::Action::Zero(env::action_dim(task))); };
    const EvalReport r = evaluate_policy(task, env::ObsMode::State, zero, 200);
    const env::EvalGrid grid = env::eval_grid(task);
    REQUIRE(r.outcomes.size() == grid.inits.size());
    CHECK(r.successes() == 1);
    CHECK(r.outcomes[grid.goal_index].success);
  }
}

TEST_CASE("grid sizes: 8, 8 and 15 outcome rows") {
  const std::pair<env::TaskId, std::size_t> sizes[] = {
      {env::TaskId::Beads, 8}, {env::TaskId::Valve, 8}, {env::TaskId::Reposition, 15}};
  for (auto [task, n] : sizes) {
    const auto zero = [task](const env::Observation&) { return env::Action(env::Action::Zero(env::action_dim(task))); };
    CHECK(evaluate_policy(task, env::ObsMode::State, zero, 1).outcomes.size() == n);
  }
}

TEST_CASE("random policy on the beads grid succeeds rarely") {
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    const auto random = [&](const env::Observation&) {
      env::Action a(env::action_dim(env::TaskId::Beads));
      for (auto& x : a) x = u(rng);
      return a;
    };
    const EvalReport r = evaluate_policy(env::TaskId::Beads, env::ObsMode::State, random, 200);
    CHECK(r.successes() <= 3);
    total += r.success_rate();
  }
  CHECK(total / 5 <= 0.3);
}

TEST_CASE("eval report aggregates equal recomputation from rows") {
  EvalReport r;
  r.outcomes = {{{}, true, 0.1}, {{}, false, 0.7}, {{}, true, 0.4}, {{}, false, 1.0}};
  CHECK(r.successes() == 2);
  CHECK(r.success_rate() == 0.5);
  CHECK(r.mean_metric() == doctest::Approx(0.55).epsilon(1e-12));
  std::ostringstream os;
  write_eval_csv(os, r);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "task,variant,seed,epoch,init,success,final_metric");
  int rows = 0, ok = 0;
  while (std::getline(is, line)) {
    ++rows;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    REQUIRE(f.size() == 7);
    ok += f[5] == "1";
  }
  CHECK(rows == 4);
  CHECK(ok == r.successes());
}

TEST_CASE("evaluating a run and its checkpoint agree; wrong task is rejected") {
  const RunConfig c = tiny(env::TaskId::Valve, Variant::R3L);
  const Run run = run_training(c);
  const EvalReport direct = evaluate(run, 50);
  CHECK(direct.outcomes.size() == 8);
  CHECK(direct.epoch == 4);
  const Checkpoint ckpt = run.checkpoint(config_digest(c));
  const EvalReport restored = evaluate(ckpt, c, env::TaskId::Valve, 50);
  for (std::size_t i = 0; i < 8; ++i) CHECK(restored.outcomes[i].final_metric == direct.outcomes[i].final_metric);
  CHECK_THROWS_AS(evaluate(ckpt, c, env::TaskId::Beads, 50), ConfigError);
}

TEST_CASE("metrics CSV: exact header, byte-identical re-emission, lossless numbers") {
  CHECK(std::string(kMetricsHeader) == "task,variant,seed,epoch,env_steps,metric,value");
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(-2.0) == "-2");
  for (double v : {0.1, 1.0 / 3.0, 6.02214076e23, -1e-300, 123456789.0})
    CHECK(std::stod(format_number(v)) == v);

  const RunConfig c = tiny(env::TaskId::Reposition, Variant::R3L);
  const Run run = run_training(c);
  const auto rows = csv_rows(run);
  REQUIRE(!rows.empty());
  CHECK(rows[0].task == "reposition");
  CHECK(rows[0].variant == "R3L");
  std::ostringstream a, b;
  write_metrics_csv(a, rows);
  write_metrics_csv(b, csv_rows(run));
  CHECK(a.str() == b.str());
  CHECK(a.str().rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
  std::istringstream is(a.str());
  const auto back = read_metrics_csv(is);
  CHECK(back == rows);
  std::ostringstream again;
  write_metrics_csv(again, back);
  CHECK(again.str() == a.str());

  const auto dir = scratch("csv");
  write_metrics_csv(dir / "m.csv", rows);
  CHECK(read_metrics_csv(dir / "m.csv") == rows);
  CHECK_THROWS_AS(write_metrics_csv(dir / "missing" / "m.csv", rows), std::runtime_error);
  std::istringstream bad("task,seed\n");
  CHECK_THROWS_AS(read_metrics_csv(bad), std::runtime_error);
}

TEST_CASE("learning curve plot is well-formed SVG with one line per seed and a band") {
  std::vector<CsvRow> rows;
  for (std::uint64_t seed : {0u, 1u, 2u})
    for (int e = 1; e <= 5; ++e)
      rows.push_back({"valve", "R3L", seed, e, 100 * e, "train_metric", 1.0 / e + 0.1 * static_cast<double>(seed)});
  rows.push_back({"valve", "R3L", 0, 1, 100, "alpha", 0.5});
  const std::string svg = learning_curve_svg(rows, "train_metric", "valve <R3L> & co");
  CHECK(well_formed_xml(svg));
  CHECK(svg.find("<svg") != std::string::npos);
  std::size_t lines = 0, pos = 0;
  while ((pos = svg.find("<polyline", pos)) != std::string::npos) ++lines, ++pos;
  CHECK(lines == 3 + 1);  // seeds plus the mean
  CHECK(svg.find("<polygon") != std::string::npos);
  CHECK(svg.find("&lt;R3L&gt; &amp; co") != std::string::npos);
  CHECK(well_formed_xml(learning_curve_svg({}, "train_metric", "empty")));
  CHECK(!well_formed_xml("<svg><g></svg>"));
}

TEST_CASE("goal pools and VAE checkpoints survive a disk round trip") {
  RunConfig c = tiny(env::TaskId::Valve, Variant::R3L);
  c.obs_mode = env::ObsMode::Image;
  std::mt19937_64 rng(5);
  const GoalPool pool = make_goal_pool(c, env::goal_state(c.task), rng);
  const auto dir = scratch("goals");
  save_goal_pool(dir, pool);
  const GoalPool back = load_goal_pool(dir, c.task, env::ObsMode::Image);
  REQUIRE(back.size() == pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CHECK(back.states()[i] == pool.states()[i]);
    CHECK(*back[i].image == *pool[i].image);
  }
  CHECK_THROWS_AS(load_goal_pool(dir, env::TaskId::Beads, env::ObsMode::Image), ConfigError);

  VaeConfig vc;
  vc.filters = {4, 4, 4};
  vc.latent_dim = 4;
  VaeModel m = make_vae(vc, rng);
  CHECK_THROWS_AS(vae_from_checkpoint(vae_checkpoint(m), vc), CheckpointError);
  freeze(m);
  save_checkpoint(dir / "vae.r3l", vae_checkpoint(m));
  const VaeModel loaded = vae_from_checkpoint(load_checkpoint(dir / "vae.r3l"), vc);
  CHECK(loaded.frozen);
  CHECK(loaded.encoder_params.hash() == m.encoder_params.hash());
  CHECK(loaded.decoder_params.hash() == m.decoder_params.hash());
  VaeConfig wider = vc;
  wider.latent_dim = 5;
  CHECK_THROWS_AS(vae_from_checkpoint(load_checkpoint(dir / "vae.r3l"), wider), CheckpointError);
}

TEST_CASE("checkpoint files round-trip bit-exactly") {
  const RunConfig c = tiny(env::TaskId::Beads, Variant::R3L);
  const Run run = run_training(c);
  const Checkpoint ckpt = run.checkpoint(config_digest(c));
  const auto dir = scratch("ckpt");
  save_checkpoint(dir / "a.r3l", ckpt);
  const Checkpoint loaded = load_checkpoint(dir / "a.r3l");
  CHECK(loaded == ckpt);
  save_checkpoint(dir / "b.r3l", loaded);
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  CHECK(bytes(dir / "a.r3l") == bytes(dir / "b.r3l"));
}

TEST_CASE("steps to threshold: reached or censored at the cap") {
  RunConfig c = tiny(env::TaskId::Reposition, Variant::VICE_Only);
  const StepsToThreshold easy = steps_to_threshold(c, 1000, 10.0);
  CHECK(!easy.censored);
  CHECK(easy.steps == 100 + 20);
  const StepsToThreshold never = steps_to_threshold(c, 200, -1.0);
  CHECK(never.censored);
  CHECK(never.steps == 200);
}

TEST_CASE("matrix: eight cells of three seeds, deterministic, Reposition only") {
  RunConfig base = tiny(env::TaskId::Reposition, Variant::VICE_Only);
  base.sac.encoder_filters = {4, 4, 4};
  base.sac.encoder_features = 8;
  base.vice.filters = {4, 4, 4};
  HarnessConfig h;
  h.matrix_cap = 140;
  h.threshold = 0.15;
  int calls = 0;
  const MatrixTable t = run_matrix(base, h, [&](const std::string&) { ++calls; });
  CHECK(t.cells.size() == 8);
  CHECK(calls == 24);
  for (const MatrixCell& cell : t.cells) {
    CHECK(cell.seeds.size() == 3);
    CHECK(cell.runs.size() == 3);
    CHECK(cell.median_steps() <= 140);
  }
  CHECK_NOTHROW(t.cell(env::ObsMode::Image, RewardMode::Vice, ResetMode::Free));
  const std::string csv = matrix_csv(t);
  CHECK(csv.rfind("obs,reward,resets,seeds,median_steps,median_censored,runs\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
  CHECK(matrix_csv(run_matrix(base, h)) == csv);

  RunConfig valve = base;
  valve.task = env::TaskId::Valve;
  CHECK_THROWS_AS(run_matrix(valve, h), ConfigError);
}

TEST_CASE("matrix cell medians") {
  MatrixCell c;
  c.runs = {{300, false}, {100, false}, {500, true}};
  CHECK(c.median_steps() == 300);
  CHECK(!c.median_censored());
  c.runs = {{300, true}, {100, false}, {500, true}};
  CHECK(c.median_censored());
  c.runs = {{100, false}, {200, false}};
  CHECK(c.median_steps() == 150);
}

TEST_CASE("train/eval gap row is finite") {
  RunConfig c = tiny(env::TaskId::Reposition, Variant::VICE_Only);
  const GapResult g = train_eval_gap(c, 30);
  CHECK(std::isfinite(g.train_metric));
  CHECK(std::isfinite(g.eval_metric));
  CHECK(g.eval_success_rate >= 0.0);
  CHECK(g.eval_success_rate <= 1.0);
  CHECK(g.seed == c.seed);
}
