#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "r3l/loop.hpp"

using namespace r3l;

namespace {

RunConfig tiny(env::TaskId task, Variant variant, env::ObsMode obs = env::ObsMode::State) {
  RunConfig c;
  c.task = task;
  c.variant = variant;
  c.obs_mode = obs;
  c.epochs = 3;
  c.horizon = 20;
  c.initial_exploration = 100;
  c.replay_capacity = 5000;
  c.seed = 42;
  c.sac.hidden = {32, 32};
  c.sac.batch_size = 32;
  c.sac.encoder_filters = {4, 4, 4};
  c.sac.encoder_features = 8;
  c.vice.filters = {4, 4, 4};
  c.vice.hidden = {32, 32};
  c.vice.batch_size = 32;
  c.vice.goal_pool_size = 20;
  c.rnd.filters = {4, 4, 4};
  c.rnd.hidden = {32, 32};
  c.rnd.embedding_dim = 8;
  c.vae.filters = {4, 4, 4};
  c.vae.latent_dim = 4;
  c.vae.n_samples = 64;
  c.vae.epochs = 1;
  c.vae.batch_size = 32;
  return c;
}

std::vector<Transition> by_step(const ReplayBuffer& b) {
  std::vector<Transition> log;
  for (std::size_t s = 0; s < b.size(); ++s) log.push_back(b[s]);
  std::sort(log.begin(), log.end(), [](const Transition& x, const Transition& y) { return x.step_index < y.step_index; });
  return log;
}

bool same_obs(const env::Observation& a, const env::Observation& b) {
  if (a.state != b.state || a.proprio != b.proprio) return false;
  if (a.image || b.image) return a.image && b.image && *a.image == *b.image;
  return true;
}

std::string serialize(const Checkpoint& c) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, c);
  return std::move(os).str();
}

}  // namespace

TEST_CASE("policy schedule follows epoch parity") {
  CHECK(select_policy(1) == 1);
  CHECK(select_policy(2) == 0);
  CHECK(select_policy(2 * 7) == 0);
  CHECK_THROWS_AS(select_policy(0), std::invalid_argument);
}

TEST_CASE("combined reward") {
  RunningStd unit;  // std 1 before warm-up
  CHECK(combined_reward(0, 2.0, 0.5, unit, unit, 1.0, 1.0) == 2.5);
  CHECK(combined_reward(1, 2.0, 0.5, unit, unit, 1.0, 1.0) == 0.5);
  CHECK(combined_reward(0, 2.0, 0.5, unit, unit, 0.0, 1.0) == combined_reward(1, 2.0, 0.5, unit, unit, 0.0, 1.0));
  RunningStd wide;
  wide.initialized = true;
  wide.variance = 4.0;
  CHECK(combined_reward(0, 2.0, 0.5, wide, unit, 1.0, 1.0) == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("config validation") {
  RunConfig c = tiny(env::TaskId::Valve, Variant::R3L);
  CHECK_NOTHROW(validate(c));
  c.horizon = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = tiny(env::TaskId::Valve, Variant::R3L);
  c.train_steps_per_env_step = 2.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = tiny(env::TaskId::Reposition, Variant::ResetController);
  CHECK_THROWS_AS(validate(c), ConfigError);
  c.reset_states = {env::goal_state(env::TaskId::Reposition)};
  CHECK_THROWS_AS(validate(c), ConfigError);
  c.reset_states = reposition_reset_choices()[0];
  CHECK_NOTHROW(validate(c));
  std::swap(c.reset_states[0], c.reset_states[1]);
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = tiny(env::TaskId::Valve, Variant::VICE_VAE);
  CHECK_THROWS_AS(validate(c), ConfigError);
  CHECK_THROWS_AS(parse_variant("R4L"), ConfigError);
  CHECK(parse_variant("VICE_Only") == Variant::VICE_Only);
}

TEST_CASE("N = 0 collects the exploration data and nothing else") {
  RunConfig c = tiny(env::TaskId::Valve, Variant::R3L);
  c.epochs = 0;
  c.initial_exploration = 1000;
  const Run run = run_training(c);
  CHECK(run.buffer().size() == 1000);
  CHECK(run.stats().gradient_steps == 0);
  CHECK(run.epoch() == 0);
  CHECK(run.finished());
}

TEST_CASE("initial exploration: count, continuity and determinism") {
  RunConfig c = tiny(env::TaskId::Reposition, Variant::R3L);
  Run a(c), b(c);
  a.initial_exploration();
  b.initial_exploration();
  CHECK(a.buffer().size() == 100);
  CHECK(a.buffer().content_hash() == b.buffer().content_hash());
  const env::EnvState last = by_step(a.buffer()).back().next_state;
  CHECK(a.state() == last);
  a.run_epoch();
  const auto log = by_step(a.buffer());
  CHECK(same_obs(log[100].obs, log[99].next_obs));
  CHECK(a.stats().hidden_resets == 0);
}

TEST_CASE("reset-free R3L run: continuity, budget, parity, reward isolation") {
  RunConfig c = tiny(env::TaskId::Beads, Variant::R3L);
  c.train_steps_per_env_step = 2.0;
  const Run run = run_training(c);
  const auto log = by_step(run.buffer());
  REQUIRE(log.size() == 100 + 6 * 20);
  for (std::size_t t = 1; t < log.size(); ++t) {
    CHECK(log[t].step_index == log[t - 1].step_index + 1);
    CHECK(same_obs(log[t].obs, log[t - 1].next_obs));
  }
  CHECK(run.stats().hidden_resets == 0);
  CHECK(run.stats().episodic_resets == 0);
  CHECK(run.stats().gradient_steps <= 2 * run.stats().env_steps);
  CHECK(run.stats().gradient_steps == 2 * 6 * 20);
  CHECK(run.stats().epochs_per_policy == std::vector<std::int64_t>{3, 3});
  CHECK(run.stats().vice_queries_per_policy[0] > 0);
  CHECK(run.stats().vice_queries_per_policy[1] == 0);
  CHECK(run.stats().updates_per_policy[1] > 0);
  CHECK(run.stats().buffer_per_policy[0] == &run.buffer());
  CHECK(run.stats().buffer_per_policy[1] == &run.buffer());
}

TEST_CASE("idle agent is untouched during the other agent's epoch") {
  RunConfig c = tiny(env::TaskId::Valve, Variant::R3L);
  Run run(c);
  run.initial_exploration();
  const auto forward = run.agent(0).actor.hash();
  run.run_epoch();  // i = 1: perturbation controller
  CHECK(run.agent(0).actor.hash() == forward);
  const auto perturb = run.agent(1).actor.hash();
  run.run_epoch();
  CHECK(run.agent(1).actor.hash() == perturb);
  CHECK(run.agent(0).actor.hash() != forward);
}

TEST_CASE("VICE_Only runs the forward policy every epoch") {
  const Run run = run_training(tiny(env::TaskId::Valve, Variant::VICE_Only));
  CHECK(run.num_policies() == 1);
  CHECK(!run.rnd());
  CHECK(run.stats().epochs_per_policy == std::vector<std::int64_t>{6});
  CHECK(std::count_if(run.metrics().begin(), run.metrics().end(),
                      [](const MetricRow& r) { return r.metric == "train_metric"; }) == 6);
}

TEST_CASE("episodic runs reinitialize exactly at epoch boundaries") {
  RunConfig c = tiny(env::TaskId::Valve, Variant::VICE_Only);
  c.resets = ResetMode::Episodic;
  c.reward_mode = RewardMode::True;
  const Run run = run_training(c);
  CHECK(run.classifiers().empty());
  CHECK(run.stats().episodic_resets == 100 / 20 + 6);
  CHECK(run.stats().hidden_resets == 0);
}

TEST_CASE("reset controller: one policy and one classifier per reset state") {
  RunConfig c = tiny(env::TaskId::Reposition, Variant::ResetController);
  c.reset_states = reposition_reset_choices()[1];
  const Run run = run_training(c);
  CHECK(run.num_policies() == 2);
  CHECK(run.classifiers().size() == 2);
  REQUIRE(run.goal_pools().size() == 2);
  CHECK(!run.rnd());
  CHECK(env::pose_distance(run.goal_pools()[1].states()[0], c.reset_states[1]) < 0.2);
  CHECK(run.stats().epochs_per_policy == std::vector<std::int64_t>{3, 3});
  CHECK(run.policy_for_epoch(1) == 0);
  CHECK(run.stats().vice_queries_per_policy[1] > 0);

  RunConfig same = c;
  same.reset_states = {c.reset_states[0], c.reset_states[0]};
  same.epochs = 0;
  CHECK_NOTHROW(Run{same});
}

TEST_CASE("identical config and seed give identical metrics") {
  const RunConfig c = tiny(env::TaskId::Reposition, Variant::R3L);
  CHECK(run_training(c).metrics() == run_training(c).metrics());
}

TEST_CASE("checkpoint round trip and resume") {
  RunConfig c = tiny(env::TaskId::Beads, Variant::R3L);
  const Run full = run_training(c);

  Run first(c);
  first.initial_exploration();
  first.run_epoch();
  first.run_epoch();
  first.run_epoch();
  const Checkpoint saved = first.checkpoint(7);
  std::istringstream is(serialize(saved), std::ios::binary);
  const Checkpoint loaded = read_checkpoint(is);
  CHECK(loaded == saved);
  Run resumed = Run::restore(c, loaded);
  CHECK(serialize(resumed.checkpoint(7)) == serialize(saved));
  while (!resumed.finished()) resumed.run_epoch();
  CHECK(resumed.metrics() == full.metrics());
  CHECK(resumed.buffer().content_hash() == full.buffer().content_hash());

  RunConfig other = c;
  other.sac.hidden = {16};
  CHECK_THROWS_AS(Run::restore(other, saved), CheckpointError);
}

TEST_CASE("image runs: VAE latents, raw-pixel agents, and a resumable image checkpoint") {
  for (Variant v : {Variant::R3L, Variant::R3L_NoVAE}) {
    RunConfig c = tiny(env::TaskId::Valve, v, env::ObsMode::Image);
    c.epochs = 1;
    Run run(c);
    run.initial_exploration();
    run.run_epoch();
    const Transition& t = run.buffer()[0];
    REQUIRE(t.obs.image);
    if (v == Variant::R3L) {
      CHECK(run.vae());
      CHECK(t.obs_features.size() == 4);
      CHECK(run.agent(0).nets.input.dim == 4);
    } else {
      CHECK(!run.vae());
      CHECK(t.obs_features.size() == 0);
      CHECK(run.agent(0).nets.input.raw_image);
    }
    const Checkpoint ckpt = run.checkpoint(1);
    Run resumed = Run::restore(c, ckpt);
    CHECK(serialize(resumed.checkpoint(1)) == serialize(ckpt));
    run.run_epoch();
    resumed.run_epoch();
    CHECK(resumed.metrics() == run.metrics());
  }
}
