#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "r3l/nn/grad_check.hpp"
#include "r3l/sac.hpp"

using namespace r3l;
using r3l::nn::MatrixD;
using r3l::nn::VectorD;

namespace {

SacConfig small_sac() {
  SacConfig c;
  c.hidden = {32, 32};
  c.batch_size = 64;
  return c;
}

ReplayBuffer random_buffer(env::TaskId task, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  ReplayBuffer buffer(static_cast<std::size_t>(n));
  env::EnvState s = env::sample_random_state(task, rng);
  env::Observation obs = env::observe(s, env::ObsMode::State);
  for (int i = 0; i < n; ++i) {
    env::Action a(env::action_dim(task));
    for (Eigen::Index j = 0; j < a.size(); ++j) a[j] = u(rng);
    const env::EnvState next = env::env_step(s, a);
    Transition t;
    t.obs = obs;
    t.action = a;
    t.next_obs = env::observe(next, env::ObsMode::State);
    t.step_index = i;
    t.next_state = next;
    obs = t.next_obs;
    s = next;
    buffer.add(std::move(t));
  }
  return buffer;
}

VectorF zero_reward(const ReplayBuffer&, std::span<const std::size_t> slots) {
  return VectorF::Zero(static_cast<Eigen::Index>(slots.size()));
}

MatrixD random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  MatrixD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

}  // namespace

TEST_CASE("squashed gaussian log-probabilities") {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  MatrixD head = MatrixD::Zero(2, 1);  // mu = 0, log sigma = 0
  const auto at_mean = squash<double>(head, MatrixD::Zero(1, 1), -20, 2, false);
  CHECK(at_mean.action(0, 0) == 0.0);
  CHECK(at_mean.log_prob[0] == doctest::Approx(-half_log_2pi - std::log(1.0 + 1e-6)).epsilon(1e-12));
  CHECK(at_mean.log_prob[0] == doctest::Approx(-0.91894).epsilon(1e-5));

  // u = 1: Gaussian density at 1 minus the tanh Jacobian
  const auto at_one = squash<double>(head, MatrixD::Ones(1, 1), -20, 2, false);
  const double sech2 = 1.0 / (std::cosh(1.0) * std::cosh(1.0));
  const double oracle = -0.5 - half_log_2pi - std::log(sech2 + 1e-6);
  CHECK(at_one.action(0, 0) == doctest::Approx(std::tanh(1.0)).epsilon(1e-15));
  CHECK(at_one.log_prob[0] == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(at_one.log_prob[0] == doctest::Approx(-0.55138).epsilon(1e-5));
}

TEST_CASE("squashed actions stay strictly inside (-1, 1)") {
  nn::MatrixF head(4, 2000);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> d(0.0f, 20.0f);
  for (Eigen::Index i = 0; i < head.size(); ++i) head.data()[i] = d(rng);
  nn::MatrixF eps(2, 2000);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = d(rng);
  const auto s = squash(head, eps, -20, 2, false);
  CHECK((s.action.array().abs() < 1.0f).all());
  CHECK(s.log_prob.allFinite());
}

TEST_CASE("critic target") {
  const VectorF r = VectorF::Constant(3, 0.7f);
  const VectorF lp = VectorF::Constant(3, -1.0f);
  const VectorF q = VectorF::Constant(3, 2.0f);
  CHECK(critic_target(r, lp, q, 0.0, 0.2) == r);
  CHECK(critic_target(VectorF::Zero(1), VectorF::Zero(1), VectorF::Ones(1), 0.99, 0.0)[0] ==
        doctest::Approx(0.99).epsilon(1e-7));
  CHECK(critic_target(VectorF::Zero(1), VectorF::Constant(1, -1.0f), VectorF::Constant(1, 2.0f), 0.5, 0.2)[0] ==
        doctest::Approx(1.1).epsilon(1e-7));
}

TEST_CASE("polyak update") {
  nn::ParamSet target, online;
  target.add("w", {2}, VectorF::Zero(2));
  online.add("w", {2}, VectorF::Ones(2));
  nn::ParamSet t = target;
  polyak_update(t, online, 0.0);
  CHECK(t.identical(target));
  polyak_update(t, online, 0.005);
  CHECK(t.at("w").values[0] == doctest::Approx(0.005).epsilon(1e-7));
  polyak_update(t, online, 1.0);
  CHECK(t.identical(online));
  nn::ParamSet other;
  other.add("w", {3}, VectorF::Ones(3));
  CHECK_THROWS_AS(polyak_update(t, other, 0.5), std::invalid_argument);
}

TEST_CASE("fresh agent: target critics equal the critics, temperature positive") {
  std::mt19937_64 rng(2);
  const SacAgent a = make_sac({2, false, 0}, 2, small_sac(), rng);
  CHECK(a.q1_target.identical(a.q1));
  CHECK(a.q2_target.identical(a.q2));
  CHECK(a.alpha() == doctest::Approx(1.0));
  CHECK(a.target_entropy() == -2.0);
  CHECK(std::isfinite(a.log_alpha.at("log_alpha").values[0]));
}

TEST_CASE("deterministic sampling repeats; stochastic sampling varies") {
  std::mt19937_64 rng(3);
  const SacAgent a = make_sac({2, false, 0}, 2, small_sac(), rng);
  const VectorF obs = VectorF::Constant(2, 0.3f);
  const ActionSample d1 = sample_action(a, obs, rng, true);
  const ActionSample d2 = sample_action(a, obs, rng, true);
  CHECK(d1.action == d2.action);
  CHECK(d1.log_prob == d2.log_prob);
  const ActionSample s1 = sample_action(a, obs, rng, false);
  const ActionSample s2 = sample_action(a, obs, rng, false);
  CHECK(s1.action != s2.action);
}

TEST_CASE("zero reward: critic targets are gamma (min Q' - alpha log pi')") {
  std::mt19937_64 rng(4);
  SacAgent agent = make_sac({2, false, 0}, 2, small_sac(), rng);
  const SacAgent before = agent;
  const ReplayBuffer buffer = random_buffer(env::TaskId::Valve, 500, 5);

  std::mt19937_64 update_rng(6);
  std::mt19937_64 replay_rng = update_rng;
  const SacLosses losses = update_step(agent, buffer, zero_reward, update_rng);
  CHECK(losses.mean_reward == 0.0);

  // recompute the targets from the pre-update agent with the same draws
  const auto slots = buffer.sample(64, replay_rng);
  const nn::MatrixF next = agent_inputs(buffer, slots, true);
  std::normal_distribution<float> n(0.0f, 1.0f);
  nn::MatrixF eps(2, 64);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = n(replay_rng);
  const nn::MatrixF head = before.nets.actor.forward(before.actor, next);
  const auto pi = squash(head, eps, -20, 2, false);
  nn::MatrixF x(4, 64);
  x << next, pi.action;
  const nn::MatrixF q = before.nets.critic.forward(before.q1_target, x).cwiseMin(before.nets.critic.forward(before.q2_target, x));
  double mean = 0.0;
  for (int i = 0; i < 64; ++i) mean += 0.99 * (q(0, i) - 1.0 * pi.log_prob[i]);
  CHECK(losses.mean_target == doctest::Approx(mean / 64.0).epsilon(1e-5));
}

TEST_CASE("identical seeds and buffers give bit-identical loss records") {
  const ReplayBuffer buffer = random_buffer(env::TaskId::Valve, 400, 7);
  auto run = [&] {
    std::mt19937_64 rng(8);
    SacAgent agent = make_sac({2, false, 0}, 2, small_sac(), rng);
    std::vector<SacLosses> out;
    for (int i = 0; i < 5; ++i) out.push_back(update_step(agent, buffer, zero_reward, rng));
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("changing the reward function changes rewards, never the stored bytes") {
  const ReplayBuffer buffer = random_buffer(env::TaskId::Valve, 300, 9);
  const auto hash = buffer.content_hash();
  std::mt19937_64 rng(10);
  SacAgent agent = make_sac({2, false, 0}, 2, small_sac(), rng);
  const RewardFn truth = [](const ReplayBuffer& b, std::span<const std::size_t> slots) {
    VectorF r(static_cast<Eigen::Index>(slots.size()));
    for (std::size_t i = 0; i < slots.size(); ++i)
      r[static_cast<Eigen::Index>(i)] = static_cast<float>(
          env::true_reward(env::TaskId::Valve, b[slots[i]].next_state, env::goal_state(env::TaskId::Valve)));
    return r;
  };
  std::mt19937_64 r1(11), r2(11);
  SacAgent a1 = agent, a2 = agent;
  const SacLosses l1 = update_step(a1, buffer, zero_reward, r1);
  const SacLosses l2 = update_step(a2, buffer, truth, r2);
  CHECK(l1.mean_reward != l2.mean_reward);
  CHECK(buffer.content_hash() == hash);
}

TEST_CASE("critic loss falls on a fixed synthetic batch") {
  std::mt19937_64 rng(12);
  SacConfig cfg = small_sac();
  SacAgent agent = make_sac({3, false, 0}, 2, cfg, rng);
  SacBatch batch;
  batch.inputs = nn::MatrixF::Random(3, 64);
  batch.next_inputs = nn::MatrixF::Random(3, 64);
  batch.actions = nn::MatrixF::Random(2, 64);
  batch.rewards = batch.inputs.row(0).transpose();
  const double initial = update_on_batch(agent, batch, rng).critic_loss;
  double last = initial;
  for (int i = 0; i < 100; ++i) last = update_on_batch(agent, batch, rng).critic_loss;
  CHECK(last < initial);
  CHECK(agent.updates == 101);
  CHECK(agent.alpha() > 0.0);
}

TEST_CASE("non-finite rewards abort the update with a diagnostic") {
  std::mt19937_64 rng(13);
  SacAgent agent = make_sac({2, false, 0}, 2, small_sac(), rng);
  const ReplayBuffer buffer = random_buffer(env::TaskId::Valve, 100, 14);
  const RewardFn nan_reward = [](const ReplayBuffer&, std::span<const std::size_t> slots) {
    return VectorF::Constant(static_cast<Eigen::Index>(slots.size()), std::nanf(""));
  };
  const nn::ParamSet q1 = agent.q1;
  try {
    update_step(agent, buffer, nan_reward, rng);
    FAIL("expected a numeric abort");
  } catch (const nn::NumericError& e) {
    CHECK(std::string(e.what()).find("critic") != std::string::npos);
  }
  CHECK(agent.q1.identical(q1));
}

TEST_CASE("replay buffer: FIFO eviction and seeded uniform sampling") {
  ReplayBuffer b(3);
  for (int i = 0; i < 5; ++i) {
    Transition t;
    t.step_index = i;
    b.add(std::move(t));
  }
  CHECK(b.size() == 3);
  CHECK(b.total_added() == 5);
  std::vector<std::int64_t> held;
  for (std::size_t s = 0; s < b.size(); ++s) held.push_back(b[s].step_index);
  std::sort(held.begin(), held.end());
  CHECK(held == std::vector<std::int64_t>{2, 3, 4});
  CHECK(b[b.newest_slot()].step_index == 4);
  CHECK(b.serial(b.newest_slot()) == 4);
  std::mt19937_64 r1(1), r2(1);
  CHECK(b.sample(10, r1) == b.sample(10, r2));
}

TEST_CASE("agent inputs prefer stored features") {
  ReplayBuffer b(4);
  Transition t;
  t.obs = env::observe(env::canonical_start(env::TaskId::Beads), env::ObsMode::State);
  t.next_obs = t.obs;
  b.add(t);
  const std::vector<std::size_t> slot{0};
  CHECK(agent_inputs(b, slot, false).rows() == 5);
  t.obs_features = VectorF::Constant(7, 1.0f);
  t.next_obs_features = VectorF::Constant(7, 2.0f);
  b.add(t);
  const std::vector<std::size_t> slot1{1};
  CHECK(agent_inputs(b, slot1, true) == nn::MatrixF::Constant(7, 1, 2.0f));
}

TEST_CASE("gradient check: critic loss") {
  std::mt19937_64 rng(20);
  const SacAgent a = make_sac({5, false, 0}, 2, small_sac(), rng);
  const auto q1 = a.q1.cast<double>(), q2 = a.q2.cast<double>();
  const MatrixD x = random_matrix(5, 6, 21), act = random_matrix(2, 6, 22, 0.5);
  const VectorD y = random_matrix(6, 1, 23);
  auto g1 = q1.zeros_like(), g2 = q2.zeros_like();
  critic_loss<double>(a.nets, nullptr, q1, q2, x, act, y, nullptr, &g1, &g2);
  for (int which = 0; which < 2; ++which) {
    const auto& params = which == 0 ? q1 : q2;
    const auto result = nn::check_gradients(params, which == 0 ? g1 : g2,
        [&](const nn::BasicParamSet<double>& p, std::vector<std::int8_t>* pattern) {
          return which == 0 ? critic_loss<double>(a.nets, nullptr, p, q2, x, act, y, nullptr, nullptr, nullptr, pattern)
                            : critic_loss<double>(a.nets, nullptr, q1, p, x, act, y, nullptr, nullptr, nullptr, pattern);
        });
    CHECK(result.max_relative_error < 1e-4);
    CHECK(result.compared > 0);
  }
}

TEST_CASE("gradient check: actor loss through the squashed head and the critics") {
  std::mt19937_64 rng(24);
  SacConfig cfg = small_sac();
  const SacAgent a = make_sac({5, false, 0}, 2, cfg, rng);
  const auto actor = a.actor.cast<double>(), q1 = a.q1.cast<double>(), q2 = a.q2.cast<double>();
  const MatrixD f = random_matrix(5, 6, 25), eps = random_matrix(2, 6, 26);
  auto g = actor.zeros_like();
  actor_loss<double>(a.nets, actor, q1, q2, f, eps, 0.3, -20, 2, &g);
  const auto result = nn::check_gradients(actor, g,
      [&](const nn::BasicParamSet<double>& p, std::vector<std::int8_t>* pattern) {
        return actor_loss<double>(a.nets, p, q1, q2, f, eps, 0.3, -20, 2, nullptr, nullptr, pattern);
      });
  CHECK(result.max_relative_error < 1e-4);
  CHECK(result.compared > 0);
}

TEST_CASE("gradient check: raw-image critic with its convolutional encoder") {
  std::mt19937_64 rng(27);
  SacConfig cfg = small_sac();
  cfg.encoder_filters = {4, 4, 4};
  cfg.encoder_features = 8;
  const SacAgent a = make_sac({3072 + 1, true, 1}, 2, cfg, rng);
  const auto enc = a.encoder.cast<double>(), q1 = a.q1.cast<double>(), q2 = a.q2.cast<double>();
  MatrixD x = random_matrix(3073, 2, 28).cwiseAbs();
  const MatrixD act = random_matrix(2, 2, 29, 0.5);
  const VectorD y = random_matrix(2, 1, 30);
  auto ge = enc.zeros_like();
  critic_loss<double>(a.nets, &enc, q1, q2, x, act, y, &ge, nullptr, nullptr);
  nn::GradCheckOptions opt;
  opt.max_per_tensor = 30;
  const auto result = nn::check_gradients(enc, ge,
      [&](const nn::BasicParamSet<double>& p, std::vector<std::int8_t>* pattern) {
        return critic_loss<double>(a.nets, &p, q1, q2, x, act, y, nullptr, nullptr, nullptr, pattern);
      }, opt);
  CHECK(result.max_relative_error < 1e-4);
  CHECK(result.compared > 0);
}

TEST_CASE("raw-image agent updates its encoder and target encoder") {
  std::mt19937_64 rng(31);
  SacConfig cfg = small_sac();
  cfg.batch_size = 8;
  cfg.encoder_filters = {4, 4, 4};
  cfg.encoder_features = 8;
  SacAgent a = make_sac({3072, true, 0}, 2, cfg, rng);
  SacBatch b;
  b.inputs = nn::MatrixF::Random(3072, 8).cwiseAbs();
  b.next_inputs = nn::MatrixF::Random(3072, 8).cwiseAbs();
  b.actions = nn::MatrixF::Random(2, 8);
  b.rewards = VectorF::Ones(8);
  const auto enc = a.encoder.hash(), enc_t = a.encoder_target.hash();
  update_on_batch(a, b, rng);
  CHECK(a.encoder.hash() != enc);
  CHECK(a.encoder_target.hash() != enc_t);
  CHECK(sample_action(a, b.inputs.col(0), rng, true).action.size() == 2);
}
