#include "r3l/loop.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>
#include <numbers>
#include <sstream>

#include "r3l/nn/serialize.hpp"

namespace r3l {

namespace {

using nn::read_u32;
using nn::read_u64;
using nn::write_u32;
using nn::write_u64;

std::mt19937_64 stream(std::uint64_t seed, std::uint32_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id};
  return std::mt19937_64(seq);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> values, const char* what) {
  for (E v : values)
    if (lower(s) == lower(to_string(v))) return v;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

double mix(int k, double vice_term, double rnd_term, double c_vice, double c_rnd) {
  return k == 0 ? c_vice * vice_term + c_rnd * rnd_term : rnd_term;
}

bool same_observation(const env::Observation& a, const env::Observation& b) {
  if (a.mode != b.mode || a.state != b.state || a.proprio != b.proprio) return false;
  if (a.image == b.image) return true;
  return a.image && b.image && *a.image == *b.image;
}

// ---------------------------------------------------------------------------
// Binary records

void write_i64(std::ostream& os, std::int64_t v) { write_u64(os, static_cast<std::uint64_t>(v)); }
std::int64_t read_i64(std::istream& is) { return static_cast<std::int64_t>(read_u64(is)); }

void write_vec(std::ostream& os, const VectorF& v) {
  write_u32(os, static_cast<std::uint32_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) nn::write_f32(os, v[i]);
}

VectorF read_vec(std::istream& is) {
  VectorF v(static_cast<Eigen::Index>(read_u32(is)));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = nn::read_f32(is);
  return v;
}

void write_state(std::ostream& os, const env::EnvState& s) {
  write_u32(os, static_cast<std::uint32_t>(s.task));
  for (double b : s.beads) nn::write_f64(os, b);
  nn::write_f64(os, s.valve_angle);
  nn::write_f64(os, s.object.x);
  nn::write_f64(os, s.object.y);
  nn::write_f64(os, s.object.theta);
  nn::write_f64(os, s.pusher);
}

env::EnvState read_state(std::istream& is) {
  env::EnvState s;
  s.task = static_cast<env::TaskId>(read_u32(is));
  for (double& b : s.beads) b = nn::read_f64(is);
  s.valve_angle = nn::read_f64(is);
  s.object.x = nn::read_f64(is);
  s.object.y = nn::read_f64(is);
  s.object.theta = nn::read_f64(is);
  s.pusher = nn::read_f64(is);
  return s;
}

// Images shared between consecutive observations are written once.
struct ImageWriter {
  const env::Image* last = nullptr;
  void write(std::ostream& os, const std::shared_ptr<const env::Image>& img) {
    if (!img) {
      write_u32(os, 0);
    } else if (img.get() == last) {
      write_u32(os, 1);
    } else {
      write_u32(os, 2);
      os.write(reinterpret_cast<const char*>(img->pixels.data()), env::Image::kNumValues);
      last = img.get();
    }
  }
};

struct ImageReader {
  std::shared_ptr<const env::Image> last;
  std::shared_ptr<const env::Image> read(std::istream& is) {
    switch (read_u32(is)) {
      case 0: return nullptr;
      case 1:
        if (!last) throw CheckpointError("image back-reference without an image");
        return last;
      case 2: {
        auto img = std::make_shared<env::Image>();
        if (!is.read(reinterpret_cast<char*>(img->pixels.data()), env::Image::kNumValues))
          throw CheckpointError("truncated image record");
        last = img;
        return img;
      }
      default: throw CheckpointError("bad image record");
    }
  }
};

void write_obs(std::ostream& os, const env::Observation& o, ImageWriter& images) {
  write_u32(os, static_cast<std::uint32_t>(o.mode));
  write_vec(os, o.state);
  images.write(os, o.image);
  write_vec(os, o.proprio);
}

env::Observation read_obs(std::istream& is, ImageReader& images) {
  env::Observation o;
  o.mode = static_cast<env::ObsMode>(read_u32(is));
  o.state = read_vec(is);
  o.image = images.read(is);
  o.proprio = read_vec(is);
  return o;
}

void write_transition(std::ostream& os, const Transition& t, ImageWriter& images) {
  write_obs(os, t.obs, images);
  write_vec(os, t.action);
  write_obs(os, t.next_obs, images);
  write_i64(os, t.step_index);
  write_vec(os, t.obs_features);
  write_vec(os, t.next_obs_features);
  write_state(os, t.next_state);
}

Transition read_transition(std::istream& is, ImageReader& images) {
  Transition t;
  t.obs = read_obs(is, images);
  t.action = read_vec(is);
  t.next_obs = read_obs(is, images);
  t.step_index = read_i64(is);
  t.obs_features = read_vec(is);
  t.next_obs_features = read_vec(is);
  t.next_state = read_state(is);
  return t;
}

void write_adam(std::ostream& os, const nn::AdamState& a) {
  nn::write_f32(os, a.config.learning_rate);
  nn::write_f32(os, a.config.beta1);
  nn::write_f32(os, a.config.beta2);
  nn::write_f32(os, a.config.epsilon);
  write_u64(os, a.step);
  nn::write_params(os, a.first_moment);
  nn::write_params(os, a.second_moment);
}

nn::AdamState read_adam(std::istream& is) {
  nn::AdamState a;
  a.config.learning_rate = nn::read_f32(is);
  a.config.beta1 = nn::read_f32(is);
  a.config.beta2 = nn::read_f32(is);
  a.config.epsilon = nn::read_f32(is);
  a.step = read_u64(is);
  a.first_moment = nn::read_params(is);
  a.second_moment = nn::read_params(is);
  return a;
}

void write_std(std::ostream& os, const RunningStd& r) {
  write_u32(os, static_cast<std::uint32_t>(r.estimator));
  nn::write_f64(os, r.decay);
  nn::write_f64(os, r.variance);
  write_u32(os, r.initialized ? 1 : 0);
  write_u64(os, r.count);
  nn::write_f64(os, r.mean);
  nn::write_f64(os, r.m2);
}

RunningStd read_std(std::istream& is) {
  RunningStd r;
  r.estimator = static_cast<StdEstimator>(read_u32(is));
  r.decay = nn::read_f64(is);
  r.variance = nn::read_f64(is);
  r.initialized = read_u32(is) != 0;
  r.count = read_u64(is);
  r.mean = nn::read_f64(is);
  r.m2 = nn::read_f64(is);
  return r;
}

void write_counts(std::ostream& os, const std::vector<std::int64_t>& v) {
  write_u32(os, static_cast<std::uint32_t>(v.size()));
  for (auto x : v) write_i64(os, x);
}

std::vector<std::int64_t> read_counts(std::istream& is) {
  std::vector<std::int64_t> v(read_u32(is));
  for (auto& x : v) x = read_i64(is);
  return v;
}

std::string params_bytes(const nn::ParamSet& p) {
  std::ostringstream os(std::ios::binary);
  nn::write_params(os, p);
  return std::move(os).str();
}

nn::ParamSet params_from(const Checkpoint& c, const std::string& name, const nn::ParamSet& like) {
  std::istringstream is(c.section(name), std::ios::binary);
  nn::ParamSet p = nn::read_params(is);
  if (!p.same_layout(like)) throw CheckpointError("section " + name + " does not match the configured architecture");
  return p;
}

template <typename F>
std::string blob(F&& write) {
  std::ostringstream os(std::ios::binary);
  write(os);
  return std::move(os).str();
}

}  // namespace

struct EpochTotals {
  int updates = 0;
  SacLosses sum;
  double rnd_loss = 0.0;
  int rnd_updates = 0;
};

// ---------------------------------------------------------------------------
// Config

const char* to_string(Variant v) {
  switch (v) {
    case Variant::R3L: return "R3L";
    case Variant::R3L_NoVAE: return "R3L_NoVAE";
    case Variant::VICE_Only: return "VICE_Only";
    case Variant::VICE_VAE: return "VICE_VAE";
    case Variant::ResetController: return "ResetController";
  }
  return "?";
}

const char* to_string(RewardMode m) { return m == RewardMode::True ? "True" : "VICE"; }
const char* to_string(ResetMode m) { return m == ResetMode::Episodic ? "Episodic" : "Free"; }

Variant parse_variant(const std::string& s) {
  return parse_enum(s,
                    {Variant::R3L, Variant::R3L_NoVAE, Variant::VICE_Only, Variant::VICE_VAE,
                     Variant::ResetController},
                    "variant");
}
RewardMode parse_reward_mode(const std::string& s) {
  return parse_enum(s, {RewardMode::True, RewardMode::Vice}, "reward mode");
}
ResetMode parse_reset_mode(const std::string& s) {
  return parse_enum(s, {ResetMode::Episodic, ResetMode::Free}, "reset mode");
}

bool uses_vae(const RunConfig& c) {
  return c.obs_mode == env::ObsMode::Image &&
         (c.variant == Variant::R3L || c.variant == Variant::VICE_VAE || c.variant == Variant::ResetController);
}

bool uses_rnd(const RunConfig& c) { return c.variant == Variant::R3L || c.variant == Variant::R3L_NoVAE; }

bool uses_classifier(const RunConfig& c) { return c.reward_mode == RewardMode::Vice; }

int policy_count(const RunConfig& c) {
  switch (c.variant) {
    case Variant::R3L:
    case Variant::R3L_NoVAE: return 2;
    case Variant::VICE_Only:
    case Variant::VICE_VAE: return 1;
    case Variant::ResetController: return static_cast<int>(c.reset_states.size());
  }
  return 0;
}

void validate(const RunConfig& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(c.horizon >= 1, "loop.H must be at least 1");
  require(c.epochs >= 0, "loop.N must be non-negative");
  require(c.initial_exploration >= 0, "loop.initial_exploration must be non-negative");
  require(c.checkpoint_every >= 1, "loop.checkpoint_every must be at least 1");
  require(c.train_steps_per_env_step > 0.0 && c.train_steps_per_env_step <= 2.0,
          "loop.train_steps_per_env_step must lie in (0, 2]: at most two gradient steps per transition");
  require(std::isfinite(c.c_vice) && std::isfinite(c.c_rnd), "reward weights must be finite");
  require(c.std_decay > 0.0 && c.std_decay < 1.0, "std decay must lie in (0, 1)");
  require(c.sac.batch_size >= 1, "sac.batch_size must be positive");
  require(c.replay_capacity >= static_cast<std::size_t>(c.sac.batch_size),
          "replay capacity must hold at least one batch");
  require(c.sac.gamma >= 0.0 && c.sac.gamma < 1.0, "sac.gamma must lie in [0, 1)");
  require(c.sac.tau >= 0.0 && c.sac.tau <= 1.0, "sac.tau must lie in [0, 1]");
  require(c.vice.batch_size >= 2, "vice.batch_size must be at least 2");
  require(c.vice.n_vice >= 0, "vice.n_vice must be non-negative");
  require(c.vice.goal_pool_size >= 1, "vice.goal_pool_size must be positive");
  if (c.variant == Variant::VICE_VAE)
    require(c.obs_mode == env::ObsMode::Image, "VICE_VAE needs image observations");
  if (c.variant == Variant::ResetController) {
    require(c.reset_states.size() >= 2, "ResetController needs at least two reset states");
    const env::EnvState goal = env::goal_state(c.task);
    require(c.reset_states.front() == goal, "the first reset state must be the task goal");
    for (const auto& s : c.reset_states) {
      require(s.task == c.task, "reset state belongs to another task");
      try {
        env::validate(s);
      } catch (const env::InvalidState& e) {
        throw ConfigError(std::string("invalid reset state: ") + e.what());
      }
    }
  } else {
    require(c.reset_states.empty(), "reset states are only used by the ResetController variant");
  }
}

std::vector<std::vector<env::EnvState>> reposition_reset_choices() {
  const env::EnvState goal = env::goal_state(env::TaskId::Reposition);
  auto with = [&](double x, double y, double theta) {
    env::EnvState s = goal;
    s.object = {x, y, theta};
    return std::vector<env::EnvState>{goal, s};
  };
  constexpr double pi = std::numbers::pi;
  return {with(0.05, 0.05, pi / 2), with(0.0, 0.0, -pi / 6), with(-0.04, -0.04, -pi / 2)};
}

int select_policy(std::int64_t epoch_index) {
  if (epoch_index < 1) throw std::invalid_argument("epoch index starts at 1");
  return static_cast<int>(epoch_index % 2);
}

double combined_reward(int k, double vice_logit, double rnd_error, const RunningStd& vice_std,
                       const RunningStd& rnd_std, double c_vice, double c_rnd) {
  if (k != 0 && k != 1) throw std::invalid_argument("policy index must be 0 or 1");
  const double rnd_term = rnd_reward(rnd_error, rnd_std);
  if (k == 1) return rnd_term;
  return mix(k, normalized_vice_reward(vice_logit, vice_std), rnd_term, c_vice, c_rnd);
}

GoalPool make_goal_pool(const RunConfig& config, const env::EnvState& goal, std::mt19937_64& rng) {
  auto ex = env::goal_examples(config.task, goal, config.vice.goal_pool_size, config.obs_mode, rng);
  return GoalPool(std::move(ex.observations), std::move(ex.states));
}

// ---------------------------------------------------------------------------
// Run

Run::Run(RunConfig config, Empty) : config_(std::move(config)), buffer_(config_.replay_capacity) {
  validate(config_);
  rng_ = stream(config_.seed, 0);
  state_ = env::canonical_start(config_.task);
  const int policies = policy_count(config_);
  stats_.epochs_per_policy.assign(static_cast<std::size_t>(policies), 0);
  stats_.updates_per_policy.assign(static_cast<std::size_t>(policies), 0);
  stats_.vice_queries_per_policy.assign(static_cast<std::size_t>(policies), 0);
  stats_.buffer_per_policy.assign(static_cast<std::size_t>(policies), nullptr);

  std::mt19937_64 init = stream(config_.seed, 1);
  const int proprio = env::proprio_dim(config_.task);
  SacInputSpec spec;
  if (uses_vae(config_)) {
    spec = {config_.vae.latent_dim + proprio, false, 0};
  } else if (config_.obs_mode == env::ObsMode::Image) {
    spec = {env::Image::kNumValues + proprio, true, proprio};
  } else {
    spec = {env::state_dim(config_.task) + proprio, false, 0};
  }
  for (int k = 0; k < policies; ++k)
    agents_.push_back(make_sac(spec, env::action_dim(config_.task), config_.sac, init));

  const int n_classifiers = uses_classifier(config_)
                                ? (config_.variant == Variant::ResetController ? policies : 1)
                                : 0;
  for (int c = 0; c < n_classifiers; ++c) {
    classifiers_.push_back(make_vice(reward_input_shape(), config_.vice, init));
    RunningStd s;
    s.estimator = config_.std_estimator;
    s.decay = config_.std_decay;
    vice_std_.push_back(s);
  }
  logit_cache_.resize(static_cast<std::size_t>(n_classifiers));
  logit_serial_.resize(static_cast<std::size_t>(n_classifiers));
  if (uses_rnd(config_)) rnd_ = make_rnd(reward_input_shape(), config_.rnd, init);
  rnd_std_.estimator = config_.std_estimator;
  rnd_std_.decay = config_.std_decay;
}

Run::Run(RunConfig config, RunResources resources) : Run(std::move(config), Empty{}) {
  if (uses_vae(config_)) {
    if (resources.vae) {
      if (!resources.vae->frozen) throw ConfigError("the supplied VAE must be pretrained and frozen");
      if (resources.vae->config.latent_dim != config_.vae.latent_dim)
        throw ConfigError("the supplied VAE latent size differs from vae.latent_dim");
      vae_ = std::move(resources.vae);
    } else {
      vae_ = pretrained_vae(config_);
    }
  }
  if (!classifiers_.empty()) {
    if (!resources.goal_pools.empty()) {
      if (resources.goal_pools.size() != classifiers_.size())
        throw ConfigError("expected " + std::to_string(classifiers_.size()) + " goal pools");
      pools_ = std::move(resources.goal_pools);
    } else {
      pools_ = default_goal_pools(config_);
    }
    for (const GoalPool& pool : pools_) {
      if (pool.empty()) throw ConfigError("empty goal pool");
      if (pool[0].mode != config_.obs_mode) throw ConfigError("goal pool observation mode differs from obs");
      const MatrixF raw = stack_observations(pool.items(), false);
      goal_inputs_.push_back(vae_ ? encode_images(*vae_, raw) : raw);
    }
  }
  if (config_.variant == Variant::ResetController) {
    const auto& r = config_.reset_states;
    if (std::all_of(r.begin(), r.end(), [&](const env::EnvState& s) { return s == r.front(); }))
      std::clog << "warning: all reset states coincide; the reset controller degenerates to single-goal VICE\n";
  }
}

VaeModel pretrained_vae(const RunConfig& config) {
  std::mt19937_64 rng = stream(config.seed, 2);
  VaeModel vae = make_vae(config.vae, rng);
  pretrain(vae, config.task, config.vae.n_samples, config.vae.epochs, rng);
  return vae;
}

std::vector<GoalPool> default_goal_pools(const RunConfig& config) {
  std::vector<env::EnvState> goals{env::goal_state(config.task)};
  if (config.variant == Variant::ResetController) goals = config.reset_states;
  if (!uses_classifier(config)) goals.clear();
  std::mt19937_64 rng = stream(config.seed, 3);
  std::vector<GoalPool> pools;
  for (const auto& g : goals) pools.push_back(make_goal_pool(config, g, rng));
  return pools;
}

env::EnvState Run::goal_of(int k) const {
  if (config_.variant == Variant::ResetController) return config_.reset_states.at(static_cast<std::size_t>(k));
  return env::goal_state(config_.task);
}

int Run::policy_for_epoch(std::int64_t i) const {
  if (i < 1) throw std::invalid_argument("epoch index starts at 1");
  switch (config_.variant) {
    case Variant::R3L:
    case Variant::R3L_NoVAE: return select_policy(i);
    case Variant::VICE_Only:
    case Variant::VICE_VAE: return 0;
    case Variant::ResetController: return static_cast<int>((i - 1) % num_policies());
  }
  return 0;
}

nn::Shape Run::reward_input_shape() const {
  if (uses_vae(config_)) return nn::Shape::flat(config_.vae.latent_dim);
  if (config_.obs_mode == env::ObsMode::Image)
    return nn::Shape::image(env::Image::kSize, env::Image::kSize, env::Image::kChannels);
  return nn::Shape::flat(env::state_dim(config_.task));
}

env::Observation Run::observe(const env::EnvState& s) const { return env::observe(s, config_.obs_mode); }

VectorF Run::features_of(const env::Observation& obs) const { return vae_ ? encode(*vae_, obs) : VectorF{}; }

VectorF Run::agent_input(const env::Observation& obs) const { return vae_ ? encode(*vae_, obs) : obs.flat(); }

env::Action Run::act(const env::Observation& obs, int policy, bool deterministic, std::mt19937_64& rng) const {
  return sample_action(agent(policy), agent_input(obs), rng, deterministic).action;
}

MatrixF Run::reward_inputs(const ReplayBuffer& buffer, std::span<const std::size_t> slots) const {
  if (vae_) {
    const int latent = config_.vae.latent_dim;
    MatrixF m(latent, static_cast<Eigen::Index>(slots.size()));
    for (std::size_t i = 0; i < slots.size(); ++i)
      m.col(static_cast<Eigen::Index>(i)) = buffer[slots[i]].next_obs_features.head(latent);
    return m;
  }
  std::vector<const env::Observation*> obs;
  obs.reserve(slots.size());
  for (std::size_t s : slots) obs.push_back(&buffer[s].next_obs);
  return stack_observations(obs, false);
}

VectorF Run::vice_logits_cached(int c, const ReplayBuffer& buffer, std::span<const std::size_t> slots) {
  auto& cache = logit_cache_[static_cast<std::size_t>(c)];
  auto& serial = logit_serial_[static_cast<std::size_t>(c)];
  if (serial.size() < buffer.size()) {
    cache.resize(buffer.size(), 0.0f);
    serial.resize(buffer.size(), 0);
  }
  std::vector<std::size_t> misses;
  for (std::size_t s : slots)
    if (serial[s] != buffer.serial(s) + 1 && std::find(misses.begin(), misses.end(), s) == misses.end())
      misses.push_back(s);
  if (!misses.empty()) {
    const VectorF logits = vice_logits(classifiers_[static_cast<std::size_t>(c)], reward_inputs(buffer, misses));
    for (std::size_t i = 0; i < misses.size(); ++i) {
      cache[misses[i]] = logits[static_cast<Eigen::Index>(i)];
      serial[misses[i]] = buffer.serial(misses[i]) + 1;
    }
  }
  VectorF out(static_cast<Eigen::Index>(slots.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) out[static_cast<Eigen::Index>(i)] = cache[slots[i]];
  return out;
}

void Run::insert(std::vector<Transition>& pending) {
  for (Transition& t : pending) {
    buffer_.add(std::move(t));
    if (!rnd_) continue;
    const std::size_t slot = buffer_.newest_slot();
    if (rnd_targets_.size() <= slot) rnd_targets_.resize(slot + 1);
    const std::size_t one[] = {slot};
    rnd_targets_[slot] = rnd_target_embedding(*rnd_, reward_inputs(buffer_, one)).col(0);
  }
  pending.clear();
}

void Run::audit(const Transition& t, bool reset_scheduled) {
  if (last_ && !reset_scheduled && !same_observation(t.obs, last_->next_obs)) ++stats_.hidden_resets;
}

void Run::log(std::string metric, double value) {
  metrics_.push_back({epoch_, stats_.env_steps, std::move(metric), value});
}

void Run::initial_exploration() {
  if (explored_) throw std::logic_error("initial exploration already ran");
  if (!buffer_.empty()) throw std::logic_error("initial exploration needs an empty buffer");
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  const int dim = env::action_dim(config_.task);
  std::vector<Transition> pending;
  for (int step = 0; step < config_.initial_exploration; ++step) {
    const bool reset = config_.resets == ResetMode::Episodic && step % config_.horizon == 0;
    if (reset) {
      state_ = env::sample_random_state(config_.task, rng_);
      ++stats_.episodic_resets;
    }
    Transition t;
    t.obs = observe(state_);
    audit(t, reset);
    const bool continues = last_ && same_observation(t.obs, last_->next_obs);
    t.obs = continues ? last_->next_obs : t.obs;
    t.obs_features = continues ? last_->next_obs_features : features_of(t.obs);
    t.action = env::Action(dim);
    for (int j = 0; j < dim; ++j) t.action[j] = u(rng_);
    const env::EnvState next = env::env_step(state_, t.action);
    t.next_obs = observe(next);
    t.next_obs_features = features_of(t.next_obs);
    t.next_state = next;
    t.step_index = stats_.env_steps++;
    state_ = next;
    last_ = t;
    pending.push_back(std::move(t));
  }
  insert(pending);
  explored_ = true;
  log("buffer_size", static_cast<double>(buffer_.size()));
}

void Run::gradient_step(int k, EpochTotals& totals) {
  const bool goal_term = config_.variant == Variant::ResetController || k == 0;
  const int c = config_.variant == Variant::ResetController ? k : 0;
  VectorF logits, errors;
  const RewardFn reward_fn = [&](const ReplayBuffer& buffer, std::span<const std::size_t> slots) {
    stats_.buffer_per_policy[static_cast<std::size_t>(k)] = &buffer;
    const auto n = static_cast<Eigen::Index>(slots.size());
    VectorF goal = VectorF::Zero(n), novelty = VectorF::Zero(n);
    if (goal_term && config_.reward_mode == RewardMode::True) {
      const env::EnvState target = goal_of(k);
      for (Eigen::Index i = 0; i < n; ++i)
        goal[i] = static_cast<float>(
            env::true_reward(config_.task, buffer[slots[static_cast<std::size_t>(i)]].next_state, target));
    } else if (goal_term) {
      stats_.vice_queries_per_policy[static_cast<std::size_t>(k)] += n;
      logits = vice_logits_cached(c, buffer, slots);
      const double s = vice_std_[static_cast<std::size_t>(c)].std();
      goal = (logits.cast<double>() / s).cast<float>();
    }
    if (rnd_) {
      // The predictor step on this batch also yields the pre-step errors.
      MatrixF targets(rnd_->net.output_size(), n);
      for (Eigen::Index i = 0; i < n; ++i) targets.col(i) = rnd_targets_[slots[static_cast<std::size_t>(i)]];
      const RndUpdate u = rnd_update(*rnd_, reward_inputs(buffer, slots), &targets);
      errors = u.errors;
      totals.rnd_loss += u.loss;
      ++totals.rnd_updates;
      novelty = (errors.cast<double>() / rnd_std_.std()).cast<float>();
    }
    VectorF r(n);
    const int mode = goal_term ? 0 : 1;
    for (Eigen::Index i = 0; i < n; ++i)
      r[i] = static_cast<float>(mix(mode, goal[i], novelty[i], config_.c_vice, config_.c_rnd));
    return r;
  };
  const SacLosses l = update_step(agents_[static_cast<std::size_t>(k)], buffer_, reward_fn, rng_);
  if (errors.size() > 0) running_update(rnd_std_, {errors.data(), static_cast<std::size_t>(errors.size())});
  if (logits.size() > 0)
    running_update(vice_std_[static_cast<std::size_t>(c)], {logits.data(), static_cast<std::size_t>(logits.size())});
  ++stats_.gradient_steps;
  ++stats_.updates_per_policy[static_cast<std::size_t>(k)];
  ++totals.updates;
  totals.sum.critic_loss += l.critic_loss;
  totals.sum.actor_loss += l.actor_loss;
  totals.sum.alpha += l.alpha;
  totals.sum.mean_reward += l.mean_reward;
  totals.sum.mean_q += l.mean_q;
}

void Run::run_epoch() {
  if (!explored_) throw std::logic_error("run initial_exploration first");
  if (finished()) throw std::logic_error("all epochs already ran");
  const std::int64_t i = epoch_ + 1;
  const int k = policy_for_epoch(i);
  const bool reset = config_.resets == ResetMode::Episodic;
  if (reset) {
    state_ = env::sample_random_state(config_.task, rng_);
    ++stats_.episodic_resets;
  }
  const env::EnvState task_goal = env::goal_state(config_.task);
  const auto batch = static_cast<std::size_t>(config_.sac.batch_size);
  EpochTotals totals;
  double visit = 0.0;
  std::vector<Transition> pending;
  for (int t = 0; t < config_.horizon; ++t) {
    Transition tr;
    tr.obs = observe(state_);
    audit(tr, reset && t == 0);
    const bool continues = last_ && same_observation(tr.obs, last_->next_obs);
    tr.obs = continues ? last_->next_obs : tr.obs;
    tr.obs_features = continues ? last_->next_obs_features : features_of(tr.obs);
    tr.action = sample_action(agents_[static_cast<std::size_t>(k)], vae_ ? tr.obs_features : tr.obs.flat(), rng_,
                              false)
                    .action;
    const env::EnvState next = env::env_step(state_, tr.action);
    tr.next_obs = observe(next);
    tr.next_obs_features = features_of(tr.next_obs);
    tr.next_state = next;
    tr.step_index = stats_.env_steps++;
    visit += env::final_metric(config_.task, next, task_goal);
    state_ = next;
    last_ = tr;
    pending.push_back(std::move(tr));

    if (buffer_.size() >= batch) {
      credit_ += config_.train_steps_per_env_step;
      while (credit_ >= 1.0) {
        credit_ -= 1.0;
        gradient_step(k, totals);
      }
    }
  }
  insert(pending);

  double vice_loss = 0.0;
  for (std::size_t c = 0; c < classifiers_.size(); ++c) {
    const SlotInputs inputs = [this](const ReplayBuffer& b, std::span<const std::size_t> slots) {
      return reward_inputs(b, slots);
    };
    vice_loss += train_epoch(classifiers_[c], goal_inputs_[c], buffer_, inputs, config_.vice.n_vice, rng_);
    std::fill(logit_serial_[c].begin(), logit_serial_[c].end(), 0);
  }

  epoch_ = i;
  ++stats_.epochs_per_policy[static_cast<std::size_t>(k)];
  const bool forward = k == 0;
  log("policy", k);
  visit /= config_.horizon;
  log("visit_metric", visit);
  if (forward) log("train_metric", visit);
  if (totals.updates > 0) {
    const double n = totals.updates;
    log("critic_loss", totals.sum.critic_loss / n);
    log("actor_loss", totals.sum.actor_loss / n);
    log("alpha", totals.sum.alpha / n);
    log("mean_q", totals.sum.mean_q / n);
    log("mean_reward", totals.sum.mean_reward / n);
  }
  if (!classifiers_.empty()) log("vice_loss", vice_loss / static_cast<double>(classifiers_.size()));
  if (totals.rnd_updates > 0) log("rnd_loss", totals.rnd_loss / totals.rnd_updates);
  log("gradient_steps", static_cast<double>(stats_.gradient_steps));
}

// ---------------------------------------------------------------------------
// Persistence

Checkpoint Run::checkpoint(std::uint64_t config_digest) const {
  Checkpoint c;
  c.tag = "run";
  c.config_digest = config_digest;
  c.epoch = epoch_;
  c.add("meta", blob([&](std::ostream& os) {
          write_i64(os, epoch_);
          write_u32(os, explored_ ? 1 : 0);
          nn::write_f64(os, credit_);
          write_state(os, state_);
          std::ostringstream rng;
          rng << rng_;
          nn::write_u64(os, rng.str().size());
          os.write(rng.str().data(), static_cast<std::streamsize>(rng.str().size()));
          write_i64(os, stats_.env_steps);
          write_i64(os, stats_.gradient_steps);
          write_i64(os, stats_.episodic_resets);
          write_i64(os, stats_.hidden_resets);
          write_counts(os, stats_.epochs_per_policy);
          write_counts(os, stats_.updates_per_policy);
          write_counts(os, stats_.vice_queries_per_policy);
          write_u32(os, last_ ? 1 : 0);
          ImageWriter images;
          if (last_) write_transition(os, *last_, images);
        }));
  for (std::size_t k = 0; k < agents_.size(); ++k) {
    const SacAgent& a = agents_[k];
    const std::string s = "." + std::to_string(k);
    c.add("actor" + s, params_bytes(a.actor));
    c.add("critic1" + s, params_bytes(a.q1));
    c.add("critic2" + s, params_bytes(a.q2));
    c.add("critic1_target" + s, params_bytes(a.q1_target));
    c.add("critic2_target" + s, params_bytes(a.q2_target));
    c.add("log_alpha" + s, params_bytes(a.log_alpha));
    if (a.nets.encoder) {
      c.add("encoder" + s, params_bytes(a.encoder));
      c.add("encoder_target" + s, params_bytes(a.encoder_target));
    }
    c.add("sac_opt" + s, blob([&](std::ostream& os) {
            write_adam(os, a.encoder_adam);
            write_adam(os, a.actor_adam);
            write_adam(os, a.q1_adam);
            write_adam(os, a.q2_adam);
            write_adam(os, a.alpha_adam);
            write_u64(os, a.updates);
          }));
  }
  for (std::size_t i = 0; i < classifiers_.size(); ++i) {
    const std::string s = "." + std::to_string(i);
    c.add("classifier" + s, params_bytes(classifiers_[i].params));
    c.add("classifier_opt" + s, blob([&](std::ostream& os) {
            write_adam(os, classifiers_[i].adam);
            write_std(os, vice_std_[i]);
          }));
    c.add("goals" + s, blob([&](std::ostream& os) {
            const GoalPool& p = pools_[i];
            write_u32(os, static_cast<std::uint32_t>(p.size()));
            ImageWriter images;
            for (const auto& o : p.items()) write_obs(os, o, images);
            write_u32(os, static_cast<std::uint32_t>(p.states().size()));
            for (const auto& st : p.states()) write_state(os, st);
          }));
  }
  if (rnd_) {
    c.add("rnd.target", params_bytes(rnd_->target));
    c.add("rnd.predictor", params_bytes(rnd_->predictor));
    c.add("rnd_opt", blob([&](std::ostream& os) { write_adam(os, rnd_->adam); }));
  }
  c.add("rnd_std", blob([&](std::ostream& os) { write_std(os, rnd_std_); }));
  if (vae_) {
    c.add("vae.encoder", params_bytes(vae_->encoder_params));
    c.add("vae.decoder", params_bytes(vae_->decoder_params));
  }
  c.add("buffer", blob([&](std::ostream& os) {
          write_u64(os, buffer_.cursor());
          write_u64(os, buffer_.total_added());
          write_u64(os, buffer_.size());
          ImageWriter images;
          for (std::size_t j = 0; j < buffer_.size(); ++j) {
            write_u64(os, buffer_.serial(j));
            write_transition(os, buffer_[j], images);
          }
        }));
  c.add("metrics", blob([&](std::ostream& os) {
          write_u64(os, metrics_.size());
          for (const auto& r : metrics_) {
            write_i64(os, r.epoch);
            write_i64(os, r.env_steps);
            nn::write_string(os, r.metric);
            nn::write_f64(os, r.value);
          }
        }));
  return c;
}

Run Run::restore(RunConfig config, const Checkpoint& ckpt) {
  if (ckpt.tag != "run") throw CheckpointError("checkpoint tag '" + ckpt.tag + "' is not a training run");
  Run run(std::move(config), Empty{});
  auto reader = [&](const std::string& name) { return std::istringstream(ckpt.section(name), std::ios::binary); };

  if (uses_vae(run.config_)) {
    std::mt19937_64 dummy(0);
    run.vae_ = make_vae(run.config_.vae, dummy);
    run.vae_->encoder_params = params_from(ckpt, "vae.encoder", run.vae_->encoder_params);
    run.vae_->decoder_params = params_from(ckpt, "vae.decoder", run.vae_->decoder_params);
    freeze(*run.vae_);
  }
  for (std::size_t k = 0; k < run.agents_.size(); ++k) {
    SacAgent& a = run.agents_[k];
    const std::string s = "." + std::to_string(k);
    a.actor = params_from(ckpt, "actor" + s, a.actor);
    a.q1 = params_from(ckpt, "critic1" + s, a.q1);
    a.q2 = params_from(ckpt, "critic2" + s, a.q2);
    a.q1_target = params_from(ckpt, "critic1_target" + s, a.q1_target);
    a.q2_target = params_from(ckpt, "critic2_target" + s, a.q2_target);
    a.log_alpha = params_from(ckpt, "log_alpha" + s, a.log_alpha);
    if (a.nets.encoder) {
      a.encoder = params_from(ckpt, "encoder" + s, a.encoder);
      a.encoder_target = params_from(ckpt, "encoder_target" + s, a.encoder_target);
    }
    auto is = reader("sac_opt" + s);
    a.encoder_adam = read_adam(is);
    a.actor_adam = read_adam(is);
    a.q1_adam = read_adam(is);
    a.q2_adam = read_adam(is);
    a.alpha_adam = read_adam(is);
    a.updates = read_u64(is);
  }
  for (std::size_t i = 0; i < run.classifiers_.size(); ++i) {
    const std::string s = "." + std::to_string(i);
    run.classifiers_[i].params = params_from(ckpt, "classifier" + s, run.classifiers_[i].params);
    auto opt = reader("classifier_opt" + s);
    run.classifiers_[i].adam = read_adam(opt);
    run.vice_std_[i] = read_std(opt);
    auto is = reader("goals" + s);
    std::vector<env::Observation> items(read_u32(is));
    ImageReader images;
    for (auto& o : items) o = read_obs(is, images);
    std::vector<env::EnvState> states(read_u32(is));
    for (auto& st : states) st = read_state(is);
    run.pools_.emplace_back(std::move(items), std::move(states));
    const MatrixF raw = stack_observations(run.pools_.back().items(), false);
    run.goal_inputs_.push_back(run.vae_ ? encode_images(*run.vae_, raw) : raw);
  }
  if (run.rnd_) {
    run.rnd_->target = params_from(ckpt, "rnd.target", run.rnd_->target);
    run.rnd_->predictor = params_from(ckpt, "rnd.predictor", run.rnd_->predictor);
    auto is = reader("rnd_opt");
    run.rnd_->adam = read_adam(is);
  }
  {
    auto is = reader("rnd_std");
    run.rnd_std_ = read_std(is);
  }
  {
    auto is = reader("buffer");
    const auto cursor = static_cast<std::size_t>(read_u64(is));
    const std::uint64_t total = read_u64(is);
    const auto n = static_cast<std::size_t>(read_u64(is));
    if (n > run.config_.replay_capacity) throw CheckpointError("buffer section exceeds the replay capacity");
    ImageReader images;
    std::vector<Transition> items(n);
    std::vector<std::uint64_t> serials(n);
    for (std::size_t j = 0; j < n; ++j) {
      serials[j] = read_u64(is);
      items[j] = read_transition(is, images);
    }
    try {
      run.buffer_ = ReplayBuffer::from_slots(run.config_.replay_capacity, cursor, total, std::move(items),
                                             std::move(serials));
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(e.what());
    }
    if (run.rnd_) {
      run.rnd_targets_.resize(n);
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t one[] = {j};
        run.rnd_targets_[j] = rnd_target_embedding(*run.rnd_, run.reward_inputs(run.buffer_, one)).col(0);
      }
    }
  }
  {
    auto is = reader("meta");
    run.epoch_ = read_i64(is);
    run.explored_ = read_u32(is) != 0;
    run.credit_ = nn::read_f64(is);
    run.state_ = read_state(is);
    std::string rng(read_u64(is), '\0');
    is.read(rng.data(), static_cast<std::streamsize>(rng.size()));
    std::istringstream(rng) >> run.rng_;
    run.stats_.env_steps = read_i64(is);
    run.stats_.gradient_steps = read_i64(is);
    run.stats_.episodic_resets = read_i64(is);
    run.stats_.hidden_resets = read_i64(is);
    run.stats_.epochs_per_policy = read_counts(is);
    run.stats_.updates_per_policy = read_counts(is);
    run.stats_.vice_queries_per_policy = read_counts(is);
    if (read_u32(is) != 0) {
      ImageReader images;
      run.last_ = read_transition(is, images);
    }
    if (!is) throw CheckpointError("truncated meta section");
  }
  {
    auto is = reader("metrics");
    run.metrics_.resize(read_u64(is));
    for (auto& r : run.metrics_) {
      r.epoch = read_i64(is);
      r.env_steps = read_i64(is);
      r.metric = nn::read_string(is);
      r.value = nn::read_f64(is);
    }
  }
  return run;
}

Run run_training(const RunConfig& config, RunResources resources, const EpochCallback& on_epoch) {
  Run run(config, std::move(resources));
  run.initial_exploration();
  if (on_epoch) on_epoch(run);
  while (!run.finished()) {
    run.run_epoch();
    if (on_epoch) on_epoch(run);
  }
  return run;
}

}  // namespace r3l
