#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "r3l/checkpoint.hpp"
#include "r3l/envsim.hpp"
#include "r3l/replay.hpp"
#include "r3l/rnd.hpp"
#include "r3l/sac.hpp"
#include "r3l/vae.hpp"
#include "r3l/vice.hpp"

namespace r3l {

enum class Variant { R3L, R3L_NoVAE, VICE_Only, VICE_VAE, ResetController };
enum class RewardMode { True, Vice };
enum class ResetMode { Episodic, Free };

const char* to_string(Variant v);
const char* to_string(RewardMode m);
const char* to_string(ResetMode m);
Variant parse_variant(const std::string& s);
RewardMode parse_reward_mode(const std::string& s);
ResetMode parse_reset_mode(const std::string& s);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  env::TaskId task = env::TaskId::Reposition;
  Variant variant = Variant::R3L;
  env::ObsMode obs_mode = env::ObsMode::Image;
  RewardMode reward_mode = RewardMode::Vice;
  ResetMode resets = ResetMode::Free;
  int epochs = 1000;   // N; the loop runs 2N epochs
  int horizon = 100;   // H
  double c_vice = 1.0;
  double c_rnd = 1.0;
  std::uint64_t seed = 0;
  double train_steps_per_env_step = 1.0;  // at most 2
  int initial_exploration = 1000;
  int checkpoint_every = 10;  // K
  std::size_t replay_capacity = 200000;
  StdEstimator std_estimator = StdEstimator::Ema;
  double std_decay = 0.99;
  /// ResetController only; the first entry must be the task goal.
  std::vector<env::EnvState> reset_states;
  SacConfig sac;
  ViceConfig vice;
  RndConfig rnd;
  VaeConfig vae;
};

/// Throws ConfigError on the first invalid field or variant/mode mismatch.
void validate(const RunConfig& config);

bool uses_vae(const RunConfig& config);
bool uses_rnd(const RunConfig& config);
bool uses_classifier(const RunConfig& config);
int policy_count(const RunConfig& config);

/// Paper's three reset-state choices for Reposition (goal first).
std::vector<std::vector<env::EnvState>> reposition_reset_choices();

/// k = i mod 2 for epoch index i >= 1.
int select_policy(std::int64_t epoch_index);

/// k = 0: c_vice * vice_logit / std_vice + c_rnd * rnd_error / std_rnd.
/// k = 1: rnd_error / std_rnd.
double combined_reward(int k, double vice_logit, double rnd_error, const RunningStd& vice_std,
                       const RunningStd& rnd_std, double c_vice, double c_rnd);

struct MetricRow {
  std::int64_t epoch = 0;
  std::int64_t env_steps = 0;
  std::string metric;
  double value = 0.0;
  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

struct RunStats {
  std::int64_t env_steps = 0;
  std::int64_t gradient_steps = 0;
  std::int64_t episodic_resets = 0;
  /// Steps whose observation differs from the previous step's next
  /// observation without a scheduled episodic reset.
  std::int64_t hidden_resets = 0;
  std::vector<std::int64_t> epochs_per_policy;
  std::vector<std::int64_t> updates_per_policy;
  /// Classifier queries issued while computing each policy's batch rewards.
  std::vector<std::int64_t> vice_queries_per_policy;
  std::vector<const ReplayBuffer*> buffer_per_policy;
};

/// Externally prepared inputs. Missing pieces are built from the config.
struct RunResources {
  std::optional<VaeModel> vae;             // must be frozen
  std::vector<GoalPool> goal_pools;        // one per goal-directed policy
};

struct EpochTotals;

/// State of one training run, advanced one epoch at a time.
class Run {
 public:
  explicit Run(RunConfig config, RunResources resources = {});

  const RunConfig& config() const { return config_; }
  /// Number of completed epochs i.
  std::int64_t epoch() const { return epoch_; }
  std::int64_t total_epochs() const { return 2 * static_cast<std::int64_t>(config_.epochs); }
  bool finished() const { return explored_ && epoch_ >= total_epochs(); }
  bool explored() const { return explored_; }

  /// Uniform-random-action steps into the empty buffer.
  void initial_exploration();
  /// One epoch of H steps with the scheduled policy, then classifier training.
  void run_epoch();
  /// Policy scheduled for epoch index i >= 1.
  int policy_for_epoch(std::int64_t i) const;

  const RunStats& stats() const { return stats_; }
  const std::vector<MetricRow>& metrics() const { return metrics_; }
  void log(std::string metric, double value);
  const ReplayBuffer& buffer() const { return buffer_; }
  const env::EnvState& state() const { return state_; }
  int num_policies() const { return static_cast<int>(agents_.size()); }
  const SacAgent& agent(int k) const { return agents_.at(static_cast<std::size_t>(k)); }
  const std::optional<VaeModel>& vae() const { return vae_; }
  const std::vector<ViceClassifier>& classifiers() const { return classifiers_; }
  const std::optional<RndPair>& rnd() const { return rnd_; }
  const std::vector<GoalPool>& goal_pools() const { return pools_; }
  /// Goal of policy k: the task goal, or reset state k for the reset controller.
  env::EnvState goal_of(int k) const;

  /// Agent input of an observation: the frozen latent plus proprio, or the
  /// flattened observation.
  VectorF agent_input(const env::Observation& obs) const;
  env::Action act(const env::Observation& obs, int policy, bool deterministic, std::mt19937_64& rng) const;

  Checkpoint checkpoint(std::uint64_t config_digest) const;
  /// Restores a run saved by checkpoint(). The config must match the one
  /// the checkpoint was written with.
  static Run restore(RunConfig config, const Checkpoint& ckpt);

 private:
  struct Empty {};
  Run(RunConfig config, Empty);

  env::Observation observe(const env::EnvState& s) const;
  VectorF features_of(const env::Observation& obs) const;
  MatrixF reward_inputs(const ReplayBuffer& buffer, std::span<const std::size_t> slots) const;
  nn::Shape reward_input_shape() const;
  VectorF vice_logits_cached(int classifier, const ReplayBuffer& buffer, std::span<const std::size_t> slots);
  void insert(std::vector<Transition>& pending);
  void gradient_step(int k, EpochTotals& totals);
  void audit(const Transition& t, bool reset_scheduled);

  RunConfig config_;
  std::mt19937_64 rng_;
  std::optional<VaeModel> vae_;
  std::vector<GoalPool> pools_;
  std::vector<MatrixF> goal_inputs_;
  std::vector<SacAgent> agents_;
  std::vector<ViceClassifier> classifiers_;
  std::optional<RndPair> rnd_;
  std::vector<RunningStd> vice_std_;
  RunningStd rnd_std_;
  ReplayBuffer buffer_;
  env::EnvState state_;
  std::optional<Transition> last_;
  double credit_ = 0.0;
  bool explored_ = false;
  std::int64_t epoch_ = 0;
  RunStats stats_;
  std::vector<MetricRow> metrics_;

  // Caches derived from parameters; never serialized.
  std::vector<VectorF> rnd_targets_;                      // per slot, filled at insertion
  std::vector<std::vector<float>> logit_cache_;           // per classifier, per slot
  std::vector<std::vector<std::uint64_t>> logit_serial_;  // serial + 1 of the cached slot, 0 = empty
};

/// Called after every completed epoch (and once after initial exploration
/// with epoch() == 0).
using EpochCallback = std::function<void(Run&)>;

/// Builds a run, collects the initial exploration data and trains all 2N
/// epochs.
Run run_training(const RunConfig& config, RunResources resources = {}, const EpochCallback& on_epoch = {});

/// Goal pool of `config.vice.goal_pool_size` examples around `goal`, in the
/// observation mode the classifier consumes.
GoalPool make_goal_pool(const RunConfig& config, const env::EnvState& goal, std::mt19937_64& rng);

/// The frozen VAE a run pretrains when none is supplied.
VaeModel pretrained_vae(const RunConfig& config);
/// The goal pools a run generates when none are supplied, one per classifier.
std::vector<GoalPool> default_goal_pools(const RunConfig& config);

}  // namespace r3l
