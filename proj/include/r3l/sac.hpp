#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "r3l/nn/adam.hpp"
#include "r3l/nn/network.hpp"
#include "r3l/replay.hpp"

namespace r3l {

struct SacConfig {
  std::vector<int> hidden{512, 512};
  float learning_rate = 3e-4f;
  double gamma = 0.99;
  int batch_size = 256;
  double tau = 0.005;
  double initial_temperature = 1.0;
  std::optional<double> target_entropy;  // defaults to -(action dimension)
  double log_std_min = -20.0;
  double log_std_max = 2.0;
  // Raw-image agents only: convolution stack shared by both critics.
  std::vector<int> encoder_filters{64, 64, 64};
  int encoder_features = 50;
};

/// How an agent reads its input columns. Raw-image agents see the 32x32x3
/// image followed by `proprio` values; everything else is a flat vector.
struct SacInputSpec {
  int dim = 0;
  bool raw_image = false;
  int proprio = 0;
};

/// Architecture of one agent; parameters live in SacAgent.
struct SacNetworks {
  SacInputSpec input;
  int action_dim = 0;
  std::optional<nn::Network> encoder;
  nn::Network actor;   // features -> (mean, log std)
  nn::Network critic;  // (features, action) -> Q
  int feature_dim() const { return actor.input_size(); }
};

struct SacAgent {
  SacConfig config;
  SacNetworks nets;
  nn::ParamSet encoder;
  nn::ParamSet encoder_target;
  nn::ParamSet actor;
  nn::ParamSet q1;
  nn::ParamSet q2;
  nn::ParamSet q1_target;
  nn::ParamSet q2_target;
  nn::ParamSet log_alpha;  // one scalar tensor "log_alpha"
  nn::AdamState encoder_adam;
  nn::AdamState actor_adam;
  nn::AdamState q1_adam;
  nn::AdamState q2_adam;
  nn::AdamState alpha_adam;
  std::uint64_t updates = 0;

  double alpha() const;
  double target_entropy() const;
};

SacAgent make_sac(SacInputSpec input, int action_dim, const SacConfig& config, std::mt19937_64& rng);

/// Agent features of input columns: the columns themselves, or the encoder
/// output followed by the proprio rows for raw-image agents.
template <typename Scalar>
nn::Matrix<Scalar> sac_features(const SacNetworks& nets, const nn::BasicParamSet<Scalar>* encoder,
                                const nn::Matrix<Scalar>& inputs,
                                nn::ForwardCache<Scalar>* cache = nullptr);

/// tanh-squashed Gaussian head. `head` stacks means over log stds.
template <typename Scalar>
struct SquashedGaussian {
  nn::Matrix<Scalar> action;
  nn::Vector<Scalar> log_prob;
  nn::Matrix<Scalar> eps;
  nn::Matrix<Scalar> sigma;
  nn::Matrix<Scalar> log_std_active;  // 1 where the log std was not clamped
  bool deterministic = false;
};

template <typename Scalar>
SquashedGaussian<Scalar> squash(const nn::Matrix<Scalar>& head, const nn::Matrix<Scalar>& eps,
                                double log_std_min, double log_std_max, bool deterministic);

/// Gradient with respect to `head` of a loss with partials d_action, d_log_prob.
template <typename Scalar>
nn::Matrix<Scalar> squash_backward(const SquashedGaussian<Scalar>& s, const nn::Matrix<Scalar>& d_action,
                                   const nn::Vector<Scalar>& d_log_prob);

struct ActionSample {
  env::Action action;
  float log_prob = 0.0f;
};

/// Draws a ~ tanh(N(mu, sigma)) (or tanh(mu) when deterministic) for one
/// input column. Throws NumericError on non-finite network output.
ActionSample sample_action(const SacAgent& agent, const VectorF& input, std::mt19937_64& rng,
                           bool deterministic);

/// y = r + gamma * (min_q - alpha * log_prob). No terminal flags: training
/// is a continuing task.
VectorF critic_target(const VectorF& rewards, const VectorF& next_log_probs, const VectorF& next_min_q,
                      double gamma, double alpha);

/// target <- (1 - tau) target + tau online.
void polyak_update(nn::ParamSet& target, const nn::ParamSet& online, double tau);

/// Sum of the two critics' mean squared errors against `targets`.
template <typename Scalar>
Scalar critic_loss(const SacNetworks& nets, const nn::BasicParamSet<Scalar>* encoder,
                   const nn::BasicParamSet<Scalar>& q1, const nn::BasicParamSet<Scalar>& q2,
                   const nn::Matrix<Scalar>& inputs, const nn::Matrix<Scalar>& actions,
                   const nn::Vector<Scalar>& targets, nn::BasicParamSet<Scalar>* encoder_grads,
                   nn::BasicParamSet<Scalar>* q1_grads, nn::BasicParamSet<Scalar>* q2_grads,
                   std::vector<std::int8_t>* pattern = nullptr, nn::Matrix<Scalar>* features_out = nullptr,
                   Scalar* mean_q1 = nullptr);

/// Reparameterized soft policy objective mean(alpha log pi(a|s) - min Q(s, a))
/// on detached features. `log_probs` receives log pi of the drawn actions.
template <typename Scalar>
Scalar actor_loss(const SacNetworks& nets, const nn::BasicParamSet<Scalar>& actor,
                  const nn::BasicParamSet<Scalar>& q1, const nn::BasicParamSet<Scalar>& q2,
                  const nn::Matrix<Scalar>& features, const nn::Matrix<Scalar>& eps, Scalar alpha,
                  double log_std_min, double log_std_max, nn::BasicParamSet<Scalar>* actor_grads,
                  nn::Vector<Scalar>* log_probs = nullptr, std::vector<std::int8_t>* pattern = nullptr);

struct SacBatch {
  MatrixF inputs;
  MatrixF actions;
  MatrixF next_inputs;
  VectorF rewards;
};

struct SacLosses {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double mean_q = 0.0;
  double mean_target = 0.0;
  double mean_reward = 0.0;
  double mean_log_prob = 0.0;
  friend bool operator==(const SacLosses&, const SacLosses&) = default;
};

/// Rewards for the next observations of the given buffer slots.
using RewardFn = std::function<VectorF(const ReplayBuffer&, std::span<const std::size_t>)>;

/// Agent input columns for buffer slots: stored features when present,
/// otherwise the flattened observation.
MatrixF agent_inputs(const ReplayBuffer& buffer, std::span<const std::size_t> slots, bool next);

/// One gradient step each on critics, actor and temperature, then polyak
/// averaging of the targets.
SacLosses update_on_batch(SacAgent& agent, const SacBatch& batch, std::mt19937_64& rng);

/// Samples a batch, scores it with `reward_fn` and applies update_on_batch.
/// `slots_out` receives the sampled slots.
SacLosses update_step(SacAgent& agent, const ReplayBuffer& buffer, const RewardFn& reward_fn,
                      std::mt19937_64& rng, std::vector<std::size_t>* slots_out = nullptr);

}  // namespace r3l
