#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <random>
#include <vector>

#include "r3l/envsim.hpp"
#include "r3l/nn/adam.hpp"
#include "r3l/nn/network.hpp"
#include "r3l/replay.hpp"
#include "r3l/rnd.hpp"

namespace r3l {

enum class MixupMode { UniformLambda, Beta };

struct ViceConfig {
  std::vector<int> filters{64, 64, 64};
  std::vector<int> hidden{512, 512};
  float learning_rate = 1e-4f;
  int batch_size = 128;  // half positives, half negatives
  int n_vice = 5;
  MixupMode mixup = MixupMode::UniformLambda;
  double mixup_alpha = 1.0;  // Beta(alpha, alpha) when mixup == Beta
  bool use_mixup = true;
  int goal_pool_size = 200;
};

/// Success examples. Immutable once built.
class GoalPool {
 public:
  GoalPool() = default;
  explicit GoalPool(std::vector<env::Observation> items, std::vector<env::EnvState> states = {});

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const env::Observation& operator[](std::size_t i) const { return items_[i]; }
  const std::vector<env::Observation>& items() const { return items_; }
  /// Generating states, when known.
  const std::vector<env::EnvState>& states() const { return states_; }

 private:
  std::vector<env::Observation> items_;
  std::vector<env::EnvState> states_;
};

/// Binary success classifier with a single pre-sigmoid logit output.
struct ViceClassifier {
  ViceConfig config;
  nn::Network net;
  nn::ParamSet params;
  nn::AdamState adam;
};

ViceClassifier make_vice(nn::Shape input, const ViceConfig& config, std::mt19937_64& rng);

/// Classifier input of one observation: its core channel (state or image).
/// Proprio is excluded, so the classifier judges the task state only.
MatrixF vice_inputs(std::span<const env::Observation* const> obs);

VectorF vice_logits(const ViceClassifier& clf, const MatrixF& inputs);
/// The raw logit log(p / (1 - p)).
float vice_reward(const ViceClassifier& clf, const env::Observation& obs);
double normalized_vice_reward(double logit, const RunningStd& running);

struct MixupSample {
  VectorF x;
  float y = 0.0f;
};

/// x = lambda x1 + (1 - lambda) x2, y = lambda y1 + (1 - lambda) y2.
MixupSample mixup_pair(const VectorF& x1, float y1, const VectorF& x2, float y2, float lambda);

double draw_mixup_lambda(const ViceConfig& config, std::mt19937_64& rng);

struct ViceBatch {
  MatrixF inputs;  // positives first
  VectorF labels;
  int positives = 0;
  int negatives = 0;
};

/// batch_size / 2 goal examples (label 1) and as many replay next-observations
/// (label 0), drawn uniformly with replacement.
ViceBatch sample_vice_batch(const GoalPool& pool, const ReplayBuffer& buffer, int batch_size,
                            std::mt19937_64& rng);

/// Classifier inputs for replay slots, one column per slot. Lets callers
/// score a frozen representation instead of the raw next observation.
using SlotInputs = std::function<MatrixF(const ReplayBuffer&, std::span<const std::size_t>)>;

/// As above with precomputed goal inputs (one column per goal example).
ViceBatch sample_vice_batch(const MatrixF& goal_inputs, const ReplayBuffer& buffer, const SlotInputs& inputs,
                            int batch_size, std::mt19937_64& rng);

/// Mixes every sample with a random partner from the same batch.
ViceBatch apply_mixup(const ViceBatch& batch, const ViceConfig& config, std::mt19937_64& rng);

/// Mean binary cross-entropy of logits against soft labels, and its gradient.
template <typename Scalar>
Scalar bce_with_logits(const nn::Matrix<Scalar>& logits, const nn::Vector<Scalar>& labels,
                       nn::Matrix<Scalar>* grad);

/// One Adam step on a (possibly mixed) batch. Returns the loss before the step.
float vice_train_step(ViceClassifier& clf, const ViceBatch& batch);

/// One epoch of classifier training: one positive/negative batch is drawn and
/// n_vice steps are taken on it, each with a fresh mixup draw. Returns the
/// mean loss (0 when n_vice == 0).
float train_epoch(ViceClassifier& clf, const GoalPool& pool, const ReplayBuffer& buffer,
                  int n_vice, std::mt19937_64& rng);

float train_epoch(ViceClassifier& clf, const MatrixF& goal_inputs, const ReplayBuffer& buffer,
                  const SlotInputs& inputs, int n_vice, std::mt19937_64& rng);

/// n_vice steps on one batch, each with a fresh mixup draw when enabled.
float train_on_batch(ViceClassifier& clf, const ViceBatch& batch, int n_vice, std::mt19937_64& rng);

/// Loss and gradient for finite-difference checks.
template <typename Scalar>
Scalar vice_loss(const nn::Network& net, const nn::BasicParamSet<Scalar>& params,
                 const nn::Matrix<Scalar>& inputs, const nn::Vector<Scalar>& labels,
                 nn::BasicParamSet<Scalar>* grads, std::vector<std::int8_t>* pattern = nullptr);

}  // namespace r3l
