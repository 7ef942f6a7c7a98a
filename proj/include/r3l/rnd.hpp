#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "r3l/nn/adam.hpp"
#include "r3l/nn/network.hpp"

namespace r3l {

using nn::MatrixF;
using nn::VectorF;

enum class StdEstimator { Ema, Welford };

/// Running standard deviation of a reward stream, used to normalize VICE
/// logits and RND errors. The EMA estimator tracks
///   variance <- decay * variance + (1 - decay) * batch_variance
/// after the first batch initializes it directly; Welford pools every value
/// seen so far. Before the first update std() reports the fallback 1.
struct RunningStd {
  StdEstimator estimator = StdEstimator::Ema;
  double decay = 0.99;
  double variance = 1.0;
  bool initialized = false;
  // Welford accumulators
  std::uint64_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  /// Estimated standard deviation, or 1 before warm-up or while the
  /// estimate is degenerate (zero variance).
  double std() const;
  double normalize(double value) const { return value / std(); }
};

/// Population variance of one batch.
double batch_variance(std::span<const float> values);

/// Folds one batch into the estimate. Throws on an empty batch.
void running_update(RunningStd& running, std::span<const float> batch);

struct RndConfig {
  std::vector<int> filters{16, 32, 64};
  std::vector<int> hidden{512, 512};
  int embedding_dim = 64;
  float learning_rate = 3e-4f;
  int batch_size = 256;
};

/// Frozen random target f and trainable predictor f^ of identical
/// architecture.
struct RndPair {
  nn::Network net;
  nn::ParamSet target;
  nn::ParamSet predictor;
  nn::AdamState adam;
};

RndPair make_rnd(nn::Shape input, const RndConfig& config, std::mt19937_64& rng);

MatrixF rnd_target_embedding(const RndPair& pair, const MatrixF& inputs);

/// ||f^(s) - f(s)||^2 per column.
VectorF rnd_raw_error(const RndPair& pair, const MatrixF& inputs);
VectorF rnd_raw_error(const RndPair& pair, const MatrixF& inputs, const MatrixF& target_embedding);

/// Raw error divided by the running std.
double rnd_reward(double raw_error, const RunningStd& running);

struct RndUpdate {
  float loss = 0.0f;       // mean raw error before the step
  VectorF errors;          // per-sample raw errors before the step
};

/// One Adam step on the predictor minimizing the mean raw error of the batch.
/// `target_embedding` may carry precomputed f(s) for the batch.
RndUpdate rnd_update(RndPair& pair, const MatrixF& inputs, const MatrixF* target_embedding = nullptr);

/// Loss and predictor gradient, exposed for finite-difference checks.
template <typename Scalar>
Scalar rnd_loss(const nn::Network& net, const nn::BasicParamSet<Scalar>& predictor,
                const nn::Matrix<Scalar>& inputs, const nn::Matrix<Scalar>& target_embedding,
                nn::BasicParamSet<Scalar>* grads, std::vector<std::int8_t>* pattern = nullptr);

}  // namespace r3l
