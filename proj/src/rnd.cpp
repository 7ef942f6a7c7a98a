#include "r3l/rnd.hpp"

#include <cmath>
#include <stdexcept>

#include "r3l/nn/trunk.hpp"

namespace r3l {

double RunningStd::std() const {
  if (!initialized) return 1.0;
  const double s = std::sqrt(variance);
  return s > 1e-8 ? s : 1.0;
}

double batch_variance(std::span<const float> values) {
  if (values.empty()) throw std::invalid_argument("batch_variance of an empty batch");
  double mean = 0.0;
  for (float v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double sq = 0.0;
  for (float v : values) sq += (v - mean) * (v - mean);
  return sq / static_cast<double>(values.size());
}

void running_update(RunningStd& running, std::span<const float> batch) {
  if (batch.empty()) throw std::invalid_argument("running_update needs a non-empty batch");
  if (running.estimator == StdEstimator::Welford) {
    for (float v : batch) {
      ++running.count;
      const double delta = v - running.mean;
      running.mean += delta / static_cast<double>(running.count);
      running.m2 += delta * (v - running.mean);
    }
    running.variance = running.m2 / static_cast<double>(running.count);
    running.initialized = true;
    return;
  }
  const double v = batch_variance(batch);
  if (!running.initialized) {
    running.variance = v;
    running.initialized = true;
  } else {
    running.variance = running.decay * running.variance + (1.0 - running.decay) * v;
  }
}

RndPair make_rnd(nn::Shape input, const RndConfig& config, std::mt19937_64& rng) {
  RndPair pair;
  pair.net = nn::make_trunk(input, config.filters, config.hidden, config.embedding_dim, "rnd.");
  pair.target = pair.net.init_params(rng);
  pair.predictor = pair.net.init_params(rng);
  pair.adam = nn::AdamState(pair.predictor, {.learning_rate = config.learning_rate});
  return pair;
}

MatrixF rnd_target_embedding(const RndPair& pair, const MatrixF& inputs) {
  return pair.net.forward(pair.target, inputs);
}

VectorF rnd_raw_error(const RndPair& pair, const MatrixF& inputs, const MatrixF& target_embedding) {
  const MatrixF pred = pair.net.forward(pair.predictor, inputs);
  return (pred - target_embedding).colwise().squaredNorm().transpose();
}

VectorF rnd_raw_error(const RndPair& pair, const MatrixF& inputs) {
  return rnd_raw_error(pair, inputs, rnd_target_embedding(pair, inputs));
}

double rnd_reward(double raw_error, const RunningStd& running) { return running.normalize(raw_error); }

template <typename Scalar>
Scalar rnd_loss(const nn::Network& net, const nn::BasicParamSet<Scalar>& predictor,
                const nn::Matrix<Scalar>& inputs, const nn::Matrix<Scalar>& target_embedding,
                nn::BasicParamSet<Scalar>* grads, std::vector<std::int8_t>* pattern) {
  nn::ForwardCache<Scalar> cache;
  const nn::Matrix<Scalar> pred = net.forward(predictor, inputs, &cache);
  const nn::Matrix<Scalar> diff = pred - target_embedding;
  const auto n = static_cast<Scalar>(inputs.cols());
  if (grads) net.backward(predictor, cache, nn::Matrix<Scalar>(diff * (Scalar(2) / n)), grads);
  if (pattern) *pattern = net.activation_pattern(cache);
  return diff.squaredNorm() / n;
}

template float rnd_loss(const nn::Network&, const nn::ParamSet&, const MatrixF&, const MatrixF&,
                        nn::ParamSet*, std::vector<std::int8_t>*);
template double rnd_loss(const nn::Network&, const nn::BasicParamSet<double>&, const nn::MatrixD&,
                         const nn::MatrixD&, nn::BasicParamSet<double>*, std::vector<std::int8_t>*);

RndUpdate rnd_update(RndPair& pair, const MatrixF& inputs, const MatrixF* target_embedding) {
  if (inputs.cols() == 0) throw std::invalid_argument("rnd_update needs a non-empty batch");
  const MatrixF target = target_embedding ? *target_embedding : rnd_target_embedding(pair, inputs);
  nn::ForwardCache<float> cache;
  const MatrixF pred = pair.net.forward(pair.predictor, inputs, &cache);
  const MatrixF diff = pred - target;
  RndUpdate out;
  out.errors = diff.colwise().squaredNorm().transpose();
  out.loss = out.errors.mean();
  if (!std::isfinite(out.loss)) throw nn::NumericError("non-finite RND loss", "rnd.loss");
  nn::ParamSet grads = pair.predictor.zeros_like();
  pair.net.backward(pair.predictor, cache, MatrixF(diff * (2.0f / static_cast<float>(inputs.cols()))), &grads);
  nn::adam_step(pair.predictor, grads, pair.adam);
  return out;
}

}  // namespace r3l
