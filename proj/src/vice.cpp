#include "r3l/vice.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "r3l/nn/trunk.hpp"

namespace r3l {

GoalPool::GoalPool(std::vector<env::Observation> items, std::vector<env::EnvState> states)
    : items_(std::move(items)), states_(std::move(states)) {
  if (items_.empty()) throw std::invalid_argument("goal pool must not be empty");
  if (!states_.empty() && states_.size() != items_.size())
    throw std::invalid_argument("goal pool states must match its observations");
}

ViceClassifier make_vice(nn::Shape input, const ViceConfig& config, std::mt19937_64& rng) {
  ViceClassifier clf;
  clf.config = config;
  clf.net = nn::make_trunk(input, config.filters, config.hidden, 1, "vice.");
  clf.params = clf.net.init_params(rng);
  clf.adam = nn::AdamState(clf.params, {.learning_rate = config.learning_rate});
  return clf;
}

MatrixF vice_inputs(std::span<const env::Observation* const> obs) {
  return stack_observations(obs, false);
}

VectorF vice_logits(const ViceClassifier& clf, const MatrixF& inputs) {
  return clf.net.forward(clf.params, inputs).row(0).transpose();
}

float vice_reward(const ViceClassifier& clf, const env::Observation& obs) {
  const env::Observation* p = &obs;
  return vice_logits(clf, vice_inputs({&p, 1}))[0];
}

double normalized_vice_reward(double logit, const RunningStd& running) {
  return running.normalize(logit);
}

MixupSample mixup_pair(const VectorF& x1, float y1, const VectorF& x2, float y2, float lambda) {
  if (!(lambda >= 0.0f && lambda <= 1.0f)) throw std::invalid_argument("mixup lambda outside [0, 1]");
  if (x1.size() != x2.size()) throw std::invalid_argument("mixup inputs differ in size");
  if (lambda == 1.0f) return {x1, y1};
  if (lambda == 0.0f) return {x2, y2};
  return {lambda * x1 + (1.0f - lambda) * x2, lambda * y1 + (1.0f - lambda) * y2};
}

double draw_mixup_lambda(const ViceConfig& config, std::mt19937_64& rng) {
  if (config.mixup == MixupMode::UniformLambda) return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::gamma_distribution<double> g(config.mixup_alpha, 1.0);
  const double a = g(rng);
  const double b = g(rng);
  return a + b > 0.0 ? a / (a + b) : 0.5;
}

ViceBatch sample_vice_batch(const GoalPool& pool, const ReplayBuffer& buffer, int batch_size,
                            std::mt19937_64& rng) {
  if (pool.empty()) throw std::invalid_argument("VICE training needs a non-empty goal pool");
  if (buffer.empty()) throw std::invalid_argument("VICE training needs replay negatives");
  const int half = batch_size / 2;
  std::vector<const env::Observation*> obs;
  obs.reserve(static_cast<std::size_t>(2 * half));
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (int i = 0; i < half; ++i) obs.push_back(&pool[pick(rng)]);
  for (std::size_t slot : buffer.sample(static_cast<std::size_t>(half), rng)) obs.push_back(&buffer[slot].next_obs);
  ViceBatch b;
  b.inputs = vice_inputs(obs);
  b.labels = VectorF::Zero(2 * half);
  b.labels.head(half).setOnes();
  b.positives = half;
  b.negatives = half;
  return b;
}

ViceBatch sample_vice_batch(const MatrixF& goal_inputs, const ReplayBuffer& buffer, const SlotInputs& inputs,
                            int batch_size, std::mt19937_64& rng) {
  if (goal_inputs.cols() == 0) throw std::invalid_argument("VICE training needs a non-empty goal pool");
  if (buffer.empty()) throw std::invalid_argument("VICE training needs replay negatives");
  const int half = batch_size / 2;
  std::uniform_int_distribution<Eigen::Index> pick(0, goal_inputs.cols() - 1);
  ViceBatch b;
  b.inputs.resize(goal_inputs.rows(), 2 * half);
  for (int i = 0; i < half; ++i) b.inputs.col(i) = goal_inputs.col(pick(rng));
  const std::vector<std::size_t> slots = buffer.sample(static_cast<std::size_t>(half), rng);
  const MatrixF negatives = inputs(buffer, slots);
  if (negatives.rows() != goal_inputs.rows() || negatives.cols() != half)
    throw std::invalid_argument("replay inputs do not match the goal inputs");
  b.inputs.rightCols(half) = negatives;
  b.labels = VectorF::Zero(2 * half);
  b.labels.head(half).setOnes();
  b.positives = half;
  b.negatives = half;
  return b;
}

ViceBatch apply_mixup(const ViceBatch& batch, const ViceConfig& config, std::mt19937_64& rng) {
  const Eigen::Index n = batch.inputs.cols();
  std::vector<Eigen::Index> partner(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) partner[static_cast<std::size_t>(i)] = i;
  std::shuffle(partner.begin(), partner.end(), rng);
  ViceBatch out = batch;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j = partner[static_cast<std::size_t>(i)];
    const auto lambda = static_cast<float>(draw_mixup_lambda(config, rng));
    MixupSample m = mixup_pair(batch.inputs.col(i), batch.labels[i], batch.inputs.col(j), batch.labels[j], lambda);
    out.inputs.col(i) = m.x;
    out.labels[i] = m.y;
  }
  return out;
}

template <typename Scalar>
Scalar bce_with_logits(const nn::Matrix<Scalar>& logits, const nn::Vector<Scalar>& labels,
                       nn::Matrix<Scalar>* grad) {
  const Eigen::Index n = logits.cols();
  Scalar loss = 0;
  if (grad) grad->resize(1, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar z = logits(0, i);
    // softplus(z) - y z, computed stably
    const Scalar softplus = std::max(z, Scalar(0)) + std::log1p(std::exp(-std::abs(z)));
    loss += softplus - labels[i] * z;
    if (grad) (*grad)(0, i) = (Scalar(1) / (Scalar(1) + std::exp(-z)) - labels[i]) / static_cast<Scalar>(n);
  }
  return loss / static_cast<Scalar>(n);
}

template float bce_with_logits(const MatrixF&, const VectorF&, MatrixF*);
template double bce_with_logits(const nn::MatrixD&, const nn::VectorD&, nn::MatrixD*);

template <typename Scalar>
Scalar vice_loss(const nn::Network& net, const nn::BasicParamSet<Scalar>& params,
                 const nn::Matrix<Scalar>& inputs, const nn::Vector<Scalar>& labels,
                 nn::BasicParamSet<Scalar>* grads, std::vector<std::int8_t>* pattern) {
  nn::ForwardCache<Scalar> cache;
  const nn::Matrix<Scalar> logits = net.forward(params, inputs, &cache);
  nn::Matrix<Scalar> g;
  const Scalar loss = bce_with_logits(logits, labels, grads ? &g : nullptr);
  if (grads) net.backward(params, cache, g, grads);
  if (pattern) *pattern = net.activation_pattern(cache);
  return loss;
}

template float vice_loss(const nn::Network&, const nn::ParamSet&, const MatrixF&, const VectorF&,
                         nn::ParamSet*, std::vector<std::int8_t>*);
template double vice_loss(const nn::Network&, const nn::BasicParamSet<double>&, const nn::MatrixD&,
                          const nn::VectorD&, nn::BasicParamSet<double>*, std::vector<std::int8_t>*);

float vice_train_step(ViceClassifier& clf, const ViceBatch& batch) {
  nn::ParamSet grads = clf.params.zeros_like();
  const float loss = vice_loss(clf.net, clf.params, batch.inputs, batch.labels, &grads);
  if (!std::isfinite(loss)) throw nn::NumericError("non-finite VICE loss", "vice.loss");
  nn::adam_step(clf.params, grads, clf.adam);
  return loss;
}

float train_on_batch(ViceClassifier& clf, const ViceBatch& batch, int n_vice, std::mt19937_64& rng) {
  if (n_vice <= 0) return 0.0f;
  double total = 0.0;
  for (int t = 0; t < n_vice; ++t) {
    total += clf.config.use_mixup ? vice_train_step(clf, apply_mixup(batch, clf.config, rng))
                                  : vice_train_step(clf, batch);
  }
  return static_cast<float>(total / n_vice);
}

float train_epoch(ViceClassifier& clf, const GoalPool& pool, const ReplayBuffer& buffer, int n_vice,
                  std::mt19937_64& rng) {
  if (pool.empty()) throw std::invalid_argument("VICE training needs a non-empty goal pool");
  if (n_vice <= 0) return 0.0f;
  return train_on_batch(clf, sample_vice_batch(pool, buffer, clf.config.batch_size, rng), n_vice, rng);
}

float train_epoch(ViceClassifier& clf, const MatrixF& goal_inputs, const ReplayBuffer& buffer,
                  const SlotInputs& inputs, int n_vice, std::mt19937_64& rng) {
  if (goal_inputs.cols() == 0) throw std::invalid_argument("VICE training needs a non-empty goal pool");
  if (n_vice <= 0) return 0.0f;
  return train_on_batch(clf, sample_vice_batch(goal_inputs, buffer, inputs, clf.config.batch_size, rng), n_vice,
                        rng);
}

}  // namespace r3l
