#include "r3l/sac.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "r3l/nn/trunk.hpp"

namespace r3l {

namespace {

using nn::BasicParamSet;
using nn::ForwardCache;
using nn::Matrix;
using nn::Vector;

constexpr double kSquashEpsilon = 1e-6;

template <typename Scalar>
Matrix<Scalar> stack_rows(const Matrix<Scalar>& top, const Matrix<Scalar>& bottom) {
  Matrix<Scalar> out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

void append_pattern(std::vector<std::int8_t>* pattern, const std::vector<std::int8_t>& more) {
  pattern->insert(pattern->end(), more.begin(), more.end());
}

MatrixF gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  MatrixF m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

void require_finite_loss(const SacLosses& l) {
  if (std::isfinite(l.critic_loss) && std::isfinite(l.actor_loss) && std::isfinite(l.alpha_loss) &&
      std::isfinite(l.alpha))
    return;
  std::ostringstream os;
  os << "non-finite SAC loss: critic " << l.critic_loss << ", actor " << l.actor_loss << ", alpha loss "
     << l.alpha_loss << ", alpha " << l.alpha << ", mean q " << l.mean_q << ", mean target "
     << l.mean_target << ", mean reward " << l.mean_reward;
  throw nn::NumericError(os.str(), "sac.loss");
}

}  // namespace

double SacAgent::alpha() const { return std::exp(static_cast<double>(log_alpha.at("log_alpha").values[0])); }

double SacAgent::target_entropy() const {
  return config.target_entropy.value_or(-static_cast<double>(nets.action_dim));
}

SacAgent make_sac(SacInputSpec input, int action_dim, const SacConfig& config, std::mt19937_64& rng) {
  if (action_dim <= 0) throw std::invalid_argument("SAC needs a positive action dimension");
  if (!(config.initial_temperature > 0.0)) throw std::invalid_argument("SAC temperature must be positive");
  SacAgent a;
  a.config = config;
  a.nets.input = input;
  a.nets.action_dim = action_dim;
  int feature_dim = input.dim;
  if (input.raw_image) {
    const nn::Shape img = nn::Shape::image(env::Image::kSize, env::Image::kSize, env::Image::kChannels);
    if (input.dim != img.size() + input.proprio)
      throw std::invalid_argument("raw-image SAC input must be the image followed by proprio");
    a.nets.encoder = nn::make_conv_encoder(img, config.encoder_filters, config.encoder_features, "enc.");
    feature_dim = config.encoder_features + input.proprio;
    a.encoder = a.nets.encoder->init_params(rng);
    a.encoder_target = a.encoder;
    a.encoder_adam = nn::AdamState(a.encoder, {.learning_rate = config.learning_rate});
  }
  a.nets.actor = nn::make_trunk(nn::Shape::flat(feature_dim), {}, config.hidden, 2 * action_dim, "actor.");
  a.nets.critic = nn::make_trunk(nn::Shape::flat(feature_dim + action_dim), {}, config.hidden, 1, "critic.");
  a.actor = a.nets.actor.init_params(rng);
  a.q1 = a.nets.critic.init_params(rng);
  a.q2 = a.nets.critic.init_params(rng);
  a.q1_target = a.q1;
  a.q2_target = a.q2;
  a.log_alpha.add("log_alpha", {1}, nn::VectorF::Constant(1, static_cast<float>(std::log(config.initial_temperature))));
  a.actor_adam = nn::AdamState(a.actor, {.learning_rate = config.learning_rate});
  a.q1_adam = nn::AdamState(a.q1, {.learning_rate = config.learning_rate});
  a.q2_adam = nn::AdamState(a.q2, {.learning_rate = config.learning_rate});
  a.alpha_adam = nn::AdamState(a.log_alpha, {.learning_rate = config.learning_rate});
  return a;
}

template <typename Scalar>
Matrix<Scalar> sac_features(const SacNetworks& nets, const BasicParamSet<Scalar>* encoder,
                            const Matrix<Scalar>& inputs, ForwardCache<Scalar>* cache) {
  if (inputs.rows() != nets.input.dim)
    throw std::invalid_argument("SAC input has " + std::to_string(inputs.rows()) + " rows, expected " +
                                std::to_string(nets.input.dim));
  if (!nets.encoder) return inputs;
  const Eigen::Index img = nets.encoder->input_size();
  const Matrix<Scalar> f = nets.encoder->forward(*encoder, Matrix<Scalar>(inputs.topRows(img)), cache);
  if (nets.input.proprio == 0) return f;
  return stack_rows<Scalar>(f, inputs.bottomRows(nets.input.proprio));
}

template MatrixF sac_features(const SacNetworks&, const nn::ParamSet*, const MatrixF&, ForwardCache<float>*);
template nn::MatrixD sac_features(const SacNetworks&, const BasicParamSet<double>*, const nn::MatrixD&,
                                  ForwardCache<double>*);

template <typename Scalar>
SquashedGaussian<Scalar> squash(const Matrix<Scalar>& head, const Matrix<Scalar>& eps, double log_std_min,
                                double log_std_max, bool deterministic) {
  const Eigen::Index d = head.rows() / 2;
  const Eigen::Index n = head.cols();
  SquashedGaussian<Scalar> s;
  s.deterministic = deterministic;
  s.eps = deterministic ? Matrix<Scalar>::Zero(d, n) : eps;
  s.action.resize(d, n);
  s.sigma.resize(d, n);
  s.log_std_active.resize(d, n);
  s.log_prob = Vector<Scalar>::Zero(n);
  const Scalar half_log_2pi = static_cast<Scalar>(0.5 * std::log(2.0 * std::numbers::pi));
  const Scalar edge = std::nextafter(Scalar(1), Scalar(0));
  for (Eigen::Index b = 0; b < n; ++b) {
    Scalar lp = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const Scalar raw = head(d + j, b);
      const Scalar ls = std::clamp(raw, static_cast<Scalar>(log_std_min), static_cast<Scalar>(log_std_max));
      s.log_std_active(j, b) = (raw > static_cast<Scalar>(log_std_min) && raw < static_cast<Scalar>(log_std_max)) ? 1 : 0;
      const Scalar sigma = std::exp(ls);
      const Scalar e = s.eps(j, b);
      const Scalar u = head(j, b) + sigma * e;
      // float tanh rounds to +-1 beyond |u| ~ 9; keep actions strictly inside
      const Scalar a = std::clamp(std::tanh(u), -edge, edge);
      s.sigma(j, b) = sigma;
      s.action(j, b) = a;
      lp += -Scalar(0.5) * e * e - ls - half_log_2pi -
            std::log(Scalar(1) - a * a + static_cast<Scalar>(kSquashEpsilon));
    }
    s.log_prob[b] = lp;
  }
  return s;
}

template SquashedGaussian<float> squash(const MatrixF&, const MatrixF&, double, double, bool);
template SquashedGaussian<double> squash(const nn::MatrixD&, const nn::MatrixD&, double, double, bool);

template <typename Scalar>
Matrix<Scalar> squash_backward(const SquashedGaussian<Scalar>& s, const Matrix<Scalar>& d_action,
                               const Vector<Scalar>& d_log_prob) {
  const Eigen::Index d = s.action.rows();
  const Eigen::Index n = s.action.cols();
  Matrix<Scalar> g(2 * d, n);
  for (Eigen::Index b = 0; b < n; ++b) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const Scalar a = s.action(j, b);
      const Scalar t = Scalar(1) - a * a;
      const Scalar du = d_action(j, b) * t + d_log_prob[b] * Scalar(2) * a * t / (t + static_cast<Scalar>(kSquashEpsilon));
      g(j, b) = du;
      const Scalar dls = s.deterministic ? -d_log_prob[b] : du * s.sigma(j, b) * s.eps(j, b) - d_log_prob[b];
      g(d + j, b) = dls * s.log_std_active(j, b);
    }
  }
  return g;
}

template MatrixF squash_backward(const SquashedGaussian<float>&, const MatrixF&, const VectorF&);
template nn::MatrixD squash_backward(const SquashedGaussian<double>&, const nn::MatrixD&, const nn::VectorD&);

ActionSample sample_action(const SacAgent& agent, const VectorF& input, std::mt19937_64& rng,
                           bool deterministic) {
  const MatrixF x = input;
  const MatrixF f = sac_features(agent.nets, agent.nets.encoder ? &agent.encoder : nullptr, x);
  const MatrixF head = agent.nets.actor.forward(agent.actor, f);
  if (!head.allFinite()) throw nn::NumericError("non-finite actor output", "actor");
  const MatrixF eps = deterministic ? MatrixF::Zero(agent.nets.action_dim, 1)
                                    : gaussian(agent.nets.action_dim, 1, rng);
  const auto s = squash(head, eps, agent.config.log_std_min, agent.config.log_std_max, deterministic);
  return {s.action.col(0), s.log_prob[0]};
}

VectorF critic_target(const VectorF& rewards, const VectorF& next_log_probs, const VectorF& next_min_q,
                      double gamma, double alpha) {
  const auto g = static_cast<float>(gamma);
  const auto a = static_cast<float>(alpha);
  return rewards + g * (next_min_q - a * next_log_probs);
}

void polyak_update(nn::ParamSet& target, const nn::ParamSet& online, double tau) {
  if (!target.same_layout(online)) throw std::invalid_argument("polyak_update: parameter layouts differ");
  const auto t = static_cast<float>(tau);
  auto dst = target.mutable_entries();
  auto src = online.entries();
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i].tensor.values = (1.0f - t) * dst[i].tensor.values + t * src[i].tensor.values;
}

template <typename Scalar>
Scalar critic_loss(const SacNetworks& nets, const BasicParamSet<Scalar>* encoder, const BasicParamSet<Scalar>& q1,
                   const BasicParamSet<Scalar>& q2, const Matrix<Scalar>& inputs, const Matrix<Scalar>& actions,
                   const Vector<Scalar>& targets, BasicParamSet<Scalar>* encoder_grads,
                   BasicParamSet<Scalar>* q1_grads, BasicParamSet<Scalar>* q2_grads,
                   std::vector<std::int8_t>* pattern, Matrix<Scalar>* features_out, Scalar* mean_q1) {
  ForwardCache<Scalar> enc_cache, c1, c2;
  const Matrix<Scalar> f = sac_features(nets, encoder, inputs, nets.encoder ? &enc_cache : nullptr);
  const Matrix<Scalar> x = stack_rows(f, actions);
  const Matrix<Scalar> q1_values = nets.critic.forward(q1, x, &c1);
  if (mean_q1) *mean_q1 = q1_values.mean();
  if (features_out) *features_out = f;
  const Matrix<Scalar> d1 = q1_values - targets.transpose();
  const Matrix<Scalar> d2 = nets.critic.forward(q2, x, &c2) - targets.transpose();
  const auto n = static_cast<Scalar>(inputs.cols());
  const Scalar loss = (d1.squaredNorm() + d2.squaredNorm()) / n;
  if (q1_grads || q2_grads || encoder_grads) {
    const Matrix<Scalar> dx1 = nets.critic.backward(q1, c1, Matrix<Scalar>(d1 * (Scalar(2) / n)), q1_grads);
    const Matrix<Scalar> dx2 = nets.critic.backward(q2, c2, Matrix<Scalar>(d2 * (Scalar(2) / n)), q2_grads);
    if (nets.encoder && encoder_grads) {
      const Eigen::Index k = nets.encoder->output_size();
      nets.encoder->backward(*encoder, enc_cache, Matrix<Scalar>((dx1 + dx2).topRows(k)), encoder_grads);
    }
  }
  if (pattern) {
    pattern->clear();
    if (nets.encoder) append_pattern(pattern, nets.encoder->activation_pattern(enc_cache));
    append_pattern(pattern, nets.critic.activation_pattern(c1));
    append_pattern(pattern, nets.critic.activation_pattern(c2));
  }
  return loss;
}

template float critic_loss(const SacNetworks&, const nn::ParamSet*, const nn::ParamSet&, const nn::ParamSet&,
                           const MatrixF&, const MatrixF&, const VectorF&, nn::ParamSet*, nn::ParamSet*,
                           nn::ParamSet*, std::vector<std::int8_t>*, MatrixF*, float*);
template double critic_loss(const SacNetworks&, const BasicParamSet<double>*, const BasicParamSet<double>&,
                            const BasicParamSet<double>&, const nn::MatrixD&, const nn::MatrixD&,
                            const nn::VectorD&, BasicParamSet<double>*, BasicParamSet<double>*,
                            BasicParamSet<double>*, std::vector<std::int8_t>*, nn::MatrixD*, double*);

template <typename Scalar>
Scalar actor_loss(const SacNetworks& nets, const BasicParamSet<Scalar>& actor, const BasicParamSet<Scalar>& q1,
                  const BasicParamSet<Scalar>& q2, const Matrix<Scalar>& features, const Matrix<Scalar>& eps,
                  Scalar alpha, double log_std_min, double log_std_max, BasicParamSet<Scalar>* actor_grads,
                  Vector<Scalar>* log_probs, std::vector<std::int8_t>* pattern) {
  ForwardCache<Scalar> ac, c1, c2;
  const Matrix<Scalar> head = nets.actor.forward(actor, features, &ac);
  const auto s = squash(head, eps, log_std_min, log_std_max, false);
  const Matrix<Scalar> x = stack_rows(features, s.action);
  const Matrix<Scalar> qa1 = nets.critic.forward(q1, x, &c1);
  const Matrix<Scalar> qa2 = nets.critic.forward(q2, x, &c2);
  const Eigen::Index n = features.cols();
  const auto nn_ = static_cast<Scalar>(n);
  Scalar loss = 0;
  Matrix<Scalar> g1 = Matrix<Scalar>::Zero(1, n), g2 = Matrix<Scalar>::Zero(1, n);
  for (Eigen::Index b = 0; b < n; ++b) {
    const bool first = qa1(0, b) <= qa2(0, b);
    loss += alpha * s.log_prob[b] - (first ? qa1(0, b) : qa2(0, b));
    (first ? g1 : g2)(0, b) = -Scalar(1) / nn_;
  }
  loss /= nn_;
  if (actor_grads) {
    const Matrix<Scalar> dx = nets.critic.backward(q1, c1, g1, static_cast<BasicParamSet<Scalar>*>(nullptr)) +
                              nets.critic.backward(q2, c2, g2, static_cast<BasicParamSet<Scalar>*>(nullptr));
    const Matrix<Scalar> d_action = dx.bottomRows(nets.action_dim);
    const Vector<Scalar> d_logp = Vector<Scalar>::Constant(n, alpha / nn_);
    nets.actor.backward(actor, ac, squash_backward(s, d_action, d_logp), actor_grads);
  }
  if (log_probs) *log_probs = s.log_prob;
  if (pattern) {
    *pattern = nets.actor.activation_pattern(ac);
    append_pattern(pattern, nets.critic.activation_pattern(c1));
    append_pattern(pattern, nets.critic.activation_pattern(c2));
    for (Eigen::Index b = 0; b < n; ++b) pattern->push_back(qa1(0, b) <= qa2(0, b) ? 1 : 0);
    for (Eigen::Index i = 0; i < s.log_std_active.size(); ++i)
      pattern->push_back(static_cast<std::int8_t>(s.log_std_active.data()[i]));
  }
  return loss;
}

template float actor_loss(const SacNetworks&, const nn::ParamSet&, const nn::ParamSet&, const nn::ParamSet&,
                          const MatrixF&, const MatrixF&, float, double, double, nn::ParamSet*, VectorF*,
                          std::vector<std::int8_t>*);
template double actor_loss(const SacNetworks&, const BasicParamSet<double>&, const BasicParamSet<double>&,
                           const BasicParamSet<double>&, const nn::MatrixD&, const nn::MatrixD&, double, double,
                           double, BasicParamSet<double>*, nn::VectorD*, std::vector<std::int8_t>*);

MatrixF agent_inputs(const ReplayBuffer& buffer, std::span<const std::size_t> slots, bool next) {
  if (slots.empty()) return {};
  const Transition& first = buffer[slots[0]];
  const VectorF& feat0 = next ? first.next_obs_features : first.obs_features;
  if (feat0.size() > 0) {
    MatrixF out(feat0.size(), static_cast<Eigen::Index>(slots.size()));
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const Transition& t = buffer[slots[i]];
      out.col(static_cast<Eigen::Index>(i)) = next ? t.next_obs_features : t.obs_features;
    }
    return out;
  }
  std::vector<const env::Observation*> obs;
  obs.reserve(slots.size());
  for (std::size_t s : slots) obs.push_back(next ? &buffer[s].next_obs : &buffer[s].obs);
  return stack_observations(obs, true);
}

SacLosses update_on_batch(SacAgent& agent, const SacBatch& batch, std::mt19937_64& rng) {
  const SacNetworks& nets = agent.nets;
  const SacConfig& cfg = agent.config;
  const Eigen::Index n = batch.inputs.cols();
  const double alpha = agent.alpha();
  SacLosses out;
  out.alpha = alpha;
  out.mean_reward = batch.rewards.mean();

  // soft Bellman targets from the target critics
  const nn::ParamSet* enc_target = nets.encoder ? &agent.encoder_target : nullptr;
  const MatrixF next_f = sac_features(nets, enc_target, batch.next_inputs);
  const MatrixF next_head = nets.actor.forward(agent.actor, next_f);
  const auto next = squash(next_head, gaussian(nets.action_dim, n, rng), cfg.log_std_min, cfg.log_std_max, false);
  const MatrixF next_x = stack_rows(next_f, next.action);
  const VectorF next_min_q = nets.critic.forward(agent.q1_target, next_x)
                                 .cwiseMin(nets.critic.forward(agent.q2_target, next_x))
                                 .row(0)
                                 .transpose();
  const VectorF y = critic_target(batch.rewards, next.log_prob, next_min_q, cfg.gamma, alpha);
  out.mean_target = y.mean();

  // critics (and the shared encoder)
  const nn::ParamSet* enc = nets.encoder ? &agent.encoder : nullptr;
  MatrixF features;
  float mean_q = 0.0f;
  nn::ParamSet g1 = agent.q1.zeros_like(), g2 = agent.q2.zeros_like();
  nn::ParamSet ge = nets.encoder ? agent.encoder.zeros_like() : nn::ParamSet{};
  out.critic_loss = critic_loss(nets, enc, agent.q1, agent.q2, batch.inputs, batch.actions, y,
                                nets.encoder ? &ge : nullptr, &g1, &g2, nullptr, &features, &mean_q);
  out.mean_q = mean_q;
  require_finite_loss(out);
  nn::adam_step(agent.q1, g1, agent.q1_adam);
  nn::adam_step(agent.q2, g2, agent.q2_adam);
  if (nets.encoder) nn::adam_step(agent.encoder, ge, agent.encoder_adam);

  // actor on detached features
  nn::ParamSet ga = agent.actor.zeros_like();
  VectorF log_probs;
  out.actor_loss = actor_loss(nets, agent.actor, agent.q1, agent.q2, features, gaussian(nets.action_dim, n, rng),
                              static_cast<float>(alpha), cfg.log_std_min, cfg.log_std_max, &ga, &log_probs);
  out.mean_log_prob = log_probs.mean();

  // temperature: J(log alpha) = -log alpha * mean(log pi + target entropy)
  const double drive = out.mean_log_prob + agent.target_entropy();
  out.alpha_loss = -std::log(alpha) * drive;
  require_finite_loss(out);
  nn::adam_step(agent.actor, ga, agent.actor_adam);
  nn::ParamSet galpha = agent.log_alpha.zeros_like();
  galpha.mutable_at("log_alpha").values[0] = static_cast<float>(-drive);
  nn::adam_step(agent.log_alpha, galpha, agent.alpha_adam);

  polyak_update(agent.q1_target, agent.q1, cfg.tau);
  polyak_update(agent.q2_target, agent.q2, cfg.tau);
  if (nets.encoder) polyak_update(agent.encoder_target, agent.encoder, cfg.tau);
  ++agent.updates;
  return out;
}

SacLosses update_step(SacAgent& agent, const ReplayBuffer& buffer, const RewardFn& reward_fn,
                      std::mt19937_64& rng, std::vector<std::size_t>* slots_out) {
  const auto batch_size = static_cast<std::size_t>(agent.config.batch_size);
  if (buffer.size() < batch_size)
    throw std::logic_error("update_step needs at least one batch of transitions in the buffer");
  std::vector<std::size_t> slots = buffer.sample(batch_size, rng);
  SacBatch batch;
  batch.inputs = agent_inputs(buffer, slots, false);
  batch.next_inputs = agent_inputs(buffer, slots, true);
  batch.actions.resize(agent.nets.action_dim, static_cast<Eigen::Index>(batch_size));
  for (std::size_t i = 0; i < batch_size; ++i) batch.actions.col(static_cast<Eigen::Index>(i)) = buffer[slots[i]].action;
  batch.rewards = reward_fn(buffer, slots);
  if (batch.rewards.size() != static_cast<Eigen::Index>(batch_size))
    throw std::logic_error("reward function returned the wrong number of rewards");
  SacLosses losses = update_on_batch(agent, batch, rng);
  if (slots_out) *slots_out = std::move(slots);
  return losses;
}

}  // namespace r3l
