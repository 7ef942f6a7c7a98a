#include "r3l/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace r3l {

namespace {

using nn::LayerSpec;
using nn::Shape;

const Shape kImage = Shape::image(env::Image::kSize, env::Image::kSize, env::Image::kChannels);

nn::Network make_encoder(const VaeConfig& c) {
  std::vector<LayerSpec> layers;
  for (int f : c.filters) {
    layers.push_back(LayerSpec::conv2d(f));
    layers.push_back(LayerSpec::relu());
  }
  layers.push_back(LayerSpec::flatten());
  layers.push_back(LayerSpec::dense(2 * c.latent_dim));
  return nn::Network(kImage, std::move(layers), "vae.enc.");
}

// Mirror of the encoder: dense to the last feature map, then one transposed
// convolution per encoder convolution, ending in the image channels.
nn::Network make_decoder(const VaeConfig& c, const nn::Network& encoder) {
  const auto& shapes = encoder.shapes();
  // shapes: input, conv, relu, conv, relu, ..., flatten, dense
  const Shape top = shapes[2 * c.filters.size()];
  std::vector<LayerSpec> layers;
  layers.push_back(LayerSpec::dense(top.size()));
  layers.push_back(LayerSpec::relu());
  layers.push_back(LayerSpec::reshape(top));
  for (std::size_t i = c.filters.size(); i-- > 1;) {
    layers.push_back(LayerSpec::conv_transpose2d(c.filters[i - 1]));
    layers.push_back(LayerSpec::relu());
  }
  layers.push_back(LayerSpec::conv_transpose2d(env::Image::kChannels));
  layers.push_back(LayerSpec::sigmoid());
  return nn::Network(Shape::flat(c.latent_dim), std::move(layers), "vae.dec.");
}

MatrixF draw_eps(int latent, Eigen::Index batch, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  MatrixF eps(latent, batch);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = n(rng);
  return eps;
}

}  // namespace

VaeModel make_vae(const VaeConfig& config, std::mt19937_64& rng) {
  if (config.latent_dim <= 0) throw std::invalid_argument("VAE latent dimension must be positive");
  if (config.filters.empty()) throw std::invalid_argument("VAE needs at least one convolution");
  VaeModel m;
  m.config = config;
  m.encoder = make_encoder(config);
  m.decoder = make_decoder(config, m.encoder);
  if (!(m.decoder.output_shape() == kImage))
    throw std::invalid_argument("VAE decoder does not reproduce the 32x32x3 image shape");
  m.encoder_params = m.encoder.init_params(rng);
  m.decoder_params = m.decoder.init_params(rng);
  m.encoder_adam = nn::AdamState(m.encoder_params, {.learning_rate = config.learning_rate});
  m.decoder_adam = nn::AdamState(m.decoder_params, {.learning_rate = config.learning_rate});
  return m;
}

double kl_divergence(const VectorF& mu, const VectorF& log_sigma) {
  double kl = 0.0;
  for (Eigen::Index j = 0; j < mu.size(); ++j) {
    const double m = mu[j], ls = log_sigma[j];
    kl += 0.5 * (m * m + std::exp(2.0 * ls) - 1.0 - 2.0 * ls);
  }
  return kl;
}

template <typename Scalar>
VaeLoss vae_objective(const nn::Network& encoder, const nn::Network& decoder,
                      const nn::BasicParamSet<Scalar>& encoder_params,
                      const nn::BasicParamSet<Scalar>& decoder_params, const nn::Matrix<Scalar>& x,
                      const nn::Matrix<Scalar>& eps, double beta,
                      nn::BasicParamSet<Scalar>* encoder_grads,
                      nn::BasicParamSet<Scalar>* decoder_grads, std::vector<std::int8_t>* pattern) {
  using M = nn::Matrix<Scalar>;
  const Eigen::Index latent = eps.rows();
  const auto n = static_cast<Scalar>(x.cols());
  nn::ForwardCache<Scalar> enc_cache, dec_cache;
  const M h = encoder.forward(encoder_params, x, &enc_cache);
  const M mu = h.topRows(latent);
  const M log_sigma = h.bottomRows(latent);
  const M sigma = log_sigma.array().exp().matrix();
  const M z = mu + sigma.cwiseProduct(eps);
  const M xhat = decoder.forward(decoder_params, z, &dec_cache);
  const M diff = xhat - x;

  VaeLoss out;
  out.recon = static_cast<double>(diff.squaredNorm() / n);
  out.kl = static_cast<double>(
      (Scalar(0.5) * (mu.array().square() + sigma.array().square() - Scalar(1) - Scalar(2) * log_sigma.array()))
          .sum() / n);
  out.total = out.recon + beta * out.kl;

  if (encoder_grads || decoder_grads) {
    const M dz = decoder.backward(decoder_params, dec_cache, M(diff * (Scalar(2) / n)), decoder_grads);
    if (encoder_grads) {
      const auto b = static_cast<Scalar>(beta);
      M dh(h.rows(), h.cols());
      dh.topRows(latent) = dz + mu * (b / n);
      dh.bottomRows(latent) =
          (dz.cwiseProduct(sigma).cwiseProduct(eps).array() + (sigma.array().square() - Scalar(1)) * (b / n)).matrix();
      encoder.backward(encoder_params, enc_cache, dh, encoder_grads);
    }
  }
  if (pattern) {
    *pattern = encoder.activation_pattern(enc_cache);
    const auto d = decoder.activation_pattern(dec_cache);
    pattern->insert(pattern->end(), d.begin(), d.end());
  }
  return out;
}

template VaeLoss vae_objective(const nn::Network&, const nn::Network&, const nn::ParamSet&,
                               const nn::ParamSet&, const MatrixF&, const MatrixF&, double,
                               nn::ParamSet*, nn::ParamSet*, std::vector<std::int8_t>*);
template VaeLoss vae_objective(const nn::Network&, const nn::Network&, const nn::BasicParamSet<double>&,
                               const nn::BasicParamSet<double>&, const nn::MatrixD&, const nn::MatrixD&,
                               double, nn::BasicParamSet<double>*, nn::BasicParamSet<double>*,
                               std::vector<std::int8_t>*);

VaeLoss vae_loss(const VaeModel& model, const MatrixF& x, std::mt19937_64& rng) {
  const MatrixF eps = draw_eps(model.config.latent_dim, x.cols(), rng);
  return vae_objective(model.encoder, model.decoder, model.encoder_params, model.decoder_params, x,
                       eps, model.config.beta, static_cast<nn::ParamSet*>(nullptr),
                       static_cast<nn::ParamSet*>(nullptr));
}

VaeLoss vae_train_step(VaeModel& model, const MatrixF& x, std::mt19937_64& rng) {
  if (model.frozen) throw FrozenError("the VAE encoder is frozen");
  const MatrixF eps = draw_eps(model.config.latent_dim, x.cols(), rng);
  nn::ParamSet eg = model.encoder_params.zeros_like();
  nn::ParamSet dg = model.decoder_params.zeros_like();
  const VaeLoss loss = vae_objective(model.encoder, model.decoder, model.encoder_params,
                                     model.decoder_params, x, eps, model.config.beta, &eg, &dg);
  if (!std::isfinite(loss.total)) throw nn::NumericError("non-finite VAE loss", "vae.loss");
  nn::adam_step(model.encoder_params, eg, model.encoder_adam);
  nn::adam_step(model.decoder_params, dg, model.decoder_adam);
  return loss;
}

MatrixF vae_dataset(env::TaskId task, int n_samples, std::mt19937_64& rng) {
  MatrixF data(env::Image::kNumValues, n_samples);
  for (int i = 0; i < n_samples; ++i) {
    const env::Image img = env::render(env::sample_random_state(task, rng));
    img.to_floats(data.col(i).data());
  }
  return data;
}

std::vector<double> pretrain_on(VaeModel& model, const MatrixF& data, int epochs, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(data.cols());
  const auto batch = static_cast<std::size_t>(model.config.batch_size);
  if (epochs > 0 && n < batch) throw std::invalid_argument("VAE pretraining needs at least one full batch");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> history;
  MatrixF x(data.rows(), static_cast<Eigen::Index>(batch));
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double recon = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start + batch <= n; start += batch) {
      for (std::size_t j = 0; j < batch; ++j)
        x.col(static_cast<Eigen::Index>(j)) = data.col(static_cast<Eigen::Index>(order[start + j]));
      recon += vae_train_step(model, x, rng).recon;
      ++steps;
    }
    history.push_back(recon / static_cast<double>(steps));
  }
  return history;
}

std::vector<double> pretrain(VaeModel& model, env::TaskId task, int n_samples, int epochs,
                             std::mt19937_64& rng) {
  if (epochs <= 0) {
    freeze(model);
    return {};
  }
  const MatrixF data = vae_dataset(task, n_samples, rng);
  auto history = pretrain_on(model, data, epochs, rng);
  freeze(model);
  return history;
}

void freeze(VaeModel& model) { model.frozen = true; }

MatrixF encode_images(const VaeModel& model, const MatrixF& images) {
  if (!model.frozen) throw FrozenError("encode requires a pretrained, frozen VAE");
  return model.encoder.forward(model.encoder_params, images).topRows(model.config.latent_dim);
}

VectorF encode(const VaeModel& model, const env::Observation& obs) {
  if (obs.mode != env::ObsMode::Image) throw std::invalid_argument("the VAE encodes image observations");
  MatrixF x(env::Image::kNumValues, 1);
  obs.image->to_floats(x.data());
  const MatrixF mu = encode_images(model, x);
  VectorF out(mu.rows() + obs.proprio.size());
  out.head(mu.rows()) = mu.col(0);
  out.tail(obs.proprio.size()) = obs.proprio;
  return out;
}

int encoded_dim(const VaeModel& model, env::TaskId task) {
  return model.config.latent_dim + env::proprio_dim(task);
}

VectorF reconstruction_error(const VaeModel& model, const MatrixF& images) {
  const MatrixF h = model.encoder.forward(model.encoder_params, images);
  const MatrixF xhat = model.decoder.forward(model.decoder_params, MatrixF(h.topRows(model.config.latent_dim)));
  return (xhat - images).colwise().squaredNorm().transpose();
}

}  // namespace r3l
