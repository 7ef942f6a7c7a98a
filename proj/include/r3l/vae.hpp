#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <vector>

#include "r3l/envsim.hpp"
#include "r3l/nn/adam.hpp"
#include "r3l/nn/network.hpp"

namespace r3l {

using nn::MatrixF;
using nn::VectorF;

struct VaeConfig {
  std::vector<int> filters{64, 64, 32};
  int latent_dim = 16;
  double beta = 0.5;
  float learning_rate = 1e-4f;
  int batch_size = 256;
  int n_samples = 10000;
  int epochs = 50;
};

class FrozenError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// beta-VAE over 32x32x3 images. The encoder emits (mu, log sigma); the
/// decoder mirrors it with transposed convolutions and a sigmoid output.
struct VaeModel {
  VaeConfig config;
  nn::Network encoder;
  nn::Network decoder;
  nn::ParamSet encoder_params;
  nn::ParamSet decoder_params;
  nn::AdamState encoder_adam;
  nn::AdamState decoder_adam;
  bool frozen = false;
};

VaeModel make_vae(const VaeConfig& config, std::mt19937_64& rng);

struct VaeLoss {
  double total = 0.0;
  double recon = 0.0;  // per-image sum of squared errors, batch mean
  double kl = 0.0;     // per-image KL to N(0, I), batch mean
};

/// 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma).
double kl_divergence(const VectorF& mu, const VectorF& log_sigma);

/// Negative ELBO with one reparameterized sample per image, z = mu + sigma eps.
/// `eps` is latent_dim x batch. Gradients are accumulated when requested.
template <typename Scalar>
VaeLoss vae_objective(const nn::Network& encoder, const nn::Network& decoder,
                      const nn::BasicParamSet<Scalar>& encoder_params,
                      const nn::BasicParamSet<Scalar>& decoder_params, const nn::Matrix<Scalar>& x,
                      const nn::Matrix<Scalar>& eps, double beta,
                      nn::BasicParamSet<Scalar>* encoder_grads,
                      nn::BasicParamSet<Scalar>* decoder_grads,
                      std::vector<std::int8_t>* pattern = nullptr);

VaeLoss vae_loss(const VaeModel& model, const MatrixF& x, std::mt19937_64& rng);

/// One Adam step on encoder and decoder. Throws FrozenError once frozen.
VaeLoss vae_train_step(VaeModel& model, const MatrixF& x, std::mt19937_64& rng);

/// Rendered images of uniformly sampled task states, one per column.
MatrixF vae_dataset(env::TaskId task, int n_samples, std::mt19937_64& rng);

/// Trains on `vae_dataset` for `epochs` passes, then freezes the encoder.
/// Returns the mean reconstruction loss of every epoch.
std::vector<double> pretrain(VaeModel& model, env::TaskId task, int n_samples, int epochs,
                             std::mt19937_64& rng);
std::vector<double> pretrain_on(VaeModel& model, const MatrixF& data, int epochs, std::mt19937_64& rng);

void freeze(VaeModel& model);

/// Latent means of raw image columns. Requires a frozen model.
MatrixF encode_images(const VaeModel& model, const MatrixF& images);
/// mu(x) followed by the observation's proprio vector.
VectorF encode(const VaeModel& model, const env::Observation& obs);
int encoded_dim(const VaeModel& model, env::TaskId task);

/// Per-image reconstruction error of the decoded latent mean.
VectorF reconstruction_error(const VaeModel& model, const MatrixF& images);

}  // namespace r3l
