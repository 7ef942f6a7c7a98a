#include <doctest.h>

#include <cmath>
#include <random>

#include "r3l/vae.hpp"
#include "r3l/vice.hpp"

using namespace r3l;

namespace {

VaeConfig small_vae() {
  VaeConfig c;
  c.filters = {8, 8, 4};
  c.latent_dim = 4;
  c.batch_size = 64;
  c.learning_rate = 1e-3f;
  return c;
}

MatrixF column(const env::Image& img) {
  MatrixF x(env::Image::kNumValues, 1);
  img.to_floats(x.data());
  return x;
}

}  // namespace

TEST_CASE("closed-form KL") {
  CHECK(kl_divergence(VectorF::Zero(3), VectorF::Zero(3)) == 0.0);
  CHECK(kl_divergence(VectorF::Ones(1), VectorF::Zero(1)) == doctest::Approx(0.5).epsilon(1e-12));
  std::mt19937_64 rng(1);
  std::normal_distribution<float> d(0.0f, 2.0f);
  for (int i = 0; i < 1000; ++i) {
    VectorF mu(4), ls(4);
    for (int j = 0; j < 4; ++j) {
      mu[j] = d(rng);
      ls[j] = d(rng);
    }
    CHECK(kl_divergence(mu, ls) >= 0.0);
  }
}

TEST_CASE("default architecture mirrors the encoder back to 32x32x3") {
  std::mt19937_64 rng(2);
  const VaeModel m = make_vae(VaeConfig{}, rng);
  CHECK(m.encoder.output_size() == 32);
  CHECK(m.decoder.input_size() == 16);
  CHECK(m.decoder.output_shape() == nn::Shape::image(32, 32, 3));
  CHECK(m.encoder.shapes()[6] == nn::Shape::image(4, 4, 32));
}

TEST_CASE("beta = 0 reduces the loss to reconstruction") {
  std::mt19937_64 rng(3);
  VaeConfig c = small_vae();
  c.beta = 0.0;
  const VaeModel m = make_vae(c, rng);
  const MatrixF x = vae_dataset(env::TaskId::Valve, 8, rng);
  const VaeLoss l = vae_loss(m, x, rng);
  CHECK(l.total == l.recon);
  CHECK(l.kl >= 0.0);
}

TEST_CASE("zero epochs leave the parameters unchanged") {
  std::mt19937_64 rng(4);
  VaeModel m = make_vae(small_vae(), rng);
  const auto enc = m.encoder_params.hash();
  const auto dec = m.decoder_params.hash();
  CHECK(pretrain(m, env::TaskId::Valve, 128, 0, rng).empty());
  CHECK(m.encoder_params.hash() == enc);
  CHECK(m.decoder_params.hash() == dec);
}

TEST_CASE("pretraining lowers reconstruction error, then freezes the encoder") {
  std::mt19937_64 rng(5);
  VaeModel m = make_vae(small_vae(), rng);
  const VaeModel untrained = m;
  const MatrixF data = vae_dataset(env::TaskId::Reposition, 512, rng);
  CHECK_THROWS_AS(encode_images(m, data.leftCols(1)), FrozenError);
  const std::vector<double> history = pretrain_on(m, data, 6, rng);
  freeze(m);
  REQUIRE(history.size() == 6);
  CHECK(history.back() < history.front());

  const MatrixF probe = data.leftCols(64);
  const VectorF trained_err = reconstruction_error(m, probe);
  const VectorF untrained_err = reconstruction_error(untrained, probe);
  int better = 0;
  for (Eigen::Index i = 0; i < probe.cols(); ++i) better += trained_err[i] < untrained_err[i];
  CHECK(better == probe.cols());

  const auto enc = m.encoder_params.hash();
  CHECK_THROWS_AS(vae_train_step(m, probe, rng), FrozenError);
  CHECK(m.encoder_params.hash() == enc);
}

TEST_CASE("encode: deterministic mean plus proprio") {
  std::mt19937_64 rng(6);
  VaeModel m = make_vae(small_vae(), rng);
  freeze(m);
  const env::EnvState s = env::canonical_start(env::TaskId::Beads);
  const env::Observation o = env::observe(s, env::ObsMode::Image);
  const VectorF z1 = encode(m, o);
  const VectorF z2 = encode(m, o);
  CHECK(z1 == z2);
  CHECK(z1.size() == encoded_dim(m, env::TaskId::Beads));
  CHECK(z1.size() == 4 + 1);
  CHECK(z1[4] == o.proprio[0]);
  CHECK(z1.head(4) == encode_images(m, column(*o.image)).col(0));
  CHECK_THROWS_AS(encode(m, env::observe(s, env::ObsMode::State)), std::invalid_argument);
}

TEST_CASE("latents of goal and far states are linearly separable") {
  std::mt19937_64 rng(7);
  VaeConfig c = small_vae();
  c.filters = {16, 16, 8};
  c.latent_dim = 8;
  VaeModel m = make_vae(c, rng);
  const MatrixF data = vae_dataset(env::TaskId::Reposition, 2048, rng);
  const auto history = pretrain_on(m, data, 20, rng);
  MESSAGE("recon first/last epoch " << history.front() << " " << history.back());
  freeze(m);

  const env::EnvState goal = env::goal_state(env::TaskId::Reposition);
  auto sample_set = [&](int n, bool near) {
    MatrixF x(env::Image::kNumValues, n);
    int filled = 0;
    while (filled < n) {
      const env::EnvState s = near ? env::goal_examples(env::TaskId::Reposition, goal, 1, env::ObsMode::State, rng).states[0]
                                   : env::sample_random_state(env::TaskId::Reposition, rng);
      if (!near && env::pose_distance(s, goal) < 0.5) continue;
      env::render(s).to_floats(x.col(filled++).data());
    }
    return encode_images(m, x);
  };
  const MatrixF train_pos = sample_set(200, true), train_neg = sample_set(200, false);
  const MatrixF test_pos = sample_set(100, true), test_neg = sample_set(100, false);

  // linear probe: a classifier with no hidden layer, trained on the latents
  ViceConfig probe_cfg;
  probe_cfg.hidden = {};
  probe_cfg.learning_rate = 1e-2f;
  ViceClassifier probe = make_vice(nn::Shape::flat(c.latent_dim), probe_cfg, rng);
  ViceBatch batch;
  batch.inputs.resize(c.latent_dim, 400);
  batch.inputs << train_pos, train_neg;
  batch.labels = VectorF::Zero(400);
  batch.labels.head(200).setOnes();
  for (int i = 0; i < 2000; ++i) vice_train_step(probe, batch);

  const VectorF lp = vice_logits(probe, test_pos), ln = vice_logits(probe, test_neg);
  const double accuracy = ((lp.array() > 0.0f).count() + (ln.array() <= 0.0f).count()) / 200.0;
  MESSAGE("linear probe held-out accuracy " << accuracy);
  CHECK(accuracy > 0.9);
}
