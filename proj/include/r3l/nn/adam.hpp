#pragma once

#include <cstdint>

#include "r3l/nn/param_set.hpp"

namespace r3l::nn {

struct AdamConfig {
  float learning_rate = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

/// Moment estimates for every tensor of one ParamSet.
struct AdamState {
  AdamState() = default;
  AdamState(const ParamSet& like, AdamConfig cfg)
      : config(cfg), first_moment(like.zeros_like()), second_moment(like.zeros_like()) {}

  AdamConfig config;
  ParamSet first_moment;
  ParamSet second_moment;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam update applied in place. Gradients are validated
/// before anything is touched: a non-finite entry throws NumericError naming
/// the parameter and leaves params and state unchanged.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state);

/// Throws NumericError if any value of `grads` is NaN or infinite.
void require_finite(const ParamSet& grads, const char* what);

}  // namespace r3l::nn
