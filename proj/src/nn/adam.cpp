#include "r3l/nn/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace r3l::nn {

void require_finite(const ParamSet& grads, const char* what) {
  for (const auto& e : grads.entries()) {
    if (!e.tensor.values.allFinite()) {
      throw NumericError(std::string("non-finite ") + what + " for parameter " + e.name, e.name);
    }
  }
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state) {
  if (!params.same_layout(grads) || !params.same_layout(state.first_moment)) {
    throw std::invalid_argument("adam_step: gradient/moment layout does not match parameters");
  }
  require_finite(grads, "gradient");

  ++state.step;
  const auto& cfg = state.config;
  const double t = static_cast<double>(state.step);
  const float m_scale = static_cast<float>(1.0 / (1.0 - std::pow(double(cfg.beta1), t)));
  const float v_scale = static_cast<float>(1.0 / (1.0 - std::pow(double(cfg.beta2), t)));

  auto p_entries = params.mutable_entries();
  auto m_entries = state.first_moment.mutable_entries();
  auto v_entries = state.second_moment.mutable_entries();
  const auto g_entries = grads.entries();
  for (std::size_t i = 0; i < p_entries.size(); ++i) {
    auto& p = p_entries[i].tensor.values;
    auto& m = m_entries[i].tensor.values;
    auto& v = v_entries[i].tensor.values;
    const auto& g = g_entries[i].tensor.values;
    m = cfg.beta1 * m + (1.0f - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0f - cfg.beta2) * g.cwiseAbs2();
    p.array() -= cfg.learning_rate * (m.array() * m_scale) /
                 ((v.array() * v_scale).sqrt() + cfg.epsilon);
  }
}

}  // namespace r3l::nn
