#include "r3l/nn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace r3l::nn {

GradCheckResult check_gradients(const BasicParamSet<double>& params,
                                const BasicParamSet<double>& analytic,
                                const ScalarObjective& objective,
                                const GradCheckOptions& options) {
  if (options.step < 1e-5 || options.step > 1e-2) {
    throw std::invalid_argument("finite-difference step must lie in [1e-5, 1e-2]");
  }
  if (!params.same_layout(analytic)) {
    throw std::invalid_argument("analytic gradient layout does not match parameters");
  }
  std::vector<std::int8_t> base_pattern;
  objective(params, &base_pattern);

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  BasicParamSet<double> probe = params;
  std::vector<std::int8_t> pattern;
  const double h = options.step;

  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto& name = params.entries()[t].name;
    const auto n = static_cast<std::size_t>(params.entries()[t].tensor.size());
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_per_tensor > 0 && n > options.max_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_per_tensor);
    }
    for (std::size_t j : coords) {
      const auto idx = static_cast<Eigen::Index>(j);
      const double original = params.at(name).values[idx];

      probe.mutable_at(name).values[idx] = original + h;
      const double f_plus = objective(probe, &pattern);
      bool kink = pattern != base_pattern;
      probe.mutable_at(name).values[idx] = original - h;
      const double f_minus = objective(probe, &pattern);
      kink = kink || pattern != base_pattern;
      probe.mutable_at(name).values[idx] = original;

      if (kink) {
        ++result.skipped;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double exact = analytic.at(name).values[idx];
      const double denom = std::max({std::abs(numeric), std::abs(exact), options.relative_floor});
      result.max_relative_error =
          std::max(result.max_relative_error, std::abs(numeric - exact) / denom);
      ++result.compared;
    }
  }
  return result;
}

GradCheckResult grad_check(const Network& net, const ParamSet& params, const MatrixF& input,
                           const GradCheckOptions& options) {
  const BasicParamSet<double> p = params.cast<double>();
  const MatrixD x = input.cast<double>();

  std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  MatrixD head(net.output_size(), x.cols());
  for (Eigen::Index i = 0; i < head.size(); ++i) head.data()[i] = dist(rng);

  ForwardCache<double> cache;
  net.forward(p, x, &cache);
  BasicParamSet<double> grads = p.zeros_like();
  net.backward(p, cache, head, &grads);

  auto objective = [&](const BasicParamSet<double>& q, std::vector<std::int8_t>* pattern) {
    ForwardCache<double> c;
    const MatrixD y = net.forward(q, x, &c);
    if (pattern) *pattern = net.activation_pattern(c);
    return (y.array() * head.array()).sum();
  };
  return check_gradients(p, grads, objective, options);
}

}  // namespace r3l::nn
