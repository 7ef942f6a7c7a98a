#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "r3l/nn/network.hpp"

namespace r3l::nn {

struct GradCheckOptions {
  double step = 1e-3;
  /// Coordinates compared per tensor; 0 compares every coordinate.
  std::size_t max_per_tensor = 0;
  /// Denominator floor of the relative error, |a - n| / max(|a|, |n|, floor).
  double relative_floor = 1e-2;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t compared = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation crossed a kink
};

/// Scalar objective evaluated in double precision. `pattern` receives the
/// activation pattern of the evaluation so that perturbations that cross a
/// ReLU/MaxPool kink can be excluded.
using ScalarObjective =
    std::function<double(const BasicParamSet<double>&, std::vector<std::int8_t>* pattern)>;

/// Compares `analytic` against central differences of `objective` taken at
/// `params`. Generic over any composite loss.
GradCheckResult check_gradients(const BasicParamSet<double>& params,
                                const BasicParamSet<double>& analytic,
                                const ScalarObjective& objective,
                                const GradCheckOptions& options = {});

/// Finite-difference check of a network's backward pass using the scalar head
/// sum(w .* forward(x)) with a fixed random w.
GradCheckResult grad_check(const Network& net, const ParamSet& params, const MatrixF& input,
                           const GradCheckOptions& options = {});

}  // namespace r3l::nn
