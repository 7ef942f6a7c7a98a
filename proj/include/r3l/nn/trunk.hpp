#pragma once

#include <string>
#include <vector>

#include "r3l/nn/network.hpp"

namespace r3l::nn {

/// Convolution stack (3x3, stride 2, padding 1, ReLU) when `input` is an
/// image, then ReLU dense layers of widths `hidden`, then a linear head of
/// `outputs` units. Filters are ignored for flat inputs.
Network make_trunk(Shape input, const std::vector<int>& filters, const std::vector<int>& hidden,
                   int outputs, const std::string& prefix, bool max_pool = false);

/// Convolution stack alone, flattened.
Network make_conv_encoder(Shape input, const std::vector<int>& filters, int features,
                          const std::string& prefix, bool max_pool = false);

}  // namespace r3l::nn
