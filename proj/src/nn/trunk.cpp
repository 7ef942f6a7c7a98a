#include "r3l/nn/trunk.hpp"

namespace r3l::nn {

namespace {

void append_convs(Shape input, const std::vector<int>& filters, bool max_pool,
                  std::vector<LayerSpec>& layers) {
  if (input.is_flat()) return;
  for (int f : filters) {
    layers.push_back(LayerSpec::conv2d(f));
    layers.push_back(LayerSpec::relu());
    if (max_pool) layers.push_back(LayerSpec::max_pool());
  }
  layers.push_back(LayerSpec::flatten());
}

}  // namespace

Network make_trunk(Shape input, const std::vector<int>& filters, const std::vector<int>& hidden,
                   int outputs, const std::string& prefix, bool max_pool) {
  std::vector<LayerSpec> layers;
  append_convs(input, filters, max_pool, layers);
  for (int h : hidden) {
    layers.push_back(LayerSpec::dense(h));
    layers.push_back(LayerSpec::relu());
  }
  layers.push_back(LayerSpec::dense(outputs));
  return Network(input, std::move(layers), prefix);
}

Network make_conv_encoder(Shape input, const std::vector<int>& filters, int features,
                          const std::string& prefix, bool max_pool) {
  std::vector<LayerSpec> layers;
  append_convs(input, filters, max_pool, layers);
  layers.push_back(LayerSpec::dense(features));
  layers.push_back(LayerSpec::tanh());
  return Network(input, std::move(layers), prefix);
}

}  // namespace r3l::nn
