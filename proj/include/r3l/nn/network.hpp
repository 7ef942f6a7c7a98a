#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "r3l/nn/param_set.hpp"

namespace r3l::nn {

/// Per-sample tensor shape. Image tensors are stored channels-last (HWC) and
/// flattened into one column per sample, so a flat vector is {1, 1, n}.
struct Shape {
  int height = 1;
  int width = 1;
  int channels = 0;

  static Shape flat(int n) { return {1, 1, n}; }
  static Shape image(int h, int w, int c) { return {h, w, c}; }

  int size() const { return height * width * channels; }
  bool is_flat() const { return height == 1 && width == 1; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

enum class LayerKind {
  Dense,
  Conv2D,
  ConvTranspose2D,
  ReLU,
  Tanh,
  Sigmoid,
  Flatten,
  Reshape,
  MaxPool,
};

const char* to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  int units = 0;  // dense width or number of filters
  int kernel = 3;
  int stride = 2;
  int padding = 1;
  Shape target{};  // Reshape only

  static LayerSpec dense(int units) { return {LayerKind::Dense, units, 0, 0, 0, {}}; }
  static LayerSpec conv2d(int filters, int kernel = 3, int stride = 2, int padding = 1) {
    return {LayerKind::Conv2D, filters, kernel, stride, padding, {}};
  }
  static LayerSpec conv_transpose2d(int filters, int kernel = 3, int stride = 2,
                                    int padding = 1) {
    return {LayerKind::ConvTranspose2D, filters, kernel, stride, padding, {}};
  }
  static LayerSpec relu() { return {LayerKind::ReLU, 0, 0, 0, 0, {}}; }
  static LayerSpec tanh() { return {LayerKind::Tanh, 0, 0, 0, 0, {}}; }
  static LayerSpec sigmoid() { return {LayerKind::Sigmoid, 0, 0, 0, 0, {}}; }
  static LayerSpec flatten() { return {LayerKind::Flatten, 0, 0, 0, 0, {}}; }
  static LayerSpec reshape(Shape target) { return {LayerKind::Reshape, 0, 0, 0, 0, target}; }
  static LayerSpec max_pool(int size = 2) { return {LayerKind::MaxPool, 0, size, size, 0, {}}; }
};

/// Intermediates recorded by a forward pass and consumed by `backward`.
template <typename Scalar>
struct ForwardCache {
  std::vector<Matrix<Scalar>> activations;  // [i] is the input of layer i
  std::vector<Matrix<Scalar>> patches;      // im2col buffers of Conv2D layers
  std::vector<std::vector<int>> argmax;     // MaxPool source indices
  std::uint64_t param_version = 0;
  const void* network = nullptr;

  const Matrix<Scalar>& output() const { return activations.back(); }
};

/// A feed-forward stack of layers. The network itself only describes the
/// architecture; parameters live in a ParamSet so that online/target copies
/// and optimizer state can share one description.
///
/// Batches are matrices with one sample per column.
class Network {
 public:
  Network() = default;
  Network(Shape input, std::vector<LayerSpec> layers, std::string prefix = "");

  const Shape& input_shape() const { return shapes_.front(); }
  const Shape& output_shape() const { return shapes_.back(); }
  int input_size() const { return input_shape().size(); }
  int output_size() const { return output_shape().size(); }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<Shape>& shapes() const { return shapes_; }
  const std::string& prefix() const { return prefix_; }

  std::string weight_name(std::size_t layer) const;
  std::string bias_name(std::size_t layer) const;

  /// Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  ParamSet init_params(std::mt19937_64& rng) const;

  template <typename Scalar>
  Matrix<Scalar> forward(const BasicParamSet<Scalar>& params,
                         const Matrix<Scalar>& input,
                         ForwardCache<Scalar>* cache = nullptr) const;

  /// Reverse-mode pass. Parameter gradients are accumulated into `grads`
  /// (which may be null when only the input gradient is wanted). Returns the
  /// gradient with respect to the network input.
  template <typename Scalar>
  Matrix<Scalar> backward(const BasicParamSet<Scalar>& params,
                          const ForwardCache<Scalar>& cache,
                          const Matrix<Scalar>& output_grad,
                          BasicParamSet<Scalar>* grads) const;

  MatrixF forward(const ParamSet& params, const MatrixF& input,
                  ForwardCache<float>* cache = nullptr) const {
    return forward<float>(params, input, cache);
  }
  MatrixF backward(const ParamSet& params, const ForwardCache<float>& cache,
                   const MatrixF& output_grad, ParamSet* grads) const {
    return backward<float>(params, cache, output_grad, grads);
  }

  /// Signs of every ReLU input and every MaxPool selection of a cached pass.
  /// Two passes with equal signatures lie in the same linear region.
  template <typename Scalar>
  std::vector<std::int8_t> activation_pattern(const ForwardCache<Scalar>& cache) const;

 private:
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  std::string prefix_;
};

}  // namespace r3l::nn
