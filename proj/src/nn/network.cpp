#include "r3l/nn/network.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace r3l::nn {

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s.height << "x" << s.width << "x" << s.channels;
  return os.str();
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "Dense";
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::ConvTranspose2D: return "ConvTranspose2D";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::Tanh: return "Tanh";
    case LayerKind::Sigmoid: return "Sigmoid";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Reshape: return "Reshape";
    case LayerKind::MaxPool: return "MaxPool";
  }
  return "?";
}

namespace {

std::string layer_label(std::size_t i, const LayerSpec& spec) {
  return "layer " + std::to_string(i) + " (" + to_string(spec.kind) + ")";
}

/// Geometry shared by convolution and its transpose: a low-resolution grid
/// whose pixel (ly, lx) reads a kernel window of the high-resolution tensor at
/// (ly * stride - padding + ky, lx * stride - padding + kx).
struct PatchGeometry {
  int hi_h, hi_w, channels;
  int lo_h, lo_w;
  int kernel, stride, padding;

  int patch_rows() const { return kernel * kernel * channels; }
  int lo_pixels() const { return lo_h * lo_w; }
  int hi_size() const { return hi_h * hi_w * channels; }
};

// im2col: hi (hi_size x batch) -> patches (patch_rows x lo_pixels*batch)
template <typename Scalar>
void gather_patches(const PatchGeometry& g, const Scalar* hi, Eigen::Index batch,
                    Matrix<Scalar>& out) {
  out.resize(g.patch_rows(), static_cast<Eigen::Index>(g.lo_pixels()) * batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Scalar* src = hi + b * g.hi_size();
    for (int ly = 0; ly < g.lo_h; ++ly) {
      for (int lx = 0; lx < g.lo_w; ++lx) {
        Scalar* col = out.data() + (b * g.lo_pixels() + ly * g.lo_w + lx) * g.patch_rows();
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int y = ly * g.stride - g.padding + ky;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int x = lx * g.stride - g.padding + kx;
            Scalar* dst = col + (ky * g.kernel + kx) * g.channels;
            if (y < 0 || y >= g.hi_h || x < 0 || x >= g.hi_w) {
              for (int c = 0; c < g.channels; ++c) dst[c] = Scalar(0);
            } else {
              const Scalar* p = src + (y * g.hi_w + x) * g.channels;
              for (int c = 0; c < g.channels; ++c) dst[c] = p[c];
            }
          }
        }
      }
    }
  }
}

// Adjoint of gather_patches: accumulates patches back onto the hi tensor.
template <typename Scalar>
void scatter_patches(const PatchGeometry& g, const Matrix<Scalar>& patches,
                     Eigen::Index batch, Scalar* hi) {
  for (Eigen::Index b = 0; b < batch; ++b) {
    Scalar* dst = hi + b * g.hi_size();
    for (int ly = 0; ly < g.lo_h; ++ly) {
      for (int lx = 0; lx < g.lo_w; ++lx) {
        const Scalar* col =
            patches.data() + (b * g.lo_pixels() + ly * g.lo_w + lx) * g.patch_rows();
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int y = ly * g.stride - g.padding + ky;
          if (y < 0 || y >= g.hi_h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int x = lx * g.stride - g.padding + kx;
            if (x < 0 || x >= g.hi_w) continue;
            const Scalar* src = col + (ky * g.kernel + kx) * g.channels;
            Scalar* p = dst + (y * g.hi_w + x) * g.channels;
            for (int c = 0; c < g.channels; ++c) p[c] += src[c];
          }
        }
      }
    }
  }
}

PatchGeometry conv_geometry(const Shape& in, const Shape& out, const LayerSpec& s) {
  return {in.height, in.width, in.channels, out.height, out.width, s.kernel, s.stride, s.padding};
}

PatchGeometry deconv_geometry(const Shape& in, const Shape& out, const LayerSpec& s) {
  return {out.height, out.width, out.channels, in.height, in.width, s.kernel, s.stride, s.padding};
}

template <typename Scalar>
Eigen::Map<const Matrix<Scalar>> view(const Matrix<Scalar>& m, Eigen::Index rows) {
  return {m.data(), rows, m.size() / rows};
}

template <typename Scalar>
Eigen::Map<Matrix<Scalar>> view(Matrix<Scalar>& m, Eigen::Index rows) {
  return {m.data(), rows, m.size() / rows};
}

}  // namespace

Network::Network(Shape input, std::vector<LayerSpec> layers, std::string prefix)
    : layers_(std::move(layers)), prefix_(std::move(prefix)) {
  if (input.size() <= 0) throw std::invalid_argument("network input must be non-empty");
  shapes_.push_back(input);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    const Shape& in = shapes_.back();
    Shape out = in;
    switch (s.kind) {
      case LayerKind::Dense:
        if (!in.is_flat()) {
          throw std::invalid_argument(layer_label(i, s) + " needs a flat input, got " +
                                      to_string(in));
        }
        if (s.units <= 0) throw std::invalid_argument(layer_label(i, s) + " has no units");
        out = Shape::flat(s.units);
        break;
      case LayerKind::Conv2D: {
        if (s.units <= 0 || s.kernel <= 0 || s.stride <= 0 || s.padding < 0) {
          throw std::invalid_argument(layer_label(i, s) + " has invalid sizes");
        }
        const int h = (in.height + 2 * s.padding - s.kernel) / s.stride + 1;
        const int w = (in.width + 2 * s.padding - s.kernel) / s.stride + 1;
        if (h <= 0 || w <= 0) {
          throw std::invalid_argument(layer_label(i, s) + " collapses input " + to_string(in));
        }
        out = Shape::image(h, w, s.units);
        break;
      }
      case LayerKind::ConvTranspose2D: {
        if (s.units <= 0 || s.kernel <= 0 || s.stride <= 0 || s.padding < 0) {
          throw std::invalid_argument(layer_label(i, s) + " has invalid sizes");
        }
        // output padding of stride - 1 makes the layer exactly undo a
        // matching Conv2D's downsampling
        const int h = (in.height - 1) * s.stride - 2 * s.padding + s.kernel + (s.stride - 1);
        const int w = (in.width - 1) * s.stride - 2 * s.padding + s.kernel + (s.stride - 1);
        out = Shape::image(h, w, s.units);
        break;
      }
      case LayerKind::ReLU:
      case LayerKind::Tanh:
      case LayerKind::Sigmoid:
        break;
      case LayerKind::Flatten:
        out = Shape::flat(in.size());
        break;
      case LayerKind::Reshape:
        if (s.target.size() != in.size()) {
          throw std::invalid_argument(layer_label(i, s) + " cannot reshape " + to_string(in) +
                                      " to " + to_string(s.target));
        }
        out = s.target;
        break;
      case LayerKind::MaxPool:
        if (in.height % s.kernel != 0 || in.width % s.kernel != 0) {
          throw std::invalid_argument(layer_label(i, s) + " window does not tile " +
                                      to_string(in));
        }
        out = Shape::image(in.height / s.kernel, in.width / s.kernel, in.channels);
        break;
    }
    shapes_.push_back(out);
  }
}

std::string Network::weight_name(std::size_t layer) const {
  return prefix_ + "l" + std::to_string(layer) + ".weight";
}

std::string Network::bias_name(std::size_t layer) const {
  return prefix_ + "l" + std::to_string(layer) + ".bias";
}

ParamSet Network::init_params(std::mt19937_64& rng) const {
  ParamSet params;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    const Shape& in = shapes_[i];
    std::uint32_t rows = 0, cols = 0;
    int fan_in = 0;
    switch (s.kind) {
      case LayerKind::Dense:
        rows = static_cast<std::uint32_t>(s.units);
        cols = static_cast<std::uint32_t>(in.size());
        fan_in = in.size();
        break;
      case LayerKind::Conv2D:
        rows = static_cast<std::uint32_t>(s.units);
        cols = static_cast<std::uint32_t>(s.kernel * s.kernel * in.channels);
        fan_in = static_cast<int>(cols);
        break;
      case LayerKind::ConvTranspose2D:
        rows = static_cast<std::uint32_t>(s.kernel * s.kernel * s.units);
        cols = static_cast<std::uint32_t>(in.channels);
        fan_in = s.kernel * s.kernel * in.channels;
        break;
      default:
        continue;
    }
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    VectorF w(static_cast<Eigen::Index>(rows) * cols);
    for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = dist(rng);
    VectorF b(s.units);
    for (Eigen::Index k = 0; k < b.size(); ++k) b[k] = dist(rng);
    params.add(weight_name(i), {rows, cols}, std::move(w));
    params.add(bias_name(i), {static_cast<std::uint32_t>(s.units)}, std::move(b));
  }
  return params;
}

template <typename Scalar>
Matrix<Scalar> Network::forward(const BasicParamSet<Scalar>& params, const Matrix<Scalar>& input,
                                ForwardCache<Scalar>* cache) const {
  if (input.rows() != input_size()) {
    throw std::invalid_argument(
        (layers_.empty() ? std::string("network input") : layer_label(0, layers_[0])) +
        " expects " + std::to_string(input_size()) + " rows, got " +
        std::to_string(input.rows()));
  }
  const Eigen::Index batch = input.cols();
  if (cache) {
    cache->activations.assign(1, input);
    cache->patches.assign(layers_.size(), Matrix<Scalar>());
    cache->argmax.assign(layers_.size(), {});
    cache->param_version = params.version();
    cache->network = this;
  }
  Matrix<Scalar> x = input;
  Matrix<Scalar> local_patches;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    const Shape& in = shapes_[i];
    const Shape& out = shapes_[i + 1];
    Matrix<Scalar> y;
    switch (s.kind) {
      case LayerKind::Dense: {
        const auto w = params.at(weight_name(i)).as_matrix();
        const auto& b = params.at(bias_name(i)).values;
        y.noalias() = w * x;
        y.colwise() += b;
        break;
      }
      case LayerKind::Conv2D: {
        const PatchGeometry g = conv_geometry(in, out, s);
        Matrix<Scalar>& p = cache ? cache->patches[i] : local_patches;
        gather_patches(g, x.data(), batch, p);
        const auto w = params.at(weight_name(i)).as_matrix();
        const auto& b = params.at(bias_name(i)).values;
        y.resize(out.size(), batch);
        auto ym = view(y, s.units);
        ym.noalias() = w * p;
        ym.colwise() += b;
        break;
      }
      case LayerKind::ConvTranspose2D: {
        const PatchGeometry g = deconv_geometry(in, out, s);
        const auto w = params.at(weight_name(i)).as_matrix();
        const auto& b = params.at(bias_name(i)).values;
        Matrix<Scalar> cols = w * view(x, in.channels);
        y = Matrix<Scalar>::Zero(out.size(), batch);
        scatter_patches(g, cols, batch, y.data());
        view(y, s.units).colwise() += b;
        break;
      }
      case LayerKind::ReLU:
        y = x.cwiseMax(Scalar(0));
        break;
      case LayerKind::Tanh:
        y = x.array().tanh().matrix();
        break;
      case LayerKind::Sigmoid:
        y = (Scalar(1) / (Scalar(1) + (-x.array()).exp())).matrix();
        break;
      case LayerKind::Flatten:
      case LayerKind::Reshape:
        y = x;
        break;
      case LayerKind::MaxPool: {
        const int k = s.kernel;
        y.resize(out.size(), batch);
        std::vector<int>* arg = cache ? &cache->argmax[i] : nullptr;
        if (arg) arg->assign(static_cast<std::size_t>(y.size()), 0);
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (int oy = 0; oy < out.height; ++oy) {
            for (int ox = 0; ox < out.width; ++ox) {
              for (int c = 0; c < out.channels; ++c) {
                int best = -1;
                Scalar best_v = Scalar(0);
                for (int dy = 0; dy < k; ++dy) {
                  for (int dx = 0; dx < k; ++dx) {
                    const int idx = ((oy * k + dy) * in.width + ox * k + dx) * in.channels + c;
                    const Scalar v = x(idx, b);
                    if (best < 0 || v > best_v) {
                      best = idx;
                      best_v = v;
                    }
                  }
                }
                const Eigen::Index o = (oy * out.width + ox) * out.channels + c;
                y(o, b) = best_v;
                if (arg) (*arg)[static_cast<std::size_t>(b * out.size() + o)] = best;
              }
            }
          }
        }
        break;
      }
    }
    if (cache) cache->activations.push_back(y);
    x = std::move(y);
  }
  return x;
}

template <typename Scalar>
Matrix<Scalar> Network::backward(const BasicParamSet<Scalar>& params,
                                 const ForwardCache<Scalar>& cache,
                                 const Matrix<Scalar>& output_grad,
                                 BasicParamSet<Scalar>* grads) const {
  if (cache.network != this || cache.activations.size() != layers_.size() + 1) {
    throw std::logic_error("forward cache was not produced by this network");
  }
  if (cache.param_version != params.version()) {
    throw std::logic_error("stale forward cache: parameters changed since forward pass");
  }
  if (output_grad.rows() != output_size() || output_grad.cols() != cache.output().cols()) {
    throw std::invalid_argument("output gradient shape does not match forward output");
  }
  const Eigen::Index batch = output_grad.cols();
  Matrix<Scalar> dy = output_grad;
  for (std::size_t ii = layers_.size(); ii-- > 0;) {
    const LayerSpec& s = layers_[ii];
    const Shape& in = shapes_[ii];
    const Shape& out = shapes_[ii + 1];
    const Matrix<Scalar>& x = cache.activations[ii];
    const Matrix<Scalar>& y = cache.activations[ii + 1];
    Matrix<Scalar> dx;
    switch (s.kind) {
      case LayerKind::Dense: {
        const auto w = params.at(weight_name(ii)).as_matrix();
        if (grads) {
          grads->mutable_at(weight_name(ii)).as_matrix().noalias() += dy * x.transpose();
          grads->mutable_at(bias_name(ii)).values += dy.rowwise().sum();
        }
        dx.noalias() = w.transpose() * dy;
        break;
      }
      case LayerKind::Conv2D: {
        const PatchGeometry g = conv_geometry(in, out, s);
        const auto w = params.at(weight_name(ii)).as_matrix();
        const auto dym = view(dy, s.units);
        const Matrix<Scalar>& p = cache.patches[ii];
        if (grads) {
          grads->mutable_at(weight_name(ii)).as_matrix().noalias() += dym * p.transpose();
          grads->mutable_at(bias_name(ii)).values += dym.rowwise().sum();
        }
        Matrix<Scalar> dp = w.transpose() * dym;
        dx = Matrix<Scalar>::Zero(in.size(), batch);
        scatter_patches(g, dp, batch, dx.data());
        break;
      }
      case LayerKind::ConvTranspose2D: {
        const PatchGeometry g = deconv_geometry(in, out, s);
        const auto w = params.at(weight_name(ii)).as_matrix();
        Matrix<Scalar> gp;
        gather_patches(g, dy.data(), batch, gp);
        const auto xm = view(x, in.channels);
        if (grads) {
          grads->mutable_at(weight_name(ii)).as_matrix().noalias() += gp * xm.transpose();
          grads->mutable_at(bias_name(ii)).values += view(dy, s.units).rowwise().sum();
        }
        dx.resize(in.size(), batch);
        view(dx, in.channels).noalias() = w.transpose() * gp;
        break;
      }
      case LayerKind::ReLU:
        dx = (x.array() > Scalar(0)).select(dy, Scalar(0));
        break;
      case LayerKind::Tanh:
        dx = (dy.array() * (Scalar(1) - y.array().square())).matrix();
        break;
      case LayerKind::Sigmoid:
        dx = (dy.array() * y.array() * (Scalar(1) - y.array())).matrix();
        break;
      case LayerKind::Flatten:
      case LayerKind::Reshape:
        dx = std::move(dy);
        break;
      case LayerKind::MaxPool: {
        dx = Matrix<Scalar>::Zero(in.size(), batch);
        const auto& arg = cache.argmax[ii];
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (Eigen::Index o = 0; o < out.size(); ++o) {
            dx(arg[static_cast<std::size_t>(b * out.size() + o)], b) += dy(o, b);
          }
        }
        break;
      }
    }
    dy = std::move(dx);
  }
  return dy;
}

template <typename Scalar>
std::vector<std::int8_t> Network::activation_pattern(const ForwardCache<Scalar>& cache) const {
  std::vector<std::int8_t> pattern;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].kind == LayerKind::ReLU) {
      const auto& x = cache.activations[i];
      for (Eigen::Index k = 0; k < x.size(); ++k) {
        const Scalar v = x.data()[k];
        pattern.push_back(v > Scalar(0) ? 1 : (v < Scalar(0) ? -1 : 0));
      }
    } else if (layers_[i].kind == LayerKind::MaxPool) {
      const Shape& in = shapes_[i];
      const int k = layers_[i].kernel;
      for (int idx : cache.argmax[i]) {
        const int y = idx / (in.width * in.channels);
        const int x = (idx / in.channels) % in.width;
        pattern.push_back(static_cast<std::int8_t>((y % k) * k + x % k));
      }
    }
  }
  return pattern;
}

template Matrix<float> Network::forward(const BasicParamSet<float>&, const Matrix<float>&,
                                        ForwardCache<float>*) const;
template Matrix<double> Network::forward(const BasicParamSet<double>&, const Matrix<double>&,
                                         ForwardCache<double>*) const;
template Matrix<float> Network::backward(const BasicParamSet<float>&, const ForwardCache<float>&,
                                         const Matrix<float>&, BasicParamSet<float>*) const;
template Matrix<double> Network::backward(const BasicParamSet<double>&,
                                          const ForwardCache<double>&, const Matrix<double>&,
                                          BasicParamSet<double>*) const;
template std::vector<std::int8_t> Network::activation_pattern(const ForwardCache<float>&) const;
template std::vector<std::int8_t> Network::activation_pattern(const ForwardCache<double>&) const;

}  // namespace r3l::nn
