#pragma once

#include <atomic>
#include <cstdint>
#include <cstring>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace r3l::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using VectorF = Vector<float>;
using MatrixD = Matrix<double>;
using VectorD = Vector<double>;

/// Thrown when a value that must stay finite (loss, gradient, network output)
/// turns into NaN or infinity. Carries the name of the offending quantity.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string what, std::string name)
      : std::runtime_error(std::move(what)), name_(std::move(name)) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

/// A named, shaped array. Values are stored flat in column-major order, so a
/// rank-2 tensor of shape {rows, cols} maps directly onto an Eigen matrix.
template <typename Scalar>
struct Tensor {
  std::vector<std::uint32_t> shape;
  Vector<Scalar> values;

  std::size_t size() const { return static_cast<std::size_t>(values.size()); }

  Eigen::Map<Matrix<Scalar>> as_matrix() {
    return {values.data(), static_cast<Eigen::Index>(shape.at(0)),
            static_cast<Eigen::Index>(size() / shape.at(0))};
  }
  Eigen::Map<const Matrix<Scalar>> as_matrix() const {
    return {values.data(), static_cast<Eigen::Index>(shape.at(0)),
            static_cast<Eigen::Index>(size() / shape.at(0))};
  }
};

namespace detail {
// Version stamps are unique process-wide, so an assignment from another set
// can never alias a stale stamp.
inline std::uint64_t next_param_version() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

inline std::size_t shape_product(const std::vector<std::uint32_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

/// Ordered collection of named tensors holding every learnable parameter of a
/// network. Iteration order is insertion order.
///
/// Every mutable access bumps `version()`, which lets forward caches detect
/// that the parameters they were computed with have since changed.
template <typename Scalar>
class BasicParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<Scalar> tensor;
  };

  void add(std::string name, std::vector<std::uint32_t> shape,
           Vector<Scalar> values) {
    if (index_.count(name) != 0) {
      throw std::invalid_argument("duplicate parameter name: " + name);
    }
    if (shape_product(shape) != static_cast<std::size_t>(values.size())) {
      throw std::invalid_argument("value count does not match shape for " +
                                  name);
    }
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), {std::move(shape), std::move(values)}});
    version_ = detail::next_param_version();
  }

  bool contains(const std::string& name) const {
    return index_.count(name) != 0;
  }

  const Tensor<Scalar>& at(const std::string& name) const {
    return entries_[lookup(name)].tensor;
  }
  Tensor<Scalar>& mutable_at(const std::string& name) {
    version_ = detail::next_param_version();
    return entries_[lookup(name)].tensor;
  }

  std::span<const Entry> entries() const { return entries_; }
  std::span<Entry> mutable_entries() {
    version_ = detail::next_param_version();
    return entries_;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  std::uint64_t version() const { return version_; }

  /// Same names and shapes, all values zero.
  BasicParamSet zeros_like() const {
    BasicParamSet out;
    for (const auto& e : entries_) {
      out.add(e.name, e.tensor.shape,
              Vector<Scalar>::Zero(static_cast<Eigen::Index>(e.tensor.size())));
    }
    return out;
  }

  template <typename Other>
  BasicParamSet<Other> cast() const {
    BasicParamSet<Other> out;
    for (const auto& e : entries_) {
      out.add(e.name, e.tensor.shape, e.tensor.values.template cast<Other>());
    }
    return out;
  }

  bool same_layout(const BasicParamSet& other) const {
    if (other.entries_.size() != entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name ||
          entries_[i].tensor.shape != other.entries_[i].tensor.shape) {
        return false;
      }
    }
    return true;
  }

  /// Bitwise equality of names, shapes and values.
  bool identical(const BasicParamSet& other) const {
    if (!same_layout(other)) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i].tensor.values;
      const auto& b = other.entries_[i].tensor.values;
      if (std::memcmp(a.data(), b.data(), a.size() * sizeof(Scalar)) != 0) {
        return false;
      }
    }
    return true;
  }

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* p = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& e : entries_) {
      mix(e.name.data(), e.name.size());
      mix(e.tensor.shape.data(), e.tensor.shape.size() * sizeof(std::uint32_t));
      mix(e.tensor.values.data(), e.tensor.size() * sizeof(Scalar));
    }
    return h;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw std::out_of_range("unknown parameter: " + name);
    }
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t version_ = 0;
};

using ParamSet = BasicParamSet<float>;

}  // namespace r3l::nn
