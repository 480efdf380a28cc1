#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "tformer/error.hpp"
#include "tformer/rng.hpp"

namespace tformer {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

template <Real T>
constexpr DType dtype_of() {
  return std::same_as<T, float> ? DType::f32 : DType::f64;
}

constexpr std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

std::size_t shape_numel(const Shape& s);

/// Dense row-major tensor of rank 1..4. Activations use N,C,H,W; conv weights
/// use Cout,Cin/g,Kh,Kw. A default-constructed tensor is empty (rank 0).
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims) : dims_(std::move(dims)) {
    validate_dims();
    data_.assign(shape_numel(dims_), T{0});
  }

  Tensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims();
    if (data_.size() != shape_numel(dims_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(dims_));
    }
  }

  static Tensor full(Shape dims, T value) {
    Tensor t(std::move(dims));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.dims_); }

  /// Standard normal entries scaled by stddev.
  static Tensor randn(Shape dims, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(dims));
    for (auto& v : t.data_) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  static Tensor uniform(Shape dims, Rng& rng, double lo, double hi) {
    Tensor t(std::move(dims));
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& dims() const { return dims_; }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const { return dims_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return dims_.empty(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  /// Element access for rank-4 tensors.
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }

  Tensor reshaped(Shape dims) const {
    if (shape_numel(dims) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
    }
    return Tensor(std::move(dims), data_);
  }

  template <Real U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  /// Bitwise equality of shape and contents.
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  void validate_dims() const {
    if (dims_.empty() || dims_.size() > 4) {
      throw DimensionError("tensor rank must be 1..4, got " + std::to_string(dims_.size()));
    }
    for (auto d : dims_) {
      if (d == 0) throw DimensionError("tensor dims must be >= 1: " + shape_str(dims_));
    }
  }

  Shape dims_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Throws NumericError if any element is NaN or Inf.
template <Real T>
void require_finite(const Tensor<T>& t, const char* where);

// Debug builds check every op output; release builds skip.
#ifndef NDEBUG
#define TFORMER_DEBUG_FINITE(t, where) ::tformer::require_finite((t), (where))
#else
#define TFORMER_DEBUG_FINITE(t, where) ((void)0)
#endif

}  // namespace tformer
