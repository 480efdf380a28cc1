#pragma once

// Op instances for manual reverse mode. forward() runs the op and keeps the
// residuals its vector-Jacobian product needs; vjp() maps an output cotangent
// to input/parameter cotangents and throws StateError if forward() never ran.

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "tformer/ops.hpp"

namespace tformer {

template <Real T>
class Conv2dOp {
 public:
  struct Grads {
    Tensor<T> input;
    Tensor<T> weight;
    std::optional<Tensor<T>> bias;
  };

  explicit Conv2dOp(ConvOptions opts = {}) : opts_(opts) {}

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& weight,
                    const std::optional<Tensor<T>>& bias);
  Grads vjp(const Tensor<T>& dy) const;

 private:
  ConvOptions opts_;
  std::optional<Tensor<T>> x_;
  Tensor<T> weight_;
  bool has_bias_ = false;
};

template <Real T>
class Pool2dOp {
 public:
  explicit Pool2dOp(PoolSpec spec) : spec_(spec) {}

  Tensor<T> forward(const Tensor<T>& x);
  /// Max pooling routes each cotangent to the first maximal element of its window.
  Tensor<T> vjp(const Tensor<T>& dy) const;

 private:
  PoolSpec spec_;
  Shape in_dims_;
  std::vector<std::int32_t> argmax_;
  bool ran_ = false;
};

template <Real T>
class LayerNormOp {
 public:
  struct Grads {
    Tensor<T> input;
    Tensor<T> gamma;
    Tensor<T> beta;
  };

  explicit LayerNormOp(double eps = kLayerNormEps) : eps_(eps) {}

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);
  Grads vjp(const Tensor<T>& dy) const;

 private:
  double eps_;
  std::optional<Tensor<T>> xhat_;
  Tensor<T> rstd_;
  Tensor<T> gamma_;
};

template <Real T>
class GeluOp {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> vjp(const Tensor<T>& dy) const;

 private:
  std::optional<Tensor<T>> x_;
};

template <Real T>
class AddOp {
 public:
  Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b);
  std::pair<Tensor<T>, Tensor<T>> vjp(const Tensor<T>& dy) const;

 private:
  bool ran_ = false;
};

template <Real T>
class MulOp {
 public:
  Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b);
  std::pair<Tensor<T>, Tensor<T>> vjp(const Tensor<T>& dy) const;

 private:
  std::optional<Tensor<T>> a_;
  Tensor<T> b_;
};

template <Real T>
class MatMulOp {
 public:
  Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b);
  std::pair<Tensor<T>, Tensor<T>> vjp(const Tensor<T>& dy) const;

 private:
  std::optional<Tensor<T>> a_;
  Tensor<T> b_;
};

template <Real T>
class SoftmaxOp {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> vjp(const Tensor<T>& dy) const;

 private:
  std::optional<Tensor<T>> y_;
};

template <Real T>
class GlobalAvgPoolOp {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> vjp(const Tensor<T>& dy) const;

 private:
  Shape in_dims_;
};

}  // namespace tformer
