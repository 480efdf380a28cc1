#pragma once

// OpenMP kernels used by the public tensor ops. Every output element is
// produced by exactly one thread with a fixed accumulation order, so results
// are bitwise independent of the thread count and equal to the serial
// reference kernels in kernels/reference.hpp.

#include <cstdint>
#include <span>

#include "tformer/kernels/geometry.hpp"

namespace tformer::kernels {

/// y = bias + sum_{ic,kh,kw} w * x, accumulated in (ic, kh, kw) order. bias may be empty.
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y);

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> dy, std::span<const T> w,
                           std::span<T> dx);

/// dbias may be empty.
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> x, std::span<const T> dy,
                            std::span<T> dw, std::span<T> dbias);

/// argmax (flat in-plane index of the winning input) is written for max pooling
/// when non-empty. Ties go to the first maximum in row-major window order.
template <typename T>
void pool2d_forward(const PoolGeometry& g, std::span<const T> x, std::span<T> y,
                    std::span<std::int32_t> argmax);

template <typename T>
void pool2d_backward(const PoolGeometry& g, std::span<const T> dy,
                     std::span<const std::int32_t> argmax, std::span<T> dx);

/// xhat and rstd are saved for the backward pass (xhat same size as x, rstd batch*plane).
template <typename T>
void layer_norm_forward(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                        std::span<const T> beta, T eps, std::span<T> y, std::span<T> xhat,
                        std::span<T> rstd);

/// Accumulates into dgamma/dbeta.
template <typename T>
void layer_norm_backward(const NormGeometry& g, std::span<const T> dy, std::span<const T> xhat,
                         std::span<const T> rstd, std::span<const T> gamma, std::span<T> dx,
                         std::span<T> dgamma, std::span<T> dbeta);

/// c[m,n] = sum_k a[m,k] * b[k,n].
template <typename T>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
            std::span<const T> b, std::span<T> c);

}  // namespace tformer::kernels
