#pragma once

// Serial nested-loop kernels. They visit every window tap, padded or not,
// and bump an optional counter once per tap, which makes them the
// instrumented baseline for the analytic cost model as well as the
// correctness reference for the OpenMP kernels.

#include <cstdint>
#include <span>

#include "tformer/kernels/geometry.hpp"

namespace tformer::reference {

using kernels::ConvGeometry;
using kernels::NormGeometry;
using kernels::PoolGeometry;
using kernels::PoolKind;

/// Multiply-add equivalents visited by the reference kernels.
struct OpCounter {
  std::uint64_t madds = 0;
};

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y, OpCounter* counter = nullptr);

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> dy, std::span<const T> w,
                           std::span<T> dx);

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> x, std::span<const T> dy,
                            std::span<T> dw, std::span<T> dbias);

template <typename T>
void pool2d_forward(const PoolGeometry& g, std::span<const T> x, std::span<T> y,
                    OpCounter* counter = nullptr);

/// Counts 2 per element (statistics and the affine map).
template <typename T>
void layer_norm_forward(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                        std::span<const T> beta, T eps, std::span<T> y,
                        OpCounter* counter = nullptr);

/// Exact-erf GELU, 1 per element.
template <typename T>
void gelu_forward(std::span<const T> x, std::span<T> y, OpCounter* counter = nullptr);

/// Mean over each plane of a batch x channels x plane buffer, 1 per input element.
template <typename T>
void global_avg_pool(std::size_t batch, std::size_t channels, std::size_t plane,
                     std::span<const T> x, std::span<T> y, OpCounter* counter = nullptr);

/// c[m,n] = sum_k a[m,k] * b[k,n], 1 per (m,n,k).
template <typename T>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
            std::span<const T> b, std::span<T> c, OpCounter* counter = nullptr);

}  // namespace tformer::reference
