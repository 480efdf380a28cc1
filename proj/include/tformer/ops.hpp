#pragma once

#include <optional>
#include <vector>

#include "tformer/kernels/geometry.hpp"
#include "tformer/tensor.hpp"

namespace tformer {

using kernels::PoolKind;

/// Square pooling window. Output size per spatial dim is floor((W - K + 2P) / S) + 1.
struct PoolSpec {
  PoolKind kind = PoolKind::max;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  /// Stride 1 with padding (K - 1) / 2, so the output keeps the input size.
  static PoolSpec same(PoolKind kind, std::size_t kernel) {
    return {kind, kernel, 1, (kernel - 1) / 2};
  }

  /// K odd and positive, S positive, P <= K / 2 (every window keeps a real element).
  void validate() const;

  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;
};

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

inline constexpr double kLayerNormEps = 1e-5;

// Windowed max/avg over the valid (unpadded) cells of each window.
template <Real T>
Tensor<T> pool2d(const Tensor<T>& x, const PoolSpec& spec);

/// Grouped cross-correlation. Weight is [Cout, Cin/groups, Kh, Kw].
template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 const ConvOptions& opts = {});

/// Normalizes the channel vector at every (n, h, w) with population variance.
template <Real T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              double eps = kLayerNormEps);

/// 0.5 x (1 + erf(x / sqrt 2)).
template <Real T>
Tensor<T> gelu(const Tensor<T>& x);

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T s);

/// Rank-2 product [m,k] x [k,n].
template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Rank-2 transpose.
template <Real T>
Tensor<T> transpose(const Tensor<T>& a);

/// Softmax over the last dimension, max-subtracted.
template <Real T>
Tensor<T> softmax_last(const Tensor<T>& x);

template <Real T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

template <Real T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<std::size_t>& sizes);

/// [N,C,H,W] -> [N,C], mean over space.
template <Real T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Throws DimensionError unless x is rank 4.
template <Real T>
void require_rank4(const Tensor<T>& x, const char* what);

}  // namespace tformer
