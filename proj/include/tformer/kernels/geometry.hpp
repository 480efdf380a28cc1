#pragma once

#include <cstddef>
#include <cstdint>

namespace tformer::kernels {

enum class PoolKind : std::uint8_t { avg = 0, max = 1 };

/// floor((in - kernel + 2*padding) / stride) + 1, or 0 when the window never fits.
constexpr std::size_t window_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t padding) {
  const std::size_t span = in + 2 * padding;
  return span < kernel ? 0 : (span - kernel) / stride + 1;
}

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t in_h = 1;
  std::size_t in_w = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  std::size_t out_h() const { return window_out_size(in_h, kernel_h, stride, padding); }
  std::size_t out_w() const { return window_out_size(in_w, kernel_w, stride, padding); }
  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
};

struct PoolGeometry {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t in_h = 1;
  std::size_t in_w = 1;
  PoolKind kind = PoolKind::max;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  std::size_t out_h() const { return window_out_size(in_h, kernel, stride, padding); }
  std::size_t out_w() const { return window_out_size(in_w, kernel, stride, padding); }
};

/// Rows of a per-location channel normalization: batch x channels x (h*w).
struct NormGeometry {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t plane = 1;
};

}  // namespace tformer::kernels
