#include "tformer/kernels/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace tformer::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelGrain = 1 << 14;

// Output positions o in [lo, hi) for which o*stride + tap - padding lands in [0, in).
struct ValidRange {
  std::size_t lo;
  std::size_t hi;
};

ValidRange valid_range(std::size_t out, std::size_t in, std::size_t tap, std::size_t stride,
                       std::size_t padding) {
  std::size_t lo = 0;
  if (tap < padding) lo = (padding - tap + stride - 1) / stride;
  if (in + padding <= tap) return {0, 0};
  const std::size_t hi = std::min(out, (in - 1 + padding - tap) / stride + 1);
  return {lo, std::max(lo, hi)};
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t icg = g.in_per_group(), ocg = g.out_per_group();
  const std::size_t in_plane = g.in_h * g.in_w, out_plane = oh * ow;
  const std::size_t work = g.batch * g.out_channels * out_plane * icg * g.kernel_h * g.kernel_w;
  const std::ptrdiff_t planes = static_cast<std::ptrdiff_t>(g.batch * g.out_channels);

#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::ptrdiff_t p = 0; p < planes; ++p) {
    const std::size_t n = static_cast<std::size_t>(p) / g.out_channels;
    const std::size_t oc = static_cast<std::size_t>(p) % g.out_channels;
    const std::size_t group = oc / ocg;
    T* out = y.data() + static_cast<std::size_t>(p) * out_plane;
    std::fill(out, out + out_plane, bias.empty() ? T{0} : bias[oc]);

    for (std::size_t icl = 0; icl < icg; ++icl) {
      const std::size_t ic = group * icg + icl;
      const T* src = x.data() + (n * g.in_channels + ic) * in_plane;
      const T* wk = w.data() + ((oc * icg + icl) * g.kernel_h) * g.kernel_w;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        const ValidRange rows = valid_range(oh, g.in_h, kh, g.stride, g.padding);
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          const ValidRange cols = valid_range(ow, g.in_w, kw, g.stride, g.padding);
          const T wv = wk[kh * g.kernel_w + kw];
          for (std::size_t r = rows.lo; r < rows.hi; ++r) {
            const T* src_row = src + (r * g.stride + kh - g.padding) * g.in_w;
            T* out_row = out + r * ow;
            if (g.stride == 1) {
              for (std::size_t c = cols.lo; c < cols.hi; ++c) {
                out_row[c] += wv * src_row[c + kw - g.padding];
              }
            } else {
              for (std::size_t c = cols.lo; c < cols.hi; ++c) {
                out_row[c] += wv * src_row[c * g.stride + kw - g.padding];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> dy, std::span<const T> w,
                           std::span<T> dx) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t icg = g.in_per_group(), ocg = g.out_per_group();
  const std::size_t in_plane = g.in_h * g.in_w, out_plane = oh * ow;
  const std::size_t work = g.batch * g.out_channels * out_plane * icg * g.kernel_h * g.kernel_w;
  const std::ptrdiff_t planes = static_cast<std::ptrdiff_t>(g.batch * g.in_channels);

#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::ptrdiff_t p = 0; p < planes; ++p) {
    const std::size_t n = static_cast<std::size_t>(p) / g.in_channels;
    const std::size_t ic = static_cast<std::size_t>(p) % g.in_channels;
    const std::size_t group = ic / icg;
    const std::size_t icl = ic % icg;
    T* dst = dx.data() + static_cast<std::size_t>(p) * in_plane;
    std::fill(dst, dst + in_plane, T{0});

    // Same (oc, r, c, kh, kw) accumulation order as the reference kernel.
    for (std::size_t ocl = 0; ocl < ocg; ++ocl) {
      const std::size_t oc = group * ocg + ocl;
      const T* grad = dy.data() + (n * g.out_channels + oc) * out_plane;
      const T* wk = w.data() + ((oc * icg + icl) * g.kernel_h) * g.kernel_w;
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          const T gy = grad[r * ow + c];
          for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
            const std::size_t ih = r * g.stride + kh;
            if (ih < g.padding || ih - g.padding >= g.in_h) continue;
            T* dst_row = dst + (ih - g.padding) * g.in_w;
            for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
              const std::size_t iw = c * g.stride + kw;
              if (iw < g.padding || iw - g.padding >= g.in_w) continue;
              dst_row[iw - g.padding] += wk[kh * g.kernel_w + kw] * gy;
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> x, std::span<const T> dy,
                            std::span<T> dw, std::span<T> dbias) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t icg = g.in_per_group(), ocg = g.out_per_group();
  const std::size_t in_plane = g.in_h * g.in_w, out_plane = oh * ow;
  const std::size_t work = g.batch * g.out_channels * out_plane * icg * g.kernel_h * g.kernel_w;
  const std::ptrdiff_t outs = static_cast<std::ptrdiff_t>(g.out_channels);

#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::ptrdiff_t o = 0; o < outs; ++o) {
    const std::size_t oc = static_cast<std::size_t>(o);
    const std::size_t group = oc / ocg;
    for (std::size_t icl = 0; icl < icg; ++icl) {
      const std::size_t ic = group * icg + icl;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        const ValidRange rows = valid_range(oh, g.in_h, kh, g.stride, g.padding);
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          const ValidRange cols = valid_range(ow, g.in_w, kw, g.stride, g.padding);
          T acc{0};
          for (std::size_t n = 0; n < g.batch; ++n) {
            const T* src = x.data() + (n * g.in_channels + ic) * in_plane;
            const T* grad = dy.data() + (n * g.out_channels + oc) * out_plane;
            for (std::size_t r = rows.lo; r < rows.hi; ++r) {
              const T* src_row = src + (r * g.stride + kh - g.padding) * g.in_w;
              const T* grad_row = grad + r * ow;
              for (std::size_t c = cols.lo; c < cols.hi; ++c) {
                acc += grad_row[c] * src_row[c * g.stride + kw - g.padding];
              }
            }
          }
          dw[((oc * icg + icl) * g.kernel_h + kh) * g.kernel_w + kw] = acc;
        }
      }
    }
    if (!dbias.empty()) {
      T acc{0};
      for (std::size_t n = 0; n < g.batch; ++n) {
        const T* grad = dy.data() + (n * g.out_channels + oc) * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) acc += grad[i];
      }
      dbias[oc] = acc;
    }
  }
}

template <typename T>
void pool2d_forward(const PoolGeometry& g, std::span<const T> x, std::span<T> y,
                    std::span<std::int32_t> argmax) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t in_plane = g.in_h * g.in_w, out_plane = oh * ow;
  const std::size_t work = g.batch * g.channels * out_plane * g.kernel * g.kernel;
  const std::ptrdiff_t planes = static_cast<std::ptrdiff_t>(g.batch * g.channels);
  const bool want_argmax = !argmax.empty();

#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::ptrdiff_t p = 0; p < planes; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * in_plane;
    T* out = y.data() + static_cast<std::size_t>(p) * out_plane;
    std::int32_t* arg = want_argmax ? argmax.data() + static_cast<std::size_t>(p) * out_plane
                                    : nullptr;
    for (std::size_t r = 0; r < oh; ++r) {
      // Clip the window to the valid input rows; padded cells never participate.
      const std::size_t top = r * g.stride;
      const std::size_t h0 = top > g.padding ? top - g.padding : 0;
      const std::size_t h1 = std::min(g.in_h, top + g.kernel - g.padding);
      for (std::size_t c = 0; c < ow; ++c) {
        const std::size_t left = c * g.stride;
        const std::size_t w0 = left > g.padding ? left - g.padding : 0;
        const std::size_t w1 = std::min(g.in_w, left + g.kernel - g.padding);
        if (g.kind == PoolKind::max) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = h0 * g.in_w + w0;
          for (std::size_t h = h0; h < h1; ++h) {
            for (std::size_t w = w0; w < w1; ++w) {
              const T v = src[h * g.in_w + w];
              if (v > best) {
                best = v;
                best_idx = h * g.in_w + w;
              }
            }
          }
          out[r * ow + c] = best;
          if (arg) arg[r * ow + c] = static_cast<std::int32_t>(best_idx);
        } else {
          T sum{0};
          for (std::size_t h = h0; h < h1; ++h) {
            for (std::size_t w = w0; w < w1; ++w) sum += src[h * g.in_w + w];
          }
          out[r * ow + c] = sum / static_cast<T>((h1 - h0) * (w1 - w0));
        }
      }
    }
  }
}

template <typename T>
void pool2d_backward(const PoolGeometry& g, std::span<const T> dy,
                     std::span<const std::int32_t> argmax, std::span<T> dx) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t in_plane = g.in_h * g.in_w, out_plane = oh * ow;
  const std::size_t work = g.batch * g.channels * out_plane * g.kernel * g.kernel;
  const std::ptrdiff_t planes = static_cast<std::ptrdiff_t>(g.batch * g.channels);

#pragma omp parallel for schedule(static) if (work > kParallelGrain)
  for (std::ptrdiff_t p = 0; p < planes; ++p) {
    const T* grad = dy.data() + static_cast<std::size_t>(p) * out_plane;
    T* dst = dx.data() + static_cast<std::size_t>(p) * in_plane;
    std::fill(dst, dst + in_plane, T{0});
    if (g.kind == PoolKind::max) {
      const std::int32_t* arg = argmax.data() + static_cast<std::size_t>(p) * out_plane;
      for (std::size_t i = 0; i < out_plane; ++i) dst[arg[i]] += grad[i];
      continue;
    }
    for (std::size_t r = 0; r < oh; ++r) {
      const std::size_t top = r * g.stride;
      const std::size_t h0 = top > g.padding ? top - g.padding : 0;
      const std::size_t h1 = std::min(g.in_h, top + g.kernel - g.padding);
      for (std::size_t c = 0; c < ow; ++c) {
        const std::size_t left = c * g.stride;
        const std::size_t w0 = left > g.padding ? left - g.padding : 0;
        const std::size_t w1 = std::min(g.in_w, left + g.kernel - g.padding);
        const T share = grad[r * ow + c] / static_cast<T>((h1 - h0) * (w1 - w0));
        for (std::size_t h = h0; h < h1; ++h) {
          for (std::size_t w = w0; w < w1; ++w) dst[h * g.in_w + w] += share;
        }
      }
    }
  }
}

template <typename T>
void layer_norm_forward(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                        std::span<const T> beta, T eps, std::span<T> y, std::span<T> xhat,
                        std::span<T> rstd) {
  const std::size_t C = g.channels, P = g.plane;
  const std::ptrdiff_t batch = static_cast<std::ptrdiff_t>(g.batch);

#pragma omp parallel for schedule(static) if (g.batch * C * P > kParallelGrain)
  for (std::ptrdiff_t bn = 0; bn < batch; ++bn) {
    const std::size_t n = static_cast<std::size_t>(bn);
    const T* src = x.data() + n * C * P;
    T* out = y.data() + n * C * P;
    T* xh = xhat.data() + n * C * P;
    T* rs = rstd.data() + n * P;
    std::vector<T> mean(P, T{0}), var(P, T{0});
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < P; ++i) mean[i] += src[c * P + i];
    }
    for (std::size_t i = 0; i < P; ++i) mean[i] /= static_cast<T>(C);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < P; ++i) {
        const T d = src[c * P + i] - mean[i];
        var[i] += d * d;
      }
    }
    for (std::size_t i = 0; i < P; ++i) {
      rs[i] = T{1} / std::sqrt(var[i] / static_cast<T>(C) + eps);
    }
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < P; ++i) {
        const T h = (src[c * P + i] - mean[i]) * rs[i];
        xh[c * P + i] = h;
        out[c * P + i] = h * gamma[c] + beta[c];
      }
    }
  }
}

template <typename T>
void layer_norm_backward(const NormGeometry& g, std::span<const T> dy, std::span<const T> xhat,
                         std::span<const T> rstd, std::span<const T> gamma, std::span<T> dx,
                         std::span<T> dgamma, std::span<T> dbeta) {
  const std::size_t C = g.channels, P = g.plane;
  const std::ptrdiff_t batch = static_cast<std::ptrdiff_t>(g.batch);

#pragma omp parallel for schedule(static) if (g.batch * C * P > kParallelGrain)
  for (std::ptrdiff_t bn = 0; bn < batch; ++bn) {
    const std::size_t n = static_cast<std::size_t>(bn);
    const T* gy = dy.data() + n * C * P;
    const T* xh = xhat.data() + n * C * P;
    const T* rs = rstd.data() + n * P;
    T* out = dx.data() + n * C * P;
    std::vector<T> mean_g(P, T{0}), mean_gx(P, T{0});
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < P; ++i) {
        const T gh = gy[c * P + i] * gamma[c];
        mean_g[i] += gh;
        mean_gx[i] += gh * xh[c * P + i];
      }
    }
    for (std::size_t i = 0; i < P; ++i) {
      mean_g[i] /= static_cast<T>(C);
      mean_gx[i] /= static_cast<T>(C);
    }
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < P; ++i) {
        const T gh = gy[c * P + i] * gamma[c];
        out[c * P + i] = rs[i] * (gh - mean_g[i] - xh[c * P + i] * mean_gx[i]);
      }
    }
  }

  // Parameter gradients reduce over batch and plane; one thread per channel.
#pragma omp parallel for schedule(static) if (g.batch * C * P > kParallelGrain)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(C); ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    T sg{0}, sb{0};
    for (std::size_t n = 0; n < g.batch; ++n) {
      const T* gy = dy.data() + (n * C + c) * P;
      const T* xh = xhat.data() + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) {
        sg += gy[i] * xh[i];
        sb += gy[i];
      }
    }
    dgamma[c] += sg;
    dbeta[c] += sb;
  }
}

template <typename T>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
            std::span<const T> b, std::span<T> c) {
#pragma omp parallel for schedule(static) if (m * k * n > kParallelGrain)
  for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(m); ++ri) {
    const std::size_t i = static_cast<std::size_t>(ri);
    T* row = c.data() + i * n;
    std::fill(row, row + n, T{0});
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

#define TFORMER_INSTANTIATE(T)                                                                   \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,   \
                                  std::span<const T>, std::span<T>);                             \
  template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>,                \
                                         std::span<const T>, std::span<T>);                      \
  template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>,               \
                                          std::span<const T>, std::span<T>, std::span<T>);       \
  template void pool2d_forward<T>(const PoolGeometry&, std::span<const T>, std::span<T>,         \
                                  std::span<std::int32_t>);                                      \
  template void pool2d_backward<T>(const PoolGeometry&, std::span<const T>,                      \
                                   std::span<const std::int32_t>, std::span<T>);                 \
  template void layer_norm_forward<T>(const NormGeometry&, std::span<const T>,                   \
                                      std::span<const T>, std::span<const T>, T, std::span<T>,   \
                                      std::span<T>, std::span<T>);                               \
  template void layer_norm_backward<T>(const NormGeometry&, std::span<const T>,                  \
                                       std::span<const T>, std::span<const T>,                   \
                                       std::span<const T>, std::span<T>, std::span<T>,           \
                                       std::span<T>);                                            \
  template void matmul<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,             \
                          std::span<const T>, std::span<T>);

TFORMER_INSTANTIATE(float)
TFORMER_INSTANTIATE(double)

#undef TFORMER_INSTANTIATE

}  // namespace tformer::kernels
