#include "tformer/kernels/reference.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace tformer::reference {
namespace {

// Input coordinate of output position o at window tap t, or -1 when it falls in the padding.
long tap_coord(std::size_t o, std::size_t t, std::size_t stride, std::size_t padding,
               std::size_t in) {
  const long v = static_cast<long>(o * stride + t) - static_cast<long>(padding);
  return (v < 0 || v >= static_cast<long>(in)) ? -1 : v;
}

void bump(OpCounter* counter, std::uint64_t n = 1) {
  if (counter) counter->madds += n;
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y, OpCounter* counter) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t icg = g.in_per_group(), ocg = g.out_per_group();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
      const std::size_t group = oc / ocg;
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          T acc = bias.empty() ? T{0} : bias[oc];
          for (std::size_t icl = 0; icl < icg; ++icl) {
            const std::size_t ic = group * icg + icl;
            for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
              for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                bump(counter);
                const long ih = tap_coord(r, kh, g.stride, g.padding, g.in_h);
                const long iw = tap_coord(c, kw, g.stride, g.padding, g.in_w);
                if (ih < 0 || iw < 0) continue;
                acc += w[((oc * icg + icl) * g.kernel_h + kh) * g.kernel_w + kw] *
                       x[((n * g.in_channels + ic) * g.in_h + ih) * g.in_w + iw];
              }
            }
          }
          y[((n * g.out_channels + oc) * oh + r) * ow + c] = acc;
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
  for (auto& v : dx) v = T{0};
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
      const std::size_t group = oc / ocg;
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          const T gy = dy[((n * g.out_channels + oc) * oh + r) * ow + c];
          for (std::size_t icl = 0; icl < icg; ++icl) {
            const std::size_t ic = group * icg + icl;
            for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
              for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                const long ih = tap_coord(r, kh, g.stride, g.padding, g.in_h);
                const long iw = tap_coord(c, kw, g.stride, g.padding, g.in_w);
                if (ih < 0 || iw < 0) continue;
                dx[((n * g.in_channels + ic) * g.in_h + ih) * g.in_w + iw] +=
                    w[((oc * icg + icl) * g.kernel_h + kh) * g.kernel_w + kw] * gy;
              }
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
  for (auto& v : dw) v = T{0};
  for (auto& v : dbias) v = T{0};
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
      const std::size_t group = oc / ocg;
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          const T gy = dy[((n * g.out_channels + oc) * oh + r) * ow + c];
          if (!dbias.empty()) dbias[oc] += gy;
          for (std::size_t icl = 0; icl < icg; ++icl) {
            const std::size_t ic = group * icg + icl;
            for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
              for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                const long ih = tap_coord(r, kh, g.stride, g.padding, g.in_h);
                const long iw = tap_coord(c, kw, g.stride, g.padding, g.in_w);
                if (ih < 0 || iw < 0) continue;
                dw[((oc * icg + icl) * g.kernel_h + kh) * g.kernel_w + kw] +=
                    gy * x[((n * g.in_channels + ic) * g.in_h + ih) * g.in_w + iw];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void pool2d_forward(const PoolGeometry& g, std::span<const T> x, std::span<T> y,
                    OpCounter* counter) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t p = 0; p < g.batch * g.channels; ++p) {
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t c = 0; c < ow; ++c) {
        T best = -std::numeric_limits<T>::infinity();
        T sum{0};
        std::size_t count = 0;
        for (std::size_t kh = 0; kh < g.kernel; ++kh) {
          for (std::size_t kw = 0; kw < g.kernel; ++kw) {
            bump(counter);
            const long ih = tap_coord(r, kh, g.stride, g.padding, g.in_h);
            const long iw = tap_coord(c, kw, g.stride, g.padding, g.in_w);
            if (ih < 0 || iw < 0) continue;
            const T v = x[(p * g.in_h + ih) * g.in_w + iw];
            if (v > best) best = v;
            sum += v;
            ++count;
          }
        }
        y[(p * oh + r) * ow + c] = g.kind == PoolKind::max ? best : sum / static_cast<T>(count);
      }
    }
  }
}

template <typename T>
void layer_norm_forward(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                        std::span<const T> beta, T eps, std::span<T> y, OpCounter* counter) {
  const std::size_t C = g.channels, P = g.plane;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t i = 0; i < P; ++i) {
      T mean{0};
      for (std::size_t c = 0; c < C; ++c) mean += x[(n * C + c) * P + i];
      mean /= static_cast<T>(C);
      T var{0};
      for (std::size_t c = 0; c < C; ++c) {
        const T d = x[(n * C + c) * P + i] - mean;
        var += d * d;
      }
      const T rstd = T{1} / std::sqrt(var / static_cast<T>(C) + eps);
      for (std::size_t c = 0; c < C; ++c) {
        const T h = (x[(n * C + c) * P + i] - mean) * rstd;
        y[(n * C + c) * P + i] = h * gamma[c] + beta[c];
      }
      bump(counter, 2 * C);
    }
  }
}

template <typename T>
void gelu_forward(std::span<const T> x, std::span<T> y, OpCounter* counter) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    y[i] = T{0.5} * v * (T{1} + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
  }
  bump(counter, x.size());
}

template <typename T>
void global_avg_pool(std::size_t batch, std::size_t channels, std::size_t plane,
                     std::span<const T> x, std::span<T> y, OpCounter* counter) {
  for (std::size_t p = 0; p < batch * channels; ++p) {
    T sum{0};
    for (std::size_t i = 0; i < plane; ++i) sum += x[p * plane + i];
    y[p] = sum / static_cast<T>(plane);
  }
  bump(counter, batch * channels * plane);
}

template <typename T>
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
            std::span<const T> b, std::span<T> c, OpCounter* counter) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) {
        bump(counter);
        acc += a[i * k + p] * b[p * n + j];
      }
      c[i * n + j] = acc;
    }
  }
}

#define TFORMER_INSTANTIATE(T)                                                                   \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,   \
                                  std::span<const T>, std::span<T>, OpCounter*);                 \
  template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>,                \
                                         std::span<const T>, std::span<T>);                      \
  template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>,               \
                                          std::span<const T>, std::span<T>, std::span<T>);       \
  template void pool2d_forward<T>(const PoolGeometry&, std::span<const T>, std::span<T>,         \
                                  OpCounter*);                                                   \
  template void layer_norm_forward<T>(const NormGeometry&, std::span<const T>,                   \
                                      std::span<const T>, std::span<const T>, T, std::span<T>,   \
                                      OpCounter*);                                               \
  template void gelu_forward<T>(std::span<const T>, std::span<T>, OpCounter*);                   \
  template void global_avg_pool<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,    \
                                   std::span<T>, OpCounter*);                                    \
  template void matmul<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,             \
                          std::span<const T>, std::span<T>, OpCounter*);

TFORMER_INSTANTIATE(float)
TFORMER_INSTANTIATE(double)

#undef TFORMER_INSTANTIATE

}  // namespace tformer::reference
