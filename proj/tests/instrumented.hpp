#pragma once

// Madd counts obtained by running the serial reference kernels with their
// per-tap counters, layer by layer, on zero-filled buffers of the right size.

#include <cstdint>
#include <vector>

#include "tformer/config.hpp"
#include "tformer/kernels/reference.hpp"

namespace instrumented {

using tformer::reference::OpCounter;

inline std::uint64_t conv(std::size_t batch, std::size_t cin, std::size_t h, std::size_t w,
                          std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                          std::size_t groups, std::size_t* oh = nullptr, std::size_t* ow = nullptr) {
  tformer::kernels::ConvGeometry g{batch, cin, h, w, cout, k, k, stride, pad, groups};
  std::vector<double> x(batch * cin * h * w), wt(cout * (cin / groups) * k * k),
      y(batch * cout * g.out_h() * g.out_w());
  OpCounter c;
  tformer::reference::conv2d_forward<double>(g, x, wt, {}, y, &c);
  if (oh) *oh = g.out_h();
  if (ow) *ow = g.out_w();
  return c.madds;
}

inline std::uint64_t pool(std::size_t channels, std::size_t h, std::size_t w, tformer::PoolKind kind,
                          std::size_t k) {
  tformer::kernels::PoolGeometry g{1, channels, h, w, kind, k, 1, k / 2};
  std::vector<double> x(channels * h * w), y(channels * g.out_h() * g.out_w());
  OpCounter c;
  tformer::reference::pool2d_forward<double>(g, x, y, &c);
  return c.madds;
}

inline std::uint64_t norm(std::size_t channels, std::size_t plane) {
  std::vector<double> x(channels * plane), y(x.size()), gamma(channels), beta(channels);
  OpCounter c;
  tformer::reference::layer_norm_forward<double>({1, channels, plane}, x, gamma, beta, 1e-5, y, &c);
  return c.madds;
}

inline std::uint64_t gelu(std::size_t n) {
  std::vector<double> x(n), y(n);
  OpCounter c;
  tformer::reference::gelu_forward<double>(x, y, &c);
  return c.madds;
}

/// Pooling over each partition followed by the pointwise projection.
inline std::uint64_t hybrid(std::size_t d, std::size_t h, std::size_t w,
                            const tformer::NLModuleConfig& nl) {
  const auto parts = tformer::partition_channels(d, nl.num_parts());
  std::uint64_t total = 0;
  std::size_t j = 0;
  for (auto op : nl.operators)
    for (std::size_t k : nl.scales) total += pool(parts[j++], h, w, op, k);
  return total + conv(1, d, h, w, d, 1, 1, 0, 1);
}

/// Grouped expand and compress convolutions; the activation is overhead.
inline std::uint64_t ffn(std::size_t d, std::size_t h, std::size_t w, std::size_t r, std::size_t g) {
  return conv(1, d, h, w, r * d, 1, 1, 0, g) + conv(1, r * d, h, w, d, 1, 1, 0, g);
}

/// Every counted kernel of a forward pass for one image (pcs/standard FFNs).
inline std::uint64_t model(const tformer::TFormerConfig& cfg, std::size_t h, std::size_t w) {
  std::uint64_t total = 0;
  std::size_t c = cfg.stages.front().patch.in_channels;
  for (const auto& st : cfg.stages) {
    std::size_t oh = 0, ow = 0;
    total += conv(1, c, h, w, st.embed_dim, st.patch.kernel, st.patch.stride, st.patch.padding(), 1, &oh, &ow);
    h = oh;
    w = ow;
    c = st.embed_dim;
    total += norm(c, h * w);
    for (std::size_t b = 0; b < st.depth; ++b) {
      total += norm(c, h * w) + hybrid(c, h, w, st.nl) + norm(c, h * w);
      total += ffn(c, h, w, st.ffn.ratio, st.ffn.groups) + gelu(st.ffn.ratio * c * h * w);
    }
  }
  std::vector<double> x(c * h * w), pooled(c), logits(cfg.num_classes), head(c * cfg.num_classes);
  OpCounter counter;
  tformer::reference::global_avg_pool<double>(1, c, h * w, x, pooled, &counter);
  total += counter.madds + norm(c, 1);
  OpCounter mm;
  tformer::reference::matmul<double>(1, c, cfg.num_classes, pooled, head, logits, &mm);
  return total + mm.madds;
}

}  // namespace instrumented
