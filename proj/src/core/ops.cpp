#include "tformer/ops.hpp"
#include "tformer/vjp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "tformer/kernels/parallel.hpp"

namespace tformer {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <Real T>
void require_finite(const Tensor<T>& t, const char* where) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value after ") + where);
  }
}

template <Real T>
void require_rank4(const Tensor<T>& x, const char* what) {
  if (x.rank() != 4) {
    throw DimensionError(std::string(what) + " expects an N,C,H,W tensor, got " +
                         shape_str(x.dims()));
  }
}

void PoolSpec::validate() const {
  if (kernel == 0 || kernel % 2 == 0) {
    throw ConfigError("pool kernel must be odd and positive, got " + std::to_string(kernel));
  }
  if (stride == 0) throw ConfigError("pool stride must be positive");
  if (padding > kernel / 2) {
    throw ConfigError("pool padding " + std::to_string(padding) + " exceeds kernel/2");
  }
}

namespace {

kernels::PoolGeometry pool_geometry(const Shape& d, const PoolSpec& spec) {
  spec.validate();
  kernels::PoolGeometry g{d[0], d[1], d[2], d[3], spec.kind, spec.kernel, spec.stride,
                          spec.padding};
  if (g.out_h() < 1 || g.out_w() < 1) {
    throw DimensionError("pooling window " + std::to_string(spec.kernel) +
                         " does not fit input " + shape_str(d));
  }
  return g;
}

template <Real T>
kernels::ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& w,
                                    const std::optional<Tensor<T>>& bias, const ConvOptions& o) {
  require_rank4(x, "conv2d");
  if (w.rank() != 4) throw DimensionError("conv2d weight must be rank 4");
  if (o.groups == 0 || o.stride == 0) throw ConfigError("conv2d groups and stride must be >= 1");
  const std::size_t cin = x.dim(1), cout = w.dim(0);
  if (cin % o.groups != 0 || cout % o.groups != 0) {
    throw ConfigError("conv2d channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                      " not divisible by groups " + std::to_string(o.groups));
  }
  if (w.dim(1) != cin / o.groups) {
    throw DimensionError("conv2d weight " + shape_str(w.dims()) + " does not match input " +
                         shape_str(x.dims()) + " with groups " + std::to_string(o.groups));
  }
  if (bias && bias->dims() != Shape{cout}) {
    throw DimensionError("conv2d bias must be [" + std::to_string(cout) + "]");
  }
  kernels::ConvGeometry g{x.dim(0), cin, x.dim(2), x.dim(3), cout,
                          w.dim(2), w.dim(3), o.stride, o.padding, o.groups};
  if (g.out_h() < 1 || g.out_w() < 1) {
    throw DimensionError("conv2d kernel " + shape_str(w.dims()) + " larger than padded input " +
                         shape_str(x.dims()));
  }
  return g;
}

template <Real T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.dims()) + " vs " +
                         shape_str(b.dims()));
  }
}

}  // namespace

template <Real T>
Tensor<T> pool2d(const Tensor<T>& x, const PoolSpec& spec) {
  require_rank4(x, "pool2d");
  const auto g = pool_geometry(x.dims(), spec);
  Tensor<T> y({g.batch, g.channels, g.out_h(), g.out_w()});
  kernels::pool2d_forward<T>(g, x.data(), y.data(), {});
  TFORMER_DEBUG_FINITE(y, "pool2d");
  return y;
}

template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 const ConvOptions& opts) {
  const auto g = conv_geometry(x, weight, bias, opts);
  Tensor<T> y({g.batch, g.out_channels, g.out_h(), g.out_w()});
  kernels::conv2d_forward<T>(g, x.data(), weight.data(),
                             bias ? bias->data() : std::span<const T>{}, y.data());
  TFORMER_DEBUG_FINITE(y, "conv2d");
  return y;
}

template <Real T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              double eps) {
  LayerNormOp<T> op(eps);
  return op.forward(x, gamma, beta);
}

template <Real T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros_like(x);
  const T inv_sqrt2 = static_cast<T>(std::numbers::sqrt2 / 2);
  auto src = x.data();
  auto dst = y.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = T{0.5} * src[i] * (T{1} + std::erf(src[i] * inv_sqrt2));
  }
  TFORMER_DEBUG_FINITE(y, "gelu");
  return y;
}

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> y = a;
  auto out = y.data();
  auto rhs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += rhs[i];
  return y;
}

template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> y = a;
  auto out = y.data();
  auto rhs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= rhs[i];
  return y;
}

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> y = a;
  for (auto& v : y.data()) v *= s;
  return y;
}

template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.dims()) + " and " +
                         shape_str(b.dims()));
  }
  Tensor<T> c({a.dim(0), b.dim(1)});
  kernels::matmul<T>(a.dim(0), a.dim(1), b.dim(1), a.data(), b.data(), c.data());
  return c;
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a rank-2 tensor");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  }
  return t;
}

template <Real T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  if (x.empty()) throw DimensionError("softmax of an empty tensor");
  const std::size_t n = x.dims().back();
  const std::size_t rows = x.numel() / n;
  Tensor<T> y = Tensor<T>::zeros_like(x);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data().data() + r * n;
    T* dst = y.data().data() + r * n;
    const T mx = *std::max_element(src, src + n);
    T sum{0};
    for (std::size_t i = 0; i < n; ++i) {
      dst[i] = std::exp(src[i] - mx);
      sum += dst[i];
    }
    for (std::size_t i = 0; i < n; ++i) dst[i] /= sum;
  }
  return y;
}

template <Real T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels needs at least one tensor");
  const Shape& d0 = parts.front().dims();
  require_rank4(parts.front(), "concat_channels");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    require_rank4(p, "concat_channels");
    if (p.dim(0) != d0[0] || p.dim(2) != d0[2] || p.dim(3) != d0[3]) {
      throw DimensionError("concat_channels: mismatched " + shape_str(p.dims()) + " vs " +
                           shape_str(d0));
    }
    channels += p.dim(1);
  }
  const std::size_t plane = d0[2] * d0[3];
  Tensor<T> y({d0[0], channels, d0[2], d0[3]});
  for (std::size_t n = 0; n < d0[0]; ++n) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.dim(1) * plane;
      const T* src = p.data().data() + n * len;
      std::copy(src, src + len, y.data().data() + (n * channels) * plane + offset);
      offset += len;
    }
  }
  return y;
}

template <Real T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<std::size_t>& sizes) {
  require_rank4(x, "split_channels");
  std::size_t total = 0;
  for (auto s : sizes) {
    if (s == 0) throw DimensionError("split_channels: zero-width partition");
    total += s;
  }
  if (total != x.dim(1)) {
    throw DimensionError("split_channels: sizes sum to " + std::to_string(total) + " but input has " +
                         std::to_string(x.dim(1)) + " channels");
  }
  const std::size_t batch = x.dim(0), plane = x.dim(2) * x.dim(3);
  std::vector<Tensor<T>> out;
  out.reserve(sizes.size());
  std::size_t offset = 0;
  for (auto s : sizes) {
    Tensor<T> part({batch, s, x.dim(2), x.dim(3)});
    for (std::size_t n = 0; n < batch; ++n) {
      const T* src = x.data().data() + (n * x.dim(1) + offset) * plane;
      std::copy(src, src + s * plane, part.data().data() + n * s * plane);
    }
    offset += s;
    out.push_back(std::move(part));
  }
  return out;
}

template <Real T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  GlobalAvgPoolOp<T> op;
  return op.forward(x);
}

// ---------------------------------------------------------------------------
// VJP op instances

namespace {
[[noreturn]] void not_run(const char* op) {
  throw StateError(std::string(op) + ": vjp requested before forward");
}
}  // namespace

template <Real T>
Tensor<T> Conv2dOp<T>::forward(const Tensor<T>& x, const Tensor<T>& weight,
                               const std::optional<Tensor<T>>& bias) {
  Tensor<T> y = conv2d(x, weight, bias, opts_);
  x_ = x;
  weight_ = weight;
  has_bias_ = bias.has_value();
  return y;
}

template <Real T>
typename Conv2dOp<T>::Grads Conv2dOp<T>::vjp(const Tensor<T>& dy) const {
  if (!x_) not_run("conv2d");
  const std::optional<Tensor<T>> no_bias;
  const auto g = conv_geometry(*x_, weight_, no_bias, opts_);
  if (dy.dims() != Shape{g.batch, g.out_channels, g.out_h(), g.out_w()}) {
    throw DimensionError("conv2d vjp: cotangent shape " + shape_str(dy.dims()));
  }
  Grads grads{Tensor<T>::zeros_like(*x_), Tensor<T>::zeros_like(weight_), std::nullopt};
  if (has_bias_) grads.bias = Tensor<T>({g.out_channels});
  kernels::conv2d_backward_input<T>(g, dy.data(), weight_.data(), grads.input.data());
  kernels::conv2d_backward_weight<T>(g, x_->data(), dy.data(), grads.weight.data(),
                                     grads.bias ? grads.bias->data() : std::span<T>{});
  return grads;
}

template <Real T>
Tensor<T> Pool2dOp<T>::forward(const Tensor<T>& x) {
  require_rank4(x, "pool2d");
  const auto g = pool_geometry(x.dims(), spec_);
  Tensor<T> y({g.batch, g.channels, g.out_h(), g.out_w()});
  argmax_.assign(spec_.kind == PoolKind::max ? y.numel() : 0, 0);
  kernels::pool2d_forward<T>(g, x.data(), y.data(), argmax_);
  in_dims_ = x.dims();
  ran_ = true;
  TFORMER_DEBUG_FINITE(y, "pool2d");
  return y;
}

template <Real T>
Tensor<T> Pool2dOp<T>::vjp(const Tensor<T>& dy) const {
  if (!ran_) not_run("pool2d");
  const auto g = pool_geometry(in_dims_, spec_);
  if (dy.dims() != Shape{g.batch, g.channels, g.out_h(), g.out_w()}) {
    throw DimensionError("pool2d vjp: cotangent shape " + shape_str(dy.dims()));
  }
  Tensor<T> dx(in_dims_);
  kernels::pool2d_backward<T>(g, dy.data(), argmax_, dx.data());
  return dx;
}

template <Real T>
Tensor<T> LayerNormOp<T>::forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta) {
  if (eps_ <= 0) throw ConfigError("layer norm eps must be positive");
  if (x.rank() != 4 && x.rank() != 2) {
    throw DimensionError("layer norm expects [N,C,H,W] or [N,C], got " + shape_str(x.dims()));
  }
  const std::size_t C = x.dim(1);
  if (gamma.dims() != Shape{C} || beta.dims() != Shape{C}) {
    throw DimensionError("layer norm gamma/beta must be [" + std::to_string(C) + "]");
  }
  const kernels::NormGeometry g{x.dim(0), C, x.numel() / (x.dim(0) * C)};
  Tensor<T> y = Tensor<T>::zeros_like(x);
  Tensor<T> xhat = Tensor<T>::zeros_like(x);
  rstd_ = Tensor<T>({g.batch * g.plane});
  kernels::layer_norm_forward<T>(g, x.data(), gamma.data(), beta.data(), static_cast<T>(eps_),
                                 y.data(), xhat.data(), rstd_.data());
  xhat_ = std::move(xhat);
  gamma_ = gamma;
  TFORMER_DEBUG_FINITE(y, "layer_norm_channels");
  return y;
}

template <Real T>
typename LayerNormOp<T>::Grads LayerNormOp<T>::vjp(const Tensor<T>& dy) const {
  if (!xhat_) not_run("layer_norm_channels");
  if (!dy.same_shape(*xhat_)) throw DimensionError("layer norm vjp: cotangent shape mismatch");
  const std::size_t C = xhat_->dim(1);
  const kernels::NormGeometry g{xhat_->dim(0), C, xhat_->numel() / (xhat_->dim(0) * C)};
  Grads grads{Tensor<T>::zeros_like(dy), Tensor<T>({C}), Tensor<T>({C})};
  kernels::layer_norm_backward<T>(g, dy.data(), xhat_->data(), rstd_.data(), gamma_.data(),
                                  grads.input.data(), grads.gamma.data(), grads.beta.data());
  return grads;
}

template <Real T>
Tensor<T> GeluOp<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return gelu(x);
}

template <Real T>
Tensor<T> GeluOp<T>::vjp(const Tensor<T>& dy) const {
  if (!x_) not_run("gelu");
  if (!dy.same_shape(*x_)) throw DimensionError("gelu vjp: cotangent shape mismatch");
  // d/dx [x Phi(x)] = Phi(x) + x phi(x)
  const T inv_sqrt2 = static_cast<T>(std::numbers::sqrt2 / 2);
  const T inv_sqrt2pi = static_cast<T>(std::numbers::inv_sqrtpi * std::numbers::sqrt2 / 2);
  Tensor<T> dx = Tensor<T>::zeros_like(dy);
  auto xs = x_->data();
  auto gs = dy.data();
  auto out = dx.data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const T v = xs[i];
    const T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(T{-0.5} * v * v);
    out[i] = gs[i] * (cdf + v * pdf);
  }
  return dx;
}

template <Real T>
Tensor<T> AddOp<T>::forward(const Tensor<T>& a, const Tensor<T>& b) {
  ran_ = true;
  return add(a, b);
}

template <Real T>
std::pair<Tensor<T>, Tensor<T>> AddOp<T>::vjp(const Tensor<T>& dy) const {
  if (!ran_) not_run("add");
  return {dy, dy};
}

template <Real T>
Tensor<T> MulOp<T>::forward(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> y = mul(a, b);
  a_ = a;
  b_ = b;
  return y;
}

template <Real T>
std::pair<Tensor<T>, Tensor<T>> MulOp<T>::vjp(const Tensor<T>& dy) const {
  if (!a_) not_run("mul");
  return {mul(dy, b_), mul(dy, *a_)};
}

template <Real T>
Tensor<T> MatMulOp<T>::forward(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> y = matmul(a, b);
  a_ = a;
  b_ = b;
  return y;
}

template <Real T>
std::pair<Tensor<T>, Tensor<T>> MatMulOp<T>::vjp(const Tensor<T>& dy) const {
  if (!a_) not_run("matmul");
  return {matmul(dy, transpose(b_)), matmul(transpose(*a_), dy)};
}

template <Real T>
Tensor<T> SoftmaxOp<T>::forward(const Tensor<T>& x) {
  y_ = softmax_last(x);
  return *y_;
}

template <Real T>
Tensor<T> SoftmaxOp<T>::vjp(const Tensor<T>& dy) const {
  if (!y_) not_run("softmax");
  if (!dy.same_shape(*y_)) throw DimensionError("softmax vjp: cotangent shape mismatch");
  const std::size_t n = y_->dims().back();
  const std::size_t rows = y_->numel() / n;
  Tensor<T> dx = Tensor<T>::zeros_like(dy);
  for (std::size_t r = 0; r < rows; ++r) {
    T dot{0};
    for (std::size_t i = 0; i < n; ++i) dot += dy[r * n + i] * (*y_)[r * n + i];
    for (std::size_t i = 0; i < n; ++i) dx[r * n + i] = (*y_)[r * n + i] * (dy[r * n + i] - dot);
  }
  return dx;
}

template <Real T>
Tensor<T> GlobalAvgPoolOp<T>::forward(const Tensor<T>& x) {
  require_rank4(x, "global_avg_pool");
  const std::size_t planes = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1)});
  for (std::size_t p = 0; p < planes; ++p) {
    T sum{0};
    for (std::size_t i = 0; i < plane; ++i) sum += x[p * plane + i];
    y[p] = sum / static_cast<T>(plane);
  }
  in_dims_ = x.dims();
  return y;
}

template <Real T>
Tensor<T> GlobalAvgPoolOp<T>::vjp(const Tensor<T>& dy) const {
  if (in_dims_.empty()) not_run("global_avg_pool");
  const std::size_t planes = in_dims_[0] * in_dims_[1], plane = in_dims_[2] * in_dims_[3];
  if (dy.numel() != planes) throw DimensionError("global_avg_pool vjp: cotangent shape mismatch");
  Tensor<T> dx(in_dims_);
  for (std::size_t p = 0; p < planes; ++p) {
    const T share = dy[p] / static_cast<T>(plane);
    for (std::size_t i = 0; i < plane; ++i) dx[p * plane + i] = share;
  }
  return dx;
}

#define TFORMER_INSTANTIATE(T)                                                                   \
  template void require_finite<T>(const Tensor<T>&, const char*);                                \
  template void require_rank4<T>(const Tensor<T>&, const char*);                                 \
  template Tensor<T> pool2d<T>(const Tensor<T>&, const PoolSpec&);                               \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&,                               \
                               const std::optional<Tensor<T>>&, const ConvOptions&);             \
  template Tensor<T> layer_norm_channels<T>(const Tensor<T>&, const Tensor<T>&,                  \
                                            const Tensor<T>&, double);                           \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                             \
  template Tensor<T> softmax_last<T>(const Tensor<T>&);                                          \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                          \
  template std::vector<Tensor<T>> split_channels<T>(const Tensor<T>&,                            \
                                                    const std::vector<std::size_t>&);            \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                       \
  template class Conv2dOp<T>;                                                                    \
  template class Pool2dOp<T>;                                                                    \
  template class LayerNormOp<T>;                                                                 \
  template class GeluOp<T>;                                                                      \
  template class AddOp<T>;                                                                       \
  template class MulOp<T>;                                                                       \
  template class MatMulOp<T>;                                                                    \
  template class SoftmaxOp<T>;                                                                   \
  template class GlobalAvgPoolOp<T>;

TFORMER_INSTANTIATE(float)
TFORMER_INSTANTIATE(double)

#undef TFORMER_INSTANTIATE

}  // namespace tformer
