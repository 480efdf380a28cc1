#include "tformer/layers.hpp"

#include <algorithm>

namespace tformer {

template <Real T>
void accumulate(Tensor<T>& into, const Tensor<T>& grad) {
  if (!into.same_shape(grad)) {
    throw DimensionError("gradient shape " + shape_str(grad.dims()) + " does not match " +
                         shape_str(into.dims()));
  }
  auto dst = into.data();
  auto src = grad.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <Real T>
void accumulate(std::optional<Tensor<T>>& into, const std::optional<Tensor<T>>& grad) {
  if (into && grad) accumulate(*into, *grad);
}

template <Real T>
Tensor<T> init_weight(Shape dims, Rng* rng) {
  Tensor<T> t(std::move(dims));
  if (rng) {
    for (auto& v : t.data()) v = static_cast<T>(rng->truncated_normal(kInitStd));
  }
  return t;
}

template <Real T>
NormWeights<T> NormWeights<T>::init(std::size_t channels) {
  return {Tensor<T>::full({channels}, T{1}), Tensor<T>({channels})};
}

template <Real T>
HybridWeights<T> HybridWeights<T>::init(std::size_t channels, const NLModuleConfig& nl, bool bias,
                                        Rng* rng) {
  nl.partition(channels);
  HybridWeights w{nl, init_weight<T>({channels, channels, 1, 1}, rng), std::nullopt};
  if (bias) w.pw_bias = Tensor<T>({channels});
  return w;
}

template <Real T>
FFNWeights<T> FFNWeights<T>::init(std::size_t channels, const PCSFFNConfig& cfg, bool bias,
                                  Rng* rng) {
  cfg.validate(channels);
  const std::size_t hidden = cfg.ratio * channels;
  FFNWeights w;
  w.cfg = cfg;
  if (cfg.kind == FFNKind::ghost) {
    const std::size_t h = hidden / 2, c = channels / 2;
    w.fc1_weight = init_weight<T>({h, channels, 1, 1}, rng);
    if (bias) w.fc1_bias = Tensor<T>({h});
    w.fc1_cheap_weight = init_weight<T>({h, 1, 3, 3}, rng);
    if (bias) w.fc1_cheap_bias = Tensor<T>({h});
    w.fc2_weight = init_weight<T>({c, hidden, 1, 1}, rng);
    if (bias) w.fc2_bias = Tensor<T>({c});
    w.fc2_cheap_weight = init_weight<T>({c, 1, 3, 3}, rng);
    if (bias) w.fc2_cheap_bias = Tensor<T>({c});
    return w;
  }
  w.fc1_weight = init_weight<T>({hidden, channels / cfg.groups, 1, 1}, rng);
  if (bias) w.fc1_bias = Tensor<T>({hidden});
  w.fc2_weight = init_weight<T>({channels, hidden / cfg.groups, 1, 1}, rng);
  if (bias) w.fc2_bias = Tensor<T>({channels});
  return w;
}

template <Real T>
PatchEmbedWeights<T> PatchEmbedWeights<T>::init(const PatchEmbedConfig& cfg, bool bias, Rng* rng) {
  PatchEmbedWeights w;
  w.cfg = cfg;
  w.weight = init_weight<T>({cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel}, rng);
  if (bias) w.bias = Tensor<T>({cfg.out_channels});
  w.norm = NormWeights<T>::init(cfg.out_channels);
  return w;
}

template <Real T>
BlockWeights<T> BlockWeights<T>::init(std::size_t channels, const NLModuleConfig& nl,
                                      const PCSFFNConfig& ffn, bool bias, Rng* rng) {
  BlockWeights w;
  w.norm1 = NormWeights<T>::init(channels);
  w.hybrid = HybridWeights<T>::init(channels, nl, bias, rng);
  w.norm2 = NormWeights<T>::init(channels);
  w.ffn = FFNWeights<T>::init(channels, ffn, bias, rng);
  return w;
}

std::vector<std::size_t> channel_shuffle_order(std::size_t channels, std::size_t groups) {
  if (groups == 0 || channels % groups != 0) {
    throw ConfigError("channel_shuffle: " + std::to_string(channels) +
                      " channels not divisible by " + std::to_string(groups) + " groups");
  }
  const std::size_t per_group = channels / groups;
  std::vector<std::size_t> source(channels);
  for (std::size_t i = 0; i < per_group; ++i) {
    for (std::size_t j = 0; j < groups; ++j) source[i * groups + j] = j * per_group + i;
  }
  return source;
}

template <Real T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::size_t groups) {
  require_rank4(x, "channel_shuffle");
  const auto source = channel_shuffle_order(x.dim(1), groups);
  const std::size_t C = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> y = Tensor<T>::zeros_like(x);
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t k = 0; k < C; ++k) {
      const T* src = x.data().data() + (n * C + source[k]) * plane;
      std::copy(src, src + plane, y.data().data() + (n * C + k) * plane);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Op instances

namespace {
[[noreturn]] void not_run(const char* op) {
  throw StateError(std::string(op) + ": vjp requested before forward");
}
}  // namespace

template <Real T>
Tensor<T> NLModuleOp<T>::forward(const Tensor<T>& x, const NLModuleConfig& cfg) {
  require_rank4(x, "nl_module");
  partition_ = cfg.partition(x.dim(1));
  const auto specs = cfg.pool_specs();
  auto parts = split_channels(x, partition_);
  pools_.clear();
  pools_.reserve(specs.size());
  std::vector<Tensor<T>> pooled;
  pooled.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    pools_.emplace_back(specs[i]);
    pooled.push_back(pools_.back().forward(parts[i]));
  }
  return concat_channels(pooled);
}

template <Real T>
Tensor<T> NLModuleOp<T>::vjp(const Tensor<T>& dy) const {
  if (pools_.empty()) not_run("nl_module");
  auto parts = split_channels(dy, partition_);
  std::vector<Tensor<T>> grads;
  grads.reserve(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) grads.push_back(pools_[i].vjp(parts[i]));
  return concat_channels(grads);
}

template <Real T>
Tensor<T> ChannelShuffleOp<T>::forward(const Tensor<T>& x, std::size_t groups) {
  Tensor<T> y = channel_shuffle(x, groups);
  groups_ = groups;
  return y;
}

template <Real T>
Tensor<T> ChannelShuffleOp<T>::vjp(const Tensor<T>& dy) const {
  if (groups_ == 0) not_run("channel_shuffle");
  return channel_shuffle(dy, dy.dim(1) / groups_);
}

template <Real T>
Tensor<T> HybridLayerOp<T>::forward(const HybridWeights<T>& w, const Tensor<T>& x) {
  require_rank4(x, "hybrid_layer");
  if (x.dim(1) != w.channels()) {
    throw DimensionError("hybrid_layer: input has " + std::to_string(x.dim(1)) +
                         " channels, weights expect " + std::to_string(w.channels()));
  }
  return pw_.forward(nl_.forward(x, w.nl), w.pw_weight, w.pw_bias);
}

template <Real T>
Tensor<T> HybridLayerOp<T>::vjp(const Tensor<T>& dy, HybridWeights<T>& grads) const {
  auto g = pw_.vjp(dy);
  accumulate(grads.pw_weight, g.weight);
  accumulate(grads.pw_bias, g.bias);
  return nl_.vjp(g.input);
}

template <Real T>
Tensor<T> PCSFFNOp<T>::forward(const FFNWeights<T>& w, const Tensor<T>& x) {
  require_rank4(x, "pcs_ffn");
  w.cfg.validate(x.dim(1));
  if (x.dim(1) != w.channels()) {
    throw DimensionError("pcs_ffn: input has " + std::to_string(x.dim(1)) +
                         " channels, weights expect " + std::to_string(w.channels()));
  }
  ghost_ = w.cfg.kind == FFNKind::ghost;
  fc1_ = Conv2dOp<T>({1, 0, w.cfg.groups});
  fc2_ = Conv2dOp<T>({1, 0, w.cfg.groups});
  if (ghost_) {
    if (!w.fc1_cheap_weight || !w.fc2_cheap_weight) {
      throw ConfigError("ghost FFN weights lack the depthwise branch");
    }
    fc1_cheap_ = Conv2dOp<T>({1, 1, w.fc1_weight.dim(0)});
    fc2_cheap_ = Conv2dOp<T>({1, 1, w.fc2_weight.dim(0)});
    Tensor<T> p1 = fc1_.forward(x, w.fc1_weight, w.fc1_bias);
    Tensor<T> c1 = fc1_cheap_.forward(p1, *w.fc1_cheap_weight, w.fc1_cheap_bias);
    Tensor<T> h = act_.forward(concat_channels<T>({p1, c1}));
    Tensor<T> p2 = fc2_.forward(h, w.fc2_weight, w.fc2_bias);
    Tensor<T> c2 = fc2_cheap_.forward(p2, *w.fc2_cheap_weight, w.fc2_cheap_bias);
    return concat_channels<T>({p2, c2});
  }
  Tensor<T> h = fc1_.forward(x, w.fc1_weight, w.fc1_bias);
  h = act_.forward(h);
  h = shuffle_.forward(h, w.cfg.groups);
  return fc2_.forward(h, w.fc2_weight, w.fc2_bias);
}

template <Real T>
Tensor<T> PCSFFNOp<T>::vjp(const Tensor<T>& dy, FFNWeights<T>& grads) const {
  if (ghost_) {
    // Each ghost projection outputs [p, dw(p)], so p collects both halves.
    const std::size_t c = dy.dim(1) / 2;
    auto d2 = split_channels(dy, {c, dy.dim(1) - c});
    auto gc2 = fc2_cheap_.vjp(d2[1]);
    accumulate(*grads.fc2_cheap_weight, gc2.weight);
    accumulate(grads.fc2_cheap_bias, gc2.bias);
    auto g2 = fc2_.vjp(add(d2[0], gc2.input));
    accumulate(grads.fc2_weight, g2.weight);
    accumulate(grads.fc2_bias, g2.bias);
    Tensor<T> dh = act_.vjp(g2.input);
    const std::size_t h = dh.dim(1) / 2;
    auto d1 = split_channels(dh, {h, dh.dim(1) - h});
    auto gc1 = fc1_cheap_.vjp(d1[1]);
    accumulate(*grads.fc1_cheap_weight, gc1.weight);
    accumulate(grads.fc1_cheap_bias, gc1.bias);
    auto g1 = fc1_.vjp(add(d1[0], gc1.input));
    accumulate(grads.fc1_weight, g1.weight);
    accumulate(grads.fc1_bias, g1.bias);
    return g1.input;
  }
  auto g2 = fc2_.vjp(dy);
  accumulate(grads.fc2_weight, g2.weight);
  accumulate(grads.fc2_bias, g2.bias);
  Tensor<T> dh = act_.vjp(shuffle_.vjp(g2.input));
  auto g1 = fc1_.vjp(dh);
  accumulate(grads.fc1_weight, g1.weight);
  accumulate(grads.fc1_bias, g1.bias);
  return g1.input;
}

template <Real T>
Tensor<T> PatchEmbedOp<T>::forward(const PatchEmbedWeights<T>& w, const Tensor<T>& x) {
  require_rank4(x, "patch_embed");
  const std::size_t min_side = w.cfg.kernel - 2 * std::min(w.cfg.padding(), w.cfg.kernel / 2);
  if (x.dim(2) < min_side || x.dim(3) < min_side) {
    throw DimensionError("patch_embed: input " + shape_str(x.dims()) + " smaller than kernel " +
                         std::to_string(w.cfg.kernel));
  }
  conv_ = Conv2dOp<T>({w.cfg.stride, w.cfg.padding(), 1});
  return norm_.forward(conv_.forward(x, w.weight, w.bias), w.norm.gamma, w.norm.beta);
}

template <Real T>
Tensor<T> PatchEmbedOp<T>::vjp(const Tensor<T>& dy, PatchEmbedWeights<T>& grads) const {
  auto gn = norm_.vjp(dy);
  accumulate(grads.norm.gamma, gn.gamma);
  accumulate(grads.norm.beta, gn.beta);
  auto gc = conv_.vjp(gn.input);
  accumulate(grads.weight, gc.weight);
  accumulate(grads.bias, gc.bias);
  return gc.input;
}

template <Real T>
Tensor<T> BlockOp<T>::forward(const BlockWeights<T>& w, const Tensor<T>& x) {
  Tensor<T> x1 = add(x, hybrid_.forward(w.hybrid, norm1_.forward(x, w.norm1.gamma, w.norm1.beta)));
  Tensor<T> out = add(x1, ffn_.forward(w.ffn, norm2_.forward(x1, w.norm2.gamma, w.norm2.beta)));
  ran_ = true;
  TFORMER_DEBUG_FINITE(out, "tformer_block");
  return out;
}

template <Real T>
Tensor<T> BlockOp<T>::vjp(const Tensor<T>& dy, BlockWeights<T>& grads) const {
  if (!ran_) not_run("tformer_block");
  // out = x1 + ffn(norm2(x1)): dx1 = dy + norm2^T ffn^T dy
  auto gn2 = norm2_.vjp(ffn_.vjp(dy, grads.ffn));
  accumulate(grads.norm2.gamma, gn2.gamma);
  accumulate(grads.norm2.beta, gn2.beta);
  Tensor<T> dx1 = add(dy, gn2.input);
  auto gn1 = norm1_.vjp(hybrid_.vjp(dx1, grads.hybrid));
  accumulate(grads.norm1.gamma, gn1.gamma);
  accumulate(grads.norm1.beta, gn1.beta);
  return add(dx1, gn1.input);
}

// ---------------------------------------------------------------------------
// Stateless wrappers

template <Real T>
Tensor<T> nl_module(const Tensor<T>& x, const NLModuleConfig& cfg) {
  NLModuleOp<T> op;
  return op.forward(x, cfg);
}

template <Real T>
Tensor<T> hybrid_layer(const Tensor<T>& x, const HybridWeights<T>& w) {
  HybridLayerOp<T> op;
  return op.forward(w, x);
}

template <Real T>
Tensor<T> pcs_ffn(const Tensor<T>& x, const FFNWeights<T>& w) {
  PCSFFNOp<T> op;
  return op.forward(w, x);
}

template <Real T>
Tensor<T> patch_embed(const Tensor<T>& x, const PatchEmbedWeights<T>& w) {
  PatchEmbedOp<T> op;
  return op.forward(w, x);
}

template <Real T>
Tensor<T> tformer_block(const Tensor<T>& x, const BlockWeights<T>& w) {
  BlockOp<T> op;
  return op.forward(w, x);
}

#define TFORMER_INSTANTIATE(T)                                                             \
  template void accumulate<T>(Tensor<T>&, const Tensor<T>&);                               \
  template void accumulate<T>(std::optional<Tensor<T>>&, const std::optional<Tensor<T>>&); \
  template Tensor<T> init_weight<T>(Shape, Rng*);                                          \
  template struct NormWeights<T>;                                                          \
  template struct HybridWeights<T>;                                                        \
  template struct FFNWeights<T>;                                                           \
  template struct PatchEmbedWeights<T>;                                                    \
  template struct BlockWeights<T>;                                                         \
  template Tensor<T> channel_shuffle<T>(const Tensor<T>&, std::size_t);                    \
  template Tensor<T> nl_module<T>(const Tensor<T>&, const NLModuleConfig&);                \
  template Tensor<T> hybrid_layer<T>(const Tensor<T>&, const HybridWeights<T>&);           \
  template Tensor<T> pcs_ffn<T>(const Tensor<T>&, const FFNWeights<T>&);                   \
  template Tensor<T> patch_embed<T>(const Tensor<T>&, const PatchEmbedWeights<T>&);        \
  template Tensor<T> tformer_block<T>(const Tensor<T>&, const BlockWeights<T>&);           \
  template class NLModuleOp<T>;                                                            \
  template class ChannelShuffleOp<T>;                                                      \
  template class HybridLayerOp<T>;                                                         \
  template class PCSFFNOp<T>;                                                              \
  template class PatchEmbedOp<T>;                                                          \
  template class BlockOp<T>;

TFORMER_INSTANTIATE(float)
TFORMER_INSTANTIATE(double)

#undef TFORMER_INSTANTIATE

}  // namespace tformer
