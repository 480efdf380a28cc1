#pragma once

// Building blocks: the nonlearnable pooling module, hybrid token mixer,
// channel shuffle, partially connected and shuffled FFN, patch embedding and
// the pre-norm residual block.
//
// Each weight struct enumerates its tensors through visit(prefix, fn) with
// the stable names used by the weight archive. Gradient containers are the
// same structs; the *Op classes accumulate into them.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "tformer/config.hpp"
#include "tformer/rng.hpp"
#include "tformer/vjp.hpp"

namespace tformer {

/// Conv/dense weights draw from a truncated normal with this stddev.
inline constexpr double kInitStd = 0.02;

template <Real T>
void accumulate(Tensor<T>& into, const Tensor<T>& grad);

template <Real T>
void accumulate(std::optional<Tensor<T>>& into, const std::optional<Tensor<T>>& grad);

/// Fills a fresh tensor from the init distribution, or zeros when rng is null.
template <Real T>
Tensor<T> init_weight(Shape dims, Rng* rng);

template <Real T>
struct NormWeights {
  Tensor<T> gamma;
  Tensor<T> beta;

  static NormWeights init(std::size_t channels);

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <Real T>
struct HybridWeights {
  NLModuleConfig nl;
  Tensor<T> pw_weight;  // [D, D, 1, 1]
  std::optional<Tensor<T>> pw_bias;

  static HybridWeights init(std::size_t channels, const NLModuleConfig& nl, bool bias, Rng* rng);

  std::size_t channels() const { return pw_weight.dim(0); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", pw_weight);
    if (pw_bias) f(prefix + ".bias", *pw_bias);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".weight", pw_weight);
    if (pw_bias) f(prefix + ".bias", *pw_bias);
  }
};

/// For the ghost kind fc*.weight only produces half of each projection's
/// outputs ([rD/2, D] and [D/2, rD]); fc*.cheap.weight is the depthwise 3x3
/// that derives the other half.
template <Real T>
struct FFNWeights {
  PCSFFNConfig cfg;
  Tensor<T> fc1_weight;  // [rD, D/g, 1, 1]
  std::optional<Tensor<T>> fc1_bias;
  std::optional<Tensor<T>> fc1_cheap_weight;  // ghost: [rD/2, 1, 3, 3]
  std::optional<Tensor<T>> fc1_cheap_bias;
  Tensor<T> fc2_weight;  // [D, rD/g, 1, 1]
  std::optional<Tensor<T>> fc2_bias;
  std::optional<Tensor<T>> fc2_cheap_weight;  // ghost: [D/2, 1, 3, 3]
  std::optional<Tensor<T>> fc2_cheap_bias;

  static FFNWeights init(std::size_t channels, const PCSFFNConfig& cfg, bool bias, Rng* rng);

  std::size_t channels() const {
    return cfg.kind == FFNKind::ghost ? 2 * fc2_weight.dim(0) : fc2_weight.dim(0);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, const std::string& prefix, F& f) {
    f(prefix + ".fc1.weight", s.fc1_weight);
    if (s.fc1_bias) f(prefix + ".fc1.bias", *s.fc1_bias);
    if (s.fc1_cheap_weight) f(prefix + ".fc1.cheap.weight", *s.fc1_cheap_weight);
    if (s.fc1_cheap_bias) f(prefix + ".fc1.cheap.bias", *s.fc1_cheap_bias);
    f(prefix + ".fc2.weight", s.fc2_weight);
    if (s.fc2_bias) f(prefix + ".fc2.bias", *s.fc2_bias);
    if (s.fc2_cheap_weight) f(prefix + ".fc2.cheap.weight", *s.fc2_cheap_weight);
    if (s.fc2_cheap_bias) f(prefix + ".fc2.cheap.bias", *s.fc2_cheap_bias);
  }
};

template <Real T>
struct PatchEmbedWeights {
  PatchEmbedConfig cfg;
  Tensor<T> weight;  // [out, in, k, k]
  std::optional<Tensor<T>> bias;
  NormWeights<T> norm;

  static PatchEmbedWeights init(const PatchEmbedConfig& cfg, bool bias, Rng* rng);

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    if (bias) f(prefix + ".bias", *bias);
    norm.visit(prefix + ".norm", f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".weight", weight);
    if (bias) f(prefix + ".bias", *bias);
    norm.visit(prefix + ".norm", f);
  }
};

template <Real T>
struct BlockWeights {
  NormWeights<T> norm1;
  HybridWeights<T> hybrid;
  NormWeights<T> norm2;
  FFNWeights<T> ffn;

  static BlockWeights init(std::size_t channels, const NLModuleConfig& nl, const PCSFFNConfig& ffn,
                           bool bias, Rng* rng);

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + ".norm1", f);
    hybrid.visit(prefix + ".hybrid", f);
    norm2.visit(prefix + ".norm2", f);
    ffn.visit(prefix + ".ffn", f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    norm1.visit(prefix + ".norm1", f);
    hybrid.visit(prefix + ".hybrid", f);
    norm2.visit(prefix + ".norm2", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

/// Same structure with every tensor zeroed; used as a gradient accumulator.
template <class W>
W zeros_like_weights(const W& w) {
  W out = w;
  out.visit("", [](const std::string&, auto& t) { std::fill(t.data().begin(), t.data().end(), typename std::remove_cvref_t<decltype(t)>::value_type{}); });
  return out;
}

/// Learnable scalars in a weight struct.
template <class W>
std::size_t parameter_count(const W& w) {
  std::size_t n = 0;
  w.visit("", [&](const std::string&, const auto& t) { n += t.numel(); });
  return n;
}

// ---------------------------------------------------------------------------
// Stateless forward functions

/// Splits channels per cfg.partition, pools each slice with its (operator, scale), concatenates.
template <Real T>
Tensor<T> nl_module(const Tensor<T>& x, const NLModuleConfig& cfg);

/// nl_module followed by the pointwise convolution.
template <Real T>
Tensor<T> hybrid_layer(const Tensor<T>& x, const HybridWeights<T>& w);

/// View channels as (g, C/g), transpose to (C/g, g), flatten.
template <Real T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::size_t groups);

/// Output channel k of channel_shuffle reads input channel source[k].
std::vector<std::size_t> channel_shuffle_order(std::size_t channels, std::size_t groups);

/// Grouped 1x1 expand -> GELU -> channel shuffle -> grouped 1x1 compress
/// (ghost kind: ghost expand -> GELU -> ghost compress).
template <Real T>
Tensor<T> pcs_ffn(const Tensor<T>& x, const FFNWeights<T>& w);

/// Strided conv with padding kernel/2, then channel layer norm.
template <Real T>
Tensor<T> patch_embed(const Tensor<T>& x, const PatchEmbedWeights<T>& w);

/// x1 = x + hybrid(norm1(x)); out = x1 + ffn(norm2(x1)).
template <Real T>
Tensor<T> tformer_block(const Tensor<T>& x, const BlockWeights<T>& w);

// ---------------------------------------------------------------------------
// Op instances for training

template <Real T>
class NLModuleOp {
 public:
  Tensor<T> forward(const Tensor<T>& x, const NLModuleConfig& cfg);
  Tensor<T> vjp(const Tensor<T>& dy) const;

 private:
  std::vector<std::size_t> partition_;
  std::vector<Pool2dOp<T>> pools_;
};

template <Real T>
class ChannelShuffleOp {
 public:
  Tensor<T> forward(const Tensor<T>& x, std::size_t groups);
  /// The inverse permutation, i.e. a shuffle with C/g groups.
  Tensor<T> vjp(const Tensor<T>& dy) const;

 private:
  std::size_t groups_ = 0;
};

template <Real T>
class HybridLayerOp {
 public:
  Tensor<T> forward(const HybridWeights<T>& w, const Tensor<T>& x);
  Tensor<T> vjp(const Tensor<T>& dy, HybridWeights<T>& grads) const;

 private:
  NLModuleOp<T> nl_;
  Conv2dOp<T> pw_;
};

template <Real T>
class PCSFFNOp {
 public:
  Tensor<T> forward(const FFNWeights<T>& w, const Tensor<T>& x);
  Tensor<T> vjp(const Tensor<T>& dy, FFNWeights<T>& grads) const;

 private:
  bool ghost_ = false;
  Conv2dOp<T> fc1_;
  Conv2dOp<T> fc1_cheap_;
  GeluOp<T> act_;
  ChannelShuffleOp<T> shuffle_;
  Conv2dOp<T> fc2_;
  Conv2dOp<T> fc2_cheap_;
};

template <Real T>
class PatchEmbedOp {
 public:
  Tensor<T> forward(const PatchEmbedWeights<T>& w, const Tensor<T>& x);
  Tensor<T> vjp(const Tensor<T>& dy, PatchEmbedWeights<T>& grads) const;

 private:
  Conv2dOp<T> conv_;
  LayerNormOp<T> norm_;
};

template <Real T>
class BlockOp {
 public:
  Tensor<T> forward(const BlockWeights<T>& w, const Tensor<T>& x);
  Tensor<T> vjp(const Tensor<T>& dy, BlockWeights<T>& grads) const;

 private:
  LayerNormOp<T> norm1_;
  HybridLayerOp<T> hybrid_;
  LayerNormOp<T> norm2_;
  PCSFFNOp<T> ffn_;
  bool ran_ = false;
};

}  // namespace tformer
