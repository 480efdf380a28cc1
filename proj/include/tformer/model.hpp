#pragma once

// Hierarchical TFormer: per stage a patch embedding followed by `depth`
// blocks, then GAP -> layer norm -> dense classifier.
//
// Weight names (the archive contract), stages and blocks 0-based:
//   stage{i}.patch.weight / .bias / .norm.gamma / .norm.beta
//   stage{i}.block{j}.norm1.gamma / .norm1.beta
//   stage{i}.block{j}.hybrid.weight / .hybrid.bias
//   stage{i}.block{j}.norm2.gamma / .norm2.beta
//   stage{i}.block{j}.ffn.fc1.weight / .fc1.bias / .fc2.weight / .fc2.bias
//   head.norm.gamma / head.norm.beta / head.weight / head.bias
// Bias tensors are absent when the config disables biases.

#include <string>
#include <utility>
#include <vector>

#include "tformer/layers.hpp"

namespace tformer {

template <Real T>
struct HeadWeights {
  NormWeights<T> norm;
  Tensor<T> weight;  // [num_classes, C]
  std::optional<Tensor<T>> bias;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + ".norm", f);
    f(prefix + ".weight", weight);
    if (bias) f(prefix + ".bias", *bias);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    norm.visit(prefix + ".norm", f);
    f(prefix + ".weight", weight);
    if (bias) f(prefix + ".bias", *bias);
  }
};

template <Real T>
struct StageWeights {
  PatchEmbedWeights<T> patch;
  std::vector<BlockWeights<T>> blocks;
};

template <Real T>
struct TFormerWeights {
  std::vector<StageWeights<T>> stages;
  HeadWeights<T> head;

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
  static void visit_impl(Self& self, const std::string& prefix, F& f) {
    for (std::size_t i = 0; i < self.stages.size(); ++i) {
      const std::string stage = prefix + "stage" + std::to_string(i);
      self.stages[i].patch.visit(stage + ".patch", f);
      for (std::size_t j = 0; j < self.stages[i].blocks.size(); ++j) {
        self.stages[i].blocks[j].visit(stage + ".block" + std::to_string(j), f);
      }
    }
    self.head.visit(prefix + "head", f);
  }
};

struct ParameterRow {
  std::string name;
  std::size_t count = 0;
};

struct ParameterCount {
  std::size_t total = 0;
  std::vector<ParameterRow> rows;
};

template <Real T>
class TFormerModel {
 public:
  /// Initializes weights from rng (truncated normal 0.02, zero biases, unit
  /// norm gains); a null rng gives an all-zero skeleton with the right shapes.
  static TFormerModel build(const TFormerConfig& cfg, Rng* rng);

  const TFormerConfig& config() const { return config_; }
  const TFormerWeights<T>& weights() const { return weights_; }
  TFormerWeights<T>& weights() { return weights_; }

  /// Logits [N, num_classes]. H and W must be divisible by the total patch stride.
  Tensor<T> forward(const Tensor<T>& x) const;

  /// Output of every stage, in order.
  std::vector<Tensor<T>> stage_outputs(const Tensor<T>& x) const;

  /// Weight names in visiting order.
  std::vector<std::string> parameter_names() const;

  /// Exact count by enumerating tensors; bias tensors skipped when include_bias is false.
  ParameterCount count_parameters(bool include_bias = true) const;

  /// Name -> tensor pointer for every weight, in visiting order.
  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor<T>*>> named_tensors() const;

 private:
  TFormerConfig config_;
  TFormerWeights<T> weights_;
};

template <Real T>
TFormerModel<T> build_variant(Variant v, std::size_t num_classes, Rng& rng);

/// Name and shape of every weight tensor a config produces, in visiting
/// order, derived from the config alone.
std::vector<std::pair<std::string, Shape>> weight_layout(const TFormerConfig& cfg);

/// Throws DimensionError unless x is [N, in_channels, H, W] with H, W divisible by the stride.
void check_model_input(const TFormerConfig& cfg, const Shape& dims);

/// Reverse-mode pass over the whole network.
template <Real T>
class ModelOp {
 public:
  Tensor<T> forward(const TFormerModel<T>& model, const Tensor<T>& x);
  /// Accumulates weight gradients into `grads` and returns d(input).
  Tensor<T> vjp(const Tensor<T>& dlogits, TFormerWeights<T>& grads) const;

 private:
  std::vector<PatchEmbedOp<T>> patches_;
  std::vector<std::vector<BlockOp<T>>> blocks_;
  GlobalAvgPoolOp<T> gap_;
  LayerNormOp<T> head_norm_;
  MatMulOp<T> head_fc_;
  bool ran_ = false;
};

}  // namespace tformer
