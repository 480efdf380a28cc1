#pragma once

// Desk-scale training: a procedural four-class image set, softmax
// cross-entropy, SGD with momentum and the Micro training demo.

#include <cstdint>
#include <span>
#include <vector>

#include "tformer/model.hpp"

namespace tformer {

inline constexpr std::size_t kToyClasses = 4;
inline constexpr std::size_t kToySide = 32;

/// Class k of sample i is i % 4: horizontal stripes, vertical stripes,
/// checkerboard, linear gradient.
struct ToyDataset {
  TensorF images;  // [n, 3, 32, 32], values in [0, 1]
  std::vector<std::size_t> labels;
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }

  /// Images and labels of the given sample indices, in that order.
  template <Real T>
  Tensor<T> gather(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> indices) const;
};

/// Pure function of (seed, n); n must be a positive multiple of 4.
/// Sample i only depends on seed and i.
ToyDataset synth_dataset(std::uint64_t seed, std::size_t n);

template <Real T>
struct LossResult {
  T loss{};
  Tensor<T> dlogits;  // d(mean loss) / d(logits)
};

/// Mean over the batch of -log softmax(logits)[label], max-subtracted.
template <Real T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels);

/// Fraction of rows whose arg-max (first on ties) equals the label.
template <Real T>
double accuracy(const Tensor<T>& logits, std::span<const std::size_t> labels);

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t steps = 500;
  std::size_t batch_size = 32;

  /// lr > 0, 0 <= momentum < 1, steps and batch_size >= 1.
  void validate() const;
};

/// v <- momentum * v + g; p <- p - lr * v.
template <Real T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity,
              double lr, double momentum);

/// Applies sgd_step to every tensor of a weight struct; velocity has the same structure.
template <Real T>
void sgd_step(TFormerWeights<T>& params, const TFormerWeights<T>& grads,
              TFormerWeights<T>& velocity, const SgdConfig& cfg);

struct TrainDemoConfig {
  std::uint64_t seed = 0;
  std::size_t samples = 256;
  SgdConfig sgd;
};

struct TrainHistory {
  /// Full-dataset accuracy before training and after every epoch (plus the
  /// final step when it does not end an epoch).
  std::vector<double> accuracy;
  std::vector<std::size_t> accuracy_step;
  /// Mini-batch loss of every step.
  std::vector<double> loss;
  double final_accuracy = 0;
};

/// Trains a Micro model (4 classes, float) on synth_dataset(seed, samples).
/// Bit-reproducible for a fixed config.
TrainHistory train_demo(const TrainDemoConfig& cfg, TFormerModel<float>* trained = nullptr);

/// Share of windows [s, s + window] where the loss, averaged over the
/// `smooth` steps ending at each point, is lower at the end than at the start.
double window_decrease_fraction(std::span<const double> loss, std::size_t window = 100,
                                std::size_t smooth = 8);

}  // namespace tformer
