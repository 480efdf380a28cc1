#pragma once

// Central finite differences against the hand-written VJPs, always in f64.
// Layer checks use the scalar sum(probe * layer(x)) with a random probe;
// the model check uses the cross-entropy loss. Relative error is
// |a - n| / max(1, |a|, |n|).

#include <cstdint>
#include <string>
#include <vector>

#include "tformer/model.hpp"

namespace tformer {

enum class LayerKind {
  pointwise_conv,
  grouped_conv,
  avg_pool,
  max_pool,
  layer_norm,
  gelu,
  nl_module,
  channel_shuffle,
  hybrid,
  pcs_ffn,
  ghost_ffn,
  patch_embed,
  block,
};

std::string layer_kind_name(LayerKind kind);

struct GradcheckOptions {
  double eps = 1e-5;
  /// Tensors larger than this are checked on a seeded sample of coordinates.
  std::size_t max_coords = 64;
  /// Max-pool inputs are redrawn until every window's top two values differ by this much.
  double pool_margin = 1e-3;
};

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0;
  double threshold = 0;
  std::size_t coordinates = 0;

  bool passed() const { return max_rel_error <= threshold; }
};

double relative_error(double analytic, double numeric);

/// Checks every input and parameter of one layer. Input is [N, C, H, W];
/// the layer's own hyperparameters are fixed per kind (see gradcheck.cpp).
GradcheckResult gradcheck(LayerKind kind, const Shape& input, std::uint64_t seed,
                          const GradcheckOptions& opts = {});

/// Cross-entropy gradient of a Micro model at `per_tensor` random coordinates of every weight.
GradcheckResult gradcheck_model(std::uint64_t seed, std::size_t per_tensor = 5,
                                double eps = 1e-6);

/// Max error allowed for each layer kind (pointwise conv is held tighter).
double gradcheck_threshold(LayerKind kind);
inline constexpr double kModelGradcheckThreshold = 1e-3;

/// Every layer kind at small shapes plus the model spot check.
std::vector<GradcheckResult> gradcheck_suite(std::uint64_t seed);

/// True when each max window of x (stride 1, same padding) has a clear winner.
bool max_windows_clear(const TensorD& x, std::size_t kernel, double margin);

}  // namespace tformer
