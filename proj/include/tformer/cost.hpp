#pragma once

// Analytic parameter and multiply-add accounting. One madd is one
// multiply and one add counted together; pooling counts k^2 per output
// element (comparisons count like adds).
//
// The short per-head attention FLOP form divides by a head width `d` and
// leaves out the sum over heads. mha_cost reports it literally (d read as
// h) next to the head-summed form 4ND^2 + 2N^2D; comparisons use the latter.

#include <cstdint>
#include <string>
#include <vector>

#include "tformer/config.hpp"

namespace tformer {

struct MHACostSpec {
  std::uint64_t tokens = 0;  // N
  std::uint64_t dim = 0;     // D
  std::uint64_t heads = 1;   // h

  /// All positive and D divisible by h.
  void validate() const;
};

struct MHACost {
  std::uint64_t params = 0;
  std::uint64_t madds_literal = 0;
  std::uint64_t madds_corrected = 0;
};

struct LayerCost {
  std::uint64_t params = 0;
  std::uint64_t madds = 0;

  friend bool operator==(const LayerCost&, const LayerCost&) = default;
};

MHACost mha_cost(const MHACostSpec& spec);

/// Pooling on each partition plus the D x D pointwise projection.
/// `partition` gives the channels of each (operator, scale) pair in config order.
LayerCost hybrid_cost(std::uint64_t dim, std::uint64_t tokens, const NLModuleConfig& nl,
                      const std::vector<std::size_t>& partition, bool include_bias);

/// Same with the partition derived from the config.
LayerCost hybrid_cost(std::uint64_t dim, std::uint64_t tokens, const NLModuleConfig& nl,
                      bool include_bias);

/// Grouped expand/compress projections; groups == 1 is the dense FFN.
LayerCost ffn_cost(std::uint64_t dim, std::uint64_t tokens, std::uint64_t ratio,
                   std::uint64_t groups, bool include_bias);

/// Ghost-style FFN: each projection computes half of its outputs with a dense
/// 1x1 and derives the other half with a depthwise 3x3 on those.
LayerCost ghost_ffn_cost(std::uint64_t dim, std::uint64_t tokens, std::uint64_t ratio,
                         bool include_bias);

/// Dispatches on cfg.kind (standard and pcs share the grouped formula).
LayerCost ffn_cost(const PCSFFNConfig& cfg, std::uint64_t dim, std::uint64_t tokens,
                   bool include_bias);

struct CostRatios {
  double params = 0;  // R_P
  double madds = 0;   // R_F, against the corrected MHA count
};

/// MHA over hybrid at the same D and N.
CostRatios ratios(const MHACostSpec& spec, const NLModuleConfig& nl, bool include_bias = false);

struct CostRow {
  std::string component;
  std::uint64_t params = 0;
  std::uint64_t madds = 0;
};

struct CostReport {
  std::string convention = "madd";
  std::vector<CostRow> rows;
  CostRow totals{"total", 0, 0};
};

/// Walks the network for one H x W image. Norms (2 per element), activations
/// and the global pool (1 per element) plus norm parameters land in a single
/// "overhead" row; totals are the sum of all rows.
CostReport model_cost(const TFormerConfig& cfg, std::size_t height, std::size_t width,
                      bool include_bias = true);

/// Aligned text table: component, params, madds, then the totals line.
std::string format_table(const CostReport& report);
/// {"convention", "rows": [{"component","params","madds"}], "totals": {"params","madds"}}
std::string to_json(const CostReport& report, int indent = 2);

}  // namespace tformer
