#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "tformer/ops.hpp"

namespace tformer {

/// Pooling operators and kernel sizes of the nonlearnable module. Channels are
/// split into one partition per (operator, scale) pair, operators-major
/// (avg before max) with scales ascending inside each operator.
struct NLModuleConfig {
  std::vector<PoolKind> operators{PoolKind::avg, PoolKind::max};
  std::vector<std::size_t> scales{3, 5, 7, 9, 11};

  std::size_t num_parts() const { return operators.size() * scales.size(); }

  /// Stride-1 same-size pooling specs in partition order.
  std::vector<PoolSpec> pool_specs() const;

  /// Channel count of each partition for D input channels.
  std::vector<std::size_t> partition(std::size_t channels) const;

  /// Non-empty, no duplicate operators, avg listed before max, scales odd and strictly ascending.
  void validate() const;

  friend bool operator==(const NLModuleConfig&, const NLModuleConfig&) = default;
};

/// Even split of `channels` into `parts`; the first channels % parts partitions get one extra.
std::vector<std::size_t> partition_channels(std::size_t channels, std::size_t parts);

/// standard: dense expand/compress. pcs: grouped projections with a channel
/// shuffle between them. ghost: each projection computes half its outputs
/// with a dense 1x1 and the other half with a depthwise 3x3 on that half.
enum class FFNKind { standard, ghost, pcs };

std::string ffn_kind_name(FFNKind kind);
FFNKind parse_ffn_kind(std::string_view name);

/// Expansion ratio and group count of the partially connected, shuffled FFN.
/// groups == 1 is the standard fully connected FFN.
struct PCSFFNConfig {
  std::size_t ratio = 4;
  std::size_t groups = 2;
  FFNKind kind = FFNKind::pcs;

  /// Checks ratio, groups >= 1 and divisibility of D and ratio*D by groups.
  /// standard and ghost need groups == 1; ghost also needs D and ratio*D even.
  void validate(std::size_t channels) const;

  friend bool operator==(const PCSFFNConfig&, const PCSFFNConfig&) = default;
};

struct PatchEmbedConfig {
  std::size_t in_channels = 3;
  std::size_t out_channels = 64;
  std::size_t kernel = 7;
  std::size_t stride = 4;

  std::size_t padding() const { return kernel / 2; }

  friend bool operator==(const PatchEmbedConfig&, const PatchEmbedConfig&) = default;
};

struct StageSpec {
  PatchEmbedConfig patch;
  std::size_t embed_dim = 64;
  std::size_t depth = 1;
  PCSFFNConfig ffn;
  NLModuleConfig nl;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct TFormerConfig {
  std::string variant = "custom";
  std::vector<StageSpec> stages;
  std::size_t num_classes = 1000;
  /// Conv, pointwise, FFN and head layers carry biases.
  bool bias = true;
  /// Square input side the variant is meant to run at.
  std::size_t image_size = 224;

  /// Product of patch strides; input sides must be divisible by it.
  std::size_t total_stride() const;

  void validate() const;

  friend bool operator==(const TFormerConfig&, const TFormerConfig&) = default;
};

enum class Variant { S, M, L, Micro };

/// Accepts s/m/l/micro in any case.
Variant parse_variant(std::string_view name);
std::string variant_name(Variant v);

/// Stage schema of the S/M/L variants (dims 64/128/320/512, 7x7/4 then 3x3/2
/// patch embeds, FFN ratio 4 groups 2) and the two-stage Micro test variant.
TFormerConfig make_config(Variant v, std::size_t num_classes = 1000);

/// Canonical JSON text; keys sorted so equal configs serialize byte-identically.
std::string config_to_json(const TFormerConfig& cfg);
/// Throws ConfigError on malformed or invalid text.
TFormerConfig config_from_json(std::string_view text);

/// One row of the token-mixer ablation: which operators and scales are active.
struct NLAblationRow {
  std::string label;
  NLModuleConfig nl;
};

/// The ten operator/scale combinations of the nonlearnable-module ablation.
std::vector<NLAblationRow> nl_ablation_rows();

struct FFNAblationRow {
  std::string label;
  PCSFFNConfig ffn;
};

/// The seven rows of the FFN ablation.
std::vector<FFNAblationRow> ffn_ablation_rows();

}  // namespace tformer
