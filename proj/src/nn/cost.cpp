#include "tformer/cost.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace tformer {

void MHACostSpec::validate() const {
  if (tokens == 0 || dim == 0 || heads == 0) throw ConfigError("MHA spec needs positive N, D and h");
  if (dim % heads != 0) {
    throw ConfigError("D=" + std::to_string(dim) + " not divisible by h=" + std::to_string(heads));
  }
}

MHACost mha_cost(const MHACostSpec& s) {
  s.validate();
  const std::uint64_t n = s.tokens, d = s.dim, per_head = s.dim / s.heads;
  MHACost c;
  c.params = 4 * d * d;
  c.madds_literal = 3 * n * d * per_head + 2 * n * n * per_head + n * d * d;
  c.madds_corrected = 4 * n * d * d + 2 * n * n * d;
  return c;
}

LayerCost hybrid_cost(std::uint64_t dim, std::uint64_t tokens, const NLModuleConfig& nl,
                      const std::vector<std::size_t>& partition, bool include_bias) {
  const auto specs = nl.pool_specs();
  if (partition.size() != specs.size()) {
    throw ConfigError("partition has " + std::to_string(partition.size()) + " entries for " +
                      std::to_string(specs.size()) + " pooling branches");
  }
  if (std::accumulate(partition.begin(), partition.end(), std::uint64_t{0}) != dim) {
    throw ConfigError("partition does not sum to D=" + std::to_string(dim));
  }
  LayerCost c;
  for (std::size_t j = 0; j < specs.size(); ++j) {
    const std::uint64_t k = specs[j].kernel;
    c.madds += partition[j] * tokens * k * k;
  }
  c.madds += dim * dim * tokens;
  c.params = dim * dim + (include_bias ? dim : 0);
  return c;
}

LayerCost hybrid_cost(std::uint64_t dim, std::uint64_t tokens, const NLModuleConfig& nl,
                      bool include_bias) {
  return hybrid_cost(dim, tokens, nl, nl.partition(dim), include_bias);
}

LayerCost ffn_cost(std::uint64_t dim, std::uint64_t tokens, std::uint64_t ratio,
                   std::uint64_t groups, bool include_bias) {
  PCSFFNConfig{ratio, groups}.validate(dim);
  const std::uint64_t dense = 2 * ratio * dim * dim / groups;
  return {dense + (include_bias ? (ratio + 1) * dim : 0), tokens * dense};
}

namespace {

LayerCost ghost_projection(std::uint64_t in, std::uint64_t out, std::uint64_t tokens) {
  const std::uint64_t primary = out / 2;
  const std::uint64_t cheap = out - primary;
  const std::uint64_t per_token = in * primary + cheap * 9;
  return {per_token, per_token * tokens};
}

}  // namespace

LayerCost ghost_ffn_cost(std::uint64_t dim, std::uint64_t tokens, std::uint64_t ratio,
                         bool include_bias) {
  if (dim == 0 || ratio == 0) throw ConfigError("ghost FFN needs D, r >= 1");
  const std::uint64_t hidden = ratio * dim;
  if (hidden % 2 != 0 || dim % 2 != 0) throw ConfigError("ghost FFN needs even D and rD");
  const LayerCost a = ghost_projection(dim, hidden, tokens);
  const LayerCost b = ghost_projection(hidden, dim, tokens);
  return {a.params + b.params + (include_bias ? hidden + dim : 0), a.madds + b.madds};
}

LayerCost ffn_cost(const PCSFFNConfig& cfg, std::uint64_t dim, std::uint64_t tokens,
                   bool include_bias) {
  cfg.validate(dim);
  return cfg.kind == FFNKind::ghost ? ghost_ffn_cost(dim, tokens, cfg.ratio, include_bias)
                                    : ffn_cost(dim, tokens, cfg.ratio, cfg.groups, include_bias);
}

CostRatios ratios(const MHACostSpec& spec, const NLModuleConfig& nl, bool include_bias) {
  const MHACost m = mha_cost(spec);
  const LayerCost h = hybrid_cost(spec.dim, spec.tokens, nl, include_bias);
  return {static_cast<double>(m.params) / static_cast<double>(h.params),
          static_cast<double>(m.madds_corrected) / static_cast<double>(h.madds)};
}

CostReport model_cost(const TFormerConfig& cfg, std::size_t height, std::size_t width,
                      bool include_bias) {
  cfg.validate();
  const std::size_t stride = cfg.total_stride();
  if (height == 0 || width == 0 || height % stride != 0 || width % stride != 0) {
    throw DimensionError("input " + std::to_string(height) + "x" + std::to_string(width) +
                         " is not divisible by the total stride " + std::to_string(stride));
  }
  const bool bias = cfg.bias && include_bias;
  CostReport report;
  CostRow overhead{"overhead", 0, 0};
  auto norm = [&](std::uint64_t channels, std::uint64_t tokens) {
    overhead.params += 2 * channels;
    overhead.madds += 2 * channels * tokens;
  };

  std::uint64_t h = height, w = width;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& st = cfg.stages[i];
    const std::string stage = "stage" + std::to_string(i);
    const std::size_t k = st.patch.kernel, p = st.patch.padding(), s = st.patch.stride;
    h = kernels::window_out_size(h, k, s, p);
    w = kernels::window_out_size(w, k, s, p);
    const std::uint64_t n = h * w, d = st.embed_dim;
    const std::uint64_t conv = d * st.patch.in_channels * k * k;
    report.rows.push_back({stage + ".patch", conv + (bias ? d : 0), conv * n});
    norm(d, n);
    for (std::size_t j = 0; j < st.depth; ++j) {
      const std::string block = stage + ".block" + std::to_string(j);
      const LayerCost hy = hybrid_cost(d, n, st.nl, bias);
      const LayerCost ff = ffn_cost(st.ffn, d, n, bias);
      report.rows.push_back({block + ".hybrid", hy.params, hy.madds});
      report.rows.push_back({block + ".ffn", ff.params, ff.madds});
      norm(d, n);
      norm(d, n);
      overhead.madds += st.ffn.ratio * d * n;  // GELU on the hidden layer
    }
  }
  const std::uint64_t c = cfg.stages.back().embed_dim, classes = cfg.num_classes;
  overhead.madds += c * h * w;  // global average pool
  norm(c, 1);
  report.rows.push_back({"head", c * classes + (bias ? classes : 0), c * classes});
  report.rows.push_back(overhead);

  for (const auto& r : report.rows) {
    report.totals.params += r.params;
    report.totals.madds += r.madds;
  }
  return report;
}

std::string format_table(const CostReport& report) {
  std::size_t width = std::string("component").size();
  for (const auto& r : report.rows) width = std::max(width, r.component.size());
  std::ostringstream os;
  auto line = [&](const std::string& name, auto params, auto madds) {
    os << std::left << std::setw(static_cast<int>(width)) << name << "  " << std::right
       << std::setw(12) << params << "  " << std::setw(14) << madds << '\n';
  };
  line("component", "params", "madds");
  for (const auto& r : report.rows) line(r.component, r.params, r.madds);
  line(report.totals.component, report.totals.params, report.totals.madds);
  os << std::fixed << std::setprecision(3) << "# " << static_cast<double>(report.totals.params) / 1e6
     << "M params, " << static_cast<double>(report.totals.madds) / 1e9 << "G " << report.convention
     << "s\n";
  return os.str();
}

std::string to_json(const CostReport& report, int indent) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"component", r.component}, {"params", r.params}, {"madds", r.madds}});
  }
  const nlohmann::json j{
      {"convention", report.convention},
      {"rows", rows},
      {"totals", {{"params", report.totals.params}, {"madds", report.totals.madds}}}};
  return j.dump(indent);
}

}  // namespace tformer
