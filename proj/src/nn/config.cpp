#include "tformer/config.hpp"

#include <algorithm>
#include <cctype>

#include "json.hpp"

namespace tformer {

using json = nlohmann::json;

std::vector<std::size_t> partition_channels(std::size_t channels, std::size_t parts) {
  if (parts == 0) throw ConfigError("partition_channels: need at least one partition");
  if (channels < parts) {
    throw ConfigError("cannot split " + std::to_string(channels) + " channels into " +
                      std::to_string(parts) + " non-empty partitions");
  }
  std::vector<std::size_t> sizes(parts, channels / parts);
  for (std::size_t i = 0; i < channels % parts; ++i) ++sizes[i];
  return sizes;
}

void NLModuleConfig::validate() const {
  if (operators.empty() || scales.empty()) {
    throw ConfigError("NL module needs at least one operator and one scale");
  }
  if (operators.size() > 2 || (operators.size() == 2 && !(operators[0] == PoolKind::avg &&
                                                          operators[1] == PoolKind::max))) {
    throw ConfigError("NL module operators must be a subset of {avg, max} listed avg first");
  }
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] == 0 || scales[i] % 2 == 0) {
      throw ConfigError("NL module scales must be odd, got " + std::to_string(scales[i]));
    }
    if (i > 0 && scales[i] <= scales[i - 1]) {
      throw ConfigError("NL module scales must be strictly ascending");
    }
  }
}

std::vector<PoolSpec> NLModuleConfig::pool_specs() const {
  validate();
  std::vector<PoolSpec> specs;
  specs.reserve(num_parts());
  for (auto op : operators) {
    for (auto k : scales) specs.push_back(PoolSpec::same(op, k));
  }
  return specs;
}

std::vector<std::size_t> NLModuleConfig::partition(std::size_t channels) const {
  validate();
  return partition_channels(channels, num_parts());
}

std::string ffn_kind_name(FFNKind kind) {
  switch (kind) {
    case FFNKind::standard: return "standard";
    case FFNKind::ghost: return "ghost";
    case FFNKind::pcs: return "pcs";
  }
  return "?";
}

FFNKind parse_ffn_kind(std::string_view name) {
  if (name == "standard") return FFNKind::standard;
  if (name == "ghost") return FFNKind::ghost;
  if (name == "pcs") return FFNKind::pcs;
  throw ConfigError("unknown FFN kind '" + std::string(name) + "'");
}

void PCSFFNConfig::validate(std::size_t channels) const {
  if (ratio == 0 || groups == 0) throw ConfigError("FFN ratio and groups must be >= 1");
  if (kind != FFNKind::pcs && groups != 1) {
    throw ConfigError(ffn_kind_name(kind) + " FFN has no groups (got " + std::to_string(groups) + ")");
  }
  if (kind == FFNKind::ghost && (channels % 2 != 0 || (ratio * channels) % 2 != 0)) {
    throw ConfigError("ghost FFN needs an even width and hidden width");
  }
  if (channels % groups != 0 || (ratio * channels) % groups != 0) {
    throw ConfigError("FFN channels " + std::to_string(channels) + " (hidden " +
                      std::to_string(ratio * channels) + ") not divisible by groups " +
                      std::to_string(groups));
  }
}

std::size_t TFormerConfig::total_stride() const {
  std::size_t s = 1;
  for (const auto& st : stages) s *= st.patch.stride;
  return s;
}

void TFormerConfig::validate() const {
  if (stages.empty()) throw ConfigError("model needs at least one stage");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    const std::string where = "stage " + std::to_string(i) + ": ";
    if (st.depth == 0) throw ConfigError(where + "depth must be >= 1");
    if (st.patch.out_channels != st.embed_dim) {
      throw ConfigError(where + "patch embed width differs from embed_dim");
    }
    if (i > 0 && st.patch.in_channels != stages[i - 1].embed_dim) {
      throw ConfigError(where + "patch embed input does not match previous stage width");
    }
    if (st.patch.in_channels == 0 || st.patch.kernel == 0 || st.patch.stride == 0) {
      throw ConfigError(where + "patch embed kernel, stride and input channels must be >= 1");
    }
    st.ffn.validate(st.embed_dim);
    st.nl.validate();
    if (st.embed_dim < st.nl.num_parts()) {
      throw ConfigError(where + "embed_dim " + std::to_string(st.embed_dim) + " smaller than " +
                        std::to_string(st.nl.num_parts()) + " NL partitions");
    }
  }
}

Variant parse_variant(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "s") return Variant::S;
  if (lower == "m") return Variant::M;
  if (lower == "l") return Variant::L;
  if (lower == "micro") return Variant::Micro;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected s, m, l or micro)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::S: return "S";
    case Variant::M: return "M";
    case Variant::L: return "L";
    case Variant::Micro: return "Micro";
  }
  return "?";
}

TFormerConfig make_config(Variant v, std::size_t num_classes) {
  TFormerConfig cfg;
  cfg.variant = variant_name(v);
  cfg.num_classes = num_classes;

  if (v == Variant::Micro) {
    // Desk-scale variant for tests and the training demo.
    cfg.image_size = 32;
    const std::size_t dims[] = {16, 32};
    NLModuleConfig nl{{PoolKind::avg, PoolKind::max}, {3, 5}};
    std::size_t in = 3;
    for (std::size_t d : dims) {
      cfg.stages.push_back({PatchEmbedConfig{in, d, 3, 2}, d, 1, PCSFFNConfig{4, 2}, nl});
      in = d;
    }
    cfg.validate();
    return cfg;
  }

  const std::size_t dims[] = {64, 128, 320, 512};
  std::vector<std::size_t> depths;
  switch (v) {
    case Variant::S: depths = {2, 2, 6, 2}; break;
    case Variant::M: depths = {4, 4, 12, 4}; break;
    default: depths = {6, 6, 18, 6}; break;
  }
  std::size_t in = 3;
  for (std::size_t i = 0; i < 4; ++i) {
    PatchEmbedConfig patch = i == 0 ? PatchEmbedConfig{in, dims[i], 7, 4}
                                    : PatchEmbedConfig{in, dims[i], 3, 2};
    cfg.stages.push_back({patch, dims[i], depths[i], PCSFFNConfig{4, 2}, NLModuleConfig{}});
    in = dims[i];
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

std::string op_name(PoolKind k) { return k == PoolKind::avg ? "avg" : "max"; }

PoolKind op_from_name(const std::string& s) {
  if (s == "avg") return PoolKind::avg;
  if (s == "max") return PoolKind::max;
  throw ConfigError("unknown pooling operator '" + s + "'");
}

json stage_to_json(const StageSpec& st) {
  json ops = json::array();
  for (auto op : st.nl.operators) ops.push_back(op_name(op));
  return json{
      {"patch",
       {{"in_channels", st.patch.in_channels},
        {"out_channels", st.patch.out_channels},
        {"kernel", st.patch.kernel},
        {"stride", st.patch.stride}}},
      {"embed_dim", st.embed_dim},
      {"depth", st.depth},
      {"ffn", {{"ratio", st.ffn.ratio}, {"groups", st.ffn.groups}, {"kind", ffn_kind_name(st.ffn.kind)}}},
      {"nl", {{"operators", ops}, {"scales", st.nl.scales}}},
  };
}

StageSpec stage_from_json(const json& j) {
  StageSpec st;
  const auto& p = j.at("patch");
  st.patch = {p.at("in_channels").get<std::size_t>(), p.at("out_channels").get<std::size_t>(),
              p.at("kernel").get<std::size_t>(), p.at("stride").get<std::size_t>()};
  st.embed_dim = j.at("embed_dim").get<std::size_t>();
  st.depth = j.at("depth").get<std::size_t>();
  const auto& f = j.at("ffn");
  st.ffn = {f.at("ratio").get<std::size_t>(), f.at("groups").get<std::size_t>(),
            parse_ffn_kind(f.at("kind").get<std::string>())};
  st.nl.operators.clear();
  for (const auto& op : j.at("nl").at("operators")) {
    st.nl.operators.push_back(op_from_name(op.get<std::string>()));
  }
  st.nl.scales = j.at("nl").at("scales").get<std::vector<std::size_t>>();
  return st;
}

}  // namespace

std::string config_to_json(const TFormerConfig& cfg) {
  json stages = json::array();
  for (const auto& st : cfg.stages) stages.push_back(stage_to_json(st));
  const json j{{"variant", cfg.variant},   {"num_classes", cfg.num_classes},
               {"bias", cfg.bias},         {"image_size", cfg.image_size},
               {"stages", stages}};
  return j.dump();
}

TFormerConfig config_from_json(std::string_view text) {
  TFormerConfig cfg;
  try {
    const json j = json::parse(text);
    cfg.variant = j.at("variant").get<std::string>();
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.bias = j.at("bias").get<bool>();
    cfg.image_size = j.at("image_size").get<std::size_t>();
    for (const auto& s : j.at("stages")) cfg.stages.push_back(stage_from_json(s));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Ablation tables

std::vector<NLAblationRow> nl_ablation_rows() {
  const std::vector<PoolKind> avg{PoolKind::avg};
  const std::vector<PoolKind> both{PoolKind::avg, PoolKind::max};
  return {
      {"avg 3", {avg, {3}}},
      {"avg 5", {avg, {5}}},
      {"avg 7", {avg, {7}}},
      {"avg 9", {avg, {9}}},
      {"avg 3,5", {avg, {3, 5}}},
      {"avg 3,5,7", {avg, {3, 5, 7}}},
      {"avg 3,5,7,9", {avg, {3, 5, 7, 9}}},
      {"avg 3,5,7,9,11", {avg, {3, 5, 7, 9, 11}}},
      {"avg+max 3", {both, {3}}},
      {"avg+max 3,5,7,9,11", {both, {3, 5, 7, 9, 11}}},
  };
}

std::vector<FFNAblationRow> ffn_ablation_rows() {
  return {
      {"standard r=1", {1, 1, FFNKind::standard}},
      {"ghost r=4", {4, 1, FFNKind::ghost}},
      {"pcs r=4 g=4", {4, 4, FFNKind::pcs}},
      {"standard r=2", {2, 1, FFNKind::standard}},
      {"ghost r=2", {2, 1, FFNKind::ghost}},
      {"pcs r=4 g=2", {4, 2, FFNKind::pcs}},
      {"standard r=4", {4, 1, FFNKind::standard}},
  };
}

}  // namespace tformer
