#include "tformer/model.hpp"

#include <tuple>

namespace tformer {

void check_model_input(const TFormerConfig& cfg, const Shape& dims) {
  if (dims.size() != 4) throw DimensionError("model input must be N,C,H,W, got " + shape_str(dims));
  if (dims[1] != cfg.stages.front().patch.in_channels) {
    throw DimensionError("model expects " + std::to_string(cfg.stages.front().patch.in_channels) +
                         " input channels, got " + std::to_string(dims[1]));
  }
  const std::size_t stride = cfg.total_stride();
  if (dims[2] % stride != 0 || dims[3] % stride != 0) {
    throw DimensionError("input " + std::to_string(dims[2]) + "x" + std::to_string(dims[3]) +
                         " is not divisible by the total stride " + std::to_string(stride));
  }
}

std::vector<std::pair<std::string, Shape>> weight_layout(const TFormerConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, Shape>> out;
  auto add = [&](std::string name, Shape dims) { out.emplace_back(std::move(name), std::move(dims)); };
  auto norm = [&](const std::string& p, std::size_t c) {
    add(p + ".gamma", {c});
    add(p + ".beta", {c});
  };
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& st = cfg.stages[i];
    const std::string stage = "stage" + std::to_string(i);
    const std::size_t d = st.embed_dim, k = st.patch.kernel, hidden = st.ffn.ratio * d;
    add(stage + ".patch.weight", {d, st.patch.in_channels, k, k});
    if (cfg.bias) add(stage + ".patch.bias", {d});
    norm(stage + ".patch.norm", d);
    for (std::size_t j = 0; j < st.depth; ++j) {
      const std::string block = stage + ".block" + std::to_string(j);
      norm(block + ".norm1", d);
      add(block + ".hybrid.weight", {d, d, 1, 1});
      if (cfg.bias) add(block + ".hybrid.bias", {d});
      norm(block + ".norm2", d);
      if (st.ffn.kind == FFNKind::ghost) {
        for (auto [fc, in, out] : {std::tuple{".ffn.fc1", d, hidden / 2}, {".ffn.fc2", hidden, d / 2}}) {
          add(block + fc + ".weight", {out, in, 1, 1});
          if (cfg.bias) add(block + fc + ".bias", {out});
          add(block + fc + ".cheap.weight", {out, 1, 3, 3});
          if (cfg.bias) add(block + fc + ".cheap.bias", {out});
        }
        continue;
      }
      add(block + ".ffn.fc1.weight", {hidden, d / st.ffn.groups, 1, 1});
      if (cfg.bias) add(block + ".ffn.fc1.bias", {hidden});
      add(block + ".ffn.fc2.weight", {d, hidden / st.ffn.groups, 1, 1});
      if (cfg.bias) add(block + ".ffn.fc2.bias", {d});
    }
  }
  const std::size_t c = cfg.stages.back().embed_dim;
  norm("head.norm", c);
  add("head.weight", {cfg.num_classes, c});
  if (cfg.bias) add("head.bias", {cfg.num_classes});
  return out;
}

template <Real T>
TFormerModel<T> TFormerModel<T>::build(const TFormerConfig& cfg, Rng* rng) {
  cfg.validate();
  TFormerModel model;
  model.config_ = cfg;
  for (const auto& st : cfg.stages) {
    StageWeights<T> sw;
    sw.patch = PatchEmbedWeights<T>::init(st.patch, cfg.bias, rng);
    for (std::size_t j = 0; j < st.depth; ++j) {
      sw.blocks.push_back(BlockWeights<T>::init(st.embed_dim, st.nl, st.ffn, cfg.bias, rng));
    }
    model.weights_.stages.push_back(std::move(sw));
  }
  const std::size_t width = cfg.stages.back().embed_dim;
  auto& head = model.weights_.head;
  head.norm = NormWeights<T>::init(width);
  head.weight = init_weight<T>({cfg.num_classes, width}, rng);
  if (cfg.bias) head.bias = Tensor<T>({cfg.num_classes});
  return model;
}

template <Real T>
TFormerModel<T> build_variant(Variant v, std::size_t num_classes, Rng& rng) {
  return TFormerModel<T>::build(make_config(v, num_classes), &rng);
}

template <Real T>
std::vector<Tensor<T>> TFormerModel<T>::stage_outputs(const Tensor<T>& x) const {
  check_model_input(config_, x.dims());
  std::vector<Tensor<T>> outs;
  Tensor<T> h = x;
  for (const auto& stage : weights_.stages) {
    h = patch_embed(h, stage.patch);
    for (const auto& block : stage.blocks) h = tformer_block(h, block);
    outs.push_back(h);
  }
  return outs;
}

template <Real T>
Tensor<T> TFormerModel<T>::forward(const Tensor<T>& x) const {
  ModelOp<T> op;
  return op.forward(*this, x);
}

template <Real T>
std::vector<std::string> TFormerModel<T>::parameter_names() const {
  std::vector<std::string> names;
  weights_.visit("", [&](const std::string& name, const Tensor<T>&) { names.push_back(name); });
  return names;
}

template <Real T>
ParameterCount TFormerModel<T>::count_parameters(bool include_bias) const {
  ParameterCount out;
  weights_.visit("", [&](const std::string& name, const Tensor<T>& t) {
    const bool is_bias = name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
    if (is_bias && !include_bias) return;
    out.rows.push_back({name, t.numel()});
    out.total += t.numel();
  });
  return out;
}

template <Real T>
std::vector<std::pair<std::string, Tensor<T>*>> TFormerModel<T>::named_tensors() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  weights_.visit("", [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
  return out;
}

template <Real T>
std::vector<std::pair<std::string, const Tensor<T>*>> TFormerModel<T>::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  weights_.visit("", [&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, &t); });
  return out;
}

template <Real T>
Tensor<T> ModelOp<T>::forward(const TFormerModel<T>& model, const Tensor<T>& x) {
  const auto& cfg = model.config();
  const auto& w = model.weights();
  check_model_input(cfg, x.dims());
  patches_.assign(w.stages.size(), PatchEmbedOp<T>{});
  blocks_.assign(w.stages.size(), {});
  Tensor<T> h = x;
  for (std::size_t i = 0; i < w.stages.size(); ++i) {
    h = patches_[i].forward(w.stages[i].patch, h);
    blocks_[i].assign(w.stages[i].blocks.size(), BlockOp<T>{});
    for (std::size_t j = 0; j < w.stages[i].blocks.size(); ++j) {
      h = blocks_[i][j].forward(w.stages[i].blocks[j], h);
    }
  }
  Tensor<T> feat = head_norm_.forward(gap_.forward(h), w.head.norm.gamma, w.head.norm.beta);
  Tensor<T> logits = head_fc_.forward(feat, transpose(w.head.weight));
  if (w.head.bias) {
    const std::size_t k = cfg.num_classes;
    for (std::size_t n = 0; n < logits.dim(0); ++n) {
      for (std::size_t c = 0; c < k; ++c) logits[n * k + c] += (*w.head.bias)[c];
    }
  }
  ran_ = true;
  TFORMER_DEBUG_FINITE(logits, "model forward");
  return logits;
}

template <Real T>
Tensor<T> ModelOp<T>::vjp(const Tensor<T>& dlogits, TFormerWeights<T>& grads) const {
  if (!ran_) throw StateError("model: vjp requested before forward");
  if (grads.head.bias) {
    const std::size_t k = dlogits.dim(1);
    for (std::size_t n = 0; n < dlogits.dim(0); ++n) {
      for (std::size_t c = 0; c < k; ++c) (*grads.head.bias)[c] += dlogits[n * k + c];
    }
  }
  auto [dfeat, dweight_t] = head_fc_.vjp(dlogits);
  accumulate(grads.head.weight, transpose(dweight_t));
  auto gn = head_norm_.vjp(dfeat);
  accumulate(grads.head.norm.gamma, gn.gamma);
  accumulate(grads.head.norm.beta, gn.beta);
  Tensor<T> dh = gap_.vjp(gn.input);
  for (std::size_t i = patches_.size(); i-- > 0;) {
    for (std::size_t j = blocks_[i].size(); j-- > 0;) {
      dh = blocks_[i][j].vjp(dh, grads.stages[i].blocks[j]);
    }
    dh = patches_[i].vjp(dh, grads.stages[i].patch);
  }
  return dh;
}

template class TFormerModel<float>;
template class TFormerModel<double>;
template class ModelOp<float>;
template class ModelOp<double>;
template TFormerModel<float> build_variant<float>(Variant, std::size_t, Rng&);
template TFormerModel<double> build_variant<double>(Variant, std::size_t, Rng&);

}  // namespace tformer
