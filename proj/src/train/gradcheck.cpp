#include "tformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "tformer/training.hpp"

namespace tformer {

namespace {

using Loss = std::function<double()>;

struct Target {
  TensorD* value;
  TensorD analytic;
};

double dot(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<std::size_t> pick_coords(std::size_t numel, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(numel);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (numel <= limit) return idx;
  for (std::size_t i = 0; i < limit; ++i) std::swap(idx[i], idx[i + rng.below(numel - i)]);
  idx.resize(limit);
  return idx;
}

void finite_differences(std::vector<Target>& targets, const Loss& loss, Rng& rng, double eps,
                        std::size_t limit, GradcheckResult& res) {
  for (auto& t : targets) {
    if (!t.value->same_shape(t.analytic)) {
      throw DimensionError("gradcheck: gradient shape " + shape_str(t.analytic.dims()) +
                           " differs from tensor " + shape_str(t.value->dims()));
    }
    for (std::size_t i : pick_coords(t.value->numel(), limit, rng)) {
      double& v = (*t.value)[i];
      const double saved = v;
      v = saved + eps;
      const double up = loss();
      v = saved - eps;
      const double down = loss();
      v = saved;
      const double numeric = (up - down) / (2 * eps);
      if (!std::isfinite(numeric) || !std::isfinite(t.analytic[i])) {
        throw NumericError("gradcheck: non-finite gradient in " + res.name);
      }
      res.max_rel_error = std::max(res.max_rel_error, relative_error(t.analytic[i], numeric));
      ++res.coordinates;
    }
  }
}

// Gains near one, everything else spread wide enough that gradients are O(1).
template <class W>
void randomize(W& w, Rng& rng) {
  w.visit("", [&](const std::string& name, TensorD& t) {
    const bool gain = name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
    for (double& v : t.data()) v = gain ? 1.0 + 0.1 * rng.normal() : 0.3 * rng.normal();
  });
}

template <class W>
void add_weight_targets(std::vector<Target>& targets, W& w, const W& g) {
  std::vector<TensorD*> wp;
  std::vector<const TensorD*> gp;
  w.visit("", [&](const std::string&, TensorD& t) { wp.push_back(&t); });
  g.visit("", [&](const std::string&, const TensorD& t) { gp.push_back(&t); });
  for (std::size_t i = 0; i < wp.size(); ++i) targets.push_back({wp[i], *gp[i]});
}

bool nl_inputs_clear(const TensorD& x, const NLModuleConfig& nl, double margin) {
  const auto specs = nl.pool_specs();
  const auto parts = split_channels(x, nl.partition(x.dim(1)));
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].kind == PoolKind::max && !max_windows_clear(parts[i], specs[i].kernel, margin)) {
      return false;
    }
  }
  return true;
}

template <class Pred>
TensorD draw_input(const Shape& dims, Rng& rng, Pred&& ok) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    TensorD x = TensorD::randn(dims, rng, 1.0);
    if (ok(x)) return x;
  }
  throw NumericError("gradcheck: could not draw an input with clear max-pool winners");
}

const NLModuleConfig kCheckNL{{PoolKind::avg, PoolKind::max}, {3, 5}};
const PCSFFNConfig kCheckFFN{4, 2};

}  // namespace

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

std::string layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::pointwise_conv: return "pointwise_conv";
    case LayerKind::grouped_conv: return "grouped_conv";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::layer_norm: return "layer_norm";
    case LayerKind::gelu: return "gelu";
    case LayerKind::nl_module: return "nl_module";
    case LayerKind::channel_shuffle: return "channel_shuffle";
    case LayerKind::hybrid: return "hybrid";
    case LayerKind::pcs_ffn: return "pcs_ffn";
    case LayerKind::ghost_ffn: return "ghost_ffn";
    case LayerKind::patch_embed: return "patch_embed";
    case LayerKind::block: return "block";
  }
  return "?";
}

double gradcheck_threshold(LayerKind kind) {
  return kind == LayerKind::pointwise_conv ? 1e-6 : 1e-4;
}

bool max_windows_clear(const TensorD& x, std::size_t kernel, double margin) {
  require_rank4(x, "max_windows_clear");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(kernel / 2);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::ptrdiff_t oy = 0; oy < std::ptrdiff_t(h); ++oy) {
        for (std::ptrdiff_t ox = 0; ox < std::ptrdiff_t(w); ++ox) {
          double top = -std::numeric_limits<double>::infinity(), second = top;
          for (std::ptrdiff_t y = oy - pad; y <= oy + pad; ++y) {
            for (std::ptrdiff_t xx = ox - pad; xx <= ox + pad; ++xx) {
              if (y < 0 || xx < 0 || y >= std::ptrdiff_t(h) || xx >= std::ptrdiff_t(w)) continue;
              const double v = x.at(b, ch, std::size_t(y), std::size_t(xx));
              if (v > top) {
                second = top;
                top = v;
              } else if (v > second) {
                second = v;
              }
            }
          }
          if (std::isfinite(second) && top - second < margin) return false;
        }
      }
    }
  }
  return true;
}

GradcheckResult gradcheck(LayerKind kind, const Shape& input, std::uint64_t seed,
                          const GradcheckOptions& opts) {
  if (input.size() != 4) throw DimensionError("gradcheck input must be N,C,H,W");
  GradcheckResult res;
  res.name = layer_kind_name(kind);
  res.threshold = gradcheck_threshold(kind);
  Rng rng(seed);
  const std::size_t c = input[1];
  auto any = [](const TensorD&) { return true; };

  TensorD x;
  std::vector<Target> targets;
  Loss loss;
  TensorD probe;

  // Scratch weights live here so the loss closures can reference them.
  TensorD w, b, gamma, beta;
  std::optional<TensorD> bias;
  HybridWeights<double> hw, hg;
  FFNWeights<double> fw, fg;
  PatchEmbedWeights<double> pw, pg;
  BlockWeights<double> bw, bg;

  auto conv_case = [&](ConvOptions copts, std::size_t kernel) {
    x = draw_input(input, rng, any);
    w = TensorD::randn({c, c / copts.groups, kernel, kernel}, rng, 0.3);
    bias = TensorD::randn({c}, rng, 0.3);
    Conv2dOp<double> op(copts);
    const TensorD y = op.forward(x, w, bias);
    probe = TensorD::randn(y.dims(), rng, 1.0);
    auto g = op.vjp(probe);
    targets = {{&x, g.input}, {&w, g.weight}, {&*bias, *g.bias}};
    loss = [&, copts] { return dot(conv2d(x, w, bias, copts), probe); };
  };

  switch (kind) {
    case LayerKind::pointwise_conv: conv_case({1, 0, 1}, 1); break;
    case LayerKind::grouped_conv: conv_case({2, 1, 2}, 3); break;
    case LayerKind::avg_pool:
    case LayerKind::max_pool: {
      const PoolSpec spec =
          PoolSpec::same(kind == LayerKind::avg_pool ? PoolKind::avg : PoolKind::max, 3);
      x = kind == LayerKind::avg_pool
              ? draw_input(input, rng, any)
              : draw_input(input, rng,
                           [&](const TensorD& t) { return max_windows_clear(t, 3, opts.pool_margin); });
      Pool2dOp<double> op(spec);
      probe = TensorD::randn(op.forward(x).dims(), rng, 1.0);
      targets = {{&x, op.vjp(probe)}};
      loss = [&, spec] { return dot(pool2d(x, spec), probe); };
      break;
    }
    case LayerKind::layer_norm: {
      x = draw_input(input, rng, any);
      gamma = TensorD::randn({c}, rng, 0.1);
      for (double& v : gamma.data()) v += 1.0;
      beta = TensorD::randn({c}, rng, 0.3);
      LayerNormOp<double> op;
      probe = TensorD::randn(op.forward(x, gamma, beta).dims(), rng, 1.0);
      auto g = op.vjp(probe);
      targets = {{&x, g.input}, {&gamma, g.gamma}, {&beta, g.beta}};
      loss = [&] { return dot(layer_norm_channels(x, gamma, beta), probe); };
      break;
    }
    case LayerKind::gelu: {
      x = draw_input(input, rng, any);
      GeluOp<double> op;
      probe = TensorD::randn(op.forward(x).dims(), rng, 1.0);
      targets = {{&x, op.vjp(probe)}};
      loss = [&] { return dot(tformer::gelu(x), probe); };
      break;
    }
    case LayerKind::nl_module: {
      x = draw_input(input, rng,
                     [&](const TensorD& t) { return nl_inputs_clear(t, kCheckNL, opts.pool_margin); });
      NLModuleOp<double> op;
      probe = TensorD::randn(op.forward(x, kCheckNL).dims(), rng, 1.0);
      targets = {{&x, op.vjp(probe)}};
      loss = [&] { return dot(nl_module(x, kCheckNL), probe); };
      break;
    }
    case LayerKind::channel_shuffle: {
      x = draw_input(input, rng, any);
      ChannelShuffleOp<double> op;
      probe = TensorD::randn(op.forward(x, 2).dims(), rng, 1.0);
      targets = {{&x, op.vjp(probe)}};
      loss = [&] { return dot(channel_shuffle(x, 2), probe); };
      break;
    }
    case LayerKind::hybrid: {
      x = draw_input(input, rng,
                     [&](const TensorD& t) { return nl_inputs_clear(t, kCheckNL, opts.pool_margin); });
      hw = HybridWeights<double>::init(c, kCheckNL, true, &rng);
      randomize(hw, rng);
      HybridLayerOp<double> op;
      probe = TensorD::randn(op.forward(hw, x).dims(), rng, 1.0);
      hg = zeros_like_weights(hw);
      targets = {{&x, op.vjp(probe, hg)}};
      add_weight_targets(targets, hw, hg);
      loss = [&] { return dot(hybrid_layer(x, hw), probe); };
      break;
    }
    case LayerKind::pcs_ffn:
    case LayerKind::ghost_ffn: {
      x = draw_input(input, rng, any);
      const PCSFFNConfig fcfg =
          kind == LayerKind::pcs_ffn ? kCheckFFN : PCSFFNConfig{2, 1, FFNKind::ghost};
      fw = FFNWeights<double>::init(c, fcfg, true, &rng);
      randomize(fw, rng);
      PCSFFNOp<double> op;
      probe = TensorD::randn(op.forward(fw, x).dims(), rng, 1.0);
      fg = zeros_like_weights(fw);
      targets = {{&x, op.vjp(probe, fg)}};
      add_weight_targets(targets, fw, fg);
      loss = [&] { return dot(pcs_ffn(x, fw), probe); };
      break;
    }
    case LayerKind::patch_embed: {
      x = draw_input(input, rng, any);
      pw = PatchEmbedWeights<double>::init(PatchEmbedConfig{c, 2 * c, 3, 2}, true, &rng);
      randomize(pw, rng);
      PatchEmbedOp<double> op;
      probe = TensorD::randn(op.forward(pw, x).dims(), rng, 1.0);
      pg = zeros_like_weights(pw);
      targets = {{&x, op.vjp(probe, pg)}};
      add_weight_targets(targets, pw, pg);
      loss = [&] { return dot(patch_embed(x, pw), probe); };
      break;
    }
    case LayerKind::block: {
      bw = BlockWeights<double>::init(c, kCheckNL, kCheckFFN, true, &rng);
      randomize(bw, rng);
      x = draw_input(input, rng, [&](const TensorD& t) {
        return nl_inputs_clear(layer_norm_channels(t, bw.norm1.gamma, bw.norm1.beta), kCheckNL,
                               opts.pool_margin);
      });
      BlockOp<double> op;
      probe = TensorD::randn(op.forward(bw, x).dims(), rng, 1.0);
      bg = zeros_like_weights(bw);
      targets = {{&x, op.vjp(probe, bg)}};
      add_weight_targets(targets, bw, bg);
      loss = [&] { return dot(tformer_block(x, bw), probe); };
      break;
    }
  }
  finite_differences(targets, loss, rng, opts.eps, opts.max_coords, res);
  return res;
}

GradcheckResult gradcheck_model(std::uint64_t seed, std::size_t per_tensor, double eps) {
  GradcheckResult res;
  res.name = "micro_model";
  res.threshold = kModelGradcheckThreshold;
  Rng rng(seed);
  auto model = TFormerModel<double>::build(make_config(Variant::Micro, kToyClasses), &rng);
  randomize(model.weights(), rng);
  const std::vector<std::size_t> labels{1, 3};

  // Every max-pool input inside the network needs a clear winner too.
  auto clear = [&](const TensorD& input) {
    TensorD h = input;
    for (const auto& stage : model.weights().stages) {
      h = patch_embed(h, stage.patch);
      for (const auto& block : stage.blocks) {
        const TensorD pooled_in = layer_norm_channels(h, block.norm1.gamma, block.norm1.beta);
        if (!nl_inputs_clear(pooled_in, block.hybrid.nl, 1e-4)) return false;
        h = tformer_block(h, block);
      }
    }
    return true;
  };
  TensorD x = draw_input({2, 3, 8, 8}, rng, clear);

  ModelOp<double> op;
  const auto ce = cross_entropy(op.forward(model, x), labels);
  auto grads = zeros_like_weights(model.weights());
  op.vjp(ce.dlogits, grads);

  std::vector<Target> targets;
  add_weight_targets(targets, model.weights(), grads);
  const Loss loss = [&] { return static_cast<double>(cross_entropy(model.forward(x), labels).loss); };
  finite_differences(targets, loss, rng, eps, per_tensor, res);
  return res;
}

std::vector<GradcheckResult> gradcheck_suite(std::uint64_t seed) {
  const std::vector<std::pair<LayerKind, Shape>> cases{
      {LayerKind::pointwise_conv, {2, 6, 5, 5}}, {LayerKind::grouped_conv, {2, 6, 5, 5}},
      {LayerKind::avg_pool, {2, 4, 6, 6}},       {LayerKind::max_pool, {2, 4, 6, 6}},
      {LayerKind::layer_norm, {2, 5, 4, 4}},     {LayerKind::gelu, {2, 3, 4, 4}},
      {LayerKind::nl_module, {2, 8, 6, 6}},      {LayerKind::channel_shuffle, {2, 8, 3, 3}},
      {LayerKind::hybrid, {2, 8, 5, 5}},         {LayerKind::pcs_ffn, {2, 8, 4, 4}},
      {LayerKind::ghost_ffn, {2, 6, 4, 4}},
      {LayerKind::patch_embed, {2, 4, 6, 6}},    {LayerKind::block, {2, 8, 5, 5}},
  };
  std::vector<GradcheckResult> out;
  std::uint64_t s = seed;
  for (const auto& [kind, shape] : cases) out.push_back(gradcheck(kind, shape, s++));
  out.push_back(gradcheck_model(s));
  return out;
}

}  // namespace tformer
