#include "tformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace tformer {

namespace {

Rng sample_rng(std::uint64_t seed, std::size_t index) {
  Rng mix(seed);
  const std::uint64_t base = mix.next_u64();
  Rng r(base ^ (static_cast<std::uint64_t>(index) * 0xD1B54A32D192ED03ULL));
  r.next_u64();
  return r;
}

// Square wave in {0, 1} with the given period and phase.
double square(double t, double period) {
  const double u = std::fmod(t / period, 1.0);
  return (u < 0 ? u + 1 : u) < 0.5 ? 1.0 : 0.0;
}

}  // namespace

ToyDataset synth_dataset(std::uint64_t seed, std::size_t n) {
  if (n == 0 || n % kToyClasses != 0) {
    throw ConfigError("synth_dataset: n must be a positive multiple of 4, got " + std::to_string(n));
  }
  constexpr std::size_t S = kToySide;
  ToyDataset ds;
  ds.seed = seed;
  ds.images = TensorF({n, 3, S, S});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % kToyClasses;
    ds.labels[i] = label;
    Rng r = sample_rng(seed, i);
    const double period = 4.0 + static_cast<double>(r.below(5));
    const double phase_x = r.uniform(0, period), phase_y = r.uniform(0, period);
    const double contrast = r.uniform(0.5, 1.0);
    const double base = r.uniform(0.0, 1.0 - contrast);
    const double angle = r.uniform(0, 2 * std::numbers::pi);
    double tint[3];
    for (double& t : tint) t = r.uniform(0.8, 1.0);

    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        double v = 0;
        switch (label) {
          case 0: v = square(fy + phase_y, period); break;
          case 1: v = square(fx + phase_x, period); break;
          case 2: {
            const double a = square(fx + phase_x, period), b = square(fy + phase_y, period);
            v = a == b ? 1.0 : 0.0;
            break;
          }
          default: {
            const double c = std::cos(angle), s = std::sin(angle);
            const double half = (S - 1) / 2.0;
            const double t = ((fx - half) * c + (fy - half) * s) / (half * std::numbers::sqrt2);
            v = 0.5 + 0.5 * t;
            break;
          }
        }
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double noise = r.uniform(-0.05, 0.05);
          const double px = (base + contrast * v) * tint[ch] + noise;
          ds.images.at(i, ch, y, x) = static_cast<float>(std::clamp(px, 0.0, 1.0));
        }
      }
    }
  }
  return ds;
}

template <Real T>
Tensor<T> ToyDataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t per = 3 * kToySide * kToySide;
  Tensor<T> out({indices.size(), 3, kToySide, kToySide});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= size()) throw DimensionError("sample index out of range");
    const float* src = images.data().data() + indices[b] * per;
    std::transform(src, src + per, out.data().begin() + b * per,
                   [](float v) { return static_cast<T>(v); });
  }
  return out;
}

std::vector<std::size_t> ToyDataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

template <Real T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [N, C]");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw DimensionError("cross_entropy: label count differs from batch");
  LossResult<T> out{T{}, Tensor<T>({n, c})};
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) {
      throw DimensionError("cross_entropy: label " + std::to_string(labels[i]) +
                           " out of range for " + std::to_string(c) + " classes");
    }
    const T* row = logits.data().data() + i * c;
    const T mx = *std::max_element(row, row + c);
    double sum = 0;
    for (std::size_t k = 0; k < c; ++k) sum += std::exp(static_cast<double>(row[k] - mx));
    const double log_sum = std::log(sum);
    total += log_sum - static_cast<double>(row[labels[i]] - mx);
    for (std::size_t k = 0; k < c; ++k) {
      const double p = std::exp(static_cast<double>(row[k] - mx) - log_sum);
      out.dlogits[i * c + k] = static_cast<T>((p - (k == labels[i] ? 1.0 : 0.0)) / double(n));
    }
  }
  out.loss = static_cast<T>(total / double(n));
  return out;
}

template <Real T>
double accuracy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0)) {
    throw DimensionError("accuracy: logits must be [N, C] with N labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data().data() + i * c;
    hits += static_cast<std::size_t>(std::max_element(row, row + c) - row) == labels[i];
  }
  return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
}

void SgdConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("SGD learning rate must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("SGD momentum must be in [0, 1)");
  if (steps == 0 || batch_size == 0) throw ConfigError("SGD steps and batch size must be >= 1");
}

template <Real T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double lr,
              double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw DimensionError("sgd_step: parameter, gradient and velocity sizes differ");
  }
  const T m = static_cast<T>(momentum), a = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = m * velocity[i] + grads[i];
    params[i] -= a * velocity[i];
  }
}

namespace {

template <class W>
auto tensors_of(W& w) {
  std::vector<decltype(&std::declval<W&>().head.weight)> out;
  w.visit("", [&](const std::string&, auto& t) { out.push_back(&t); });
  return out;
}

}  // namespace

template <Real T>
void sgd_step(TFormerWeights<T>& params, const TFormerWeights<T>& grads,
              TFormerWeights<T>& velocity, const SgdConfig& cfg) {
  auto p = tensors_of(params);
  auto g = tensors_of(grads);
  auto v = tensors_of(velocity);
  if (p.size() != g.size() || p.size() != v.size()) {
    throw DimensionError("sgd_step: weight structures differ");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!p[i]->same_shape(*g[i]) || !p[i]->same_shape(*v[i])) {
      throw DimensionError("sgd_step: tensor shapes differ");
    }
    sgd_step<T>(p[i]->data(), g[i]->data(), v[i]->data(), cfg.lr, cfg.momentum);
  }
}

TrainHistory train_demo(const TrainDemoConfig& cfg, TFormerModel<float>* trained) {
  cfg.sgd.validate();
  const ToyDataset data = synth_dataset(cfg.seed, cfg.samples);
  Rng rng(cfg.seed ^ 0x5DEECE66DULL);
  auto model = TFormerModel<float>::build(make_config(Variant::Micro, kToyClasses), &rng);
  auto velocity = zeros_like_weights(model.weights());

  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const TensorF all_images = data.gather<float>(all);

  TrainHistory hist;
  auto evaluate = [&](std::size_t step) {
    hist.accuracy.push_back(accuracy(model.forward(all_images), data.labels));
    hist.accuracy_step.push_back(step);
  };
  evaluate(0);

  std::vector<std::size_t> order = all;
  std::size_t cursor = order.size();
  const std::size_t batch = std::min(cfg.sgd.batch_size, data.size());
  for (std::size_t step = 1; step <= cfg.sgd.steps; ++step) {
    if (cursor + batch > order.size()) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      cursor = 0;
    }
    const std::span<const std::size_t> idx(order.data() + cursor, batch);
    cursor += batch;

    ModelOp<float> op;
    const auto labels = data.gather_labels(idx);
    const auto logits = op.forward(model, data.gather<float>(idx));
    const auto ce = cross_entropy(logits, labels);
    require_finite(ce.dlogits, "cross-entropy");
    if (!std::isfinite(ce.loss)) throw NumericError("training loss is not finite");
    hist.loss.push_back(ce.loss);

    auto grads = zeros_like_weights(model.weights());
    op.vjp(ce.dlogits, grads);
    sgd_step(model.weights(), grads, velocity, cfg.sgd);

    if (cursor + batch > order.size() || step == cfg.sgd.steps) evaluate(step);
  }
  hist.final_accuracy = hist.accuracy.back();
  if (trained) *trained = std::move(model);
  return hist;
}

double window_decrease_fraction(std::span<const double> loss, std::size_t window,
                                std::size_t smooth) {
  if (smooth == 0 || window == 0) throw ConfigError("window and smoothing length must be >= 1");
  if (loss.size() < window + smooth) return 0.0;
  std::vector<double> avg(loss.size(), 0.0);
  double run = 0;
  for (std::size_t i = 0; i < loss.size(); ++i) {
    run += loss[i];
    if (i >= smooth) run -= loss[i - smooth];
    avg[i] = run / static_cast<double>(smooth);
  }
  std::size_t total = 0, down = 0;
  for (std::size_t s = smooth - 1; s + window < loss.size(); ++s) {
    ++total;
    down += avg[s + window] < avg[s];
  }
  return static_cast<double>(down) / static_cast<double>(total);
}

template Tensor<float> ToyDataset::gather<float>(std::span<const std::size_t>) const;
template Tensor<double> ToyDataset::gather<double>(std::span<const std::size_t>) const;
template LossResult<float> cross_entropy(const Tensor<float>&, std::span<const std::size_t>);
template LossResult<double> cross_entropy(const Tensor<double>&, std::span<const std::size_t>);
template double accuracy(const Tensor<float>&, std::span<const std::size_t>);
template double accuracy(const Tensor<double>&, std::span<const std::size_t>);
template void sgd_step(std::span<float>, std::span<const float>, std::span<float>, double, double);
template void sgd_step(std::span<double>, std::span<const double>, std::span<double>, double, double);
template void sgd_step(TFormerWeights<float>&, const TFormerWeights<float>&, TFormerWeights<float>&,
                       const SgdConfig&);
template void sgd_step(TFormerWeights<double>&, const TFormerWeights<double>&,
                       TFormerWeights<double>&, const SgdConfig&);

}  // namespace tformer
