#include <numeric>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "tformer/layers.hpp"

using namespace tformer;
using testutil::max_abs_diff;
using testutil::nchw;
using testutil::to_vec;

namespace {

template <class W>
void randomize(W& w, Rng& rng) {
  w.visit("", [&](const std::string&, TensorD& t) {
    for (auto& v : t.data()) v = 0.3 * rng.normal();
  });
}

std::vector<oracle::Branch> branches_of(const NLModuleConfig& nl) {
  std::vector<oracle::Branch> out;
  for (PoolKind op : nl.operators)
    for (std::size_t k : nl.scales) out.push_back({op == PoolKind::max, k});
  return out;
}

oracle::Vec hybrid_oracle(const oracle::Vec& x, oracle::Nchw in, const HybridWeights<double>& w) {
  const oracle::Vec pooled = oracle::nl_module(x, in, branches_of(w.nl));
  return oracle::channel_matmul(to_vec(w.pw_weight), in.c, pooled, in,
                                w.pw_bias ? to_vec(*w.pw_bias) : oracle::Vec{});
}

oracle::Vec ffn_oracle(const oracle::Vec& x, oracle::Nchw in, const FFNWeights<double>& w) {
  return oracle::pcs_ffn(x, in, w.cfg.ratio, w.cfg.groups, to_vec(w.fc1_weight),
                         w.fc1_bias ? to_vec(*w.fc1_bias) : oracle::Vec{}, to_vec(w.fc2_weight),
                         w.fc2_bias ? to_vec(*w.fc2_bias) : oracle::Vec{});
}

}  // namespace

TEST_CASE("partition worked examples") {
  CHECK(partition_channels(64, 10) == std::vector<std::size_t>{7, 7, 7, 7, 6, 6, 6, 6, 6, 6});
  CHECK(partition_channels(10, 10) == std::vector<std::size_t>(10, 1));
  CHECK(partition_channels(16, 4) == std::vector<std::size_t>{4, 4, 4, 4});
  CHECK_THROWS_AS(partition_channels(9, 10), ConfigError);
}

TEST_CASE("partition sums to D and is maximally even") {
  Rng rng(77);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(12);
    const std::size_t d = n + rng.below(600);
    const auto p = partition_channels(d, n);
    REQUIRE(p.size() == n);
    CHECK(std::accumulate(p.begin(), p.end(), std::size_t{0}) == d);
    const auto [lo, hi] = std::minmax_element(p.begin(), p.end());
    CHECK(*hi - *lo <= 1);
    CHECK(p == oracle::even_split(d, n));
  }
}

TEST_CASE("channel shuffle permutation") {
  CHECK(channel_shuffle_order(6, 2) == std::vector<std::size_t>{0, 3, 1, 4, 2, 5});
  CHECK(channel_shuffle_order(5, 1) == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(channel_shuffle_order(6, 4), ConfigError);
  Rng rng(6);
  for (auto [c, g] : std::vector<std::pair<std::size_t, std::size_t>>{{6, 2}, {8, 4}, {64, 2}}) {
    const auto order = channel_shuffle_order(c, g);
    CHECK(std::set<std::size_t>(order.begin(), order.end()).size() == c);
    CHECK(order == oracle::shuffle_permutation(c, g));
    const auto x = TensorD::randn({2, c, 3, 3}, rng);
    const auto y = channel_shuffle(x, g);
    CHECK(max_abs_diff(y, oracle::shuffle_dense(to_vec(x), nchw(x.dims()), g)) == 0.0);
    CHECK(channel_shuffle(y, c / g) == x);
    CHECK(channel_shuffle(channel_shuffle(x, c / g), g) == x);
  }
}

TEST_CASE("nl module worked examples") {
  const NLModuleConfig nl;
  const auto c = nl_module(TensorD::full({1, 64, 8, 8}, 3.0), nl);
  for (double v : c.data()) CHECK(v == 3.0);

  Rng rng(3);
  const auto x = TensorD::randn({1, 4, 6, 6}, rng);
  const NLModuleConfig avg3{{PoolKind::avg}, {3}};
  CHECK(nl_module(x, avg3) == pool2d(x, PoolSpec::same(PoolKind::avg, 3)));
}

TEST_CASE("nl module config validation") {
  CHECK_THROWS_AS((NLModuleConfig{{}, {3}}.validate()), ConfigError);
  CHECK_THROWS_AS((NLModuleConfig{{PoolKind::avg}, {}}.validate()), ConfigError);
  CHECK_THROWS_AS((NLModuleConfig{{PoolKind::max, PoolKind::avg}, {3}}.validate()), ConfigError);
  CHECK_THROWS_AS((NLModuleConfig{{PoolKind::avg, PoolKind::avg}, {3}}.validate()), ConfigError);
  CHECK_THROWS_AS((NLModuleConfig{{PoolKind::avg}, {4}}.validate()), ConfigError);
  CHECK_THROWS_AS((NLModuleConfig{{PoolKind::avg}, {5, 3}}.validate()), ConfigError);
  CHECK_NOTHROW(NLModuleConfig{}.validate());
  CHECK_THROWS_AS(nl_module(TensorD({1, 9, 4, 4}), NLModuleConfig{}), ConfigError);
}

TEST_CASE("hybrid layer examples") {
  const auto w = HybridWeights<double>::init(64, NLModuleConfig{}, false, nullptr);
  CHECK(parameter_count(w) == 4096);

  auto eye = HybridWeights<double>::init(8, NLModuleConfig{{PoolKind::avg, PoolKind::max}, {3}}, false, nullptr);
  for (std::size_t i = 0; i < 8; ++i) eye.pw_weight[i * 8 + i] = 1.0;
  const auto y = hybrid_layer(TensorD::full({1, 8, 5, 5}, -1.5), eye);
  for (double v : y.data()) CHECK(v == -1.5);
  CHECK_THROWS_AS(hybrid_layer(TensorD({1, 6, 5, 5}), eye), DimensionError);
}

TEST_CASE("pcs ffn weight counts and validation") {
  const auto w = FFNWeights<double>::init(64, PCSFFNConfig{4, 2}, false, nullptr);
  CHECK(parameter_count(w) == 16384);
  const auto dense = FFNWeights<double>::init(64, PCSFFNConfig{4, 1, FFNKind::standard}, false, nullptr);
  CHECK(parameter_count(dense) == 32768);
  CHECK_THROWS_AS(PCSFFNConfig({4, 3}).validate(64), ConfigError);
  CHECK_THROWS_AS(PCSFFNConfig({0, 1}).validate(64), ConfigError);
  CHECK_THROWS_AS(PCSFFNConfig({4, 2, FFNKind::standard}).validate(64), ConfigError);
  CHECK_THROWS_AS(PCSFFNConfig({4, 1, FFNKind::ghost}).validate(7), ConfigError);
  CHECK_NOTHROW(PCSFFNConfig({4, 1, FFNKind::ghost}).validate(8));
}

TEST_CASE("patch embed shapes") {
  Rng rng(1);
  const auto w0 = PatchEmbedWeights<float>::init({3, 64, 7, 4}, true, &rng);
  CHECK(patch_embed(TensorF({1, 3, 224, 224}), w0).dims() == Shape{1, 64, 56, 56});
  const auto w1 = PatchEmbedWeights<float>::init({64, 128, 3, 2}, true, &rng);
  CHECK(patch_embed(TensorF({1, 64, 56, 56}), w1).dims() == Shape{1, 128, 28, 28});
  CHECK_THROWS_AS(patch_embed(TensorF({1, 4, 32, 32}), w0), DimensionError);
}

TEST_CASE("block with zero branches is the identity") {
  Rng rng(2);
  auto w = BlockWeights<double>::init(64, NLModuleConfig{}, PCSFFNConfig{4, 2}, false, &rng);
  std::fill(w.hybrid.pw_weight.data().begin(), w.hybrid.pw_weight.data().end(), 0.0);
  std::fill(w.ffn.fc2_weight.data().begin(), w.ffn.fc2_weight.data().end(), 0.0);
  const auto x = TensorD::randn({2, 64, 8, 8}, rng);
  const auto y = tformer_block(x, w);
  CHECK(y.dims() == Shape{2, 64, 8, 8});
  CHECK(y == x);
}

TEST_CASE("layers match brute-force and dense block-diagonal oracles") {
  Rng rng(123);
  const NLModuleConfig nl_small{{PoolKind::avg, PoolKind::max}, {3, 5, 7}};
  for (int t = 0; t < 4; ++t) {
    const std::size_t d = 12 + 2 * t;
    const auto x = TensorD::randn({2, d, 7, 6}, rng);
    const auto in = nchw(x.dims());

    CHECK(max_abs_diff(nl_module(x, nl_small), oracle::nl_module(to_vec(x), in, branches_of(nl_small))) <= 1e-12);

    auto hw = HybridWeights<double>::init(d, nl_small, true, nullptr);
    randomize(hw, rng);
    CHECK(max_abs_diff(hybrid_layer(x, hw), hybrid_oracle(to_vec(x), in, hw)) <= 1e-10);

    for (std::size_t g : {1, 2}) {
      auto fw = FFNWeights<double>::init(d, PCSFFNConfig{4, g, g == 1 ? FFNKind::standard : FFNKind::pcs}, true, nullptr);
      randomize(fw, rng);
      CHECK(max_abs_diff(pcs_ffn(x, fw), ffn_oracle(to_vec(x), in, fw)) <= 1e-10);
    }

    auto bw = BlockWeights<double>::init(d, nl_small, PCSFFNConfig{4, 2}, true, nullptr);
    randomize(bw, rng);
    const auto n1 = oracle::layer_norm(to_vec(x), in, to_vec(bw.norm1.gamma), to_vec(bw.norm1.beta));
    const auto x1 = oracle::add(to_vec(x), hybrid_oracle(n1, in, bw.hybrid));
    const auto n2 = oracle::layer_norm(x1, in, to_vec(bw.norm2.gamma), to_vec(bw.norm2.beta));
    const auto expected = oracle::add(x1, ffn_oracle(n2, in, bw.ffn));
    CHECK(max_abs_diff(tformer_block(x, bw), expected) <= 1e-10);
  }
}

TEST_CASE("ghost ffn matches a dense-conv oracle") {
  Rng rng(31);
  auto w = FFNWeights<double>::init(8, PCSFFNConfig{2, 1, FFNKind::ghost}, true, nullptr);
  randomize(w, rng);
  const auto x = TensorD::randn({1, 8, 5, 5}, rng);
  auto in = nchw(x.dims());
  auto ghost = [](const oracle::Vec& v, oracle::Nchw s, const TensorD& pw, const TensorD& pb,
                  const TensorD& dw, const TensorD& db, oracle::Nchw& out) {
    const std::size_t half = pw.dim(0);
    oracle::Nchw ps;
    const auto p = oracle::conv2d(v, s, to_vec(pw), half, 1, 1, 0, 1, to_vec(pb), &ps);
    const auto c = oracle::conv2d(p, ps, to_vec(dw), half, 3, 1, 1, half, to_vec(db));
    oracle::Vec y;
    for (std::size_t b = 0; b < s.n; ++b) {
      const std::size_t plane = s.h * s.w;
      y.insert(y.end(), p.begin() + std::ptrdiff_t(b * half * plane), p.begin() + std::ptrdiff_t((b + 1) * half * plane));
      y.insert(y.end(), c.begin() + std::ptrdiff_t(b * half * plane), c.begin() + std::ptrdiff_t((b + 1) * half * plane));
    }
    out = {s.n, 2 * half, s.h, s.w};
    return y;
  };
  oracle::Nchw mid, out;
  const auto h = oracle::gelu(ghost(to_vec(x), in, w.fc1_weight, *w.fc1_bias, *w.fc1_cheap_weight, *w.fc1_cheap_bias, mid));
  const auto y = ghost(h, mid, w.fc2_weight, *w.fc2_bias, *w.fc2_cheap_weight, *w.fc2_cheap_bias, out);
  CHECK(mid.c == 16);
  CHECK(max_abs_diff(pcs_ffn(x, w), y) <= 1e-10);
}
