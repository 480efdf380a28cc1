#include "doctest.h"
#include "test_util.hpp"
#include "tformer/model.hpp"

using namespace tformer;

TEST_CASE("variant schemas") {
  auto depths = [](const TFormerConfig& c) {
    std::vector<std::size_t> d;
    for (const auto& s : c.stages) d.push_back(s.depth);
    return d;
  };
  auto dims = [](const TFormerConfig& c) {
    std::vector<std::size_t> d;
    for (const auto& s : c.stages) d.push_back(s.embed_dim);
    return d;
  };
  CHECK(depths(make_config(Variant::S)) == std::vector<std::size_t>{2, 2, 6, 2});
  CHECK(depths(make_config(Variant::M)) == std::vector<std::size_t>{4, 4, 12, 4});
  CHECK(depths(make_config(Variant::L)) == std::vector<std::size_t>{6, 6, 18, 6});
  CHECK(dims(make_config(Variant::M)) == std::vector<std::size_t>{64, 128, 320, 512});
  CHECK(make_config(Variant::S).total_stride() == 32);
  CHECK(parse_variant("MICRO") == Variant::Micro);
  CHECK_THROWS_AS(parse_variant("xl"), ConfigError);
}

TEST_CASE("config json round trip and rejection") {
  for (Variant v : {Variant::S, Variant::M, Variant::L, Variant::Micro}) {
    const auto cfg = make_config(v, 10);
    const auto text = config_to_json(cfg);
    CHECK(config_from_json(text) == cfg);
    CHECK(config_to_json(config_from_json(text)) == text);
  }
  CHECK_THROWS_AS(config_from_json("{"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{}"), ConfigError);
  auto bad = make_config(Variant::Micro);
  bad.stages[1].patch.in_channels = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("S at 224: stage shapes and logits") {
  Rng rng(0);
  const auto model = build_variant<float>(Variant::S, 1000, rng);
  const auto x = TensorF::randn({1, 3, 224, 224}, rng);
  const auto stages = model.stage_outputs(x);
  REQUIRE(stages.size() == 4);
  const std::size_t sides[] = {56, 28, 14, 7};
  const std::size_t chans[] = {64, 128, 320, 512};
  for (std::size_t i = 0; i < 4; ++i) CHECK(stages[i].dims() == Shape{1, chans[i], sides[i], sides[i]});
  CHECK(model.forward(x).dims() == Shape{1, 1000});
}

TEST_CASE("Micro forward contract") {
  Rng rng(1);
  const auto model = build_variant<double>(Variant::Micro, 4, rng);
  const auto x = TensorD::randn({2, 3, 32, 32}, rng);
  const auto logits = model.forward(x);
  CHECK(logits.dims() == Shape{2, 4});
  CHECK(model.forward(x) == logits);

  // Rows do not interact.
  const auto single = model.forward(TensorD(Shape{1, 3, 32, 32}, std::vector<double>(x.vec().begin() + 3 * 32 * 32, x.vec().end())));
  for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(single[k] - logits[4 + k]) <= 1e-6);

  CHECK_THROWS_AS(model.forward(TensorD({1, 3, 30, 32})), DimensionError);
  CHECK_THROWS_AS(model.forward(TensorD({1, 4, 32, 32})), DimensionError);
  CHECK_THROWS_AS(model.forward(TensorD({3, 32, 32})), DimensionError);
  CHECK_NOTHROW(model.forward(TensorD({1, 3, 16, 24})));
}

TEST_CASE("parameter counts agree with the layout") {
  for (Variant v : {Variant::S, Variant::Micro}) {
    for (std::size_t classes : {std::size_t{1000}, std::size_t{4}}) {
      auto cfg = make_config(v, classes);
      for (bool bias : {true, false}) {
        cfg.bias = bias;
        const auto model = TFormerModel<float>::build(cfg, nullptr);
        const auto layout = weight_layout(cfg);
        const auto named = model.named_tensors();
        REQUIRE(layout.size() == named.size());
        std::size_t total = 0, no_bias = 0;
        for (std::size_t i = 0; i < layout.size(); ++i) {
          CHECK(layout[i].first == named[i].first);
          CHECK(layout[i].second == named[i].second->dims());
          total += named[i].second->numel();
          if (named[i].first.size() < 5 || named[i].first.substr(named[i].first.size() - 5) != ".bias")
            no_bias += named[i].second->numel();
        }
        CHECK(model.count_parameters(true).total == total);
        CHECK(model.count_parameters(false).total == no_bias);
        CHECK(model.parameter_names().size() == named.size());
      }
    }
  }
}

TEST_CASE("names follow the archive contract") {
  const auto model = TFormerModel<float>::build(make_config(Variant::Micro, 4), nullptr);
  const auto names = model.parameter_names();
  CHECK(names.front() == "stage0.patch.weight");
  CHECK(std::find(names.begin(), names.end(), "stage1.block0.ffn.fc2.bias") != names.end());
  CHECK(std::find(names.begin(), names.end(), "stage0.block0.hybrid.weight") != names.end());
  CHECK(names.back() == "head.bias");
}

TEST_CASE("seeded build is deterministic") {
  Rng a(5), b(5);
  const auto ma = build_variant<float>(Variant::Micro, 4, a);
  const auto mb = build_variant<float>(Variant::Micro, 4, b);
  const auto na = ma.named_tensors(), nb = mb.named_tensors();
  for (std::size_t i = 0; i < na.size(); ++i) CHECK(*na[i].second == *nb[i].second);
}
