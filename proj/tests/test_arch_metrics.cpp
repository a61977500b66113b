#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "fep/arch_metrics.hpp"
#include "fep/rng.hpp"

using namespace fep;

TEST_CASE("single conv layer params and flops") {
  LayerSpec s;
  s.n_filters = 16;
  s.in_channels = 3;
  s.kernel = 3;
  s.out_h = s.out_w = 32;
  CHECK(layer_params(s) == 16 * 3 * 3 * 3);
  CHECK(layer_flops(s) == 16L * 3 * 3 * 3 * 32 * 32);
  // one filter at 16 input channels, 32x32 output: 147456 flops, 144 weights
  LayerSpec one;
  one.n_filters = 1;
  one.in_channels = 16;
  one.kernel = 3;
  one.out_h = one.out_w = 32;
  CHECK(layer_flops(one) == 147456);
  CHECK(layer_params(one) == 144);
  // one filter at 64 channels, 8x8: 36864 flops, 576 weights
  LayerSpec deep;
  deep.n_filters = 1;
  deep.in_channels = 64;
  deep.kernel = 3;
  deep.out_h = deep.out_w = 8;
  CHECK(layer_flops(deep) == 36864);
  CHECK(layer_params(deep) == 576);
}

TEST_CASE("bias and batch-norm scalars count toward params only") {
  LayerSpec s;
  s.n_filters = 4;
  s.in_channels = 2;
  s.kernel = 3;
  s.out_h = s.out_w = 5;
  const long base = layer_params(s);
  s.has_bias = true;
  CHECK(layer_params(s) == base + 4);
  s.bn_scalars = 8;
  CHECK(layer_params(s) == base + 12);
  CHECK(layer_flops(s) == 4L * 2 * 9 * 25);
}

TEST_CASE("resnet20-cifar preset totals") {
  ArchDescriptor desc = resnet20_cifar();
  REQUIRE(desc.layers.size() == 20);  // 19 convs + classifier
  long filters = 0;
  for (const auto& s : desc.layers)
    if (s.kind == LayerSpec::Kind::Conv) filters += s.n_filters;
  CHECK(filters == 688);
  MetricsTable t = count_metrics(desc);
  CHECK(format_millions(t.flops[1]) == "2.35M");   // 16x16x9x32x32 = 2359296
  CHECK(t.flops[1] == 2359296);
  CHECK(format_millions(t.flops[7]) == "1.17M");  // 32x16x9x16x16
  CHECK(format_millions(t.total_flops, 1) == "40.5M");
  CHECK(t.total_flops == 40550400 + 640);  // 19 convs + the 64->10 classifier
}

TEST_CASE("stage-3 block conv flops") {
  ArchDescriptor desc = resnet20_cifar();
  // layers 14..18 are 64x64x3x3 at 8x8 = 2359296; 0.44M is such a conv
  // reduced to 12 filters
  CHECK(count_metrics(desc).flops[14] == 2359296);
  LayerSpec s = desc.layers[14];
  s.n_filters = 12;
  CHECK(format_millions(layer_flops(s)) == "0.44M");
}

TEST_CASE("format_millions truncates rather than rounds") {
  CHECK(format_millions(2359296) == "2.35M");
  CHECK(format_millions(1179648) == "1.17M");
  CHECK(format_millions(442368) == "0.44M");
  CHECK(format_millions(40550400, 1) == "40.5M");
  CHECK(format_millions(999999) == "0.99M");
}

TEST_CASE("pruned preset reproduces the reference removal percentages") {
  ArchDescriptor before = resnet20_cifar();
  // removal counts for the 19 convs (classifier untouched)
  std::vector<int> removals = {1, 6,  4, 7,  6, 0, 0, 5, 1, 14,
                               20, 0, 2, 0,  4, 34, 30, 0, 24, 0};
  ArchDescriptor after = prune_descriptor(before, removals);
  DiffMetrics d = diff_metrics(before, after);
  // layer 1: 6 of 16 filters gone, input channels 16 -> 15
  CHECK(d.params_pct[1] == doctest::Approx(41.41).epsilon(1e-3));
  CHECK(d.flops_pct[1] == doctest::Approx(41.41).epsilon(1e-3));
  CHECK(d.params_pct[15] == doctest::Approx(53.12).epsilon(1e-2));
  CHECK(d.params_pct[16] == doctest::Approx(75.10).epsilon(1e-2));
  CHECK(d.params_pct[18] == doctest::Approx(37.50).epsilon(1e-2));
  CHECK(d.total_params_pct == doctest::Approx(30.70).epsilon(2e-3));
  CHECK(d.total_flops_pct == doctest::Approx(30.91).epsilon(1e-3));
}

TEST_CASE("prune_descriptor propagates inherited channel shrinkage") {
  ArchDescriptor desc;
  LayerSpec a;
  a.n_filters = 8;
  a.in_channels = 3;
  a.kernel = 3;
  a.out_h = a.out_w = 4;
  LayerSpec b = a;
  b.in_channels = 8;
  b.inherit_from = 0;
  desc.layers = {a, b};
  ArchDescriptor pruned = prune_descriptor(desc, {3, 1});
  CHECK(pruned.layers[0].n_filters == 5);
  CHECK(pruned.layers[1].n_filters == 7);
  CHECK(pruned.layers[1].in_channels == 5);
  CHECK_THROWS_AS(prune_descriptor(desc, {8, 0}), std::invalid_argument);
  CHECK_THROWS_AS(prune_descriptor(desc, {0}), std::invalid_argument);
}

TEST_CASE("descriptor file round trip") {
  ArchDescriptor desc = resnet20_cifar();
  std::stringstream ss;
  write_descriptor(desc, ss);
  ArchDescriptor back = parse_descriptor(ss);
  REQUIRE(back.layers.size() == desc.layers.size());
  MetricsTable t1 = count_metrics(desc), t2 = count_metrics(back);
  CHECK(t1.total_params == t2.total_params);
  CHECK(t1.total_flops == t2.total_flops);
  for (size_t i = 0; i < desc.layers.size(); ++i) {
    CHECK(back.layers[i].inherit_from == desc.layers[i].inherit_from);
    CHECK(back.layers[i].has_bias == desc.layers[i].has_bias);
  }
}

TEST_CASE("parse errors are reported with line numbers") {
  std::stringstream bad("conv 4 2 3 5 5\nfrobnicate 1 2 3 4 5\n");
  CHECK_THROWS_WITH_AS(parse_descriptor(bad), doctest::Contains("line 2"),
                       std::invalid_argument);
  std::stringstream empty("# only a comment\n\n");
  CHECK(parse_descriptor(empty).layers.empty());
}

TEST_CASE("descriptor_of a live network matches its parameter count") {
  std::mt19937_64 rng = make_rng(5, "init");
  Network net = make_toy_cnn({4, 6}, 1, 8, 3, 3, 17);
  ArchDescriptor desc = descriptor_of(net);
  CHECK(count_metrics(desc).total_params == param_count(net));

  Network res;
  res.input_shape = {4, 6, 6};
  res.nodes.push_back(make_conv(4, 4, 3, 1, 1, rng));
  res.nodes.push_back(make_batchnorm(4));
  res.nodes.push_back(ActivationLayer{Act::ReLU});
  res.nodes.push_back(MaskLayer{Vec::Ones(4)});
  res.nodes.push_back(make_residual_block(4, 3, MaskPosition::BeforeShortcut, rng));
  res.nodes.push_back(FlattenLayer{});
  res.nodes.push_back(make_dense(2, 4 * 6 * 6, rng));
  CHECK(count_metrics(descriptor_of(res)).total_params == param_count(res));
}

TEST_CASE("unknown preset raises") {
  CHECK_THROWS_AS(descriptor_by_name("no-such-net"), std::invalid_argument);
  CHECK(known_presets() == std::vector<std::string>{"resnet20-cifar"});
}
