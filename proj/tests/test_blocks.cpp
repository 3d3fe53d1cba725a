#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "esanet/autodiff.hpp"
#include "esanet/blocks.hpp"
#include "oracles.hpp"

using namespace esanet;

namespace {

template <typename T>
void zero_weights_with_prefix(Graph<T>& g, const std::string& prefix) {
  for (auto& [name, t] : g.weights)
    if (name.rfind(prefix, 0) == 0)
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(0);
}

ConvSpec dw3x3(int64_t c) {
  ConvSpec sp;
  sp.in_channels = sp.out_channels = c;
  sp.kernel_h = sp.kernel_w = 3;
  sp.pad_h = sp.pad_w = 1;
  sp.groups = c;
  return sp;
}

}  // namespace

TEST_CASE("compute_pool_sizes matches the divisor families") {
  CHECK(compute_pool_sizes(20, 15) == std::vector<std::pair<int, int>>{{4, 3}});
  CHECK(compute_pool_sizes(32, 16) ==
        std::vector<std::pair<int, int>>{{16, 8}, {8, 4}, {4, 2}});
  CHECK(compute_pool_sizes(7, 5).empty());  // coprime: global branch only
  // cap kicks in ahead of smaller sizes
  CHECK(compute_pool_sizes(32, 16, 3) == std::vector<std::pair<int, int>>{{16, 8}, {8, 4}});
}

TEST_CASE("nbt1d block: parameter count, shapes, projection") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 64, 16, 16});
  BlockSpec spec{BlockKind::kNbt1d, 64, 64, 1};
  b.mark_output("y", build_nbt1d_block(b, x, spec, "blk"));
  auto rep = count_costs(b.graph);
  CHECK(rep.conv_weight_params == 4 * 3 * 64 * 64);  // 49,152

  GraphBuilder<float> b2;
  int32_t x2 = b2.input("x", Shape{1, 64, 16, 16});
  BlockSpec s2{BlockKind::kNbt1d, 64, 128, 2};
  int32_t out = build_nbt1d_block(b2, x2, s2, "blk");
  b2.mark_output("y", out);
  CHECK(b2.graph.node(out).out_shape == Shape{1, 128, 8, 8});
  CHECK(b2.graph.weight_specs.count("blk.proj.w") == 1);

  BlockSpec bad{BlockKind::kNbt1d, 64, 64, 3};
  GraphBuilder<float> b3;
  int32_t x3 = b3.input("x", Shape{1, 64, 8, 8});
  CHECK_THROWS_AS(build_nbt1d_block(b3, x3, bad, "blk"), ConfigError);
}

TEST_CASE("zero residual branch passes the skip through") {
  for (BlockKind kind : {BlockKind::kBasic, BlockKind::kNbt1d}) {
    GraphBuilder<float> b;
    int32_t x = b.input("x", Shape{1, 32, 8, 8});
    BlockSpec spec{kind, 32, 32, 1};
    b.mark_output("y", build_residual_block(b, x, spec, "blk"));
    init_weights(b.graph, 3);
    zero_weights_with_prefix(b.graph, "blk.");
    Rng rng(4);
    auto xin = random_tensor<float>(Shape{1, 32, 8, 8}, rng);
    auto out = execute(b.graph, {{"x", xin}});
    CHECK(out.at("y") == ops::relu(xin));
  }
}

TEST_CASE("basic and bottleneck parameter counts match the formula sums") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 64, 16, 16});
  b.mark_output("y", build_basic_block(b, x, BlockSpec{BlockKind::kBasic, 64, 64, 1}, "blk"));
  CHECK(count_costs(b.graph).conv_weight_params == 2 * 9 * 64 * 64);  // 73,728

  GraphBuilder<float> b2;
  int32_t x2 = b2.input("x", Shape{1, 64, 16, 16});
  b2.mark_output("y",
                 build_bottleneck_block(b2, x2, BlockSpec{BlockKind::kBottleneck, 64, 64, 1}, "blk"));
  // layer-by-layer: 1x1 64->64, 3x3 64->64, 1x1 64->256, projection 64->256
  const int64_t expected = 64 * 64 + 9 * 64 * 64 + 64 * 256 + 64 * 256;
  CHECK(count_costs(b2.graph).conv_weight_params == expected);
  CHECK(b2.graph.node(b2.graph.outputs.at("y")).out_shape.c == 256);
}

TEST_CASE("nbt1d conv params and MACs are exactly 2/3 of basic at stride 1") {
  for (int64_t c : {16, 64, 128}) {
    GraphBuilder<float> bb;
    int32_t xb = bb.input("x", Shape{1, c, 16, 16});
    bb.mark_output("y", build_basic_block(bb, xb, BlockSpec{BlockKind::kBasic, c, c, 1}, "blk"));
    auto basic = count_costs(bb.graph);

    GraphBuilder<float> bn;
    int32_t xn = bn.input("x", Shape{1, c, 16, 16});
    bn.mark_output("y", build_nbt1d_block(bn, xn, BlockSpec{BlockKind::kNbt1d, c, c, 1}, "blk"));
    auto nbt = count_costs(bn.graph);

    CHECK(nbt.conv_weight_params * 3 == basic.conv_weight_params * 2);

    // conv MACs only (exclude the elementwise bookkeeping ops)
    auto conv_macs = [](const Graph<float>& g) {
      int64_t macs = 0;
      for (const Node& n : g.nodes)
        if (n.kind == OpKind::kConv2d) {
          const auto& sp = std::get<ConvAttrs>(n.attrs).spec;
          macs += int64_t(sp.kernel_h) * sp.kernel_w * (sp.in_channels / sp.groups) *
                  sp.out_channels * n.out_shape.h * n.out_shape.w;
        }
      return macs;
    };
    CHECK(conv_macs(bn.graph) * 3 == conv_macs(bb.graph) * 2);
  }
}

TEST_CASE("SE fusion with saturated gates degenerates to plain addition") {
  GraphBuilder<float> b;
  const int64_t C = 32;
  int32_t rgb = b.input("rgb", Shape{1, C, 6, 6});
  int32_t depth = b.input("depth", Shape{1, C, 6, 6});
  b.mark_output("y", build_se_fusion(b, rgb, depth, C, 16, "fuse"));
  init_weights(b.graph, 5);
  // zero the gate projections and push both biases to +20: sigmoid ~ 1
  for (const char* stream : {"rgb", "depth"}) {
    std::string p = std::string("fuse.") + stream;
    auto& w = b.graph.weights.at(p + ".fc2.w");
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = 0.f;
    auto& bias = b.graph.weights.at(p + ".fc2.b");
    for (int64_t i = 0; i < bias.numel(); ++i) bias[i] = 20.f;
  }
  Rng rng(6);
  auto r = random_tensor<float>(Shape{1, C, 6, 6}, rng);
  auto d = random_tensor<float>(Shape{1, C, 6, 6}, rng);
  auto out = execute(b.graph, {{"rgb", r}, {"depth", d}});
  auto plain = ops::add(r, d);
  CHECK(oracle::rel_error(out.at("y"), plain) < 1e-6);

  // suppressing the depth gate leaves the rgb features only
  auto& db = b.graph.weights.at("fuse.depth.fc2.b");
  for (int64_t i = 0; i < db.numel(); ++i) db[i] = -20.f;
  auto out2 = execute(b.graph, {{"rgb", r}, {"depth", d}});
  CHECK(oracle::rel_error(out2.at("y"), r) < 1e-6);
}

TEST_CASE("SE fusion matches the eager primitive composition") {
  GraphBuilder<float> b;
  const int64_t C = 32, R = 16;
  int32_t rgb = b.input("rgb", Shape{2, C, 5, 5});
  int32_t depth = b.input("depth", Shape{2, C, 5, 5});
  b.mark_output("y", build_se_fusion(b, rgb, depth, C, R, "fuse"));
  init_weights(b.graph, 7);
  Rng rng(8);
  auto r = random_tensor<float>(Shape{2, C, 5, 5}, rng);
  auto d = random_tensor<float>(Shape{2, C, 5, 5}, rng);
  auto out = execute(b.graph, {{"rgb", r}, {"depth", d}});

  auto se = [&](const Tensor<float>& x, const std::string& p) {
    ConvSpec fc1, fc2;
    fc1.in_channels = C;
    fc1.out_channels = C / R;
    fc1.has_bias = true;
    fc2.in_channels = C / R;
    fc2.out_channels = C;
    fc2.has_bias = true;
    auto g = ops::global_avg_pool(x);
    auto b1 = b.graph.weights.at(p + ".fc1.b");
    auto b2 = b.graph.weights.at(p + ".fc2.b");
    g = ops::relu(ops::conv2d(g, b.graph.weights.at(p + ".fc1.w"), &b1, fc1));
    g = ops::sigmoid(ops::conv2d(g, b.graph.weights.at(p + ".fc2.w"), &b2, fc2));
    return ops::scale_channels(x, g);
  };
  auto expect = ops::add(se(r, "fuse.rgb"), se(d, "fuse.depth"));
  CHECK(out.at("y") == expect);

  CHECK_THROWS_AS(build_se_scale(b, rgb, C, 5, "bad"), ConfigError);  // 5 does not divide 32
}

TEST_CASE("context module builds divisor branches and keeps the extent") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 512, 20, 15});
  ContextSpec spec;
  spec.in_channels = 512;
  spec.h = 20;
  spec.w = 15;
  spec.pool_sizes = compute_pool_sizes(20, 15);
  spec.branch_channels = 170;
  spec.out_channels = 512;
  int32_t out = build_context_module(b, x, spec, "ctx");
  b.mark_output("y", out);
  CHECK(b.graph.node(out).out_shape == Shape{1, 512, 20, 15});
  // the 4x3 pooled branch uses a 5x5 window and upsamples by 5
  bool found_pool = false, found_up5 = false;
  for (const Node& n : b.graph.nodes) {
    if (n.kind == OpKind::kAvgPool) {
      const auto& a = std::get<PoolAttrs>(n.attrs);
      found_pool = a.wh == 5 && a.ww == 5 && a.sh == 5 && a.sw == 5;
    }
    if (n.kind == OpKind::kNearestUpsample) {
      const auto& a = std::get<UpsampleAttrs>(n.attrs);
      if (a.fh == 5 && a.fw == 5) found_up5 = true;
    }
  }
  CHECK(found_pool);
  CHECK(found_up5);

  // smoke the forward pass
  init_weights(b.graph, 9);
  Rng rng(10);
  auto xin = random_tensor<float>(Shape{1, 512, 20, 15}, rng);
  auto res = execute(b.graph, {{"x", xin}});
  CHECK(res.at("y").shape() == Shape{1, 512, 20, 15});
}

TEST_CASE("context module rejects non-divisor pooling sizes naming both") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 64, 20, 15});
  ContextSpec spec;
  spec.in_channels = 64;
  spec.h = 20;
  spec.w = 15;
  spec.pool_sizes = {{8, 4}};  // 8 does not divide 20
  spec.branch_channels = 32;
  spec.out_channels = 64;
  try {
    build_context_module(b, x, spec, "ctx");
    FAIL("expected factor violation");
  } catch (const FactorViolation& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(8,4)") != std::string::npos);
    CHECK(msg.find("(20,15)") != std::string::npos);
  }
}

TEST_CASE("learned upsample at init equals bilinear x2 on the interior") {
  GraphBuilder<float> b;
  const int64_t C = 3;
  int32_t x = b.input("x", Shape{1, C, 7, 6});
  b.mark_output("y", build_learned_upsample(b, x, "up"));
  init_weights(b.graph, 11);
  Rng rng(12);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto xin = random_tensor<float>(Shape{1, C, 7, 6}, rng);
    auto got = execute(b.graph, {{"x", xin}}).at("y");
    auto ref = ops::bilinear_upsample(xin, 2);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 1; h < 13; ++h)
        for (int64_t w = 1; w < 11; ++w)
          worst = std::max(worst,
                           std::abs(double(got(0, c, h, w)) - double(ref(0, c, h, w))));
  }
  CHECK(worst < 1e-6);

  // 1-D slice sanity: [a, b] -> [., 0.75a+0.25b, 0.25a+0.75b, .]
  Tensor<float> line(Shape{1, 1, 1, 2});
  line[0] = 0.4f;
  line[1] = -1.2f;
  GraphBuilder<float> b1;
  int32_t x1 = b1.input("x", Shape{1, 1, 1, 2});
  b1.mark_output("y", build_learned_upsample(b1, x1, "up"));
  init_weights(b1.graph, 1);
  auto y1 = execute(b1.graph, {{"x", line}}).at("y");
  // row 0 of a height-1 input is border in h; bilinear clamps there, and the
  // kernel loses the padded taps: compare the width-interior ratio instead
  const double a = 0.4, bb = -1.2;
  // interior columns get 2/3 of the full kernel mass at the h border
  CHECK(y1(0, 0, 0, 1) == doctest::Approx((0.75 * a + 0.25 * bb) * 0.75).epsilon(1e-5));
  CHECK(y1(0, 0, 0, 2) == doctest::Approx((0.25 * a + 0.75 * bb) * 0.75).epsilon(1e-5));
}

TEST_CASE("learned upsample: constant input, partition of unity inside") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 2, 5, 5});
  b.mark_output("y", build_learned_upsample(b, x, "up"));
  init_weights(b.graph, 13);
  Tensor<float> c7(Shape{1, 2, 5, 5}, 7.f);
  auto y = execute(b.graph, {{"x", c7}}).at("y");
  for (int64_t h = 0; h < 10; ++h)
    for (int64_t w = 0; w < 10; ++w) {
      const bool border = h == 0 || h == 9 || w == 0 || w == 9;
      if (border)
        CHECK(y(0, 0, h, w) < 7.f);  // zero padding: kernel sums below 1
      else
        CHECK(y(0, 0, h, w) == doctest::Approx(7.f).epsilon(1e-6));
    }
}

TEST_CASE("learned upsample kernel trains away from the bilinear init") {
  const int64_t C = 2;
  GraphBuilder<double> b;
  int32_t x = b.input("x", Shape{1, C, 4, 4});
  b.mark_output("y", build_learned_upsample(b, x, "up"));
  init_weights(b.graph, 15);
  Tensor<double> w0 = b.graph.weights.at("up.dw.w");

  Rng rng(16);
  Tape<double> tape;
  auto xi = tape.leaf(random_tensor<double>(Shape{1, C, 4, 4}, rng), false);
  auto wi = tape.leaf(w0, true);
  auto up = tape.nearest_upsample(xi, 2, 2);
  auto y = tape.conv2d(up, wi, Tape<double>::kNoValue, dw3x3(C));
  auto root = tape.weighted_sum(y, random_tensor<double>(Shape{1, C, 8, 8}, rng));
  auto grads = tape.backward(root);
  const auto& g = grads.at(wi);
  double gnorm = 0;
  for (int64_t i = 0; i < g.numel(); ++i) gnorm += g[i] * g[i];
  CHECK(gnorm > 0.0);
  Tensor<double> w1 = w0;
  for (int64_t i = 0; i < w1.numel(); ++i) w1[i] -= 0.1 * g[i];
  CHECK(!(w1 == w0));
}

TEST_CASE("decoder module shapes and skip identity") {
  GraphBuilder<float> b;
  int32_t f = b.input("f", Shape{1, 512, 20, 15});
  int32_t skip = b.input("skip", Shape{1, 256, 40, 30});
  int32_t out = build_decoder_module(b, f, skip, 512, 256, 3, UpsamplingMode::kLearned, "dec");
  b.mark_output("y", out);
  CHECK(b.graph.node(out).out_shape == Shape{1, 256, 40, 30});
  init_weights(b.graph, 17);

  // the same module without the skip input, sharing weights
  GraphBuilder<float> b2;
  int32_t f2 = b2.input("f", Shape{1, 512, 20, 15});
  b2.mark_output("y", build_decoder_module(b2, f2, kNoSkip, 512, 256, 3,
                                           UpsamplingMode::kLearned, "dec"));
  b2.graph.weights = b.graph.weights;

  Rng rng(18);
  auto fin = random_tensor<float>(Shape{1, 512, 20, 15}, rng);
  auto zero_skip = Tensor<float>(Shape{1, 256, 40, 30}, 0.f);
  auto with = execute(b.graph, {{"f", fin}, {"skip", zero_skip}});
  auto without = execute(b2.graph, {{"f", fin}});
  CHECK(with.at("y") == without.at("y"));

  // shallow (SwiftNet-like) variant builds and shape-checks
  GraphBuilder<float> b3;
  int32_t f3 = b3.input("f", Shape{1, 128, 8, 8});
  int32_t o3 = build_decoder_module(b3, f3, kNoSkip, 128, 64, 0, UpsamplingMode::kBilinear, "dec");
  CHECK(b3.graph.nodes[o3].out_shape == Shape{1, 64, 16, 16});

  // mismatched skip resolution is a configuration error
  GraphBuilder<float> b4;
  int32_t f4 = b4.input("f", Shape{1, 512, 20, 15});
  int32_t bad_skip = b4.input("skip", Shape{1, 256, 20, 15});
  CHECK_THROWS_AS(
      build_decoder_module(b4, f4, bad_skip, 512, 256, 3, UpsamplingMode::kLearned, "dec"),
      ConfigError);
}
