#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "esanet/graph.hpp"
#include "oracles.hpp"

using namespace esanet;
namespace fs = std::filesystem;

namespace {

ConvSpec spec33(int64_t cin, int64_t cout, int stride = 1, bool bias = false) {
  ConvSpec sp;
  sp.in_channels = cin;
  sp.out_channels = cout;
  sp.kernel_h = sp.kernel_w = 3;
  sp.stride_h = sp.stride_w = stride;
  sp.pad_h = sp.pad_w = 1;
  sp.has_bias = bias;
  return sp;
}

template <typename T>
std::map<std::string, Tensor<T>> random_inputs(const Graph<T>& g, Rng& rng, int64_t batch = 1) {
  std::map<std::string, Tensor<T>> ins;
  for (const auto& [name, id] : g.inputs) {
    Shape s = std::get<InputAttrs>(g.node(id).attrs).shape;
    s.n = batch;
    ins[name] = random_tensor<T>(s, rng);
  }
  return ins;
}

// Random DAG over the supported op set; value shapes stay small.
template <typename T>
Graph<T> random_graph(uint64_t seed) {
  Rng rng(seed);
  GraphBuilder<T> b;
  const int64_t c0 = rng.uniform_int(2, 6);
  int32_t in = b.input("x", Shape{1, c0, 4 * rng.uniform_int(2, 4), 4 * rng.uniform_int(2, 4)});
  std::vector<int32_t> pool{in};
  int name_i = 0;
  const int steps = static_cast<int>(rng.uniform_int(6, 14));
  for (int i = 0; i < steps; ++i) {
    int32_t x = pool[rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1)];
    Shape s = b.shape(x);
    switch (rng.uniform_int(0, 9)) {
      case 0: {
        ConvSpec sp;
        sp.in_channels = s.c;
        sp.out_channels = rng.uniform_int(2, 8);
        sp.kernel_h = static_cast<int>(rng.uniform_int(1, std::min<int64_t>(3, s.h)));
        sp.kernel_w = static_cast<int>(rng.uniform_int(1, std::min<int64_t>(3, s.w)));
        sp.pad_h = sp.kernel_h / 2;
        sp.pad_w = sp.kernel_w / 2;
        sp.stride_h = sp.stride_w = static_cast<int>(rng.uniform_int(1, 2));
        sp.has_bias = rng.bernoulli(0.5);
        pool.push_back(b.conv(x, "c" + std::to_string(name_i++), sp));
        break;
      }
      case 1:
        pool.push_back(b.batchnorm(x, "n" + std::to_string(name_i++)));
        break;
      case 2:
        pool.push_back(b.relu(x));
        break;
      case 3:
        pool.push_back(b.sigmoid(x));
        break;
      case 4:
        if (s.h >= 2 && s.w >= 2) pool.push_back(b.maxpool(x, 2, 2, 2, 2));
        break;
      case 5:
        if (s.h % 2 == 0 && s.w % 2 == 0) pool.push_back(b.avgpool(x, 2, 2, 2, 2));
        break;
      case 6:
        pool.push_back(b.global_avg_pool(x));
        break;
      case 7:
        if (s.h * s.w <= 64)
          pool.push_back(rng.bernoulli(0.5) ? b.nearest_upsample(x, 2, 2)
                                            : b.bilinear_upsample(x, 2, 2));
        break;
      case 8: {
        // find a partner with the same shape for add
        for (int32_t y : pool)
          if (b.shape(y) == s && y != x) {
            pool.push_back(b.add(x, y));
            break;
          }
        break;
      }
      case 9: {
        // SE-style gate: gap -> scale
        int32_t gate = b.global_avg_pool(x);
        int32_t sg = b.sigmoid(gate);
        pool.push_back(b.scale_channels(x, sg));
        break;
      }
    }
  }
  b.mark_output("y", pool.back());
  if (pool.size() > 3) b.mark_output("z", pool[pool.size() / 2]);
  init_weights(b.graph, seed + 1);
  return b.graph;
}

template <typename T>
double max_output_rel_error(const Graph<T>& a, const Graph<T>& b,
                            const std::map<std::string, Tensor<T>>& ins) {
  auto ra = execute(a, ins);
  auto rb = execute(b, ins);
  REQUIRE(ra.size() == rb.size());
  double err = 0;
  for (const auto& [name, va] : ra) {
    REQUIRE(rb.count(name) == 1);
    REQUIRE(va.shape() == rb.at(name).shape());
    err = std::max(err, oracle::rel_error(va, rb.at(name)));
  }
  return err;
}

}  // namespace

TEST_CASE("shape inference: strided conv formula") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 3, 480, 640});
  int32_t c = b.conv(x, "c", spec33(3, 8, 2));
  b.mark_output("y", c);
  infer_shapes(b.graph);
  CHECK(b.graph.node(c).out_shape == Shape{1, 8, 240, 320});
}

TEST_CASE("shape inference diagnostics name the node and shapes") {
  // hand-assemble an inconsistent add
  Graph<float> g;
  Node in1{0, OpKind::kInput, {}, "misc", InputAttrs{"a", Shape{1, 2, 4, 4}}, {}, false};
  Node in2{1, OpKind::kInput, {}, "misc", InputAttrs{"b", Shape{1, 2, 4, 8}}, {}, false};
  Node bad{2, OpKind::kAdd, {0, 1}, "misc", EltwiseAttrs{}, {}, false};
  g.nodes = {in1, in2, bad};
  g.inputs = {{"a", 0}, {"b", 1}};
  g.outputs = {{"y", 2}};
  try {
    infer_shapes(g);
    FAIL("expected shape conflict");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("node 2") != std::string::npos);
    CHECK(msg.find("(1,2,4,4)") != std::string::npos);
    CHECK(msg.find("(1,2,4,8)") != std::string::npos);
  }
}

TEST_CASE("execute: identity relu graph") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 2, 3, 3});
  b.mark_output("y", b.relu(x));
  Rng rng(1);
  auto ins = random_inputs(b.graph, rng);
  auto out = execute(b.graph, ins);
  CHECK(out.at("y") == ops::relu(ins.at("x")));
}

TEST_CASE("execute: conv then identity-BN equals conv alone") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 3, 6, 6});
  int32_t c = b.conv(x, "c", spec33(3, 4));
  int32_t n = b.batchnorm(c, "n", 0.0);
  b.mark_output("y", n);
  init_weights(b.graph, 5);
  Rng rng(2);
  auto ins = random_inputs(b.graph, rng);
  auto out = execute(b.graph, ins);
  auto direct = ops::conv2d(ins.at("x"), b.graph.weights.at("c.w"), nullptr, spec33(3, 4));
  CHECK(oracle::rel_error(out.at("y"), direct) < 1e-6);
}

TEST_CASE("execute equals eager composition of kernels") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 4, 8, 8});
  int32_t c = b.conv(x, "c", spec33(4, 6, 2, true));
  int32_t r = b.relu(c);
  int32_t g = b.global_avg_pool(r);
  int32_t s = b.sigmoid(g);
  int32_t sc = b.scale_channels(r, s);
  int32_t up = b.nearest_upsample(sc, 2, 2);
  b.mark_output("y", up);
  init_weights(b.graph, 7);
  Rng rng(3);
  auto ins = random_inputs(b.graph, rng);
  auto out = execute(b.graph, ins);

  const auto& w = b.graph.weights.at("c.w");
  const auto& bias = b.graph.weights.at("c.b");
  auto e1 = ops::conv2d(ins.at("x"), w, &bias, spec33(4, 6, 2, true));
  auto e2 = ops::relu(e1);
  auto e3 = ops::sigmoid(ops::global_avg_pool(e2));
  auto e4 = ops::nearest_upsample(ops::scale_channels(e2, e3), 2, 2);
  CHECK(out.at("y") == e4);
}

TEST_CASE("execute diagnostics for missing pieces") {
  GraphBuilder<float> b;
  int32_t x = b.input("rgb", Shape{1, 3, 4, 4});
  b.mark_output("y", b.conv(x, "c", spec33(3, 4)));
  // weights not initialized
  Rng rng(4);
  auto ins = random_inputs(b.graph, rng);
  try {
    execute(b.graph, ins);
    FAIL("expected missing weight");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("c.w") != std::string::npos);
  }
  init_weights(b.graph, 1);
  try {
    execute(b.graph, {});
    FAIL("expected missing input");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("rgb") != std::string::npos);
  }
}

TEST_CASE("fold_batchnorm: identity stats leave weights unchanged, bias zero") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 3, 6, 6});
  int32_t c = b.conv(x, "c", spec33(3, 4));
  int32_t n = b.batchnorm(c, "n", 0.0);
  b.mark_output("y", n);
  init_weights(b.graph, 11);  // gamma=1, beta=0, mean=0, var=1

  auto folded = fold_batchnorm(b.graph);
  CHECK(folded.nodes.size() == b.graph.nodes.size() - 1);
  CHECK(folded.weights.at("c.w") == b.graph.weights.at("c.w"));
  const auto& bias = folded.weights.at("c.b");
  for (int64_t i = 0; i < bias.numel(); ++i) CHECK(bias[i] == 0.f);
  // BN parameters are gone from the store
  CHECK(folded.weights.count("n.gamma") == 0);
  CHECK(folded.weight_specs.count("n.gamma") == 0);
}

TEST_CASE("fold_batchnorm: random stats keep outputs equivalent on 10 inputs") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 3, 8, 8});
  int32_t c = b.conv(x, "c", spec33(3, 5, 1, true));
  int32_t n = b.batchnorm(c, "n");
  b.mark_output("y", b.relu(n));
  init_weights(b.graph, 13);
  Rng rng(14);
  // randomize the BN statistics away from identity
  b.graph.weights["n.gamma"] = random_tensor<float>(Shape{1, 5, 1, 1}, rng, 0.5f, 1.5f);
  b.graph.weights["n.beta"] = random_tensor<float>(Shape{1, 5, 1, 1}, rng);
  b.graph.weights["n.mean"] = random_tensor<float>(Shape{1, 5, 1, 1}, rng);
  b.graph.weights["n.var"] = random_tensor<float>(Shape{1, 5, 1, 1}, rng, 0.2f, 2.f);

  auto folded = fold_batchnorm(b.graph);
  CHECK(folded.nodes.size() < b.graph.nodes.size());
  // parameter delta: -4C (BN) +C (new bias)... conv here already had a bias, so -4C
  auto pre = count_costs(b.graph);
  infer_shapes(folded);
  auto post = count_costs(folded);
  CHECK(pre.parameter_count - post.parameter_count == 4 * 5);
  for (int i = 0; i < 10; ++i) {
    auto ins = random_inputs(b.graph, rng);
    CHECK(max_output_rel_error(b.graph, folded, ins) < 1e-4);
  }
}

TEST_CASE("fold_batchnorm adds Cout bias params when conv had none") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 3, 6, 6});
  b.mark_output("y", b.batchnorm(b.conv(x, "c", spec33(3, 4)), "n"));
  init_weights(b.graph, 17);
  auto pre = count_costs(b.graph);
  auto folded = fold_batchnorm(b.graph);
  infer_shapes(folded);
  auto post = count_costs(folded);
  // -4C from BN, +C new bias
  CHECK(pre.parameter_count - post.parameter_count == 3 * 4);
  CHECK(post.node_count == pre.node_count - 1);
}

TEST_CASE("fold_batchnorm guard: conv feeding a skip connection is not folded") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 3, 6, 6});
  int32_t c = b.conv(x, "c", spec33(3, 3));
  int32_t n = b.batchnorm(c, "n");
  int32_t skip = b.add(n, c);  // conv result also feeds the add
  b.mark_output("y", skip);
  init_weights(b.graph, 19);
  auto folded = fold_batchnorm(b.graph);
  CHECK(folded.nodes.size() == b.graph.nodes.size());  // no-op
}

TEST_CASE("fuse_relu collapses conv+relu and dce drops orphans") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 3, 6, 6});
  int32_t c = b.conv(x, "c", spec33(3, 4));
  int32_t r = b.relu(c);
  // orphan branch
  int32_t orphan = b.conv(x, "dead", spec33(3, 2));
  b.relu(orphan);
  b.mark_output("y", r);
  init_weights(b.graph, 23);
  Rng rng(24);
  auto ins = random_inputs(b.graph, rng);
  auto before = execute(b.graph, ins);

  auto fused = fuse_relu(b.graph);
  CHECK(fused.nodes.size() == b.graph.nodes.size() - 2);  // both relus absorbed
  auto after_fuse = execute(fused, ins);
  CHECK(before.at("y") == after_fuse.at("y"));  // bit-identical

  auto clean = eliminate_dead(fused);
  CHECK(clean.nodes.size() == 2);  // input + fused conv
  CHECK(clean.weights.count("dead.w") == 0);
  auto after = execute(clean, ins);
  CHECK(before.at("y") == after.at("y"));
}

TEST_CASE("property: optimize preserves outputs on random graphs") {
  for (uint64_t seed = 1; seed <= 12; ++seed) {
    auto g = random_graph<float>(seed * 1000);
    Rng rng(seed);
    auto ins = random_inputs(g, rng);
    auto passes = {fold_batchnorm<float>, fuse_relu<float>, eliminate_dead<float>};
    for (auto pass : passes) {
      auto h = pass(g);
      CHECK(max_output_rel_error(g, h, ins) < 1e-4);
    }
    auto opt = optimize(g);
    CHECK(opt.nodes.size() <= g.nodes.size());
    CHECK(max_output_rel_error(g, opt, ins) < 1e-4);

    // f64 route is tighter
    auto gd = random_graph<double>(seed * 1000);
    Rng rngd(seed);
    auto insd = random_inputs(gd, rngd);
    auto optd = optimize(gd);
    CHECK(max_output_rel_error(gd, optd, insd) < 1e-6);
  }
}

TEST_CASE("optimize is idempotent") {
  auto g = random_graph<float>(777);
  auto once = optimize(g);
  auto twice = optimize(once);
  CHECK(once.nodes.size() == twice.nodes.size());
}

TEST_CASE("cost model formula cases") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 64, 10, 10});
  ConvSpec sp;
  sp.in_channels = 64;
  sp.out_channels = 64;
  b.mark_output("y", b.conv(x, "c", sp));
  auto rep = count_costs(b.graph);
  CHECK(rep.mac_count == 64 * 64 * 100);
  CHECK(rep.conv_weight_params == 64 * 64);
  CHECK(rep.node_count == 2);
  // totals equal the sum of the per-stage breakdown
  int64_t macs = 0, params = 0, nodes = 0;
  for (const auto& [name, sc] : rep.per_stage) {
    macs += sc.macs;
    params += sc.params;
    nodes += sc.nodes;
  }
  CHECK(macs == rep.mac_count);
  CHECK(params == rep.parameter_count);
  CHECK(nodes == rep.node_count);
}

TEST_CASE("benchmark basics") {
  GraphBuilder<float> b;
  int32_t x = b.input("x", Shape{1, 4, 16, 16});
  b.mark_output("y", b.relu(x));
  Rng rng(31);
  auto ins = random_inputs(b.graph, rng);
  auto rep = benchmark(b.graph, ins, 5, 2);
  CHECK(rep.median_ms > 0.0);
  CHECK(std::isfinite(rep.median_ms));
  CHECK(rep.p10_ms <= rep.median_ms);
  CHECK(rep.median_ms <= rep.p90_ms);
  CHECK_THROWS_AS(benchmark(b.graph, ins, 4, 2), ConfigError);
  CHECK_THROWS_AS(benchmark(b.graph, ins, 5, 1), ConfigError);
}

TEST_CASE("graph serialization round trip") {
  auto g = random_graph<float>(4242);
  Rng rng(43);
  auto ins = random_inputs(g, rng);
  auto out0 = execute(g, ins);

  auto dir = fs::temp_directory_path() / "esanet_graph_rt";
  fs::remove_all(dir);
  save_graph(g, dir.string());
  auto loaded = load_graph<float>(dir.string());
  auto out1 = execute(loaded, ins);
  for (const auto& [name, t] : out0) CHECK(t == out1.at(name));

  // a second save round produces a byte-identical manifest
  auto dir2 = fs::temp_directory_path() / "esanet_graph_rt2";
  fs::remove_all(dir2);
  save_graph(loaded, dir2.string());
  std::ifstream f1(dir / "graph.txt"), f2(dir2 / "graph.txt");
  std::string m1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string m2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(m1 == m2);
  CHECK(!m1.empty());

  // dtype mismatch is rejected
  CHECK_THROWS(load_graph<double>(dir.string()));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("graph validation catches broken topology") {
  Graph<float> g;
  Node a{0, OpKind::kInput, {}, "misc", InputAttrs{"x", Shape{1, 1, 2, 2}}, {}, false};
  Node bad{1, OpKind::kRelu, {2}, "misc", std::monostate{}, {}, false};  // forward reference
  Node c{2, OpKind::kRelu, {0}, "misc", std::monostate{}, {}, false};
  g.nodes = {a, bad, c};
  g.inputs = {{"x", 0}};
  g.outputs = {{"y", 2}};
  CHECK_THROWS_AS(g.validate(), ConfigError);
}
