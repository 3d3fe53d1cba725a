#include "esanet/graph.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace esanet {

namespace {

std::string node_desc(const Node& n) {
  return "node " + std::to_string(n.id) + " (" + op_kind_name(n.kind) + ")";
}

Shape infer_node_shape(const Node& n, const std::vector<Shape>& in) {
  switch (n.kind) {
    case OpKind::kInput:
      return std::get<InputAttrs>(n.attrs).shape;
    case OpKind::kConv2d:
      return conv_out_shape(in[0], std::get<ConvAttrs>(n.attrs).spec);
    case OpKind::kBatchNorm:
    case OpKind::kRelu:
    case OpKind::kSigmoid:
      return in[0];
    case OpKind::kMaxPool:
    case OpKind::kAvgPool: {
      const auto& p = std::get<PoolAttrs>(n.attrs);
      return pool_out_shape(in[0], p.wh, p.ww, p.sh, p.sw, p.ph, p.pw);
    }
    case OpKind::kGlobalAvgPool:
      return Shape{in[0].n, in[0].c, 1, 1};
    case OpKind::kNearestUpsample:
    case OpKind::kBilinearUpsample: {
      const auto& u = std::get<UpsampleAttrs>(n.attrs);
      if (u.fh < 1 || u.fw < 1) throw ConfigError(node_desc(n) + ": upsample factor must be >= 1");
      return Shape{in[0].n, in[0].c, in[0].h * u.fh, in[0].w * u.fw};
    }
    case OpKind::kAdd:
      if (!(in[0] == in[1]))
        throw ConfigError(node_desc(n) + ": input shapes " + in[0].str() + " vs " + in[1].str());
      return in[0];
    case OpKind::kConcat: {
      int64_t c = 0;
      for (const Shape& s : in) {
        if (s.n != in[0].n || s.h != in[0].h || s.w != in[0].w)
          throw ConfigError(node_desc(n) + ": input shapes " + s.str() + " vs " + in[0].str());
        c += s.c;
      }
      return Shape{in[0].n, c, in[0].h, in[0].w};
    }
    case OpKind::kScaleChannels:
      if (in[1].n != in[0].n || in[1].c != in[0].c || in[1].h != 1 || in[1].w != 1)
        throw ConfigError(node_desc(n) + ": gain shape " + in[1].str() + " does not match " +
                          in[0].str());
      return in[0];
    default:
      throw ConfigError(node_desc(n) + ": not a graph op");
  }
}

template <typename T>
std::vector<int32_t> consumer_counts(const Graph<T>& g) {
  std::vector<int32_t> counts(g.nodes.size(), 0);
  for (const Node& n : g.nodes)
    for (int32_t in : n.inputs) ++counts[in];
  for (const auto& [name, id] : g.outputs) ++counts[id];
  return counts;
}

template <typename T>
bool is_output(const Graph<T>& g, int32_t id) {
  for (const auto& [name, out] : g.outputs)
    if (out == id) return true;
  return false;
}

// Renumbers a pass-modified graph: dropped nodes (keep[id]==false) forward
// their consumers to redirect[id]; unreferenced weights are collected.
template <typename T>
Graph<T> compact(const Graph<T>& g, const std::vector<bool>& keep,
                 const std::vector<int32_t>& redirect) {
  auto resolve = [&](int32_t id) {
    while (!keep[id]) id = redirect[id];
    return id;
  };
  std::vector<int32_t> idmap(g.nodes.size(), -1);
  Graph<T> out;
  for (const Node& n : g.nodes) {
    if (!keep[n.id]) continue;
    Node copy = n;
    copy.id = static_cast<int32_t>(out.nodes.size());
    for (int32_t& in : copy.inputs) in = idmap[resolve(in)];
    idmap[n.id] = copy.id;
    out.nodes.push_back(std::move(copy));
  }
  for (const auto& [name, id] : g.inputs) out.inputs[name] = idmap[resolve(id)];
  for (const auto& [name, id] : g.outputs) out.outputs[name] = idmap[resolve(id)];

  auto want = [&](const std::string& name) {
    if (name.empty()) return;
    auto spec_it = g.weight_specs.find(name);
    if (spec_it != g.weight_specs.end()) out.weight_specs.emplace(name, spec_it->second);
    auto w_it = g.weights.find(name);
    if (w_it != g.weights.end()) out.weights.emplace(name, w_it->second);
  };
  for (const Node& n : out.nodes) {
    if (n.kind == OpKind::kConv2d) {
      const auto& a = std::get<ConvAttrs>(n.attrs);
      want(a.weight);
      want(a.bias);
    } else if (n.kind == OpKind::kBatchNorm) {
      const auto& a = std::get<BatchNormAttrs>(n.attrs);
      want(a.gamma);
      want(a.beta);
      want(a.mean);
      want(a.var);
    }
  }
  return out;
}

}  // namespace

template <typename T>
void Graph<T>::validate() const {
  for (size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (n.id != static_cast<int32_t>(i))
      throw ConfigError("graph: node ids must be dense and ascending");
    for (int32_t in : n.inputs)
      if (in < 0 || in >= n.id)
        throw ConfigError(node_desc(n) + ": input " + std::to_string(in) +
                          " does not precede the node (topological order violated)");
    auto need_weight = [&](const std::string& name) {
      if (name.empty() || weight_specs.count(name) == 0)
        throw ConfigError(node_desc(n) + ": weight '" + name + "' is not declared");
    };
    if (n.kind == OpKind::kConv2d) {
      const auto& a = std::get<ConvAttrs>(n.attrs);
      need_weight(a.weight);
      if (!(weight_specs.at(a.weight).shape == a.spec.weight_shape()))
        throw ConfigError(node_desc(n) + ": declared weight shape does not match conv spec");
      if (a.spec.has_bias) need_weight(a.bias);
    } else if (n.kind == OpKind::kBatchNorm) {
      const auto& a = std::get<BatchNormAttrs>(n.attrs);
      need_weight(a.gamma);
      need_weight(a.beta);
      need_weight(a.mean);
      need_weight(a.var);
    }
  }
  for (const auto& [name, id] : inputs) {
    if (id < 0 || id >= static_cast<int32_t>(nodes.size()) || nodes[id].kind != OpKind::kInput)
      throw ConfigError("graph input '" + name + "' does not reference an input node");
  }
  for (const auto& [name, id] : outputs)
    if (id < 0 || id >= static_cast<int32_t>(nodes.size()))
      throw ConfigError("graph output '" + name + "' references unknown node");
  for (const auto& [name, t] : weights) {
    auto it = weight_specs.find(name);
    if (it == weight_specs.end())
      throw ConfigError("weight '" + name + "' has a value but no declaration");
    if (!(t.shape() == it->second.shape))
      throw ConfigError("weight '" + name + "' value shape " + t.shape().str() +
                        " does not match declared " + it->second.shape.str());
  }
}

template <typename T>
int32_t GraphBuilder<T>::push(OpKind kind, std::vector<int32_t> inputs, NodeAttrs attrs,
                              Shape out) {
  Node n;
  n.id = static_cast<int32_t>(graph.nodes.size());
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.stage = stage;
  n.attrs = std::move(attrs);
  n.out_shape = out;
  n.shape_valid = true;
  graph.nodes.push_back(std::move(n));
  shapes_.push_back(out);
  return graph.nodes.back().id;
}

template <typename T>
int32_t GraphBuilder<T>::input(const std::string& name, Shape shape) {
  if (graph.inputs.count(name)) throw ConfigError("duplicate graph input '" + name + "'");
  int32_t id = push(OpKind::kInput, {}, InputAttrs{name, shape}, shape);
  graph.inputs[name] = id;
  return id;
}

template <typename T>
int32_t GraphBuilder<T>::conv(int32_t x, const std::string& name, const ConvSpec& spec,
                              WeightInit init) {
  ConvAttrs a;
  a.spec = spec;
  a.weight = name + ".w";
  if (graph.weight_specs.count(a.weight))
    throw ConfigError("duplicate weight name '" + a.weight + "'");
  graph.weight_specs[a.weight] = WeightSpec{spec.weight_shape(), init, /*decay=*/true};
  if (spec.has_bias) {
    a.bias = name + ".b";
    graph.weight_specs[a.bias] =
        WeightSpec{Shape{1, spec.out_channels, 1, 1}, WeightInit::kZero, false};
  }
  Node probe;
  probe.id = static_cast<int32_t>(graph.nodes.size());
  probe.kind = OpKind::kConv2d;
  probe.attrs = a;
  Shape out = infer_node_shape(probe, {shapes_.at(x)});
  return push(OpKind::kConv2d, {x}, std::move(a), out);
}

template <typename T>
int32_t GraphBuilder<T>::batchnorm(int32_t x, const std::string& name, double eps,
                                   double momentum) {
  BatchNormAttrs a;
  a.gamma = name + ".gamma";
  a.beta = name + ".beta";
  a.mean = name + ".mean";
  a.var = name + ".var";
  a.eps = eps;
  a.momentum = momentum;
  const int64_t c = shapes_.at(x).c;
  const Shape vs{1, c, 1, 1};
  if (graph.weight_specs.count(a.gamma))
    throw ConfigError("duplicate weight name '" + a.gamma + "'");
  graph.weight_specs[a.gamma] = WeightSpec{vs, WeightInit::kOne, false};
  graph.weight_specs[a.beta] = WeightSpec{vs, WeightInit::kZero, false};
  graph.weight_specs[a.mean] = WeightSpec{vs, WeightInit::kZero, false};
  graph.weight_specs[a.var] = WeightSpec{vs, WeightInit::kOne, false};
  return push(OpKind::kBatchNorm, {x}, std::move(a), shapes_.at(x));
}

template <typename T>
int32_t GraphBuilder<T>::relu(int32_t x) {
  return push(OpKind::kRelu, {x}, std::monostate{}, shapes_.at(x));
}

template <typename T>
int32_t GraphBuilder<T>::sigmoid(int32_t x) {
  return push(OpKind::kSigmoid, {x}, std::monostate{}, shapes_.at(x));
}

template <typename T>
int32_t GraphBuilder<T>::maxpool(int32_t x, int wh, int ww, int sh, int sw, int ph, int pw) {
  PoolAttrs a{wh, ww, sh, sw, ph, pw};
  Shape out = pool_out_shape(shapes_.at(x), wh, ww, sh, sw, ph, pw);
  return push(OpKind::kMaxPool, {x}, a, out);
}

template <typename T>
int32_t GraphBuilder<T>::avgpool(int32_t x, int wh, int ww, int sh, int sw) {
  PoolAttrs a{wh, ww, sh, sw, 0, 0};
  const Shape& in = shapes_.at(x);
  if (sh == wh && sw == ww && (in.h % wh != 0 || in.w % ww != 0))
    throw FactorViolation("avgpool window (" + std::to_string(wh) + "," + std::to_string(ww) +
                          ") does not divide input " + in.str());
  Shape out = pool_out_shape(in, wh, ww, sh, sw, 0, 0);
  return push(OpKind::kAvgPool, {x}, a, out);
}

template <typename T>
int32_t GraphBuilder<T>::global_avg_pool(int32_t x) {
  const Shape& in = shapes_.at(x);
  return push(OpKind::kGlobalAvgPool, {x}, std::monostate{}, Shape{in.n, in.c, 1, 1});
}

template <typename T>
int32_t GraphBuilder<T>::nearest_upsample(int32_t x, int fh, int fw) {
  const Shape& in = shapes_.at(x);
  return push(OpKind::kNearestUpsample, {x}, UpsampleAttrs{fh, fw},
              Shape{in.n, in.c, in.h * fh, in.w * fw});
}

template <typename T>
int32_t GraphBuilder<T>::bilinear_upsample(int32_t x, int fh, int fw) {
  const Shape& in = shapes_.at(x);
  return push(OpKind::kBilinearUpsample, {x}, UpsampleAttrs{fh, fw},
              Shape{in.n, in.c, in.h * fh, in.w * fw});
}

template <typename T>
int32_t GraphBuilder<T>::add(int32_t a, int32_t b) {
  if (!(shapes_.at(a) == shapes_.at(b)))
    throw ConfigError("add: input shapes " + shapes_.at(a).str() + " vs " + shapes_.at(b).str());
  return push(OpKind::kAdd, {a, b}, EltwiseAttrs{}, shapes_.at(a));
}

template <typename T>
int32_t GraphBuilder<T>::concat(const std::vector<int32_t>& xs) {
  if (xs.empty()) throw ConfigError("concat needs inputs");
  Shape out = shapes_.at(xs[0]);
  out.c = 0;
  for (int32_t id : xs) {
    const Shape& s = shapes_.at(id);
    if (s.n != out.n || s.h != out.h || s.w != out.w)
      throw ConfigError("concat: input shapes " + s.str() + " vs " + shapes_.at(xs[0]).str());
    out.c += s.c;
  }
  return push(OpKind::kConcat, xs, std::monostate{}, out);
}

template <typename T>
int32_t GraphBuilder<T>::scale_channels(int32_t x, int32_t s) {
  Node probe;
  probe.id = static_cast<int32_t>(graph.nodes.size());
  probe.kind = OpKind::kScaleChannels;
  Shape out = infer_node_shape(probe, {shapes_.at(x), shapes_.at(s)});
  return push(OpKind::kScaleChannels, {x, s}, std::monostate{}, out);
}

template <typename T>
void GraphBuilder<T>::mark_output(const std::string& name, int32_t id) {
  if (graph.outputs.count(name)) throw ConfigError("duplicate graph output '" + name + "'");
  graph.outputs[name] = id;
}

template <typename T>
void infer_shapes(Graph<T>& g) {
  g.validate();
  std::vector<Shape> shapes(g.nodes.size());
  for (Node& n : g.nodes) {
    std::vector<Shape> in;
    in.reserve(n.inputs.size());
    for (int32_t id : n.inputs) in.push_back(shapes[id]);
    shapes[n.id] = infer_node_shape(n, in);
    n.out_shape = shapes[n.id];
    n.shape_valid = true;
  }
}

template <typename T>
std::map<std::string, Tensor<T>> execute(const Graph<T>& g,
                                         const std::map<std::string, Tensor<T>>& inputs) {
  g.validate();
  auto weight = [&](const std::string& name) -> const Tensor<T>& {
    auto it = g.weights.find(name);
    if (it == g.weights.end()) throw std::runtime_error("missing weight '" + name + "'");
    return it->second;
  };

  std::vector<int32_t> remaining = consumer_counts(g);
  std::vector<Tensor<T>> vals(g.nodes.size());
  for (const Node& n : g.nodes) {
    switch (n.kind) {
      case OpKind::kInput: {
        const auto& a = std::get<InputAttrs>(n.attrs);
        auto it = inputs.find(a.name);
        if (it == inputs.end()) throw std::runtime_error("missing input '" + a.name + "'");
        const Shape& s = it->second.shape();
        if (s.c != a.shape.c || s.h != a.shape.h || s.w != a.shape.w)
          throw std::runtime_error("input '" + a.name + "' has shape " + s.str() +
                                   ", bound shape is " + a.shape.str());
        vals[n.id] = it->second;
        break;
      }
      case OpKind::kConv2d: {
        const auto& a = std::get<ConvAttrs>(n.attrs);
        const Tensor<T>* bias = a.spec.has_bias ? &weight(a.bias) : nullptr;
        vals[n.id] = ops::conv2d(vals[n.inputs[0]], weight(a.weight), bias, a.spec, a.act);
        break;
      }
      case OpKind::kBatchNorm: {
        const auto& a = std::get<BatchNormAttrs>(n.attrs);
        vals[n.id] = ops::batchnorm_infer(vals[n.inputs[0]], weight(a.gamma), weight(a.beta),
                                          weight(a.mean), weight(a.var), static_cast<T>(a.eps));
        break;
      }
      case OpKind::kRelu:
        vals[n.id] = ops::relu(vals[n.inputs[0]]);
        break;
      case OpKind::kSigmoid:
        vals[n.id] = ops::sigmoid(vals[n.inputs[0]]);
        break;
      case OpKind::kMaxPool: {
        const auto& a = std::get<PoolAttrs>(n.attrs);
        vals[n.id] = ops::maxpool2d(vals[n.inputs[0]], a.wh, a.ww, a.sh, a.sw, a.ph, a.pw);
        break;
      }
      case OpKind::kAvgPool: {
        const auto& a = std::get<PoolAttrs>(n.attrs);
        vals[n.id] = ops::avgpool2d(vals[n.inputs[0]], a.wh, a.ww, a.sh, a.sw);
        break;
      }
      case OpKind::kGlobalAvgPool:
        vals[n.id] = ops::global_avg_pool(vals[n.inputs[0]]);
        break;
      case OpKind::kNearestUpsample: {
        const auto& a = std::get<UpsampleAttrs>(n.attrs);
        vals[n.id] = ops::nearest_upsample(vals[n.inputs[0]], a.fh, a.fw);
        break;
      }
      case OpKind::kBilinearUpsample: {
        const auto& a = std::get<UpsampleAttrs>(n.attrs);
        vals[n.id] = ops::bilinear_upsample(vals[n.inputs[0]], a.fh, a.fw);
        break;
      }
      case OpKind::kAdd: {
        const auto& a = std::get<EltwiseAttrs>(n.attrs);
        vals[n.id] = ops::add(vals[n.inputs[0]], vals[n.inputs[1]], a.act);
        break;
      }
      case OpKind::kConcat: {
        std::vector<const Tensor<T>*> ptrs;
        for (int32_t id : n.inputs) ptrs.push_back(&vals[id]);
        vals[n.id] = ops::concat_channels(ptrs);
        break;
      }
      case OpKind::kScaleChannels:
        vals[n.id] = ops::scale_channels(vals[n.inputs[0]], vals[n.inputs[1]]);
        break;
      default:
        throw std::runtime_error(node_desc(n) + ": not executable");
    }
    // free values with no remaining consumers (outputs hold one extra count)
    for (int32_t in : n.inputs)
      if (--remaining[in] == 0) vals[in] = Tensor<T>();
  }
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, id] : g.outputs) out[name] = vals[id];
  return out;
}

template <typename T>
Graph<T> fold_batchnorm(const Graph<T>& g) {
  Graph<T> work = g;
  std::vector<int32_t> counts = consumer_counts(g);
  std::vector<bool> keep(work.nodes.size(), true);
  std::vector<int32_t> redirect(work.nodes.size(), -1);

  for (Node& bn : work.nodes) {
    if (bn.kind != OpKind::kBatchNorm) continue;
    Node& producer = work.nodes[bn.inputs[0]];
    if (producer.kind != OpKind::kConv2d) continue;
    auto& ca = std::get<ConvAttrs>(producer.attrs);
    if (ca.act != Activation::kNone) continue;
    if (counts[producer.id] != 1 || is_output(work, producer.id)) continue;
    const auto& ba = std::get<BatchNormAttrs>(bn.attrs);
    if (!work.weights.count(ca.weight) || !work.weights.count(ba.gamma))
      throw std::runtime_error("fold_batchnorm requires materialized weights");

    const Tensor<T>& gamma = work.weights.at(ba.gamma);
    const Tensor<T>& beta = work.weights.at(ba.beta);
    const Tensor<T>& mean = work.weights.at(ba.mean);
    const Tensor<T>& var = work.weights.at(ba.var);
    const int64_t cout = ca.spec.out_channels;
    Tensor<T> w = work.weights.at(ca.weight);
    Tensor<T> b = ca.spec.has_bias ? work.weights.at(ca.bias) : Tensor<T>(Shape{1, cout, 1, 1});
    const int64_t per_out = w.numel() / cout;
    for (int64_t co = 0; co < cout; ++co) {
      const T scale = gamma[co] / std::sqrt(var[co] + static_cast<T>(ba.eps));
      for (int64_t i = 0; i < per_out; ++i) w[co * per_out + i] *= scale;
      b[co] = (b[co] - mean[co]) * scale + beta[co];
    }
    if (!ca.spec.has_bias) {
      // derive "<stem>.b" from "<stem>.w", falling back to a suffix
      std::string bias_name = ca.weight;
      if (bias_name.size() > 2 && bias_name.ends_with(".w"))
        bias_name = bias_name.substr(0, bias_name.size() - 2) + ".b";
      else
        bias_name += ".folded_bias";
      while (work.weight_specs.count(bias_name)) bias_name += "_";
      ca.bias = bias_name;
      ca.spec.has_bias = true;
      work.weight_specs[bias_name] = WeightSpec{Shape{1, cout, 1, 1}, WeightInit::kZero, false};
    }
    work.weights[ca.weight] = std::move(w);
    work.weights[ca.bias] = std::move(b);
    keep[bn.id] = false;
    redirect[bn.id] = producer.id;
  }
  return compact(work, keep, redirect);
}

template <typename T>
Graph<T> fuse_relu(const Graph<T>& g) {
  Graph<T> work = g;
  std::vector<int32_t> counts = consumer_counts(g);
  std::vector<bool> keep(work.nodes.size(), true);
  std::vector<int32_t> redirect(work.nodes.size(), -1);
  for (Node& r : work.nodes) {
    if (r.kind != OpKind::kRelu) continue;
    Node& p = work.nodes[r.inputs[0]];
    if (counts[p.id] != 1 || is_output(work, p.id)) continue;
    if (p.kind == OpKind::kConv2d) {
      auto& a = std::get<ConvAttrs>(p.attrs);
      if (a.act != Activation::kNone) continue;
      a.act = Activation::kRelu;
    } else if (p.kind == OpKind::kAdd) {
      auto& a = std::get<EltwiseAttrs>(p.attrs);
      if (a.act != Activation::kNone) continue;
      a.act = Activation::kRelu;
    } else {
      continue;
    }
    keep[r.id] = false;
    redirect[r.id] = p.id;
  }
  return compact(work, keep, redirect);
}

template <typename T>
Graph<T> eliminate_dead(const Graph<T>& g) {
  std::vector<bool> keep(g.nodes.size(), false);
  std::vector<int32_t> stack;
  for (const auto& [name, id] : g.outputs) stack.push_back(id);
  for (const auto& [name, id] : g.inputs) stack.push_back(id);  // interface stays intact
  while (!stack.empty()) {
    int32_t id = stack.back();
    stack.pop_back();
    if (keep[id]) continue;
    keep[id] = true;
    for (int32_t in : g.nodes[id].inputs) stack.push_back(in);
  }
  return compact(g, keep, std::vector<int32_t>(g.nodes.size(), -1));
}

template <typename T>
void init_weights(Graph<T>& g, uint64_t seed) {
  for (const auto& [name, spec] : g.weight_specs) {
    Rng rng(hash_str(seed, name));
    Tensor<T> t(spec.shape);
    switch (spec.init) {
      case WeightInit::kHeNormal: {
        const double fan_in = static_cast<double>(spec.shape.c * spec.shape.h * spec.shape.w);
        const double stddev = std::sqrt(2.0 / fan_in);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * stddev);
        break;
      }
      case WeightInit::kZero:
        break;
      case WeightInit::kOne:
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(1);
        break;
      case WeightInit::kBilinear2x: {
        if (spec.shape.c != 1 || spec.shape.h != 3 || spec.shape.w != 3)
          throw ConfigError("bilinear init expects per-channel 3x3 kernels for '" + name + "'");
        static const double k[9] = {1, 2, 1, 2, 4, 2, 1, 2, 1};
        for (int64_t c = 0; c < spec.shape.n; ++c)
          for (int64_t i = 0; i < 9; ++i) t[c * 9 + i] = static_cast<T>(k[i] / 16.0);
        break;
      }
    }
    g.weights[name] = std::move(t);
  }
}

template <typename T>
CostReport count_costs(const Graph<T>& g) {
  CostReport rep;
  auto stage_entry = [&](const std::string& stage) -> StageCost& {
    for (auto& [name, sc] : rep.per_stage)
      if (name == stage) return sc;
    rep.per_stage.emplace_back(stage, StageCost{});
    return rep.per_stage.back().second;
  };
  for (const Node& n : g.nodes) {
    if (!n.shape_valid) throw ConfigError("count_costs requires inferred shapes");
    StageCost& sc = stage_entry(n.stage);
    ++sc.nodes;
    const int64_t out_elems = n.out_shape.c * n.out_shape.h * n.out_shape.w;
    switch (n.kind) {
      case OpKind::kInput:
        break;
      case OpKind::kConv2d: {
        const auto& a = std::get<ConvAttrs>(n.attrs);
        const ConvSpec& sp = a.spec;
        sc.macs += static_cast<int64_t>(sp.kernel_h) * sp.kernel_w * (sp.in_channels / sp.groups) *
                   sp.out_channels * n.out_shape.h * n.out_shape.w;
        const int64_t welems = g.weight_specs.at(a.weight).shape.numel();
        sc.conv_weight_params += welems;
        sc.params += welems + (sp.has_bias ? sp.out_channels : 0);
        break;
      }
      case OpKind::kBatchNorm:
        sc.params += 4 * n.out_shape.c;
        sc.macs += out_elems;
        break;
      default:
        sc.macs += out_elems;
        break;
    }
  }
  for (const auto& [name, sc] : rep.per_stage) {
    rep.parameter_count += sc.params;
    rep.conv_weight_params += sc.conv_weight_params;
    rep.mac_count += sc.macs;
    rep.node_count += sc.nodes;
  }
  return rep;
}

std::string CostReport::table() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-10s %8s %14s %14s %16s\n", "stage", "nodes", "params",
                "conv params", "MACs/elem");
  out += buf;
  for (const auto& [name, sc] : per_stage) {
    std::snprintf(buf, sizeof(buf), "%-10s %8lld %14lld %14lld %16lld\n", name.c_str(),
                  static_cast<long long>(sc.nodes), static_cast<long long>(sc.params),
                  static_cast<long long>(sc.conv_weight_params), static_cast<long long>(sc.macs));
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "%-10s %8lld %14lld %14lld %16lld\n", "total",
                static_cast<long long>(node_count), static_cast<long long>(parameter_count),
                static_cast<long long>(conv_weight_params), static_cast<long long>(mac_count));
  out += buf;
  return out;
}

template <typename T>
TimingReport benchmark(const Graph<T>& g, const std::map<std::string, Tensor<T>>& inputs, int reps,
                       int warmup) {
  if (reps < 5) throw ConfigError("benchmark needs reps >= 5");
  if (warmup < 2) throw ConfigError("benchmark needs warmup >= 2");
  using Clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i) execute(g, inputs);
  std::vector<double> ms;
  ms.reserve(reps);
  for (int i = 0; i < reps; ++i) {
    const auto t0 = Clock::now();
    execute(g, inputs);
    ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  auto pct = [&](double q) {
    const double pos = q * static_cast<double>(ms.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, ms.size() - 1);
    return ms[lo] + (pos - static_cast<double>(lo)) * (ms[hi] - ms[lo]);
  };
  return TimingReport{pct(0.5), pct(0.1), pct(0.9), reps};
}

// ---- serialization ---------------------------------------------------------

namespace {

const char* init_name(WeightInit i) {
  switch (i) {
    case WeightInit::kHeNormal: return "he";
    case WeightInit::kZero: return "zero";
    case WeightInit::kOne: return "one";
    case WeightInit::kBilinear2x: return "bilinear2x";
  }
  return "?";
}

WeightInit init_from_name(const std::string& s) {
  if (s == "he") return WeightInit::kHeNormal;
  if (s == "zero") return WeightInit::kZero;
  if (s == "one") return WeightInit::kOne;
  if (s == "bilinear2x") return WeightInit::kBilinear2x;
  throw std::runtime_error("unknown weight init '" + s + "'");
}

std::string fmt_shape(const Shape& s) {
  char buf[80];
  std::snprintf(buf, sizeof(buf), "%lld,%lld,%lld,%lld", static_cast<long long>(s.n),
                static_cast<long long>(s.c), static_cast<long long>(s.h),
                static_cast<long long>(s.w));
  return buf;
}

Shape parse_shape(const std::string& s) {
  long long n, c, h, w;
  if (std::sscanf(s.c_str(), "%lld,%lld,%lld,%lld", &n, &c, &h, &w) != 4)
    throw std::runtime_error("bad shape literal '" + s + "'");
  return Shape{n, c, h, w};
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void check_weight_name(const std::string& name) {
  if (name.empty()) throw std::runtime_error("empty weight name");
  for (char c : name)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '_' && c != '-')
      throw std::runtime_error("weight name '" + name + "' has characters unsafe for filenames");
}

// key=value tokens after the fixed prefix of a manifest line
std::map<std::string, std::string> parse_kv(std::istringstream& ss) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (ss >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw std::runtime_error("bad manifest token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

std::string csv_ids(const std::vector<int32_t>& ids) {
  if (ids.empty()) return "-";
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(ids[i]);
  }
  return out;
}

std::vector<int32_t> parse_ids(const std::string& s) {
  std::vector<int32_t> out;
  if (s == "-") return out;
  std::istringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(std::stoi(part));
  return out;
}

}  // namespace

template <typename T>
void save_graph(const Graph<T>& g, const std::string& dir) {
  g.validate();
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "weights");
  std::ofstream f(fs::path(dir) / "graph.txt");
  if (!f) throw std::runtime_error("cannot write graph manifest in " + dir);
  f << "esanet-graph 1\n";
  f << "dtype " << (std::is_same_v<T, float> ? "f32" : "f64") << "\n";
  for (const auto& [name, id] : g.inputs) f << "in " << name << " id=" << id << "\n";
  for (const auto& [name, id] : g.outputs) f << "out " << name << " id=" << id << "\n";
  for (const Node& n : g.nodes) {
    f << "node id=" << n.id << " kind=" << op_kind_name(n.kind)
      << " stage=" << (n.stage.empty() ? "-" : n.stage) << " in=" << csv_ids(n.inputs);
    switch (n.kind) {
      case OpKind::kInput: {
        const auto& a = std::get<InputAttrs>(n.attrs);
        f << " name=" << a.name << " shape=" << fmt_shape(a.shape);
        break;
      }
      case OpKind::kConv2d: {
        const auto& a = std::get<ConvAttrs>(n.attrs);
        const ConvSpec& sp = a.spec;
        f << " w=" << a.weight << " b=" << (sp.has_bias ? a.bias : "-")
          << " act=" << (a.act == Activation::kRelu ? "relu" : "none") << " cin=" << sp.in_channels
          << " cout=" << sp.out_channels << " kh=" << sp.kernel_h << " kw=" << sp.kernel_w
          << " sh=" << sp.stride_h << " sw=" << sp.stride_w << " ph=" << sp.pad_h
          << " pw=" << sp.pad_w << " groups=" << sp.groups;
        break;
      }
      case OpKind::kBatchNorm: {
        const auto& a = std::get<BatchNormAttrs>(n.attrs);
        f << " gamma=" << a.gamma << " beta=" << a.beta << " mean=" << a.mean << " var=" << a.var
          << " eps=" << fmt_double(a.eps) << " momentum=" << fmt_double(a.momentum);
        break;
      }
      case OpKind::kMaxPool:
      case OpKind::kAvgPool: {
        const auto& a = std::get<PoolAttrs>(n.attrs);
        f << " wh=" << a.wh << " ww=" << a.ww << " sh=" << a.sh << " sw=" << a.sw
          << " ph=" << a.ph << " pw=" << a.pw;
        break;
      }
      case OpKind::kNearestUpsample:
      case OpKind::kBilinearUpsample: {
        const auto& a = std::get<UpsampleAttrs>(n.attrs);
        f << " fh=" << a.fh << " fw=" << a.fw;
        break;
      }
      case OpKind::kAdd: {
        const auto& a = std::get<EltwiseAttrs>(n.attrs);
        f << " act=" << (a.act == Activation::kRelu ? "relu" : "none");
        break;
      }
      default:
        break;
    }
    f << "\n";
  }
  for (const auto& [name, spec] : g.weight_specs) {
    check_weight_name(name);
    f << "weight " << name << " shape=" << fmt_shape(spec.shape) << " init=" << init_name(spec.init)
      << " decay=" << (spec.decay ? 1 : 0) << "\n";
  }
  if (!f) throw std::runtime_error("failed writing manifest in " + dir);
  f.close();
  for (const auto& [name, t] : g.weights)
    save_tensor(t, (fs::path(dir) / "weights" / (name + ".estn")).string());
}

template <typename T>
Graph<T> load_graph(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream f(fs::path(dir) / "graph.txt");
  if (!f) throw std::runtime_error("cannot open graph manifest in " + dir);
  std::string line;
  if (!std::getline(f, line) || line != "esanet-graph 1")
    throw std::runtime_error("not a graph manifest: " + dir);
  Graph<T> g;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string rec;
    ss >> rec;
    if (rec == "dtype") {
      std::string d;
      ss >> d;
      const std::string want = std::is_same_v<T, float> ? "f32" : "f64";
      if (d != want)
        throw std::runtime_error("graph dtype is " + d + ", requested " + want + " (" + dir + ")");
    } else if (rec == "in" || rec == "out") {
      std::string name;
      ss >> name;
      auto kv = parse_kv(ss);
      (rec == "in" ? g.inputs : g.outputs)[name] = std::stoi(kv.at("id"));
    } else if (rec == "node") {
      auto kv = parse_kv(ss);
      Node n;
      n.id = std::stoi(kv.at("id"));
      n.kind = op_kind_from_name(kv.at("kind"));
      n.stage = kv.at("stage") == "-" ? "" : kv.at("stage");
      n.inputs = parse_ids(kv.at("in"));
      switch (n.kind) {
        case OpKind::kInput:
          n.attrs = InputAttrs{kv.at("name"), parse_shape(kv.at("shape"))};
          break;
        case OpKind::kConv2d: {
          ConvAttrs a;
          a.weight = kv.at("w");
          a.bias = kv.at("b") == "-" ? "" : kv.at("b");
          a.act = kv.at("act") == "relu" ? Activation::kRelu : Activation::kNone;
          a.spec.in_channels = std::stoll(kv.at("cin"));
          a.spec.out_channels = std::stoll(kv.at("cout"));
          a.spec.kernel_h = std::stoi(kv.at("kh"));
          a.spec.kernel_w = std::stoi(kv.at("kw"));
          a.spec.stride_h = std::stoi(kv.at("sh"));
          a.spec.stride_w = std::stoi(kv.at("sw"));
          a.spec.pad_h = std::stoi(kv.at("ph"));
          a.spec.pad_w = std::stoi(kv.at("pw"));
          a.spec.groups = std::stoll(kv.at("groups"));
          a.spec.has_bias = !a.bias.empty();
          n.attrs = std::move(a);
          break;
        }
        case OpKind::kBatchNorm: {
          BatchNormAttrs a;
          a.gamma = kv.at("gamma");
          a.beta = kv.at("beta");
          a.mean = kv.at("mean");
          a.var = kv.at("var");
          a.eps = std::stod(kv.at("eps"));
          a.momentum = std::stod(kv.at("momentum"));
          n.attrs = std::move(a);
          break;
        }
        case OpKind::kMaxPool:
        case OpKind::kAvgPool:
          n.attrs = PoolAttrs{std::stoi(kv.at("wh")), std::stoi(kv.at("ww")),
                              std::stoi(kv.at("sh")), std::stoi(kv.at("sw")),
                              std::stoi(kv.at("ph")), std::stoi(kv.at("pw"))};
          break;
        case OpKind::kNearestUpsample:
        case OpKind::kBilinearUpsample:
          n.attrs = UpsampleAttrs{std::stoi(kv.at("fh")), std::stoi(kv.at("fw"))};
          break;
        case OpKind::kAdd:
          n.attrs = EltwiseAttrs{kv.at("act") == "relu" ? Activation::kRelu : Activation::kNone};
          break;
        default:
          break;
      }
      g.nodes.push_back(std::move(n));
    } else if (rec == "weight") {
      std::string name;
      ss >> name;
      auto kv = parse_kv(ss);
      WeightSpec spec;
      spec.shape = parse_shape(kv.at("shape"));
      spec.init = init_from_name(kv.at("init"));
      spec.decay = kv.at("decay") == "1";
      g.weight_specs[name] = spec;
      const auto wpath = fs::path(dir) / "weights" / (name + ".estn");
      if (fs::exists(wpath)) g.weights[name] = load_tensor<T>(wpath.string());
    } else {
      throw std::runtime_error("unknown manifest record '" + rec + "' in " + dir);
    }
  }
  g.validate();
  infer_shapes(g);
  return g;
}

#define ESANET_GRAPH_INSTANTIATE(T)                                                      \
  template struct Graph<T>;                                                              \
  template class GraphBuilder<T>;                                                        \
  template void infer_shapes<T>(Graph<T>&);                                              \
  template std::map<std::string, Tensor<T>> execute<T>(const Graph<T>&,                  \
                                                       const std::map<std::string, Tensor<T>>&); \
  template Graph<T> fold_batchnorm<T>(const Graph<T>&);                                  \
  template Graph<T> fuse_relu<T>(const Graph<T>&);                                       \
  template Graph<T> eliminate_dead<T>(const Graph<T>&);                                  \
  template void init_weights<T>(Graph<T>&, uint64_t);                                    \
  template CostReport count_costs<T>(const Graph<T>&);                                   \
  template TimingReport benchmark<T>(const Graph<T>&, const std::map<std::string, Tensor<T>>&, \
                                     int, int);                                          \
  template void save_graph<T>(const Graph<T>&, const std::string&);                      \
  template Graph<T> load_graph<T>(const std::string&);

ESANET_GRAPH_INSTANTIATE(float)
ESANET_GRAPH_INSTANTIATE(double)

}  // namespace esanet
