#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "esanet/ops.hpp"
#include "esanet/tensor.hpp"

namespace esanet {

struct InputAttrs {
  std::string name;
  Shape shape;  // bound shape; execution may use a different batch extent
};

struct ConvAttrs {
  ConvSpec spec;
  std::string weight;
  std::string bias;  // empty when spec.has_bias is false
  Activation act = Activation::kNone;
};

struct BatchNormAttrs {
  std::string gamma, beta, mean, var;
  double eps = 1e-5;
  double momentum = 0.1;
};

struct PoolAttrs {
  int wh = 1, ww = 1, sh = 1, sw = 1, ph = 0, pw = 0;
};

struct UpsampleAttrs {
  int fh = 1, fw = 1;
};

struct EltwiseAttrs {
  Activation act = Activation::kNone;
};

using NodeAttrs = std::variant<std::monostate, InputAttrs, ConvAttrs, BatchNormAttrs, PoolAttrs,
                               UpsampleAttrs, EltwiseAttrs>;

// One value producer. Node ids are also value ids; a valid graph lists nodes
// in topological order (every input id is smaller than the node id).
struct Node {
  int32_t id = -1;
  OpKind kind = OpKind::kInput;
  std::vector<int32_t> inputs;
  std::string stage = "misc";
  NodeAttrs attrs;
  Shape out_shape;
  bool shape_valid = false;
};

enum class WeightInit : uint8_t { kHeNormal, kZero, kOne, kBilinear2x };

struct WeightSpec {
  Shape shape;
  WeightInit init = WeightInit::kHeNormal;
  bool decay = false;  // weight decay applies (conv kernels only)
};

// Static computation graph plus its weight store. Immutable during execute;
// passes build new graphs instead of mutating.
template <typename T>
struct Graph {
  std::vector<Node> nodes;
  std::map<std::string, int32_t> inputs;
  std::map<std::string, int32_t> outputs;
  std::map<std::string, WeightSpec> weight_specs;
  std::map<std::string, Tensor<T>> weights;

  const Node& node(int32_t id) const { return nodes.at(id); }
  // topological order, one producer per value, referenced weights declared
  void validate() const;
};

// Incremental construction helper; nodes get ascending ids.
template <typename T>
class GraphBuilder {
 public:
  Graph<T> graph;
  std::string stage = "misc";

  int32_t input(const std::string& name, Shape shape);
  int32_t conv(int32_t x, const std::string& name, const ConvSpec& spec,
               WeightInit init = WeightInit::kHeNormal);
  int32_t batchnorm(int32_t x, const std::string& name, double eps = 1e-5, double momentum = 0.1);
  int32_t relu(int32_t x);
  int32_t sigmoid(int32_t x);
  int32_t maxpool(int32_t x, int wh, int ww, int sh, int sw, int ph = 0, int pw = 0);
  int32_t avgpool(int32_t x, int wh, int ww, int sh, int sw);
  int32_t global_avg_pool(int32_t x);
  int32_t nearest_upsample(int32_t x, int fh, int fw);
  int32_t bilinear_upsample(int32_t x, int fh, int fw);
  int32_t add(int32_t a, int32_t b);
  int32_t concat(const std::vector<int32_t>& xs);
  int32_t scale_channels(int32_t x, int32_t s);
  void mark_output(const std::string& name, int32_t id);

  // channel count of a node's (inferred-on-the-fly) output
  int64_t channels(int32_t id) const { return shapes_.at(id).c; }
  Shape shape(int32_t id) const { return shapes_.at(id); }

 private:
  int32_t push(OpKind kind, std::vector<int32_t> inputs, NodeAttrs attrs, Shape out);
  std::vector<Shape> shapes_;
};

// Binds input shapes through the graph and annotates every node; a
// mismatch names the node and both shapes.
template <typename T>
void infer_shapes(Graph<T>& g);

// Deterministic topological evaluation with inference-mode batch norm.
template <typename T>
std::map<std::string, Tensor<T>> execute(const Graph<T>& g,
                                         const std::map<std::string, Tensor<T>>& inputs);

// conv->BN folding (single-consumer, non-output, activation-free convs only).
template <typename T>
Graph<T> fold_batchnorm(const Graph<T>& g);

// relu absorbed into the producing conv/add as an activation flag.
template <typename T>
Graph<T> fuse_relu(const Graph<T>& g);

// Drops nodes unreachable from the outputs, and their weights.
template <typename T>
Graph<T> eliminate_dead(const Graph<T>& g);

template <typename T>
Graph<T> optimize(const Graph<T>& g) {
  return eliminate_dead(fuse_relu(fold_batchnorm(g)));
}

// He-normal conv kernels (fan-in), zero biases, unit gamma / zero beta BN,
// bilinear-mimicking upsample kernels. Deterministic per (seed, weight name).
template <typename T>
void init_weights(Graph<T>& g, uint64_t seed);

struct StageCost {
  int64_t params = 0;
  int64_t conv_weight_params = 0;
  int64_t macs = 0;  // per batch element
  int64_t nodes = 0;
};

struct CostReport {
  int64_t parameter_count = 0;
  int64_t conv_weight_params = 0;
  int64_t mac_count = 0;
  int64_t node_count = 0;
  std::vector<std::pair<std::string, StageCost>> per_stage;  // ordered by first appearance

  std::string table() const;
};

// Conv MACs: (kh*kw*Cin/groups)*Cout*Hout*Wout per batch element; every other
// op counts one operation per output element. Parameters attribute to the
// node that references them.
template <typename T>
CostReport count_costs(const Graph<T>& g);

struct TimingReport {
  double median_ms = 0, p10_ms = 0, p90_ms = 0;
  int reps = 0;
};

// Wall-clock over execute() only (monotonic clock), after `warmup` discarded
// passes. reps >= 5, warmup >= 2.
template <typename T>
TimingReport benchmark(const Graph<T>& g, const std::map<std::string, Tensor<T>>& inputs, int reps,
                       int warmup = 2);

// Text manifest (graph.txt) plus weight containers under <dir>/weights/.
template <typename T>
void save_graph(const Graph<T>& g, const std::string& dir);
template <typename T>
Graph<T> load_graph(const std::string& dir);

#define ESANET_GRAPH_EXTERN(T)                                                                  \
  extern template struct Graph<T>;                                                             \
  extern template class GraphBuilder<T>;                                                       \
  extern template void infer_shapes<T>(Graph<T>&);                                             \
  extern template std::map<std::string, Tensor<T>> execute<T>(                                 \
      const Graph<T>&, const std::map<std::string, Tensor<T>>&);                               \
  extern template Graph<T> fold_batchnorm<T>(const Graph<T>&);                                 \
  extern template Graph<T> fuse_relu<T>(const Graph<T>&);                                      \
  extern template Graph<T> eliminate_dead<T>(const Graph<T>&);                                 \
  extern template void init_weights<T>(Graph<T>&, uint64_t);                                   \
  extern template CostReport count_costs<T>(const Graph<T>&);                                  \
  extern template TimingReport benchmark<T>(const Graph<T>&,                                   \
                                            const std::map<std::string, Tensor<T>>&, int, int); \
  extern template void save_graph<T>(const Graph<T>&, const std::string&);                     \
  extern template Graph<T> load_graph<T>(const std::string&);

ESANET_GRAPH_EXTERN(float)
ESANET_GRAPH_EXTERN(double)
#undef ESANET_GRAPH_EXTERN

}  // namespace esanet
