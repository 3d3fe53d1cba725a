#pragma once

#include <array>
#include <string>
#include <vector>

#include "esanet/blocks.hpp"
#include "esanet/graph.hpp"

namespace esanet {

enum class Backbone : uint8_t { kR18, kR34, kR50 };
enum class Modality : uint8_t { kRgbd, kRgb, kDepth };

// Full architecture description; `block` selects the r18/r34 residual block
// (r50 always uses bottlenecks and rejects nbt1d).
struct ESANetConfig {
  Backbone backbone = Backbone::kR34;
  BlockKind block = BlockKind::kNbt1d;
  Modality modality = Modality::kRgbd;
  int64_t num_classes = 40;
  int64_t input_height = 480;
  int64_t input_width = 640;
  std::array<int64_t, 3> decoder_channels{512, 256, 128};
  int decoder_nbt1d_per_module = 3;
  bool use_context = true;
  bool use_skips = true;
  bool use_se_fusion = true;  // off: plain elementwise-addition fusion
  UpsamplingMode upsampling = UpsamplingMode::kLearned;
  uint64_t seed = 1;

  void validate() const;
};

// Channel/stride plan of the five resolution stages per backbone.
struct StagePlan {
  int64_t stem_channels = 64;
  std::array<int64_t, 4> layer_widths{64, 128, 256, 512};
  std::array<int, 4> blocks_per_layer{2, 2, 2, 2};
  int64_t expansion = 1;

  int64_t stage_out(int layer) const { return layer_widths[layer] * expansion; }
  static StagePlan for_backbone(Backbone b);
};

// Assembled network without weight values (weight specs declared).
template <typename T>
Graph<T> build_esanet_graph(const ESANetConfig& cfg);

// Assembled and He/bilinear-initialized per cfg.seed.
template <typename T>
Graph<T> build_esanet(const ESANetConfig& cfg);

struct ModelSummary {
  CostReport cost;
  std::vector<std::pair<std::string, Shape>> stage_shapes;  // last value shape per stage
  std::string table() const;
};

ModelSummary summarize(const ESANetConfig& cfg);

// Flat key=value config file with exactly the ESANetConfig fields; '#'
// comments allowed; unknown keys rejected by name.
ESANetConfig parse_model_config_text(const std::string& text);
ESANetConfig load_model_config(const std::string& path);
void apply_model_override(ESANetConfig& cfg, const std::string& key, const std::string& value);
std::string model_config_to_text(const ESANetConfig& cfg);

const char* backbone_name(Backbone b);
const char* modality_name(Modality m);
const char* block_name(BlockKind k);
const char* upsampling_name(UpsamplingMode m);

extern template Graph<float> build_esanet_graph<float>(const ESANetConfig&);
extern template Graph<double> build_esanet_graph<double>(const ESANetConfig&);
extern template Graph<float> build_esanet<float>(const ESANetConfig&);
extern template Graph<double> build_esanet<double>(const ESANetConfig&);

}  // namespace esanet
