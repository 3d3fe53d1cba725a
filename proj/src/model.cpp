#include "esanet/model.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace esanet {

namespace {

constexpr int64_t kSeReduction = 16;
constexpr int64_t kContextChannels = 512;

ConvSpec conv_spec(int64_t cin, int64_t cout, int kh, int kw, int s, int ph, int pw, bool bias) {
  ConvSpec sp;
  sp.in_channels = cin;
  sp.out_channels = cout;
  sp.kernel_h = kh;
  sp.kernel_w = kw;
  sp.stride_h = sp.stride_w = s;
  sp.pad_h = ph;
  sp.pad_w = pw;
  sp.has_bias = bias;
  return sp;
}

struct EncoderTaps {
  // stream value after the stem conv+BN+relu (pre-maxpool) and per layer
  int32_t stem = -1;
  std::array<int32_t, 4> layers{-1, -1, -1, -1};
};

// One ResNet stream: 7x7 stem, maxpool, four residual layers. The caller
// supplies the post-stem value to feed the maxpool (fused or raw).
template <typename T>
int32_t build_stem(GraphBuilder<T>& b, int32_t image, int64_t in_ch, const std::string& prefix) {
  b.stage = "stem";
  int32_t v = b.conv(image, prefix + ".stem.conv", conv_spec(in_ch, 64, 7, 7, 2, 3, 3, false));
  return b.relu(b.batchnorm(v, prefix + ".stem.bn"));
}

template <typename T>
int32_t build_layer(GraphBuilder<T>& b, int32_t x, const StagePlan& plan, BlockKind kind,
                    int layer, const std::string& prefix) {
  b.stage = "layer" + std::to_string(layer + 1);
  const int stride = layer == 0 ? 1 : 2;
  int64_t in_ch = b.channels(x);
  int32_t v = x;
  for (int i = 0; i < plan.blocks_per_layer[layer]; ++i) {
    BlockSpec spec{kind, in_ch, plan.layer_widths[layer], i == 0 ? stride : 1};
    v = build_residual_block(b, v, spec,
                             prefix + ".layer" + std::to_string(layer + 1) + ".block" +
                                 std::to_string(i));
    in_ch = spec.out_channels();
  }
  return v;
}

}  // namespace

void ESANetConfig::validate() const {
  if (input_height % 32 != 0 || input_width % 32 != 0)
    throw ConfigError("input_height/input_width must be divisible by 32, got " +
                      std::to_string(input_height) + "x" + std::to_string(input_width));
  if (input_height < 32 || input_width < 32)
    throw ConfigError("input extents must be at least 32");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (backbone == Backbone::kR50 && block == BlockKind::kNbt1d)
    throw ConfigError("block=nbt1d is invalid for backbone=r50 (bottleneck blocks)");
  if (block == BlockKind::kBottleneck)
    throw ConfigError("block must be basic or nbt1d; r50 implies bottleneck");
  if (!(decoder_channels[0] > decoder_channels[1] && decoder_channels[1] > decoder_channels[2]))
    throw ConfigError("decoder_channels must be strictly decreasing");
  if (decoder_channels[2] < 1) throw ConfigError("decoder_channels must be >= 1");
  if (decoder_nbt1d_per_module < 0) throw ConfigError("decoder_nbt1d_per_module must be >= 0");
}

StagePlan StagePlan::for_backbone(Backbone b) {
  StagePlan p;
  switch (b) {
    case Backbone::kR18:
      p.blocks_per_layer = {2, 2, 2, 2};
      p.expansion = 1;
      break;
    case Backbone::kR34:
      p.blocks_per_layer = {3, 4, 6, 3};
      p.expansion = 1;
      break;
    case Backbone::kR50:
      p.blocks_per_layer = {3, 4, 6, 3};
      p.expansion = 4;
      break;
  }
  return p;
}

template <typename T>
Graph<T> build_esanet_graph(const ESANetConfig& cfg) {
  cfg.validate();
  const StagePlan plan = StagePlan::for_backbone(cfg.backbone);
  const BlockKind kind = cfg.backbone == Backbone::kR50 ? BlockKind::kBottleneck : cfg.block;
  GraphBuilder<T> b;

  const bool rgbd = cfg.modality == Modality::kRgbd;
  const bool has_rgb = cfg.modality != Modality::kDepth;
  const bool has_depth = cfg.modality != Modality::kRgb;

  b.stage = "stem";
  int32_t rgb_in = -1, depth_in = -1;
  if (has_rgb) rgb_in = b.input("rgb", Shape{1, 3, cfg.input_height, cfg.input_width});
  if (has_depth) depth_in = b.input("depth", Shape{1, 1, cfg.input_height, cfg.input_width});

  // fuse(rgb, depth) at each of the five resolution stages; the fused value
  // feeds the RGB stream's next stage (including the stem maxpool), the depth
  // stream continues unfused. Single-modality builds skip fusion entirely.
  auto fuse = [&](int32_t r, int32_t d, int stage_idx) {
    if (!rgbd) return has_rgb ? r : d;
    b.stage = "fusion" + std::to_string(stage_idx);
    const std::string name = "fusion" + std::to_string(stage_idx);
    if (cfg.use_se_fusion)
      return build_se_fusion(b, r, d, b.channels(r), kSeReduction, name);
    return b.add(r, d);
  };

  int32_t rgb_stem = has_rgb ? build_stem(b, rgb_in, 3, "rgb") : -1;
  int32_t depth_stem = has_depth ? build_stem(b, depth_in, 1, "depth") : -1;
  int32_t fused = fuse(rgb_stem, depth_stem, 1);

  b.stage = "stem";
  int32_t trunk = b.maxpool(fused, 3, 3, 2, 2, 1, 1);
  int32_t depth_trunk = rgbd ? b.maxpool(depth_stem, 3, 3, 2, 2, 1, 1) : -1;

  std::array<int32_t, 4> fused_layers;
  for (int layer = 0; layer < 4; ++layer) {
    const std::string trunk_prefix = has_rgb ? "rgb" : "depth";
    int32_t t = build_layer(b, trunk, plan, kind, layer, trunk_prefix);
    if (rgbd) {
      depth_trunk = build_layer(b, depth_trunk, plan, kind, layer, "depth");
      fused_layers[layer] = fuse(t, depth_trunk, layer + 2);
    } else {
      fused_layers[layer] = t;
    }
    trunk = fused_layers[layer];
  }

  // context bridge at /32
  b.stage = "context";
  int32_t bridge = fused_layers[3];
  if (b.channels(bridge) != kContextChannels) {
    bridge = b.conv(bridge, "context.reduce",
                    conv_spec(b.channels(bridge), kContextChannels, 1, 1, 1, 0, 0, false));
    bridge = b.relu(b.batchnorm(bridge, "context.reduce_bn"));
  }
  if (cfg.use_context) {
    ContextSpec ctx;
    ctx.in_channels = kContextChannels;
    ctx.h = static_cast<int>(cfg.input_height / 32);
    ctx.w = static_cast<int>(cfg.input_width / 32);
    ctx.pool_sizes = compute_pool_sizes(ctx.h, ctx.w);
    const int64_t branches = static_cast<int64_t>(ctx.pool_sizes.size()) + 1;
    ctx.branch_channels = std::max<int64_t>(32, kContextChannels / (branches + 1));
    ctx.out_channels = kContextChannels;
    bridge = build_context_module(b, bridge, ctx, "context");
  }

  // decoder: /32 -> /16 -> /8 -> /4 with skips from the fused maps
  int32_t d = bridge;
  int64_t in_ch = kContextChannels;
  std::array<int32_t, 3> decoder_outs;
  for (int i = 0; i < 3; ++i) {
    b.stage = "decoder" + std::to_string(i + 1);
    const std::string name = "decoder" + std::to_string(i + 1);
    const int64_t out_ch = cfg.decoder_channels[i];
    int32_t skip = kNoSkip;
    if (cfg.use_skips) {
      int32_t tap = fused_layers[2 - i];  // /16, /8, /4
      skip = b.conv(tap, name + ".skip_proj",
                    conv_spec(b.channels(tap), out_ch, 1, 1, 1, 0, 0, true));
    }
    d = build_decoder_module(b, d, skip, in_ch, out_ch, cfg.decoder_nbt1d_per_module,
                             cfg.upsampling, name);
    decoder_outs[i] = d;
    in_ch = out_ch;
  }

  b.stage = "heads";
  int32_t logits = b.conv(d, "head.conv",
                          conv_spec(in_ch, cfg.num_classes, 3, 3, 1, 1, 1, true));
  logits = build_upsample(b, logits, cfg.upsampling, "head.up1");
  logits = build_upsample(b, logits, cfg.upsampling, "head.up2");
  b.mark_output("logits", logits);

  int32_t aux16 = b.conv(decoder_outs[0], "head.aux16",
                         conv_spec(cfg.decoder_channels[0], cfg.num_classes, 1, 1, 1, 0, 0, true));
  b.mark_output("aux16", aux16);
  int32_t aux8 = b.conv(decoder_outs[1], "head.aux8",
                        conv_spec(cfg.decoder_channels[1], cfg.num_classes, 1, 1, 1, 0, 0, true));
  b.mark_output("aux8", aux8);

  b.graph.validate();
  return std::move(b.graph);
}

template <typename T>
Graph<T> build_esanet(const ESANetConfig& cfg) {
  Graph<T> g = build_esanet_graph<T>(cfg);
  init_weights(g, cfg.seed);
  return g;
}

ModelSummary summarize(const ESANetConfig& cfg) {
  Graph<float> g = build_esanet_graph<float>(cfg);
  infer_shapes(g);
  ModelSummary s;
  s.cost = count_costs(g);
  for (const Node& n : g.nodes) {
    auto it = std::find_if(s.stage_shapes.begin(), s.stage_shapes.end(),
                           [&](const auto& p) { return p.first == n.stage; });
    if (it == s.stage_shapes.end())
      s.stage_shapes.emplace_back(n.stage, n.out_shape);
    else
      it->second = n.out_shape;
  }
  return s;
}

std::string ModelSummary::table() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-10s %-18s %8s %14s %14s %16s\n", "stage", "out shape",
                "nodes", "params", "conv params", "MACs/elem");
  out += buf;
  for (const auto& [stage, shape] : stage_shapes) {
    const StageCost* sc = nullptr;
    for (const auto& [name, c] : cost.per_stage)
      if (name == stage) sc = &c;
    if (!sc) continue;
    std::snprintf(buf, sizeof(buf), "%-10s %-18s %8lld %14lld %14lld %16lld\n", stage.c_str(),
                  shape.str().c_str(), static_cast<long long>(sc->nodes),
                  static_cast<long long>(sc->params), static_cast<long long>(sc->conv_weight_params),
                  static_cast<long long>(sc->macs));
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "%-10s %-18s %8lld %14lld %14lld %16lld\n", "total", "",
                static_cast<long long>(cost.node_count),
                static_cast<long long>(cost.parameter_count),
                static_cast<long long>(cost.conv_weight_params),
                static_cast<long long>(cost.mac_count));
  out += buf;
  return out;
}

// ---- config file -----------------------------------------------------------

const char* backbone_name(Backbone b) {
  switch (b) {
    case Backbone::kR18: return "r18";
    case Backbone::kR34: return "r34";
    case Backbone::kR50: return "r50";
  }
  return "?";
}

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kRgbd: return "rgbd";
    case Modality::kRgb: return "rgb";
    case Modality::kDepth: return "depth";
  }
  return "?";
}

const char* block_name(BlockKind k) {
  switch (k) {
    case BlockKind::kBasic: return "basic";
    case BlockKind::kNbt1d: return "nbt1d";
    case BlockKind::kBottleneck: return "bottleneck";
  }
  return "?";
}

const char* upsampling_name(UpsamplingMode m) {
  switch (m) {
    case UpsamplingMode::kLearned: return "learned";
    case UpsamplingMode::kBilinear: return "bilinear";
    case UpsamplingMode::kNearest: return "nearest";
  }
  return "?";
}

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "' expects true/false, got '" + v + "'");
}

int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
  }
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace

void apply_model_override(ESANetConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "backbone") {
    if (value == "r18") cfg.backbone = Backbone::kR18;
    else if (value == "r34") cfg.backbone = Backbone::kR34;
    else if (value == "r50") cfg.backbone = Backbone::kR50;
    else throw ConfigError("config key 'backbone' expects r18|r34|r50, got '" + value + "'");
  } else if (key == "block") {
    if (value == "basic") cfg.block = BlockKind::kBasic;
    else if (value == "nbt1d") cfg.block = BlockKind::kNbt1d;
    else throw ConfigError("config key 'block' expects basic|nbt1d, got '" + value + "'");
  } else if (key == "modality") {
    if (value == "rgbd") cfg.modality = Modality::kRgbd;
    else if (value == "rgb") cfg.modality = Modality::kRgb;
    else if (value == "depth") cfg.modality = Modality::kDepth;
    else throw ConfigError("config key 'modality' expects rgbd|rgb|depth, got '" + value + "'");
  } else if (key == "num_classes") {
    cfg.num_classes = parse_int(key, value);
  } else if (key == "input_height") {
    cfg.input_height = parse_int(key, value);
  } else if (key == "input_width") {
    cfg.input_width = parse_int(key, value);
  } else if (key == "decoder_channels") {
    std::istringstream ss(value);
    std::string part;
    std::vector<int64_t> chans;
    while (std::getline(ss, part, ',')) chans.push_back(parse_int(key, trim(part)));
    if (chans.size() != 3)
      throw ConfigError("config key 'decoder_channels' expects exactly 3 values");
    std::copy(chans.begin(), chans.end(), cfg.decoder_channels.begin());
  } else if (key == "decoder_nbt1d_per_module") {
    cfg.decoder_nbt1d_per_module = static_cast<int>(parse_int(key, value));
  } else if (key == "use_context") {
    cfg.use_context = parse_bool(key, value);
  } else if (key == "use_skips") {
    cfg.use_skips = parse_bool(key, value);
  } else if (key == "use_se_fusion") {
    cfg.use_se_fusion = parse_bool(key, value);
  } else if (key == "upsampling") {
    if (value == "learned") cfg.upsampling = UpsamplingMode::kLearned;
    else if (value == "bilinear") cfg.upsampling = UpsamplingMode::kBilinear;
    else if (value == "nearest") cfg.upsampling = UpsamplingMode::kNearest;
    else
      throw ConfigError("config key 'upsampling' expects learned|bilinear|nearest, got '" + value +
                        "'");
  } else if (key == "seed") {
    cfg.seed = static_cast<uint64_t>(parse_int(key, value));
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

ESANetConfig parse_model_config_text(const std::string& text) {
  ESANetConfig cfg;
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + " is not key = value: '" + t +
                        "'");
    apply_model_override(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

ESANetConfig load_model_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_model_config_text(text);
}

std::string model_config_to_text(const ESANetConfig& cfg) {
  std::ostringstream ss;
  ss << "backbone = " << backbone_name(cfg.backbone) << "\n";
  ss << "block = " << block_name(cfg.block) << "\n";
  ss << "modality = " << modality_name(cfg.modality) << "\n";
  ss << "num_classes = " << cfg.num_classes << "\n";
  ss << "input_height = " << cfg.input_height << "\n";
  ss << "input_width = " << cfg.input_width << "\n";
  ss << "decoder_channels = " << cfg.decoder_channels[0] << "," << cfg.decoder_channels[1] << ","
     << cfg.decoder_channels[2] << "\n";
  ss << "decoder_nbt1d_per_module = " << cfg.decoder_nbt1d_per_module << "\n";
  ss << "use_context = " << (cfg.use_context ? "true" : "false") << "\n";
  ss << "use_skips = " << (cfg.use_skips ? "true" : "false") << "\n";
  ss << "use_se_fusion = " << (cfg.use_se_fusion ? "true" : "false") << "\n";
  ss << "upsampling = " << upsampling_name(cfg.upsampling) << "\n";
  ss << "seed = " << cfg.seed << "\n";
  return ss.str();
}

template Graph<float> build_esanet_graph<float>(const ESANetConfig&);
template Graph<double> build_esanet_graph<double>(const ESANetConfig&);
template Graph<float> build_esanet<float>(const ESANetConfig&);
template Graph<double> build_esanet<double>(const ESANetConfig&);

}  // namespace esanet
