#include "esanet/blocks.hpp"

#include <algorithm>

namespace esanet {

namespace {

ConvSpec conv_spec(int64_t cin, int64_t cout, int kh, int kw, int sh, int sw, int ph, int pw,
                   int64_t groups, bool bias) {
  ConvSpec sp;
  sp.in_channels = cin;
  sp.out_channels = cout;
  sp.kernel_h = kh;
  sp.kernel_w = kw;
  sp.stride_h = sh;
  sp.stride_w = sw;
  sp.pad_h = ph;
  sp.pad_w = pw;
  sp.groups = groups;
  sp.has_bias = bias;
  return sp;
}

// 1x1 conv stride s + BN, the standard downsample projection
template <typename T>
int32_t projection(GraphBuilder<T>& b, int32_t x, int64_t cin, int64_t cout, int stride,
                   const std::string& name) {
  int32_t p = b.conv(x, name + ".proj", conv_spec(cin, cout, 1, 1, stride, stride, 0, 0, 1, false));
  return b.batchnorm(p, name + ".proj_bn");
}

}  // namespace

void BlockSpec::validate() const {
  if (stride != 1 && stride != 2)
    throw ConfigError("block stride must be 1 or 2, got " + std::to_string(stride));
  if (in_channels < 1 || channels < 1) throw ConfigError("block channels must be >= 1");
}

std::vector<std::pair<int, int>> compute_pool_sizes(int h, int w, int max_branches) {
  if (h < 1 || w < 1) throw ConfigError("pool size computation needs extents >= 1");
  std::vector<std::pair<int, int>> sizes;
  for (int k = 2; k <= std::min(h, w); ++k) {
    if (h % k == 0 && w % k == 0) sizes.emplace_back(h / k, w / k);
    if (static_cast<int>(sizes.size()) == max_branches - 1) break;
  }
  return sizes;
}

template <typename T>
int32_t build_basic_block(GraphBuilder<T>& b, int32_t x, const BlockSpec& spec,
                          const std::string& name) {
  spec.validate();
  const int64_t cin = spec.in_channels, c = spec.channels;
  int32_t r = b.conv(x, name + ".conv1",
                     conv_spec(cin, c, 3, 3, spec.stride, spec.stride, 1, 1, 1, false));
  r = b.relu(b.batchnorm(r, name + ".bn1"));
  r = b.conv(r, name + ".conv2", conv_spec(c, c, 3, 3, 1, 1, 1, 1, 1, false));
  r = b.batchnorm(r, name + ".bn2");
  int32_t skip = spec.needs_projection() ? projection(b, x, cin, c, spec.stride, name) : x;
  return b.relu(b.add(r, skip));
}

template <typename T>
int32_t build_nbt1d_block(GraphBuilder<T>& b, int32_t x, const BlockSpec& spec,
                          const std::string& name) {
  spec.validate();
  if (spec.kind != BlockKind::kNbt1d) throw ConfigError("spec kind must be nbt1d");
  const int64_t cin = spec.in_channels, c = spec.channels;
  // first factorized pair carries the stride, split over the two axes
  int32_t r = b.conv(x, name + ".conv3x1_1",
                     conv_spec(cin, c, 3, 1, spec.stride, 1, 1, 0, 1, true));
  r = b.relu(r);
  r = b.conv(r, name + ".conv1x3_1", conv_spec(c, c, 1, 3, 1, spec.stride, 0, 1, 1, false));
  r = b.relu(b.batchnorm(r, name + ".bn1"));
  r = b.conv(r, name + ".conv3x1_2", conv_spec(c, c, 3, 1, 1, 1, 1, 0, 1, true));
  r = b.relu(r);
  r = b.conv(r, name + ".conv1x3_2", conv_spec(c, c, 1, 3, 1, 1, 0, 1, 1, false));
  r = b.batchnorm(r, name + ".bn2");
  int32_t skip = spec.needs_projection() ? projection(b, x, cin, c, spec.stride, name) : x;
  return b.relu(b.add(r, skip));
}

template <typename T>
int32_t build_bottleneck_block(GraphBuilder<T>& b, int32_t x, const BlockSpec& spec,
                               const std::string& name) {
  spec.validate();
  const int64_t cin = spec.in_channels, c = spec.channels, cout = spec.out_channels();
  int32_t r = b.conv(x, name + ".conv1", conv_spec(cin, c, 1, 1, 1, 1, 0, 0, 1, false));
  r = b.relu(b.batchnorm(r, name + ".bn1"));
  r = b.conv(r, name + ".conv2", conv_spec(c, c, 3, 3, spec.stride, spec.stride, 1, 1, 1, false));
  r = b.relu(b.batchnorm(r, name + ".bn2"));
  r = b.conv(r, name + ".conv3", conv_spec(c, cout, 1, 1, 1, 1, 0, 0, 1, false));
  r = b.batchnorm(r, name + ".bn3");
  int32_t skip = spec.needs_projection() ? projection(b, x, cin, cout, spec.stride, name) : x;
  return b.relu(b.add(r, skip));
}

template <typename T>
int32_t build_residual_block(GraphBuilder<T>& b, int32_t x, const BlockSpec& spec,
                             const std::string& name) {
  switch (spec.kind) {
    case BlockKind::kBasic: return build_basic_block(b, x, spec, name);
    case BlockKind::kNbt1d: return build_nbt1d_block(b, x, spec, name);
    case BlockKind::kBottleneck: return build_bottleneck_block(b, x, spec, name);
  }
  throw ConfigError("unknown block kind");
}

template <typename T>
int32_t build_se_scale(GraphBuilder<T>& b, int32_t x, int64_t channels, int64_t reduction,
                       const std::string& name) {
  if (reduction < 1 || channels % reduction != 0)
    throw ConfigError("SE reduction " + std::to_string(reduction) + " must divide channels " +
                      std::to_string(channels));
  const int64_t mid = channels / reduction;
  int32_t g = b.global_avg_pool(x);
  g = b.conv(g, name + ".fc1", conv_spec(channels, mid, 1, 1, 1, 1, 0, 0, 1, true));
  g = b.relu(g);
  g = b.conv(g, name + ".fc2", conv_spec(mid, channels, 1, 1, 1, 1, 0, 0, 1, true));
  g = b.sigmoid(g);
  return b.scale_channels(x, g);
}

template <typename T>
int32_t build_se_fusion(GraphBuilder<T>& b, int32_t rgb, int32_t depth, int64_t channels,
                        int64_t reduction, const std::string& name) {
  int32_t r = build_se_scale(b, rgb, channels, reduction, name + ".rgb");
  int32_t d = build_se_scale(b, depth, channels, reduction, name + ".depth");
  return b.add(r, d);
}

template <typename T>
int32_t build_context_module(GraphBuilder<T>& b, int32_t x, const ContextSpec& spec,
                             const std::string& name) {
  if (spec.branch_channels < 1 || spec.out_channels < 1)
    throw ConfigError("context module channel plan must be >= 1");
  std::vector<int32_t> parts{x};
  auto branch_tail = [&](int32_t v, const std::string& bname, int up_h, int up_w) {
    v = b.conv(v, bname,
               conv_spec(spec.in_channels, spec.branch_channels, 1, 1, 1, 1, 0, 0, 1, false));
    v = b.relu(b.batchnorm(v, bname + "_bn"));
    return b.nearest_upsample(v, up_h, up_w);
  };
  parts.push_back(branch_tail(b.global_avg_pool(x), name + ".global", spec.h, spec.w));
  int branch_i = 0;
  for (auto [ph, pw] : spec.pool_sizes) {
    if (ph < 1 || pw < 1 || spec.h % ph != 0 || spec.w % pw != 0)
      throw FactorViolation("context pooling size (" + std::to_string(ph) + "," +
                            std::to_string(pw) + ") does not divide input (" +
                            std::to_string(spec.h) + "," + std::to_string(spec.w) + ")");
    const int kh = spec.h / ph, kw = spec.w / pw;
    int32_t v = b.avgpool(x, kh, kw, kh, kw);
    parts.push_back(branch_tail(v, name + ".branch" + std::to_string(branch_i++), kh, kw));
  }
  int32_t cat = b.concat(parts);
  int32_t out = b.conv(cat, name + ".out",
                       conv_spec(b.channels(cat), spec.out_channels, 1, 1, 1, 1, 0, 0, 1, false));
  return b.relu(b.batchnorm(out, name + ".out_bn"));
}

template <typename T>
int32_t build_learned_upsample(GraphBuilder<T>& b, int32_t x, const std::string& name) {
  const int64_t c = b.channels(x);
  int32_t up = b.nearest_upsample(x, 2, 2);
  return b.conv(up, name + ".dw", conv_spec(c, c, 3, 3, 1, 1, 1, 1, /*groups=*/c, false),
                WeightInit::kBilinear2x);
}

template <typename T>
int32_t build_upsample(GraphBuilder<T>& b, int32_t x, UpsamplingMode mode,
                       const std::string& name) {
  switch (mode) {
    case UpsamplingMode::kLearned: return build_learned_upsample(b, x, name);
    case UpsamplingMode::kBilinear: return b.bilinear_upsample(x, 2, 2);
    case UpsamplingMode::kNearest: return b.nearest_upsample(x, 2, 2);
  }
  throw ConfigError("unknown upsampling mode");
}

template <typename T>
int32_t build_decoder_module(GraphBuilder<T>& b, int32_t features, int32_t skip, int64_t in_ch,
                             int64_t out_ch, int num_nbt1d, UpsamplingMode mode,
                             const std::string& name) {
  if (num_nbt1d < 0) throw ConfigError("decoder module needs num_nbt1d >= 0");
  int32_t r = b.conv(features, name + ".conv", conv_spec(in_ch, out_ch, 3, 3, 1, 1, 1, 1, 1, false));
  r = b.relu(b.batchnorm(r, name + ".bn"));
  for (int i = 0; i < num_nbt1d; ++i) {
    BlockSpec bs{BlockKind::kNbt1d, out_ch, out_ch, 1};
    r = build_nbt1d_block(b, r, bs, name + ".block" + std::to_string(i));
  }
  r = build_upsample(b, r, mode, name + ".up");
  if (skip != kNoSkip) r = b.add(r, skip);
  return r;
}

#define ESANET_BLOCKS_INSTANTIATE(T)                                                        \
  template int32_t build_basic_block<T>(GraphBuilder<T>&, int32_t, const BlockSpec&,        \
                                        const std::string&);                                \
  template int32_t build_nbt1d_block<T>(GraphBuilder<T>&, int32_t, const BlockSpec&,        \
                                        const std::string&);                                \
  template int32_t build_bottleneck_block<T>(GraphBuilder<T>&, int32_t, const BlockSpec&,   \
                                             const std::string&);                           \
  template int32_t build_residual_block<T>(GraphBuilder<T>&, int32_t, const BlockSpec&,     \
                                           const std::string&);                             \
  template int32_t build_se_scale<T>(GraphBuilder<T>&, int32_t, int64_t, int64_t,           \
                                     const std::string&);                                   \
  template int32_t build_se_fusion<T>(GraphBuilder<T>&, int32_t, int32_t, int64_t, int64_t, \
                                      const std::string&);                                  \
  template int32_t build_context_module<T>(GraphBuilder<T>&, int32_t, const ContextSpec&,   \
                                           const std::string&);                             \
  template int32_t build_learned_upsample<T>(GraphBuilder<T>&, int32_t, const std::string&); \
  template int32_t build_upsample<T>(GraphBuilder<T>&, int32_t, UpsamplingMode,             \
                                     const std::string&);                                   \
  template int32_t build_decoder_module<T>(GraphBuilder<T>&, int32_t, int32_t, int64_t,     \
                                           int64_t, int, UpsamplingMode, const std::string&);

ESANET_BLOCKS_INSTANTIATE(float)
ESANET_BLOCKS_INSTANTIATE(double)

}  // namespace esanet
