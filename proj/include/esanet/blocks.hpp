#pragma once

#include <string>
#include <utility>
#include <vector>

#include "esanet/graph.hpp"

namespace esanet {

enum class BlockKind : uint8_t { kBasic, kNbt1d, kBottleneck };

struct BlockSpec {
  BlockKind kind = BlockKind::kBasic;
  int64_t in_channels = 0;
  int64_t channels = 0;  // block width; bottleneck expands to 4x on output
  int stride = 1;

  int64_t out_channels() const {
    return kind == BlockKind::kBottleneck ? channels * 4 : channels;
  }
  bool needs_projection() const { return stride != 1 || in_channels != out_channels(); }
  void validate() const;
};

enum class UpsamplingMode : uint8_t { kLearned, kBilinear, kNearest };

struct ContextSpec {
  int64_t in_channels = 0;
  int h = 0, w = 0;  // feature extents at the context position (input / 32)
  std::vector<std::pair<int, int>> pool_sizes;  // (ph, pw) output bins; global branch is implicit
  int64_t branch_channels = 0;
  int64_t out_channels = 0;
};

// Pool sizes whose bins divide (h, w): pairs (h/k, w/k) for every common
// divisor k > 1, largest size first, capped at max_branches-1 pooled branches
// (the remaining branch is the global pool). Coprime extents leave only the
// global branch.
std::vector<std::pair<int, int>> compute_pool_sizes(int h, int w, int max_branches = 4);

// Residual blocks. Convs followed by BN carry no bias; the factorized pairs'
// leading 3x1 convs (relu follows directly) do.
template <typename T>
int32_t build_basic_block(GraphBuilder<T>& b, int32_t x, const BlockSpec& spec,
                          const std::string& name);
// 3x1/1x3 factorized residual block; stride splits over the first pair.
template <typename T>
int32_t build_nbt1d_block(GraphBuilder<T>& b, int32_t x, const BlockSpec& spec,
                          const std::string& name);
template <typename T>
int32_t build_bottleneck_block(GraphBuilder<T>& b, int32_t x, const BlockSpec& spec,
                               const std::string& name);
template <typename T>
int32_t build_residual_block(GraphBuilder<T>& b, int32_t x, const BlockSpec& spec,
                             const std::string& name);

// Squeeze-and-Excitation gate applied to one stream: global pool, C -> C/r,
// relu, C/r -> C, sigmoid, channelwise scale.
template <typename T>
int32_t build_se_scale(GraphBuilder<T>& b, int32_t x, int64_t channels, int64_t reduction,
                       const std::string& name);

// Both modalities SE-reweighted, then summed elementwise.
template <typename T>
int32_t build_se_fusion(GraphBuilder<T>& b, int32_t rgb, int32_t depth, int64_t channels,
                        int64_t reduction, const std::string& name);

// Pyramid of divisor-constrained average pools plus a global branch, each
// projected and upsampled back, concatenated with the input, recombined.
template <typename T>
int32_t build_context_module(GraphBuilder<T>& b, int32_t x, const ContextSpec& spec,
                             const std::string& name);

// Nearest x2 followed by a trainable depthwise 3x3 (zero pad, no bias)
// initialized to reproduce half-pixel bilinear interpolation on the interior.
template <typename T>
int32_t build_learned_upsample(GraphBuilder<T>& b, int32_t x, const std::string& name);

template <typename T>
int32_t build_upsample(GraphBuilder<T>& b, int32_t x, UpsamplingMode mode,
                       const std::string& name);

// 3x3 conv + BN + relu, num_nbt1d stride-1 NBt1D blocks, x2 upsample, then an
// optional already-projected skip of matching shape (pass kNoSkip for none).
inline constexpr int32_t kNoSkip = -1;
template <typename T>
int32_t build_decoder_module(GraphBuilder<T>& b, int32_t features, int32_t skip, int64_t in_ch,
                             int64_t out_ch, int num_nbt1d, UpsamplingMode mode,
                             const std::string& name);

#define ESANET_BLOCKS_EXTERN(T)                                                                    \
  extern template int32_t build_basic_block<T>(GraphBuilder<T>&, int32_t, const BlockSpec&,       \
                                               const std::string&);                               \
  extern template int32_t build_nbt1d_block<T>(GraphBuilder<T>&, int32_t, const BlockSpec&,       \
                                               const std::string&);                               \
  extern template int32_t build_bottleneck_block<T>(GraphBuilder<T>&, int32_t, const BlockSpec&,  \
                                                    const std::string&);                          \
  extern template int32_t build_residual_block<T>(GraphBuilder<T>&, int32_t, const BlockSpec&,    \
                                                  const std::string&);                            \
  extern template int32_t build_se_scale<T>(GraphBuilder<T>&, int32_t, int64_t, int64_t,          \
                                            const std::string&);                                  \
  extern template int32_t build_se_fusion<T>(GraphBuilder<T>&, int32_t, int32_t, int64_t,         \
                                             int64_t, const std::string&);                        \
  extern template int32_t build_context_module<T>(GraphBuilder<T>&, int32_t, const ContextSpec&,  \
                                                  const std::string&);                            \
  extern template int32_t build_learned_upsample<T>(GraphBuilder<T>&, int32_t,                    \
                                                    const std::string&);                          \
  extern template int32_t build_upsample<T>(GraphBuilder<T>&, int32_t, UpsamplingMode,            \
                                            const std::string&);                                  \
  extern template int32_t build_decoder_module<T>(GraphBuilder<T>&, int32_t, int32_t, int64_t,    \
                                                  int64_t, int, UpsamplingMode,                   \
                                                  const std::string&);

ESANET_BLOCKS_EXTERN(float)
ESANET_BLOCKS_EXTERN(double)
#undef ESANET_BLOCKS_EXTERN

}  // namespace esanet
