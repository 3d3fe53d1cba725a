#pragma once

#include <string>
#include <vector>

#include "esanet/tensor.hpp"

namespace esanet {

inline constexpr int kVoidLabel = 255;

// One synthetic scene: rgb in [0,1], metric depth in meters (0 marks invalid
// pixels), integer labels stored as floats with 255 = void.
struct ToySample {
  Tensor<float> rgb;     // (1,3,H,W)
  Tensor<float> depth;   // (1,1,H,W)
  Tensor<float> labels;  // (1,1,H,W)
};

struct ToyDatasetSpec {
  int64_t num_classes = 4;  // floor, wall, object-A, object-B
  int64_t height = 64, width = 64;
  int64_t train_samples = 256, val_samples = 64;
  // object-B draws from the same color palette as object-A and differs only
  // by its depth plane
  bool depth_only_class = true;
  uint64_t seed = 1;

  void validate() const;
};

// Deterministic per (seed, split, index).
ToySample generate_toy_rgbd(const ToyDatasetSpec& spec, const std::string& split, int64_t index);

// Concrete augmentation draw, exposed so identity cases are testable.
struct AugmentParams {
  double scale = 1.0;  // in [1.0, 1.4]
  int64_t crop_y = 0, crop_x = 0;
  bool hflip = false;
  double d_hue = 0, d_sat = 0, d_val = 0;  // +-10/360, +-0.1, +-0.1
};
AugmentParams draw_augment_params(const ToySample& s, Rng& rng);
ToySample augment_with(const ToySample& s, const AugmentParams& p);
ToySample augment(const ToySample& s, Rng& rng);

// Arbitrary-size half-pixel resampling for the augmentation pipeline.
Tensor<float> resize_bilinear(const Tensor<float>& x, int64_t out_h, int64_t out_w);
Tensor<float> resize_nearest(const Tensor<float>& x, int64_t out_h, int64_t out_w);

// freq_c = pixels of c / non-void pixels of images containing c;
// weight_c = median(freq) / freq_c. A class absent everywhere is an error.
std::vector<double> median_frequency_weights(const std::vector<ToySample>& samples,
                                             int64_t num_classes);

// Nearest sampling at the top-left-of-center offset (factor-1)/2; void kept.
Tensor<float> downscale_labels(const Tensor<float>& labels, int factor);

struct DepthStats {
  double mean = 0, stddev = 1;
};
// statistics over valid (> 0) depth pixels
DepthStats compute_depth_stats(const std::vector<ToySample>& samples);
// z-score valid pixels, set invalid ones to 0 afterwards
void normalize_depth(Tensor<float>& depth, const DepthStats& stats);

struct ToyDataset {
  ToyDatasetSpec spec;
  DepthStats depth_stats;  // over the train split
  std::vector<ToySample> train, val;
};

ToyDataset generate_dataset(const ToyDatasetSpec& spec);
// One directory per split, three tensor containers per sample, plus a
// manifest with the generation spec and depth statistics.
void write_dataset(const ToyDataset& ds, const std::string& dir);
ToyDataset load_dataset(const std::string& dir);

ToyDatasetSpec parse_dataset_config_text(const std::string& text);
ToyDatasetSpec load_dataset_config(const std::string& path);
void apply_dataset_override(ToyDatasetSpec& spec, const std::string& key,
                            const std::string& value);

}  // namespace esanet
