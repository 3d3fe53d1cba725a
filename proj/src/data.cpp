#include "esanet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace esanet {

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);  // wrap to [0,1)
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  return {r + m, g + m, b + m};
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx <= 0 ? 0 : d / mx;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r) h = std::fmod((g - b) / d, 6.0);
  else if (mx == g) h = (b - r) / d + 2.0;
  else h = (r - g) / d + 4.0;
  h /= 6.0;
  if (h < 0) h += 1.0;
}

struct SceneObject {
  bool ellipse;
  int cls;
  double cy, cx, ry, rx;  // center and radii in pixels
  double depth;
  Rgb color;
};

}  // namespace

void ToyDatasetSpec::validate() const {
  if (height % 32 != 0 || width % 32 != 0)
    throw ConfigError("dataset height/width must be divisible by 32, got " +
                      std::to_string(height) + "x" + std::to_string(width));
  if (num_classes < 2) throw ConfigError("dataset num_classes must be >= 2");
  if (depth_only_class && num_classes < 4)
    throw ConfigError("depth_only_class needs num_classes >= 4 (two object classes)");
  if (train_samples < 1 || val_samples < 1) throw ConfigError("dataset splits must be non-empty");
}

ToySample generate_toy_rgbd(const ToyDatasetSpec& spec, const std::string& split, int64_t index) {
  spec.validate();
  Rng rng(hash_combine(hash_str(spec.seed, split), static_cast<uint64_t>(index)));
  const int64_t H = spec.height, W = spec.width;
  ToySample s{Tensor<float>(Shape{1, 3, H, W}), Tensor<float>(Shape{1, 1, H, W}),
              Tensor<float>(Shape{1, 1, H, W})};

  // background: wall above a random horizon, floor below
  const int64_t horizon = rng.uniform_int(H * 3 / 10, H * 7 / 10);
  const double wall_depth = rng.uniform(6.0, 9.0);
  const double wall_tone = rng.uniform(0.45, 0.75);
  const Rgb floor_color{rng.uniform(0.35, 0.6), rng.uniform(0.25, 0.45), rng.uniform(0.12, 0.3)};
  for (int64_t h = 0; h < H; ++h) {
    for (int64_t w = 0; w < W; ++w) {
      const bool wall = h < horizon;
      s.labels(0, 0, h, w) = wall ? 1.f : 0.f;
      Rgb c = wall ? Rgb{wall_tone, wall_tone, wall_tone} : floor_color;
      const double tex = rng.uniform(-0.03, 0.03);
      s.rgb(0, 0, h, w) = static_cast<float>(std::clamp(c.r + tex, 0.0, 1.0));
      s.rgb(0, 1, h, w) = static_cast<float>(std::clamp(c.g + tex, 0.0, 1.0));
      s.rgb(0, 2, h, w) = static_cast<float>(std::clamp(c.b + tex, 0.0, 1.0));
      // floor ramps from the wall plane at the horizon toward the camera
      double d = wall ? wall_depth
                      : wall_depth + (0.6 - wall_depth) * static_cast<double>(h - horizon) /
                            static_cast<double>(std::max<int64_t>(H - horizon, 1));
      s.depth(0, 0, h, w) = static_cast<float>(d + rng.uniform(-0.05, 0.05));
    }
  }

  // 2..5 objects at distinct depth planes; far objects drawn first
  const int64_t num_objects = spec.num_classes <= 2 ? 0 : rng.uniform_int(2, 5);
  std::vector<SceneObject> objects;
  const int64_t pair_a = spec.num_classes - 2, pair_b = spec.num_classes - 1;
  for (int64_t i = 0; i < num_objects; ++i) {
    SceneObject o;
    o.ellipse = rng.bernoulli(0.5);
    o.cls = static_cast<int>(rng.uniform_int(2, spec.num_classes - 1));
    o.ry = rng.uniform(3.0, static_cast<double>(H) / 6.0);
    o.rx = rng.uniform(3.0, static_cast<double>(W) / 6.0);
    o.cy = rng.uniform(o.ry, static_cast<double>(H) - o.ry);
    o.cx = rng.uniform(o.rx, static_cast<double>(W) - o.rx);
    for (int attempt = 0; attempt < 20; ++attempt) {
      if (spec.depth_only_class && o.cls == pair_a) o.depth = rng.uniform(1.0, 2.5);
      else if (spec.depth_only_class && o.cls == pair_b) o.depth = rng.uniform(3.5, 5.5);
      else o.depth = rng.uniform(1.0, 5.5);
      bool clash = false;
      for (const auto& other : objects) clash = clash || std::abs(other.depth - o.depth) < 0.3;
      if (!clash) break;
    }
    if (spec.depth_only_class && (o.cls == pair_a || o.cls == pair_b)) {
      // shared palette draw: identical color distribution for the pair
      o.color = hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.5, 0.9), rng.uniform(0.6, 0.95));
    } else {
      // distinct hue band per class keeps the classes color-separable
      const double band = static_cast<double>(o.cls - 2) / std::max<int64_t>(spec.num_classes - 2, 1);
      o.color = hsv_to_rgb(band + rng.uniform(0.0, 0.12), rng.uniform(0.5, 0.9),
                           rng.uniform(0.6, 0.95));
    }
    objects.push_back(o);
  }
  std::sort(objects.begin(), objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.depth > b.depth; });
  for (const auto& o : objects) {
    const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(o.cy - o.ry));
    const int64_t y1 = std::min<int64_t>(H - 1, static_cast<int64_t>(o.cy + o.ry));
    const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(o.cx - o.rx));
    const int64_t x1 = std::min<int64_t>(W - 1, static_cast<int64_t>(o.cx + o.rx));
    for (int64_t h = y0; h <= y1; ++h) {
      for (int64_t w = x0; w <= x1; ++w) {
        if (o.ellipse) {
          const double dy = (static_cast<double>(h) - o.cy) / o.ry;
          const double dx = (static_cast<double>(w) - o.cx) / o.rx;
          if (dy * dy + dx * dx > 1.0) continue;
        }
        s.labels(0, 0, h, w) = static_cast<float>(o.cls);
        const double tex = rng.uniform(-0.03, 0.03);
        s.rgb(0, 0, h, w) = static_cast<float>(std::clamp(o.color.r + tex, 0.0, 1.0));
        s.rgb(0, 1, h, w) = static_cast<float>(std::clamp(o.color.g + tex, 0.0, 1.0));
        s.rgb(0, 2, h, w) = static_cast<float>(std::clamp(o.color.b + tex, 0.0, 1.0));
        s.depth(0, 0, h, w) = static_cast<float>(o.depth + rng.uniform(-0.03, 0.03));
      }
    }
  }

  // annotation seam: object boundary pixels become void
  Tensor<float> final_labels = s.labels;
  for (int64_t h = 0; h < H; ++h) {
    for (int64_t w = 0; w < W; ++w) {
      const float lab = s.labels(0, 0, h, w);
      const auto differs = [&](int64_t hh, int64_t ww) {
        if (hh < 0 || hh >= H || ww < 0 || ww >= W) return false;
        const float nb = s.labels(0, 0, hh, ww);
        return nb != lab && (lab >= 2.f || nb >= 2.f);
      };
      if (differs(h - 1, w) || differs(h + 1, w) || differs(h, w - 1) || differs(h, w + 1))
        final_labels(0, 0, h, w) = static_cast<float>(kVoidLabel);
    }
  }
  s.labels = std::move(final_labels);

  // invalid depth readings
  for (int64_t i = 0; i < H * W; ++i) {
    s.depth[i] = std::clamp(s.depth[i], 0.5f, 10.f);
    if (rng.bernoulli(0.02)) s.depth[i] = 0.f;
  }
  return s;
}

Tensor<float> resize_bilinear(const Tensor<float>& x, int64_t out_h, int64_t out_w) {
  const Shape& is = x.shape();
  Tensor<float> y(Shape{is.n, is.c, out_h, out_w});
  const double rh = static_cast<double>(is.h) / static_cast<double>(out_h);
  const double rw = static_cast<double>(is.w) / static_cast<double>(out_w);
  for (int64_t n = 0; n < is.n; ++n) {
    for (int64_t c = 0; c < is.c; ++c) {
      const float* xp = x.plane(n, c);
      float* yp = y.plane(n, c);
      for (int64_t oh = 0; oh < out_h; ++oh) {
        double sh = (static_cast<double>(oh) + 0.5) * rh - 0.5;
        sh = std::clamp(sh, 0.0, static_cast<double>(is.h - 1));
        const int64_t h0 = static_cast<int64_t>(sh);
        const int64_t h1 = std::min(h0 + 1, is.h - 1);
        const double th = sh - static_cast<double>(h0);
        for (int64_t ow = 0; ow < out_w; ++ow) {
          double sw = (static_cast<double>(ow) + 0.5) * rw - 0.5;
          sw = std::clamp(sw, 0.0, static_cast<double>(is.w - 1));
          const int64_t w0 = static_cast<int64_t>(sw);
          const int64_t w1 = std::min(w0 + 1, is.w - 1);
          const double tw = sw - static_cast<double>(w0);
          const double top = xp[h0 * is.w + w0] + tw * (xp[h0 * is.w + w1] - xp[h0 * is.w + w0]);
          const double bot = xp[h1 * is.w + w0] + tw * (xp[h1 * is.w + w1] - xp[h1 * is.w + w0]);
          yp[oh * out_w + ow] = static_cast<float>(top + th * (bot - top));
        }
      }
    }
  }
  return y;
}

Tensor<float> resize_nearest(const Tensor<float>& x, int64_t out_h, int64_t out_w) {
  const Shape& is = x.shape();
  Tensor<float> y(Shape{is.n, is.c, out_h, out_w});
  const double rh = static_cast<double>(is.h) / static_cast<double>(out_h);
  const double rw = static_cast<double>(is.w) / static_cast<double>(out_w);
  for (int64_t n = 0; n < is.n; ++n) {
    for (int64_t c = 0; c < is.c; ++c) {
      const float* xp = x.plane(n, c);
      float* yp = y.plane(n, c);
      for (int64_t oh = 0; oh < out_h; ++oh) {
        const int64_t sh =
            std::clamp<int64_t>(std::llround((static_cast<double>(oh) + 0.5) * rh - 0.5), 0,
                                is.h - 1);
        for (int64_t ow = 0; ow < out_w; ++ow) {
          const int64_t sw =
              std::clamp<int64_t>(std::llround((static_cast<double>(ow) + 0.5) * rw - 0.5), 0,
                                  is.w - 1);
          yp[oh * out_w + ow] = xp[sh * is.w + sw];
        }
      }
    }
  }
  return y;
}

AugmentParams draw_augment_params(const ToySample& s, Rng& rng) {
  const int64_t H = s.rgb.shape().h, W = s.rgb.shape().w;
  AugmentParams p;
  p.scale = rng.uniform(1.0, 1.4);
  const int64_t sh = std::llround(static_cast<double>(H) * p.scale);
  const int64_t sw = std::llround(static_cast<double>(W) * p.scale);
  p.crop_y = rng.uniform_int(0, sh - H);
  p.crop_x = rng.uniform_int(0, sw - W);
  p.hflip = rng.bernoulli(0.5);
  p.d_hue = rng.uniform(-10.0 / 360.0, 10.0 / 360.0);
  p.d_sat = rng.uniform(-0.1, 0.1);
  p.d_val = rng.uniform(-0.1, 0.1);
  return p;
}

ToySample augment_with(const ToySample& s, const AugmentParams& p) {
  const int64_t H = s.rgb.shape().h, W = s.rgb.shape().w;
  const int64_t sh = std::llround(static_cast<double>(H) * p.scale);
  const int64_t sw = std::llround(static_cast<double>(W) * p.scale);

  ToySample out;
  out.rgb = resize_bilinear(s.rgb, sh, sw);
  out.depth = resize_bilinear(s.depth, sh, sw);
  out.labels = resize_nearest(s.labels, sh, sw);
  // keep metric consistency: closer crop of a scaled scene
  const float inv_scale = static_cast<float>(1.0 / p.scale);
  for (int64_t i = 0; i < out.depth.numel(); ++i) out.depth[i] *= inv_scale;

  auto crop = [&](const Tensor<float>& t) {
    const Shape& ts = t.shape();
    Tensor<float> c(Shape{1, ts.c, H, W});
    for (int64_t ch = 0; ch < ts.c; ++ch)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          c(0, ch, h, w) = t(0, ch, h + p.crop_y, w + p.crop_x);
    return c;
  };
  out.rgb = crop(out.rgb);
  out.depth = crop(out.depth);
  out.labels = crop(out.labels);

  if (p.hflip) {
    auto flip = [&](Tensor<float>& t) {
      for (int64_t c = 0; c < t.shape().c; ++c)
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w < W / 2; ++w)
            std::swap(t(0, c, h, w), t(0, c, h, W - 1 - w));
    };
    flip(out.rgb);
    flip(out.depth);
    flip(out.labels);
  }

  if (p.d_hue != 0 || p.d_sat != 0 || p.d_val != 0) {
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        double hh, ss, vv;
        rgb_to_hsv(out.rgb(0, 0, h, w), out.rgb(0, 1, h, w), out.rgb(0, 2, h, w), hh, ss, vv);
        const Rgb c = hsv_to_rgb(hh + p.d_hue, std::clamp(ss + p.d_sat, 0.0, 1.0),
                                 std::clamp(vv + p.d_val, 0.0, 1.0));
        out.rgb(0, 0, h, w) = static_cast<float>(std::clamp(c.r, 0.0, 1.0));
        out.rgb(0, 1, h, w) = static_cast<float>(std::clamp(c.g, 0.0, 1.0));
        out.rgb(0, 2, h, w) = static_cast<float>(std::clamp(c.b, 0.0, 1.0));
      }
  }
  return out;
}

ToySample augment(const ToySample& s, Rng& rng) { return augment_with(s, draw_augment_params(s, rng)); }

std::vector<double> median_frequency_weights(const std::vector<ToySample>& samples,
                                             int64_t num_classes) {
  std::vector<int64_t> class_pixels(num_classes, 0);
  std::vector<int64_t> present_pixels(num_classes, 0);  // non-void pixels of images with class c
  for (const auto& s : samples) {
    std::vector<int64_t> counts(num_classes, 0);
    int64_t non_void = 0;
    for (int64_t i = 0; i < s.labels.numel(); ++i) {
      const int lab = static_cast<int>(s.labels[i]);
      if (lab == kVoidLabel) continue;
      ++non_void;
      ++counts[lab];
    }
    for (int64_t c = 0; c < num_classes; ++c) {
      if (counts[c] == 0) continue;
      class_pixels[c] += counts[c];
      present_pixels[c] += non_void;
    }
  }
  std::vector<double> freq(num_classes);
  for (int64_t c = 0; c < num_classes; ++c) {
    if (class_pixels[c] == 0)
      throw ConfigError("median_frequency_weights: class " + std::to_string(c) +
                        " never appears in the dataset");
    freq[c] = static_cast<double>(class_pixels[c]) / static_cast<double>(present_pixels[c]);
  }
  std::vector<double> sorted = freq;
  std::sort(sorted.begin(), sorted.end());
  const size_t m = sorted.size();
  const double median =
      m % 2 == 1 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  std::vector<double> weights(num_classes);
  for (int64_t c = 0; c < num_classes; ++c) weights[c] = median / freq[c];
  return weights;
}

Tensor<float> downscale_labels(const Tensor<float>& labels, int factor) {
  if (factor < 1) throw ConfigError("downscale factor must be >= 1");
  const Shape& is = labels.shape();
  if (is.h % factor != 0 || is.w % factor != 0)
    throw ConfigError("label extents " + is.str() + " not divisible by factor " +
                      std::to_string(factor));
  const int64_t off = (factor - 1) / 2;
  Tensor<float> out(Shape{is.n, is.c, is.h / factor, is.w / factor});
  for (int64_t n = 0; n < is.n; ++n)
    for (int64_t c = 0; c < is.c; ++c)
      for (int64_t h = 0; h < out.shape().h; ++h)
        for (int64_t w = 0; w < out.shape().w; ++w)
          out(n, c, h, w) = labels(n, c, h * factor + off, w * factor + off);
  return out;
}

DepthStats compute_depth_stats(const std::vector<ToySample>& samples) {
  double sum = 0;
  int64_t count = 0;
  for (const auto& s : samples)
    for (int64_t i = 0; i < s.depth.numel(); ++i)
      if (s.depth[i] > 0) {
        sum += s.depth[i];
        ++count;
      }
  if (count == 0) throw ConfigError("no valid depth pixels in dataset");
  const double mean = sum / static_cast<double>(count);
  double sq = 0;
  for (const auto& s : samples)
    for (int64_t i = 0; i < s.depth.numel(); ++i)
      if (s.depth[i] > 0) {
        const double d = s.depth[i] - mean;
        sq += d * d;
      }
  const double var = sq / static_cast<double>(count);
  return DepthStats{mean, std::max(std::sqrt(var), 1e-6)};
}

void normalize_depth(Tensor<float>& depth, const DepthStats& stats) {
  for (int64_t i = 0; i < depth.numel(); ++i) {
    if (depth[i] > 0)
      depth[i] = static_cast<float>((depth[i] - stats.mean) / stats.stddev);
    else
      depth[i] = 0.f;  // invalid stays zero after normalization
  }
}

ToyDataset generate_dataset(const ToyDatasetSpec& spec) {
  spec.validate();
  ToyDataset ds;
  ds.spec = spec;
  ds.train.reserve(spec.train_samples);
  for (int64_t i = 0; i < spec.train_samples; ++i)
    ds.train.push_back(generate_toy_rgbd(spec, "train", i));
  ds.val.reserve(spec.val_samples);
  for (int64_t i = 0; i < spec.val_samples; ++i) ds.val.push_back(generate_toy_rgbd(spec, "val", i));
  ds.depth_stats = compute_depth_stats(ds.train);
  return ds;
}

void write_dataset(const ToyDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "train");
  fs::create_directories(fs::path(dir) / "val");
  auto dump = [&](const std::vector<ToySample>& split, const std::string& name) {
    for (size_t i = 0; i < split.size(); ++i) {
      const std::string stem = (fs::path(dir) / name / std::to_string(i)).string();
      save_tensor(split[i].rgb, stem + "_rgb.estn");
      save_tensor(split[i].depth, stem + "_depth.estn");
      save_tensor(split[i].labels, stem + "_labels.estn");
    }
  };
  dump(ds.train, "train");
  dump(ds.val, "val");
  std::ofstream f(fs::path(dir) / "dataset.txt");
  if (!f) throw std::runtime_error("cannot write dataset manifest in " + dir);
  char buf[64];
  f << "esanet-dataset 1\n";
  f << "num_classes = " << ds.spec.num_classes << "\n";
  f << "height = " << ds.spec.height << "\n";
  f << "width = " << ds.spec.width << "\n";
  f << "train_samples = " << ds.spec.train_samples << "\n";
  f << "val_samples = " << ds.spec.val_samples << "\n";
  f << "depth_only_class = " << (ds.spec.depth_only_class ? "true" : "false") << "\n";
  f << "seed = " << ds.spec.seed << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", ds.depth_stats.mean);
  f << "depth_mean = " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", ds.depth_stats.stddev);
  f << "depth_std = " << buf << "\n";
}

namespace {

std::string trim_copy(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace

ToyDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream f(fs::path(dir) / "dataset.txt");
  if (!f) throw std::runtime_error("cannot open dataset manifest in " + dir);
  std::string line;
  if (!std::getline(f, line) || line != "esanet-dataset 1")
    throw std::runtime_error("not a dataset manifest: " + dir);
  ToyDataset ds;
  while (std::getline(f, line)) {
    const std::string t = trim_copy(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw std::runtime_error("bad manifest line: " + t);
    const std::string key = trim_copy(t.substr(0, eq));
    const std::string value = trim_copy(t.substr(eq + 1));
    if (key == "depth_mean") ds.depth_stats.mean = std::stod(value);
    else if (key == "depth_std") ds.depth_stats.stddev = std::stod(value);
    else apply_dataset_override(ds.spec, key, value);
  }
  ds.spec.validate();
  auto slurp = [&](const std::string& name, int64_t count, std::vector<ToySample>& out) {
    out.reserve(count);
    for (int64_t i = 0; i < count; ++i) {
      const std::string stem = (fs::path(dir) / name / std::to_string(i)).string();
      ToySample s;
      s.rgb = load_tensor<float>(stem + "_rgb.estn");
      s.depth = load_tensor<float>(stem + "_depth.estn");
      s.labels = load_tensor<float>(stem + "_labels.estn");
      out.push_back(std::move(s));
    }
  };
  slurp("train", ds.spec.train_samples, ds.train);
  slurp("val", ds.spec.val_samples, ds.val);
  return ds;
}

void apply_dataset_override(ToyDatasetSpec& spec, const std::string& key,
                            const std::string& value) {
  auto as_int = [&](const std::string& v) {
    try {
      size_t pos = 0;
      int64_t out = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("dataset key '" + key + "' expects an integer, got '" + v + "'");
    }
  };
  if (key == "num_classes") spec.num_classes = as_int(value);
  else if (key == "height") spec.height = as_int(value);
  else if (key == "width") spec.width = as_int(value);
  else if (key == "train_samples") spec.train_samples = as_int(value);
  else if (key == "val_samples") spec.val_samples = as_int(value);
  else if (key == "depth_only_class") {
    if (value == "true" || value == "1") spec.depth_only_class = true;
    else if (value == "false" || value == "0") spec.depth_only_class = false;
    else throw ConfigError("dataset key 'depth_only_class' expects true/false");
  } else if (key == "seed") spec.seed = static_cast<uint64_t>(as_int(value));
  else throw ConfigError("unknown dataset config key '" + key + "'");
}

ToyDatasetSpec parse_dataset_config_text(const std::string& text) {
  ToyDatasetSpec spec;
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = trim_copy(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("dataset config line " + std::to_string(lineno) + " is not key = value");
    apply_dataset_override(spec, trim_copy(t.substr(0, eq)), trim_copy(t.substr(eq + 1)));
  }
  spec.validate();
  return spec;
}

ToyDatasetSpec load_dataset_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open dataset config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_dataset_config_text(text);
}

}  // namespace esanet
