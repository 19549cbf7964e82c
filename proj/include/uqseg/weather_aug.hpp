// Seeded adverse-condition synthesis on images (rain, snow, night) plus the
// geometric and cutout augmentations. Every operation is a pure function of
// (image, config); randomness comes only from the config's seed.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "uqseg/core.hpp"
#include "uqseg/training_support.hpp"

namespace uqseg {

struct RainConfig {
  double density = 2000.0;  // streak seeds per megapixel
  int streak_length = 15;
  double angle = -15.0;     // degrees from vertical
  double blur_sigma = 0.8;
  double intensity = 0.6;
  std::uint64_t seed = 0;
};

struct SnowConfig {
  double particle_density = 1500.0;  // flakes per megapixel
  double size_min = 0.5;             // disc radius, pixels
  double size_max = 2.5;
  int vertical_blur = 3;             // box length, pixels
  double cold_shift = 0.3;
  std::uint64_t seed = 0;
};

struct NightConfig {
  double brightness = 0.45;
  double contrast = 0.8;
  double saturation = 0.6;
  double hue_shift = 10.0;  // degrees
};

struct CutoutConfig {
  double rect_fraction = 0.1;
  double fill_value = 0.0;
  std::uint64_t seed = 0;
};

/// Red-channel and blue-channel tone coefficients of the cold shift.
inline constexpr double kColdRed = 0.1;
inline constexpr double kColdBlue = 0.1;

namespace detail {

inline std::size_t count_per_megapixel(double density, std::size_t h, std::size_t w) {
  return static_cast<std::size_t>(std::llround(std::max(density, 0.0) * h * w / 1e6));
}

inline void gaussian_blur(Raster<double>& layer, double sigma) {
  if (sigma <= 0.0) return;
  const long r = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (long i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  const long h = static_cast<long>(layer.height()), w = static_cast<long>(layer.width());
  Raster<double> tmp(layer.height(), layer.width(), 0.0);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long i = -r; i <= r; ++i) acc += k[i + r] * layer(y, std::clamp(x + i, 0L, w - 1));
      tmp(y, x) = acc;
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long i = -r; i <= r; ++i) acc += k[i + r] * tmp(std::clamp(y + i, 0L, h - 1), x);
      layer(y, x) = acc;
    }
}

/// Screen-blends `layer * weight` onto every channel; untouched where the
/// layer is zero so identity configurations stay bit-exact.
inline ImageTensor screen_blend(const ImageTensor& img, const Raster<double>& layer,
                                double weight) {
  std::vector<float> out(img.vector());
  const std::size_t n = img.pixels();
  for (std::size_t c = 0; c < img.channels(); ++c)
    for (std::size_t p = 0; p < n; ++p) {
      const double a = std::clamp(weight * layer[p], 0.0, 1.0);
      if (a <= 0.0) continue;
      const double v = out[c * n + p];
      out[c * n + p] = static_cast<float>(std::min(v + a * (1.0 - v), 1.0));
    }
  return ImageTensor(img.channels(), img.height(), img.width(), std::move(out));
}

}  // namespace detail

/// Sparse seeded noise, streaked along `angle` by an oriented line kernel,
/// Gaussian-blurred, then screen-blended with weight `intensity`.
inline ImageTensor augment_rain(const ImageTensor& img, const RainConfig& cfg) {
  const std::size_t h = img.height(), w = img.width();
  const std::size_t n = detail::count_per_megapixel(cfg.density, h, w);
  if (n == 0 || cfg.intensity <= 0.0 || h == 0 || w == 0) return img;
  std::mt19937_64 rng(cfg.seed);

  struct Drop {
    std::size_t y, x;
    double value;
  };
  std::vector<Drop> drops(n);
  for (auto& d : drops) {
    d.y = uniform_index(rng, h);
    d.x = uniform_index(rng, w);
    d.value = 0.5 + 0.5 * uniform01(rng);
  }

  // Oriented line kernel as a list of integer offsets.
  const double theta = cfg.angle * std::numbers::pi / 180.0;
  const int len = std::max(cfg.streak_length, 1);
  std::vector<std::pair<long, long>> kernel;
  for (int i = 0; i < len; ++i) {
    const double t = i - (len - 1) / 2.0;
    const std::pair<long, long> off{std::lround(t * std::cos(theta)),
                                    std::lround(t * std::sin(theta))};
    if (kernel.empty() || kernel.back() != off) kernel.push_back(off);
  }

  Raster<double> layer(h, w, 0.0);
  for (const auto& d : drops)
    for (const auto& [dy, dx] : kernel) {
      const long y = static_cast<long>(d.y) + dy, x = static_cast<long>(d.x) + dx;
      if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
      layer(y, x) = std::max(layer(y, x), d.value);
    }
  detail::gaussian_blur(layer, cfg.blur_sigma);
  return detail::screen_blend(img, layer, std::clamp(cfg.intensity, 0.0, 1.0));
}

/// Seeded white discs with radii in [size_min, size_max], vertically
/// box-blurred, over a cold tone shift (red scaled down, blue up).
inline ImageTensor augment_snow(const ImageTensor& img, const SnowConfig& cfg) {
  detail::require(cfg.size_min >= 0.0 && cfg.size_max >= cfg.size_min,
                  "snow size range must be nonempty");
  const std::size_t h = img.height(), w = img.width();
  const std::size_t n = detail::count_per_megapixel(cfg.particle_density, h, w);
  if (n == 0 && cfg.cold_shift == 0.0) return img;

  ImageTensor toned = img;
  if (cfg.cold_shift != 0.0 && img.channels() >= 3) {
    std::vector<float> v(img.vector());
    const std::size_t np = img.pixels();
    const double red = 1.0 - cfg.cold_shift * kColdRed;
    const double blue = 1.0 + cfg.cold_shift * kColdBlue;
    for (std::size_t p = 0; p < np; ++p) {
      v[p] = static_cast<float>(std::clamp(v[p] * red, 0.0, 1.0));
      v[2 * np + p] = static_cast<float>(std::clamp(v[2 * np + p] * blue, 0.0, 1.0));
    }
    toned = ImageTensor(img.channels(), h, w, std::move(v));
  }
  if (n == 0) return toned;

  std::mt19937_64 rng(cfg.seed);
  Raster<double> layer(h, w, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double cy = static_cast<double>(uniform_index(rng, h));
    const double cx = static_cast<double>(uniform_index(rng, w));
    const double radius = cfg.size_min + (cfg.size_max - cfg.size_min) * uniform01(rng);
    const double value = 0.7 + 0.3 * uniform01(rng);
    const long r = static_cast<long>(std::ceil(radius));
    for (long dy = -r; dy <= r; ++dy)
      for (long dx = -r; dx <= r; ++dx) {
        if (dy * dy + dx * dx > radius * radius) continue;
        const long y = static_cast<long>(cy) + dy, x = static_cast<long>(cx) + dx;
        if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
        layer(y, x) = std::max(layer(y, x), value);
      }
  }
  if (cfg.vertical_blur > 1) {
    const long half = cfg.vertical_blur / 2;
    Raster<double> blurred(h, w, 0.0);
    for (long y = 0; y < static_cast<long>(h); ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double sum = 0.0;
        long cnt = 0;
        for (long yy = y - half; yy < y - half + cfg.vertical_blur; ++yy) {
          if (yy < 0 || yy >= static_cast<long>(h)) continue;
          sum += layer(yy, x);
          ++cnt;
        }
        blurred(y, x) = sum / static_cast<double>(cnt);
      }
    layer = std::move(blurred);
  }
  return detail::screen_blend(toned, layer, 1.0);
}

// ---------------------------------------------------------------------------
// night

namespace detail {

/// h in [0, 1), s and v in [0, 1].
inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) h = (g - b) / d;
  else if (mx == g) h = 2.0 + (b - r) / d;
  else h = 4.0 + (r - g) / d;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

}  // namespace detail

/// Brightness scale, contrast about each channel's mean, then saturation
/// scale and hue rotation in HSV space (three-channel images only).
inline ImageTensor augment_night(const ImageTensor& img, const NightConfig& cfg) {
  detail::require(cfg.brightness > 0.0 && cfg.contrast > 0.0 && cfg.saturation >= 0.0,
                  "invalid night configuration");
  const std::size_t n = img.pixels(), nc = img.channels();
  std::vector<double> v(img.values().begin(), img.values().end());
  for (double& x : v) x = std::clamp(x * cfg.brightness, 0.0, 1.0);
  for (std::size_t c = 0; c < nc; ++c) {
    double mean = 0.0;
    for (std::size_t p = 0; p < n; ++p) mean += v[c * n + p];
    mean /= static_cast<double>(std::max<std::size_t>(n, 1));
    for (std::size_t p = 0; p < n; ++p) {
      double& x = v[c * n + p];
      x = std::clamp((x - mean) * cfg.contrast + mean, 0.0, 1.0);
    }
  }
  if (nc == 3) {
    for (std::size_t p = 0; p < n; ++p) {
      double h, s, val;
      detail::rgb_to_hsv(v[p], v[n + p], v[2 * n + p], h, s, val);
      s = std::clamp(s * cfg.saturation, 0.0, 1.0);
      h += cfg.hue_shift / 360.0;
      detail::hsv_to_rgb(h, s, val, v[p], v[n + p], v[2 * n + p]);
    }
  }
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(std::clamp(v[i], 0.0, 1.0));
  return ImageTensor(nc, img.height(), img.width(), std::move(out));
}

// ---------------------------------------------------------------------------
// geometric

struct CropRect {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t width = 0;
  std::size_t height = 0;
};

enum class GeometricKind { kHFlip, kRot90, kCrop };

struct GeometricOp {
  GeometricKind kind = GeometricKind::kHFlip;
  CropRect rect;  // used by kCrop
};

namespace detail {

/// Source pixel (y, x) for destination (dy, dx); returns output (h, w).
struct Mapping {
  std::size_t out_h, out_w;
  std::size_t in_w;
  GeometricOp op;
  std::pair<std::size_t, std::size_t> source(std::size_t dy, std::size_t dx) const {
    switch (op.kind) {
      case GeometricKind::kHFlip: return {dy, in_w - 1 - dx};
      case GeometricKind::kRot90: return {dx, in_w - 1 - dy};  // counter-clockwise
      case GeometricKind::kCrop: return {dy + op.rect.y, dx + op.rect.x};
    }
    return {dy, dx};
  }
};

inline Mapping make_mapping(std::size_t h, std::size_t w, const GeometricOp& op) {
  switch (op.kind) {
    case GeometricKind::kHFlip: return {h, w, w, op};
    case GeometricKind::kRot90: return {w, h, w, op};
    case GeometricKind::kCrop:
      require(op.rect.width > 0 && op.rect.height > 0 && op.rect.x + op.rect.width <= w &&
                  op.rect.y + op.rect.height <= h,
              "crop rectangle out of bounds");
      return {op.rect.height, op.rect.width, w, op};
  }
  return {h, w, w, op};
}

}  // namespace detail

template <typename Tag>
PlanarTensor<Tag> geometric(const PlanarTensor<Tag>& img, const GeometricOp& op) {
  const auto m = detail::make_mapping(img.height(), img.width(), op);
  std::vector<float> out(img.channels() * m.out_h * m.out_w);
  for (std::size_t c = 0; c < img.channels(); ++c)
    for (std::size_t y = 0; y < m.out_h; ++y)
      for (std::size_t x = 0; x < m.out_w; ++x) {
        const auto [sy, sx] = m.source(y, x);
        out[(c * m.out_h + y) * m.out_w + x] = img.at(c, sy, sx);
      }
  return PlanarTensor<Tag>(img.channels(), m.out_h, m.out_w, std::move(out));
}

/// Labels move with the image by nearest-neighbor copies.
inline ClassMap geometric(const ClassMap& labels, const GeometricOp& op) {
  const auto m = detail::make_mapping(labels.height(), labels.width(), op);
  std::vector<std::uint8_t> out(m.out_h * m.out_w);
  for (std::size_t y = 0; y < m.out_h; ++y)
    for (std::size_t x = 0; x < m.out_w; ++x) {
      const auto [sy, sx] = m.source(y, x);
      out[y * m.out_w + x] = labels(sy, sx);
    }
  return ClassMap(m.out_h, m.out_w, labels.num_classes(), std::move(out));
}

// ---------------------------------------------------------------------------
// cutout and corpus selection

/// One seeded rectangle with the image's aspect ratio and area
/// rect_fraction * H * W, filled with fill_value.
inline ImageTensor cutout(const ImageTensor& img, const CutoutConfig& cfg) {
  detail::require(cfg.rect_fraction > 0.0 && cfg.rect_fraction <= 1.0,
                  "cutout fraction must lie in (0, 1]");
  detail::require(cfg.fill_value >= 0.0 && cfg.fill_value <= 1.0,
                  "cutout fill must lie in [0, 1]");
  const std::size_t h = img.height(), w = img.width();
  if (h == 0 || w == 0) return img;
  const double side = std::sqrt(cfg.rect_fraction);
  const std::size_t rh = std::clamp<std::size_t>(std::llround(h * side), 1, h);
  const std::size_t rw = std::clamp<std::size_t>(std::llround(w * side), 1, w);
  std::mt19937_64 rng(cfg.seed);
  const std::size_t y0 = uniform_index(rng, h - rh + 1);
  const std::size_t x0 = uniform_index(rng, w - rw + 1);
  std::vector<float> v(img.vector());
  for (std::size_t c = 0; c < img.channels(); ++c)
    for (std::size_t y = y0; y < y0 + rh; ++y)
      for (std::size_t x = x0; x < x0 + rw; ++x)
        v[(c * h + y) * w + x] = static_cast<float>(cfg.fill_value);
  return ImageTensor(img.channels(), h, w, std::move(v));
}

/// round(fraction * n) distinct indices drawn uniformly, returned sorted.
inline std::vector<std::size_t> corpus_plan(std::size_t n_images, double fraction,
                                            std::uint64_t seed) {
  detail::require(fraction >= 0.0 && fraction <= 1.0, "fraction must lie in [0, 1]");
  const std::size_t k = static_cast<std::size_t>(std::llround(fraction * n_images));
  std::vector<std::size_t> idx(n_images);
  for (std::size_t i = 0; i < n_images; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i)
    std::swap(idx[i], idx[i + uniform_index(rng, n_images - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Seed for image `index` of a corpus run.
inline std::uint64_t image_seed(std::uint64_t seed, std::uint64_t index) { return seed ^ index; }

}  // namespace uqseg
