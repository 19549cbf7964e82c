// Shared raster/tensor types, the ignore-label convention and softmax helpers.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uqseg {

/// Label value that marks pixels without a valid class. Also the default OOD id.
inline constexpr std::uint8_t kIgnoreId = 255;

/// Base error. Anything deriving from DataError maps to CLI exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw DataError(message);
}

inline std::string shape_string(std::size_t h, std::size_t w) {
  return std::to_string(h) + "x" + std::to_string(w);
}

}  // namespace detail

/// Single-channel H x W raster, row-major.
template <typename T>
class Raster {
 public:
  using value_type = T;

  Raster() = default;
  Raster(std::size_t height, std::size_t width, T fill = T{})
      : height_(height), width_(width), data_(height * width, fill) {}
  Raster(std::size_t height, std::size_t width, std::vector<T> data)
      : height_(height), width_(width), data_(std::move(data)) {
    detail::require(data_.size() == height_ * width_,
                    "raster payload does not match " +
                        detail::shape_string(height_, width_));
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::size_t y, std::size_t x) { return data_[y * width_ + x]; }
  const T& operator()(std::size_t y, std::size_t x) const {
    return data_[y * width_ + x];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& vector() const { return data_; }

  bool same_shape(std::size_t h, std::size_t w) const {
    return height_ == h && width_ == w;
  }
  template <typename U>
  bool same_shape(const Raster<U>& other) const {
    return same_shape(other.height(), other.width());
  }

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> data_;
};

/// Pixel mask; nonzero means set.
using BinaryMask = Raster<std::uint8_t>;

/// Real-valued per-pixel map with no range constraint (losses, energies).
using RealMap = Raster<double>;

/// Per-pixel class IDs in [0, num_classes) or kIgnoreId.
class ClassMap : public Raster<std::uint8_t> {
 public:
  ClassMap() = default;
  ClassMap(std::size_t height, std::size_t width, int num_classes,
           std::vector<std::uint8_t> data)
      : Raster(height, width, std::move(data)), num_classes_(num_classes) {
    detail::require(num_classes_ >= 1 && num_classes_ <= kIgnoreId,
                    "num_classes must lie in [1, 255]");
    for (std::uint8_t v : values()) {
      detail::require(v < num_classes_ || v == kIgnoreId,
                      "class id " + std::to_string(v) +
                          " out of range for num_classes " +
                          std::to_string(num_classes_));
    }
  }
  ClassMap(std::size_t height, std::size_t width, int num_classes,
           std::uint8_t fill)
      : ClassMap(height, width, num_classes,
                 std::vector<std::uint8_t>(height * width, fill)) {}

  int num_classes() const { return num_classes_; }

  friend bool operator==(const ClassMap&, const ClassMap&) = default;

 private:
  int num_classes_ = 0;
};

/// Per-pixel confidence in [0, 1].
class ConfidenceMap : public Raster<float> {
 public:
  ConfidenceMap() = default;
  ConfidenceMap(std::size_t height, std::size_t width, std::vector<float> data)
      : Raster(height, width, std::move(data)) {
    for (float v : values()) {
      detail::require(std::isfinite(v) && v >= 0.0f && v <= 1.0f,
                      "confidence values must be finite and within [0, 1]");
    }
  }
  ConfidenceMap(std::size_t height, std::size_t width, float fill)
      : ConfidenceMap(height, width, std::vector<float>(height * width, fill)) {}

  friend bool operator==(const ConfidenceMap&, const ConfidenceMap&) = default;
};

/// Planar C x H x W float tensor, row-major with channels outermost.
/// The Tag parameter keeps logits, probabilities and images apart.
template <typename Tag>
class PlanarTensor {
 public:
  PlanarTensor() = default;
  PlanarTensor(std::size_t channels, std::size_t height, std::size_t width,
               std::vector<float> data)
      : channels_(channels), height_(height), width_(width),
        data_(std::move(data)) {
    detail::require(data_.size() == channels_ * height_ * width_,
                    "tensor payload does not match its dimensions");
    Tag::validate(*this);
  }
  PlanarTensor(std::size_t channels, std::size_t height, std::size_t width,
               float fill = 0.0f)
      : PlanarTensor(channels, height, width,
                     std::vector<float>(channels * height * width, fill)) {}

  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t pixels() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * height_ + y) * width_ + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * height_ + y) * width_ + x];
  }
  /// Channel c at flat pixel index p.
  float& at(std::size_t c, std::size_t p) { return data_[c * pixels() + p]; }
  float at(std::size_t c, std::size_t p) const { return data_[c * pixels() + p]; }

  std::span<float> channel(std::size_t c) {
    return std::span<float>(data_).subspan(c * pixels(), pixels());
  }
  std::span<const float> channel(std::size_t c) const {
    return std::span<const float>(data_).subspan(c * pixels(), pixels());
  }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  const std::vector<float>& vector() const { return data_; }

  template <typename Other>
  bool same_shape(const PlanarTensor<Other>& o) const {
    return channels_ == o.channels() && height_ == o.height() &&
           width_ == o.width();
  }

  friend bool operator==(const PlanarTensor&, const PlanarTensor&) = default;

 private:
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> data_;
};

struct LogitTag {
  template <typename T>
  static void validate(const T& t) {
    for (float v : t.values())
      detail::require(std::isfinite(v), "logits must be finite");
  }
};

struct ProbabilityTag {
  template <typename T>
  static void validate(const T& t) {
    const std::size_t n = t.pixels();
    for (std::size_t p = 0; p < n; ++p) {
      double sum = 0.0;
      for (std::size_t c = 0; c < t.channels(); ++c) {
        const float v = t.at(c, p);
        detail::require(std::isfinite(v) && v >= 0.0f && v <= 1.0f,
                        "probabilities must lie within [0, 1]");
        sum += v;
      }
      detail::require(std::abs(sum - 1.0) <= 1e-5,
                      "probabilities must sum to 1 at every pixel");
    }
  }
};

struct ImageTag {
  template <typename T>
  static void validate(const T& t) {
    for (float v : t.values())
      detail::require(std::isfinite(v) && v >= 0.0f && v <= 1.0f,
                      "image values must be finite and within [0, 1]");
  }
};

struct FeatureTag {
  template <typename T>
  static void validate(const T& t) {
    for (float v : t.values())
      detail::require(std::isfinite(v), "features must be finite");
  }
};

using LogitMap = PlanarTensor<LogitTag>;
using ProbabilityMap = PlanarTensor<ProbabilityTag>;
using ImageTensor = PlanarTensor<ImageTag>;
using FeatureMap = PlanarTensor<FeatureTag>;

// ---------------------------------------------------------------------------
// softmax helpers

/// Numerically stable softmax of one logit vector, in place.
inline void softmax_inplace(std::span<double> z) {
  if (z.empty()) return;
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

inline double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - m);
  return m + std::log(sum);
}

/// Gathers the class vector of pixel p as doubles.
template <typename Tag>
void pixel_vector(const PlanarTensor<Tag>& t, std::size_t p,
                  std::vector<double>& out) {
  out.resize(t.channels());
  for (std::size_t c = 0; c < t.channels(); ++c) out[c] = t.at(c, p);
}

/// Per-pixel softmax over channels, optionally after dividing by a temperature.
inline ProbabilityMap softmax(const LogitMap& logits, double temperature = 1.0) {
  std::vector<float> out(logits.size());
  std::vector<double> z;
  const std::size_t n = logits.pixels();
  for (std::size_t p = 0; p < n; ++p) {
    pixel_vector(logits, p, z);
    for (double& v : z) v /= temperature;
    softmax_inplace(z);
    for (std::size_t c = 0; c < z.size(); ++c)
      out[c * n + p] = static_cast<float>(z[c]);
  }
  return ProbabilityMap(logits.channels(), logits.height(), logits.width(),
                        std::move(out));
}

// ---------------------------------------------------------------------------
// OOD ground truth

using ClassIdSet = std::set<int>;

/// True where the ground-truth label is one of ood_ids.
inline BinaryMask ood_mask(const ClassMap& gt, const ClassIdSet& ood_ids) {
  BinaryMask mask(gt.height(), gt.width(), 0);
  for (std::size_t i = 0; i < gt.size(); ++i)
    mask[i] = ood_ids.contains(gt[i]) ? 1 : 0;
  return mask;
}

/// Pixels that carry a valid in-distribution label: neither ignore nor OOD.
inline bool is_labelled(std::uint8_t gt, const ClassIdSet& ood_ids) {
  return gt != kIgnoreId && !ood_ids.contains(gt);
}

}  // namespace uqseg
