// Test-time normalization-statistics adaptation: per-channel Gaussian KL
// between instance and running statistics, a sigmoid mixing coefficient, and
// blending of the two statistic sets.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "uqseg/core.hpp"
#include "uqseg/io.hpp"

namespace uqseg {

/// Channel-wise mean and standard deviation of one normalization layer.
struct LayerStats {
  std::string name;
  std::vector<double> mean;
  std::vector<double> stddev;

  std::size_t channels() const { return mean.size(); }
};

struct FeatureStats {
  std::vector<LayerStats> layers;

  void validate() const {
    for (const auto& l : layers) {
      detail::require(l.mean.size() == l.stddev.size(),
                      "layer '" + l.name + "': mean and std lengths differ");
      for (double m : l.mean) detail::require(std::isfinite(m), "non-finite mean");
      for (double s : l.stddev)
        detail::require(std::isfinite(s) && s > 0.0, "standard deviations must be positive");
    }
  }
};

/// Mixing weight of the instance statistics, within [0, 1].
struct MixingCoefficient {
  double alpha = 0.0;

  void validate() const {
    detail::require(alpha >= 0.0 && alpha <= 1.0, "mixing coefficient must lie in [0, 1]");
  }
};

/// KL(N(mu1, sigma1^2) || N(mu2, sigma2^2)).
inline double gaussian_kl(double mu1, double sigma1, double mu2, double sigma2) {
  detail::require(sigma1 > 0.0 && sigma2 > 0.0, "sigma must be positive");
  const double d = mu1 - mu2;
  const double kl = std::log(sigma2 / sigma1) +
                    (sigma1 * sigma1 + d * d) / (2.0 * sigma2 * sigma2) - 0.5;
  return std::max(kl, 0.0);  // rounding can dip a hair below zero
}

namespace detail {
inline void require_matching(const FeatureStats& a, const FeatureStats& b) {
  require(a.layers.size() == b.layers.size(), "layer count mismatch between statistics");
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    require(a.layers[l].channels() == b.layers[l].channels(),
            "channel count mismatch in layer " + std::to_string(l));
}
}  // namespace detail

/// Mean over channels of KL(instance || running), for every layer.
inline std::vector<double> layer_kl(const FeatureStats& running, const FeatureStats& instance) {
  running.validate();
  instance.validate();
  detail::require_matching(running, instance);
  std::vector<double> out;
  for (std::size_t l = 0; l < running.layers.size(); ++l) {
    const auto& r = running.layers[l];
    const auto& x = instance.layers[l];
    double sum = 0.0;
    for (std::size_t c = 0; c < r.channels(); ++c)
      sum += gaussian_kl(x.mean[c], x.stddev[c], r.mean[c], r.stddev[c]);
    out.push_back(r.channels() ? sum / static_cast<double>(r.channels()) : 0.0);
  }
  return out;
}

/// sigmoid(mean layer KL), kept strictly inside (0, 1).
inline MixingCoefficient mixing_coefficient(const FeatureStats& running,
                                            const FeatureStats& instance) {
  const auto kls = layer_kl(running, instance);
  detail::require(!kls.empty(), "statistics have no layers");
  double mean = 0.0;
  for (double k : kls) mean += k;
  mean /= static_cast<double>(kls.size());
  const double alpha = 1.0 / (1.0 + std::exp(-mean));
  return {std::min(alpha, std::nextafter(1.0, 0.0))};
}

/// mu = a mu(x) + (1 - a) mu_r;  sigma^2 = a sigma^2(x) + (1 - a) sigma_r^2.
inline FeatureStats mix_stats(const FeatureStats& running, const FeatureStats& instance,
                              MixingCoefficient alpha) {
  alpha.validate();
  running.validate();
  instance.validate();
  detail::require_matching(running, instance);
  const double a = alpha.alpha;
  FeatureStats out;
  for (std::size_t l = 0; l < running.layers.size(); ++l) {
    const auto& r = running.layers[l];
    const auto& x = instance.layers[l];
    LayerStats m{r.name, std::vector<double>(r.channels()), std::vector<double>(r.channels())};
    for (std::size_t c = 0; c < r.channels(); ++c) {
      m.mean[c] = a * x.mean[c] + (1.0 - a) * r.mean[c];
      const double var = a * x.stddev[c] * x.stddev[c] + (1.0 - a) * r.stddev[c] * r.stddev[c];
      m.stddev[c] = std::sqrt(var);
    }
    out.layers.push_back(std::move(m));
  }
  return out;
}

inline constexpr double kNormEpsilon = 1e-5;

/// (v - mu) / sqrt(sigma^2 + eps) per channel of the given layer.
inline FeatureMap normalize_features(const FeatureMap& features, const FeatureStats& stats,
                                     std::size_t layer, double epsilon = kNormEpsilon) {
  detail::require(layer < stats.layers.size(), "layer index out of range");
  const auto& l = stats.layers[layer];
  detail::require(features.channels() == l.channels(),
                  "feature channels do not match the layer statistics");
  std::vector<float> out(features.size());
  const std::size_t n = features.pixels();
  for (std::size_t c = 0; c < features.channels(); ++c) {
    const double scale = 1.0 / std::sqrt(l.stddev[c] * l.stddev[c] + epsilon);
    for (std::size_t p = 0; p < n; ++p)
      out[c * n + p] = static_cast<float>((features.at(c, p) - l.mean[c]) * scale);
  }
  return FeatureMap(features.channels(), features.height(), features.width(), std::move(out));
}

/// Channel statistics of a feature map (population std).
inline LayerStats feature_stats(const FeatureMap& f, std::string name = {}) {
  LayerStats s{std::move(name), std::vector<double>(f.channels()),
               std::vector<double>(f.channels())};
  const std::size_t n = f.pixels();
  for (std::size_t c = 0; c < f.channels(); ++c) {
    double sum = 0.0;
    for (std::size_t p = 0; p < n; ++p) sum += f.at(c, p);
    const double mean = sum / static_cast<double>(n);
    double sq = 0.0;
    for (std::size_t p = 0; p < n; ++p) sq += (f.at(c, p) - mean) * (f.at(c, p) - mean);
    s.mean[c] = mean;
    s.stddev[c] = std::sqrt(sq / static_cast<double>(n));
  }
  return s;
}

// ---------------------------------------------------------------------------
// on-disk layout: <dir>/index.json lists layers; each layer's mean and std
// are 1-d UQT1 tensors named in the index.

inline FeatureStats load_feature_stats(const fs::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw DataError("cannot open " + (dir / "index.json").string());
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "index.json").string() + ": " + e.what());
  }
  FeatureStats stats;
  if (!index.contains("layers") || !index["layers"].is_array())
    throw DataError("index.json must contain a 'layers' array");
  for (const auto& entry : index["layers"]) {
    LayerStats l;
    l.name = entry.value("name", std::string{});
    auto read_vec = [&](const char* key) {
      if (!entry.contains(key)) throw DataError("layer entry missing '" + std::string(key) + "'");
      const Tensor t = read_uqt1(dir / entry[key].get<std::string>());
      detail::require(t.dims.size() == 1, "layer statistics must be 1-d tensors");
      return std::vector<double>(t.data.begin(), t.data.end());
    };
    l.mean = read_vec("mean");
    l.stddev = read_vec("std");
    stats.layers.push_back(std::move(l));
  }
  stats.validate();
  return stats;
}

inline void save_feature_stats(const fs::path& dir, const FeatureStats& stats) {
  fs::create_directories(dir);
  nlohmann::ordered_json index;
  index["layers"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < stats.layers.size(); ++i) {
    const auto& l = stats.layers[i];
    const std::string stem = "layer" + std::to_string(i);
    auto to_vec = [](const std::vector<double>& v) {
      return Tensor{{v.size()}, std::vector<float>(v.begin(), v.end())};
    };
    write_uqt1(dir / (stem + "_mean.uqt1"), to_vec(l.mean));
    write_uqt1(dir / (stem + "_std.uqt1"), to_vec(l.stddev));
    index["layers"].push_back(
        {{"name", l.name}, {"mean", stem + "_mean.uqt1"}, {"std", stem + "_std.uqt1"}});
  }
  std::ofstream out(dir / "index.json", std::ios::trunc);
  out << index.dump(2) << "\n";
}

}  // namespace uqseg
