// Ensemble combination: probability averaging, majority voting, reciprocal
// confidence fusion, threshold overlay, region normalization and biased-model
// disagreement.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "uqseg/components.hpp"
#include "uqseg/core.hpp"

namespace uqseg {

/// Per-pixel, per-class arithmetic mean of equally shaped probability maps.
inline ProbabilityMap average_probs(std::span<const ProbabilityMap> maps) {
  detail::require(!maps.empty(), "averaging needs at least one map");
  const ProbabilityMap& first = maps.front();
  for (const auto& m : maps)
    detail::require(m.same_shape(first), "shape mismatch between probability maps");
  std::vector<double> acc(first.size(), 0.0);
  for (const auto& m : maps)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m.values()[i];
  std::vector<float> out(acc.size());
  const double n = static_cast<double>(maps.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / n);
  return ProbabilityMap(first.channels(), first.height(), first.width(), std::move(out));
}

struct VoteConfig {
  std::size_t preferred_model = 0;
};

/// Most-voted class per pixel; any tie for the top count falls back to the
/// preferred model's prediction.
inline ClassMap majority_vote(std::span<const ClassMap> preds, const VoteConfig& cfg = {}) {
  detail::require(preds.size() >= 2, "voting needs at least two predictions");
  detail::require(cfg.preferred_model < preds.size(), "preferred model index out of range");
  const ClassMap& first = preds.front();
  for (const auto& p : preds)
    detail::require(p.same_shape(first) && p.num_classes() == first.num_classes(),
                    "shape mismatch between predictions");
  std::vector<std::uint8_t> out(first.size());
  std::array<std::uint32_t, 256> counts{};
  for (std::size_t i = 0; i < first.size(); ++i) {
    for (const auto& p : preds) ++counts[p[i]];
    std::uint32_t best_count = 0;
    int best = -1;
    bool tie = false;
    for (const auto& p : preds) {
      const std::uint32_t c = counts[p[i]];
      if (c > best_count) {
        best_count = c;
        best = p[i];
        tie = false;
      } else if (c == best_count && p[i] != best) {
        tie = true;
      }
    }
    out[i] = tie ? preds[cfg.preferred_model][i] : static_cast<std::uint8_t>(best);
    for (const auto& p : preds) counts[p[i]] = 0;
  }
  return ClassMap(first.height(), first.width(), first.num_classes(), std::move(out));
}

inline constexpr double kMinConfidence = 1e-12;

/// 1 / (1/a + 1/b) per pixel, with zeros clamped to kMinConfidence.
inline ConfidenceMap reciprocal_fuse(const ConfidenceMap& a, const ConfidenceMap& b) {
  detail::require(a.same_shape(b), "shape mismatch between confidence maps");
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = std::max<double>(a[i], kMinConfidence);
    const double y = std::max<double>(b[i], kMinConfidence);
    const float fused = static_cast<float>(1.0 / (1.0 / x + 1.0 / y));
    // float rounding must not push the result above either input
    out[i] = std::min({fused, a[i], b[i]});
  }
  return ConfidenceMap(a.height(), a.width(), std::move(out));
}

/// overlay where overlay < threshold, background elsewhere.
inline ConfidenceMap overlay_fuse(const ConfidenceMap& background, const ConfidenceMap& overlay,
                                  double threshold = 0.6) {
  detail::require(background.same_shape(overlay), "shape mismatch between confidence maps");
  std::vector<float> out(background.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = overlay[i] < threshold ? overlay[i] : background[i];
  return ConfidenceMap(background.height(), background.width(), std::move(out));
}

struct RegionNormConfig {
  double low_conf_threshold = 0.6;
  double ood_fraction_threshold = 0.5;
  double ood_conf_threshold = 0.4;
  int mean_filter_kernel = 3;
  Connectivity connectivity = Connectivity::kEight;

  void validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    detail::require(unit(low_conf_threshold) && unit(ood_fraction_threshold) &&
                        unit(ood_conf_threshold),
                    "region normalization thresholds must lie in [0, 1]");
    detail::require(mean_filter_kernel >= 1 && mean_filter_kernel % 2 == 1,
                    "mean filter kernel must be odd and positive");
  }
};

/// Box mean over a k x k window clipped to the image, evaluated only where
/// `where` is set; other pixels keep their value.
inline Raster<double> masked_mean_filter(const Raster<double>& v, const BinaryMask& where,
                                         int kernel) {
  Raster<double> out = v;
  if (kernel <= 1) return out;
  const long r = kernel / 2;
  const long h = static_cast<long>(v.height()), w = static_cast<long>(v.width());
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      if (!where(y, x)) continue;
      double sum = 0.0;
      long n = 0;
      for (long yy = std::max(0L, y - r); yy <= std::min(h - 1, y + r); ++yy)
        for (long xx = std::max(0L, x - r); xx <= std::min(w - 1, x + r); ++xx) {
          sum += v(yy, xx);
          ++n;
        }
      out(y, x) = sum / static_cast<double>(n);
    }
  }
  return out;
}

/// 1) mean-filter the pixels below low_conf_threshold; 2) label connected
/// components of the filtered map's pixels below low_conf_threshold; 3) a
/// component whose fraction of pixels below ood_conf_threshold strictly
/// exceeds ood_fraction_threshold is OOD; 4) OOD components take their
/// minimum confidence.
inline ConfidenceMap region_normalize(const ConfidenceMap& conf, const RegionNormConfig& cfg = {}) {
  cfg.validate();
  const std::size_t h = conf.height(), w = conf.width();
  Raster<double> v(h, w);
  BinaryMask low(h, w, 0);
  for (std::size_t i = 0; i < conf.size(); ++i) {
    v[i] = conf[i];
    low[i] = conf[i] < cfg.low_conf_threshold;
  }
  const Raster<double> filtered = masked_mean_filter(v, low, cfg.mean_filter_kernel);
  for (std::size_t i = 0; i < conf.size(); ++i) low[i] = filtered[i] < cfg.low_conf_threshold;

  const ComponentLabels comps = label_components(low, cfg.connectivity);
  std::vector<std::size_t> size(comps.count + 1, 0), below(comps.count + 1, 0);
  std::vector<double> minimum(comps.count + 1, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < conf.size(); ++i) {
    const auto l = comps.labels[i];
    if (!l) continue;
    ++size[l];
    if (filtered[i] < cfg.ood_conf_threshold) ++below[l];
    minimum[l] = std::min(minimum[l], filtered[i]);
  }
  std::vector<float> out(conf.size());
  for (std::size_t i = 0; i < conf.size(); ++i) {
    const auto l = comps.labels[i];
    const bool ood = l && static_cast<double>(below[l]) >
                              cfg.ood_fraction_threshold * static_cast<double>(size[l]);
    out[i] = static_cast<float>(ood ? minimum[l] : filtered[i]);
  }
  return ConfidenceMap(h, w, std::move(out));
}

/// True where model A predicts its bias class and model B predicts its own.
inline BinaryMask bias_disagreement_ood(const ClassMap& pred_a, const ClassMap& pred_b,
                                        int bias_a, int bias_b) {
  detail::require(pred_a.same_shape(pred_b), "shape mismatch between predictions");
  BinaryMask out(pred_a.height(), pred_a.width(), 0);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = pred_a[i] == bias_a && pred_b[i] == bias_b;
  return out;
}

}  // namespace uqseg
