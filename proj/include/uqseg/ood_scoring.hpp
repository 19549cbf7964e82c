// Prediction and confidence maps from logits: maximum softmax probability
// and the log-sum-exp energy score.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "uqseg/core.hpp"

namespace uqseg {

enum class ScoreMethod { kMsp, kEnergy };

struct ScoreConfig {
  ScoreMethod method = ScoreMethod::kMsp;
  bool normalize_energy = true;
};

inline ScoreMethod parse_score_method(const std::string& s) {
  if (s == "msp") return ScoreMethod::kMsp;
  if (s == "energy") return ScoreMethod::kEnergy;
  throw DataError("unknown score method: " + s);
}

/// Per-pixel argmax; ties go to the lowest class index.
template <typename Tag>
ClassMap argmax_prediction(const PlanarTensor<Tag>& scores) {
  const std::size_t nc = scores.channels();
  detail::require(nc >= 2, "argmax needs at least two classes");
  detail::require(nc < kIgnoreId, "at most 254 classes fit an 8-bit class map");
  std::vector<std::uint8_t> out(scores.pixels());
  for (std::size_t p = 0; p < scores.pixels(); ++p) {
    std::size_t best = 0;
    float best_v = scores.at(0, p);
    for (std::size_t c = 1; c < nc; ++c) {
      const float v = scores.at(c, p);
      detail::require(std::isfinite(v), "non-finite score in argmax");
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out[p] = static_cast<std::uint8_t>(best);
  }
  return ClassMap(scores.height(), scores.width(), static_cast<int>(nc), std::move(out));
}

/// Maximum softmax probability per pixel.
inline ConfidenceMap msp_confidence(const LogitMap& logits) {
  std::vector<float> out(logits.pixels());
  std::vector<double> z;
  for (std::size_t p = 0; p < logits.pixels(); ++p) {
    pixel_vector(logits, p, z);
    softmax_inplace(z);
    out[p] = static_cast<float>(*std::max_element(z.begin(), z.end()));
  }
  return ConfidenceMap(logits.height(), logits.width(), std::move(out));
}

/// log sum_c exp(logit_c) per pixel; higher means more in-distribution.
inline RealMap energy_score(const LogitMap& logits) {
  RealMap out(logits.height(), logits.width());
  std::vector<double> z;
  for (std::size_t p = 0; p < logits.pixels(); ++p) {
    pixel_vector(logits, p, z);
    out[p] = log_sum_exp(z);
  }
  return out;
}

/// Per-image min-max normalization to [0, 1]; a constant map becomes 0.5.
inline ConfidenceMap energy_to_confidence(const RealMap& energy) {
  detail::require(energy.size() > 0, "empty energy map");
  for (double v : energy.values())
    detail::require(std::isfinite(v), "non-finite energy value");
  const auto [lo, hi] = std::minmax_element(energy.values().begin(), energy.values().end());
  const double min = *lo, range = *hi - *lo;
  std::vector<float> out(energy.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = range > 0.0 ? static_cast<float>(std::clamp((energy[i] - min) / range, 0.0, 1.0))
                         : 0.5f;
  }
  return ConfidenceMap(energy.height(), energy.width(), std::move(out));
}

/// Confidence under the configured method.
inline ConfidenceMap score_confidence(const LogitMap& logits, const ScoreConfig& cfg) {
  if (cfg.method == ScoreMethod::kMsp) return msp_confidence(logits);
  detail::require(cfg.normalize_energy,
                  "unnormalized energy cannot be stored as a confidence map");
  return energy_to_confidence(energy_score(logits));
}

}  // namespace uqseg
