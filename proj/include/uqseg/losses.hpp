// Per-pixel loss values: cross-entropy, OHEM hard-pixel selection, focal loss
// and soft-target cross-entropy. No gradients flow anywhere except the
// test-facing ce_gradient.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "uqseg/core.hpp"

namespace uqseg {

/// Loss per pixel; pixels with valid == 0 were ignored.
struct PixelLosses {
  RealMap values;
  BinaryMask valid;

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.values().begin(), valid.values().end(), 1));
  }
  double mean() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!valid[i]) continue;
      sum += values[i];
      ++n;
    }
    return n ? sum / static_cast<double>(n) : 0.0;
  }
};

/// -log softmax(z)[target] = log(1 + sum_{c != target} exp(z_c - z_target)),
/// shifted by the max so that confident pixels keep full relative precision.
inline double cross_entropy(std::span<const double> z, std::size_t target) {
  const double m = *std::max_element(z.begin(), z.end());
  double rest = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c)
    if (c != target) rest += std::exp(z[c] - m);
  const double t = std::exp(z[target] - m);
  if (z[target] == m) return std::log1p(rest);
  return std::log(t + rest) - (z[target] - m);
}

/// d CE / d z = softmax(z) - onehot(target).
inline std::vector<double> ce_gradient(std::span<const double> z, std::size_t target) {
  std::vector<double> g(z.begin(), z.end());
  softmax_inplace(g);
  g[target] -= 1.0;
  return g;
}

/// Cross-entropy per pixel; pixels labelled ignore_id are masked out.
inline PixelLosses pixel_ce(const LogitMap& logits, const ClassMap& gt,
                            std::uint8_t ignore_id = kIgnoreId) {
  detail::require(logits.height() == gt.height() && logits.width() == gt.width(),
                  "shape mismatch between logits and ground truth");
  PixelLosses out{RealMap(gt.height(), gt.width(), 0.0), BinaryMask(gt.height(), gt.width(), 0)};
  std::vector<double> z;
  for (std::size_t p = 0; p < gt.size(); ++p) {
    if (gt[p] == ignore_id) continue;
    detail::require(gt[p] < logits.channels(),
                    "ground-truth class " + std::to_string(gt[p]) + " exceeds the logit channels");
    pixel_vector(logits, p, z);
    out.values[p] = cross_entropy(z, gt[p]);
    out.valid[p] = 1;
  }
  return out;
}

struct OhemConfig {
  double base_threshold = 0.0;
  std::size_t min_kept = 0;
  std::uint8_t ignore_id = kIgnoreId;
};

struct OhemResult {
  BinaryMask selected;
  double loss = 0.0;
  double threshold = 0.0;  // effective threshold after lowering
};

/// Keeps every valid pixel whose loss exceeds base_threshold; when fewer than
/// min_kept do, the threshold drops so that exactly the min_kept hardest
/// pixels are kept (ties broken by pixel order). min_kept is clamped to the
/// number of valid pixels.
inline OhemResult ohem_select(const PixelLosses& losses, const OhemConfig& cfg) {
  detail::require(losses.values.same_shape(losses.valid), "loss map and mask differ in shape");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < losses.values.size(); ++i)
    if (losses.valid[i]) order.push_back(i);
  detail::require(!order.empty(), "no non-ignored pixels for OHEM");
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return losses.values[a] > losses.values[b];
  });
  const std::size_t keep_min = std::min(cfg.min_kept, order.size());
  std::size_t above = 0;
  while (above < order.size() && losses.values[order[above]] > cfg.base_threshold) ++above;

  OhemResult r{BinaryMask(losses.values.height(), losses.values.width(), 0), 0.0,
               cfg.base_threshold};
  const std::size_t kept = std::max(above, keep_min);
  if (kept > above) r.threshold = losses.values[order[kept - 1]];
  double sum = 0.0;
  for (std::size_t k = 0; k < kept; ++k) {
    r.selected[order[k]] = 1;
    sum += losses.values[order[k]];
  }
  r.loss = kept ? sum / static_cast<double>(kept) : 0.0;
  return r;
}

struct FocalConfig {
  double alpha_scale = 1.0;
  double gamma = 0.0;

  void validate() const {
    detail::require(alpha_scale > 0.0, "focal alpha must be positive");
    detail::require(gamma >= 0.0, "focal gamma must be non-negative");
  }
};

inline constexpr double kMinProbability = 1e-12;

struct FocalResult {
  std::vector<double> values;
  std::size_t clamped = 0;  // inputs raised to kMinProbability
};

/// -alpha (1 - p)^gamma log p for each true-class probability p.
inline FocalResult focal_loss(std::span<const double> prob_true, const FocalConfig& cfg) {
  cfg.validate();
  FocalResult r;
  r.values.reserve(prob_true.size());
  for (double p : prob_true) {
    detail::require(std::isfinite(p) && p >= 0.0 && p <= 1.0,
                    "true-class probability must lie in [0, 1]");
    if (p < kMinProbability) {
      p = kMinProbability;
      ++r.clamped;
    }
    r.values.push_back(-cfg.alpha_scale * std::pow(1.0 - p, cfg.gamma) * std::log(p));
  }
  return r;
}

/// Focal loss per pixel from logits: p is the softmax probability of the gt class.
inline PixelLosses pixel_focal(const LogitMap& logits, const ClassMap& gt,
                               const FocalConfig& cfg, std::uint8_t ignore_id = kIgnoreId) {
  PixelLosses ce = pixel_ce(logits, gt, ignore_id);
  std::vector<double> p_true;
  for (std::size_t i = 0; i < ce.values.size(); ++i)
    if (ce.valid[i]) p_true.push_back(std::exp(-ce.values[i]));
  const FocalResult f = focal_loss(p_true, cfg);
  for (std::size_t i = 0, k = 0; i < ce.values.size(); ++i)
    if (ce.valid[i]) ce.values[i] = f.values[k++];
  return ce;
}

/// -sum_c t_c log softmax(z)_c per pixel.
inline RealMap soft_ce(const LogitMap& logits, const ProbabilityMap& targets) {
  detail::require(logits.same_shape(targets), "shape mismatch between logits and targets");
  RealMap out(logits.height(), logits.width(), 0.0);
  std::vector<double> z;
  for (std::size_t p = 0; p < logits.pixels(); ++p) {
    pixel_vector(logits, p, z);
    const double lse = log_sum_exp(z);
    double tsum = 0.0, loss = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) {
      const double t = targets.at(c, p);
      tsum += t;
      if (t > 0.0) loss -= t * (z[c] - lse);
    }
    detail::require(std::abs(tsum - 1.0) <= 1e-4, "soft targets must sum to 1 per pixel");
    out[p] = loss;
  }
  return out;
}

}  // namespace uqseg
