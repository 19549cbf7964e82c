// Slow reference implementations used to check the library. Each one follows
// the textbook definition directly and shares no code with include/uqseg.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <vector>

namespace oracle {

/// Mann-Whitney over all (positive, negative) pairs.
inline std::optional<double> pairwise_auroc(const std::vector<double>& scores,
                                            const std::vector<std::uint8_t>& positive) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (positive[i] ? pos : neg).push_back(scores[i]);
  if (pos.empty() || neg.empty()) return std::nullopt;
  std::uint64_t wins = 0, ties = 0;
  for (double p : pos)
    for (double n : neg) {
      if (p > n) ++wins;
      else if (p == n) ++ties;
    }
  return (2.0 * static_cast<double>(wins) + static_cast<double>(ties)) /
         (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

namespace detail {
/// Number of entries of the ascending vector v that are >= t.
inline std::size_t count_at_least(const std::vector<double>& v, double t) {
  return static_cast<std::size_t>(v.end() - std::lower_bound(v.begin(), v.end(), t));
}
}  // namespace detail

/// Average precision as the mean, over positives, of the precision obtained
/// when thresholding at that positive's score.
inline std::optional<double> sweep_aupr(const std::vector<double>& scores,
                                        const std::vector<std::uint8_t>& positive) {
  std::vector<double> pos, all(scores);
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (positive[i]) pos.push_back(scores[i]);
  if (pos.empty()) return std::nullopt;
  std::sort(pos.begin(), pos.end());
  std::sort(all.begin(), all.end());
  double sum = 0.0;
  for (double t : pos)
    sum += static_cast<double>(detail::count_at_least(pos, t)) /
           static_cast<double>(detail::count_at_least(all, t));
  return sum / static_cast<double>(pos.size());
}

/// Tries every observed score as threshold; keeps the largest one whose
/// recall reaches 95%.
inline std::optional<double> exhaustive_fpr95(const std::vector<double>& scores,
                                              const std::vector<std::uint8_t>& positive) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (positive[i] ? pos : neg).push_back(scores[i]);
  if (pos.empty() || neg.empty()) return std::nullopt;
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  const std::set<double> thresholds(scores.begin(), scores.end());
  std::optional<double> best;
  for (double t : thresholds) {
    const std::size_t tp = detail::count_at_least(pos, t);
    if (100 * tp >= 95 * pos.size()) best = t;
  }
  return static_cast<double>(detail::count_at_least(neg, *best)) /
         static_cast<double>(neg.size());
}

/// IoU per class from flat label vectors; entries with gt < 0 are skipped.
inline std::vector<std::optional<double>> class_iou(const std::vector<int>& gt,
                                                    const std::vector<int>& pred,
                                                    int num_classes) {
  std::vector<std::optional<double>> out(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    std::uint64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] < 0) continue;
      const bool g = gt[i] == c, p = pred[i] == c;
      inter += g && p;
      uni += g || p;
    }
    if (uni) out[c] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return out;
}

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  int n = 0;
  for (const auto& x : v)
    if (x) {
      s += *x;
      ++n;
    }
  if (!n) return std::nullopt;
  return s / n;
}

/// ECE with bins [k/B, (k+1)/B), the last one closed, found by scanning
/// interval membership rather than by flooring.
inline std::optional<double> binned_ece(const std::vector<double>& conf,
                                        const std::vector<std::uint8_t>& correct, int bins) {
  if (conf.empty()) return std::nullopt;
  double e = 0.0;
  for (int k = 0; k < bins; ++k) {
    const double lo = static_cast<double>(k) / bins, hi = static_cast<double>(k + 1) / bins;
    double c = 0.0, a = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      const bool in = conf[i] >= lo && (conf[i] < hi || (k == bins - 1 && conf[i] <= hi));
      if (!in) continue;
      ++n;
      c += conf[i];
      a += correct[i];
    }
    if (n) e += std::abs(a / n - c / n) * static_cast<double>(n) / static_cast<double>(conf.size());
  }
  return e;
}

/// Dense grid minimizer, used to bracket what a smarter search should find.
inline double grid_argmin(const std::function<double(double)>& f, double lo, double hi, int n) {
  double best_x = lo, best = f(lo);
  for (int i = 1; i < n; ++i) {
    const double x = lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
    const double v = f(x);
    if (v < best) {
      best = v;
      best_x = x;
    }
  }
  return best_x;
}

/// Standard normal CDF.
inline double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace oracle

namespace oracle {

/// Region normalization written out step by step: windowed means at low
/// pixels, flood-filled regions of the filtered low set, then the
/// majority-below test. 8-connectivity.
inline std::vector<float> region_normalize(const std::vector<float>& conf, long h, long w,
                                           double low, double fraction, double ood_conf,
                                           long kernel) {
  std::vector<double> f(conf.begin(), conf.end());
  const long r = kernel / 2;
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      if (!(conf[y * w + x] < low) || kernel <= 1) continue;
      double sum = 0.0;
      long n = 0;
      for (long yy = y - r; yy <= y + r; ++yy)
        for (long xx = x - r; xx <= x + r; ++xx) {
          if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
          sum += conf[yy * w + xx];
          ++n;
        }
      f[y * w + x] = sum / static_cast<double>(n);
    }
  std::vector<float> out(f.begin(), f.end());
  std::vector<int> seen(f.size(), 0);
  for (long s = 0; s < h * w; ++s) {
    if (seen[s] || !(f[s] < low)) continue;
    std::vector<long> region, stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const long p = stack.back();
      stack.pop_back();
      region.push_back(p);
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long y = p / w + dy, x = p % w + dx;
          if (y < 0 || x < 0 || y >= h || x >= w) continue;
          const long q = y * w + x;
          if (!seen[q] && f[q] < low) {
            seen[q] = 1;
            stack.push_back(q);
          }
        }
    }
    std::size_t below = 0;
    double lowest = f[region[0]];
    for (long p : region) {
      below += f[p] < ood_conf;
      lowest = std::min(lowest, f[p]);
    }
    if (static_cast<double>(below) > fraction * static_cast<double>(region.size()))
      for (long p : region) out[p] = static_cast<float>(lowest);
  }
  return out;
}

}  // namespace oracle
