// Pure helpers from a biased-ensemble training recipe: class-biased sampling,
// pseudo-label confidence filtering and EMA teacher updates.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "uqseg/core.hpp"

namespace uqseg {

/// Uniform double in [0, 1) from the top 53 bits of one 64-bit draw.
/// Kept local so sequences do not depend on the standard library's
/// distribution implementations.
template <typename Urbg>
double uniform01(Urbg& rng) {
  static_assert(Urbg::max() - Urbg::min() == ~std::uint64_t{0},
                "uniform01 expects a full-range 64-bit generator");
  return static_cast<double>((rng() - Urbg::min()) >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n) by rejection, n > 0.
template <typename Urbg>
std::uint64_t uniform_index(Urbg& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do {
    v = rng() - Urbg::min();
  } while (v >= limit);
  return v % n;
}

/// Per-class frequencies f in [0, 1].
struct ClassFrequencies {
  std::vector<double> f;

  void validate() const {
    detail::require(!f.empty(), "class frequencies are empty");
    for (double v : f)
      detail::require(std::isfinite(v) && v >= 0.0 && v <= 1.0,
                      "class frequencies must lie in [0, 1]");
  }
};

/// softmax(1 - f).
inline std::vector<double> rarity_softmax(const ClassFrequencies& freqs) {
  freqs.validate();
  std::vector<double> p(freqs.f.size());
  for (std::size_t c = 0; c < p.size(); ++c) p[c] = 1.0 - freqs.f[c];
  softmax_inplace(p);
  return p;
}

/// Inclusion probability per class under the two-stage rule: a fair coin
/// admits samples of the biased class outright; otherwise a sample of class c
/// is admitted with probability softmax(1 - f)[c].
inline std::vector<double> sampling_probability(const ClassFrequencies& freqs, int biased_class) {
  detail::require(biased_class >= 0 && static_cast<std::size_t>(biased_class) < freqs.f.size(),
                  "biased class id out of range");
  std::vector<double> p = rarity_softmax(freqs);
  for (std::size_t c = 0; c < p.size(); ++c)
    p[c] = static_cast<int>(c) == biased_class ? 0.5 + 0.5 * p[c] : 0.5 * p[c];
  return p;
}

/// One draw of the two-stage rule for a sample labelled `label`.
template <typename Urbg>
bool sample_inclusion(int label, const ClassFrequencies& freqs, int biased_class, Urbg& rng) {
  detail::require(label >= 0 && static_cast<std::size_t>(label) < freqs.f.size(),
                  "sample label out of range");
  detail::require(biased_class >= 0 && static_cast<std::size_t>(biased_class) < freqs.f.size(),
                  "biased class id out of range");
  const bool first_stage = uniform01(rng) < 0.5;
  if (first_stage) return label == biased_class;
  return uniform01(rng) < rarity_softmax(freqs)[label];
}

/// Per predicted class: population std of confidences. The top_k classes by
/// std (ties to the lower id) have their pixels below the class mean masked.
/// Pixels predicted as ignore are not grouped.
inline BinaryMask confidence_filter(const ConfidenceMap& conf, const ClassMap& pred,
                                    std::size_t top_k = 3) {
  detail::require(conf.same_shape(pred), "shape mismatch between confidence and prediction");
  struct Acc {
    std::size_t n = 0;
    double sum = 0.0;
  };
  std::map<int, Acc> acc;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == kIgnoreId) continue;
    auto& a = acc[pred[i]];
    ++a.n;
    a.sum += conf[i];
  }
  std::map<int, double> mean, var;
  for (const auto& [c, a] : acc) mean[c] = a.sum / static_cast<double>(a.n);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == kIgnoreId) continue;
    const double d = conf[i] - mean[pred[i]];
    var[pred[i]] += d * d;
  }
  std::vector<std::pair<int, double>> ranked;
  for (const auto& [c, a] : acc) ranked.emplace_back(c, std::sqrt(var[c] / static_cast<double>(a.n)));
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  ranked.resize(std::min(top_k, ranked.size()));

  std::array<bool, 256> selected{};
  for (const auto& [c, s] : ranked) selected[c] = true;
  BinaryMask mask(pred.height(), pred.width(), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == kIgnoreId || !selected[pred[i]]) continue;
    mask[i] = conf[i] < mean[pred[i]];
  }
  return mask;
}

/// decay * teacher + (1 - decay) * student, elementwise.
inline std::vector<double> ema_update(std::span<const double> teacher,
                                      std::span<const double> student, double decay) {
  detail::require(teacher.size() == student.size(), "parameter vector lengths differ");
  detail::require(decay >= 0.0 && decay <= 1.0, "decay must lie in [0, 1]");
  std::vector<double> out(teacher.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    detail::require(std::isfinite(teacher[i]) && std::isfinite(student[i]),
                    "parameters must be finite");
    out[i] = decay * teacher[i] + (1.0 - decay) * student[i];
  }
  return out;
}

}  // namespace uqseg
