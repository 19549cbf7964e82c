#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "support/test_util.hpp"
#include "uqseg/fusion.hpp"

using namespace uqseg;

namespace {

ConfidenceMap conf_row(std::vector<float> v) {
  const std::size_t n = v.size();
  return ConfidenceMap(1, n, std::move(v));
}

ClassMap cls(std::vector<std::uint8_t> v, int nc = 5) {
  const std::size_t n = v.size();
  return ClassMap(1, n, nc, std::move(v));
}

/// Component count by breadth-first flood fill.
std::uint32_t flood_count(const BinaryMask& m, Connectivity conn) {
  const long h = static_cast<long>(m.height()), w = static_cast<long>(m.width());
  std::vector<int> seen(m.size(), 0);
  std::uint32_t count = 0;
  for (long s = 0; s < h * w; ++s) {
    if (!m[s] || seen[s]) continue;
    ++count;
    std::vector<long> stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const long p = stack.back();
      stack.pop_back();
      const long y = p / w, x = p % w;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          if (!dy && !dx) continue;
          if (conn == Connectivity::kFour && dy && dx) continue;
          const long ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
          const long q = ny * w + nx;
          if (m[q] && !seen[q]) {
            seen[q] = 1;
            stack.push_back(q);
          }
        }
    }
  }
  return count;
}

}  // namespace

TEST(Components, MatchFloodFill) {
  std::mt19937_64 rng(1);
  std::bernoulli_distribution b(0.45);
  for (int trial = 0; trial < 200; ++trial) {
    BinaryMask m(9 + trial % 5, 11, 0);
    for (auto& v : m.values()) v = b(rng);
    for (auto conn : {Connectivity::kFour, Connectivity::kEight}) {
      const ComponentLabels c = label_components(m, conn);
      EXPECT_EQ(c.count, flood_count(m, conn));
      for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(c.labels[i] != 0, m[i] != 0);
    }
  }
}

TEST(Components, DiagonalOnlyJoinsUnderEightConnectivity) {
  const BinaryMask m(2, 2, std::vector<std::uint8_t>{1, 0, 0, 1});
  EXPECT_EQ(label_components(m, Connectivity::kFour).count, 2u);
  EXPECT_EQ(label_components(m, Connectivity::kEight).count, 1u);
}

TEST(AverageProbs, HandValues) {
  const ProbabilityMap a(2, 1, 1, std::vector<float>{1.0f, 0.0f});
  const ProbabilityMap b(2, 1, 1, std::vector<float>{0.0f, 1.0f});
  EXPECT_EQ(average_probs(std::vector<ProbabilityMap>{a}), a);
  EXPECT_EQ(average_probs(std::vector<ProbabilityMap>{a, b}).vector(), (std::vector<float>{0.5f, 0.5f}));

  std::vector<ProbabilityMap> three;
  for (float v : {0.2f, 0.5f, 0.8f}) three.emplace_back(2, 1, 1, std::vector<float>{v, 1.0f - v});
  EXPECT_NEAR(average_probs(three).at(0, 0), 0.5, 1e-7);

  EXPECT_THROW(average_probs(std::vector<ProbabilityMap>{a, ProbabilityMap(2, 1, 2, 0.5f)}), DataError);
}

TEST(AverageProbs, RowsStillSumToOne) {
  std::mt19937_64 rng(2);
  std::vector<ProbabilityMap> maps;
  for (int k = 0; k < 5; ++k) maps.push_back(softmax(testutil::random_logits(rng, 7, 4, 4)));
  const ProbabilityMap avg = average_probs(maps);
  for (std::size_t p = 0; p < avg.pixels(); ++p) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += avg.at(c, p);
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(MajorityVote, HandValues) {
  const ClassMap a = cls({1, 2, 1, 0});
  EXPECT_EQ(majority_vote(std::vector<ClassMap>{a, a, a}), a);
  EXPECT_EQ(majority_vote(std::vector<ClassMap>{cls({1}), cls({2}), cls({1})})[0], 1);
  EXPECT_EQ(majority_vote(std::vector<ClassMap>{cls({1}), cls({2}), cls({3})}, {2})[0], 3);
  EXPECT_THROW(majority_vote(std::vector<ClassMap>{a}), DataError);
  EXPECT_THROW(majority_vote(std::vector<ClassMap>{a, a}, {2}), DataError);
}

TEST(MajorityVote, PermutationsAgreeWhenPreferredModelFollows) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ClassMap> preds;
    for (int k = 0; k < 4; ++k) preds.push_back(testutil::random_classes(rng, 5, 5, 3));
    const ClassMap ref = majority_vote(preds, {1});
    std::vector<std::size_t> idx{0, 1, 2, 3};
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<ClassMap> permuted;
    std::size_t preferred = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      permuted.push_back(preds[idx[k]]);
      if (idx[k] == 1) preferred = k;
    }
    EXPECT_EQ(majority_vote(permuted, {preferred}), ref);
  }
}

TEST(ReciprocalFuse, HandValuesAndBounds) {
  EXPECT_FLOAT_EQ(reciprocal_fuse(conf_row({0.5f}), conf_row({0.5f}))[0], 0.25f);
  EXPECT_FLOAT_EQ(reciprocal_fuse(conf_row({0.8f}), conf_row({0.8f}))[0], 0.4f);
  EXPECT_LT(reciprocal_fuse(conf_row({0.0f}), conf_row({0.9f}))[0], 1e-11f);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const ConfidenceMap a = testutil::random_confidence(rng, 6, 6);
    const ConfidenceMap b = testutil::random_confidence(rng, 6, 6);
    const ConfidenceMap ab = reciprocal_fuse(a, b), ba = reciprocal_fuse(b, a);
    EXPECT_EQ(ab, ba);
    for (std::size_t i = 0; i < ab.size(); ++i) EXPECT_LE(ab[i], std::min(a[i], b[i]));
  }
}

TEST(OverlayFuse, BranchSemantics) {
  const ConfidenceMap bg = conf_row({0.9f, 0.9f, 0.9f});
  EXPECT_EQ(overlay_fuse(bg, conf_row({0.6f, 0.7f, 1.0f})), bg);
  EXPECT_EQ(overlay_fuse(bg, conf_row({0.5f, 0.7f, 0.6f})).vector(), (std::vector<float>{0.5f, 0.9f, 0.9f}));
  EXPECT_EQ(overlay_fuse(bg, conf_row({0.0f, 0.1f, 0.2f}), 0.0), bg);
  const ConfidenceMap x = conf_row({0.1f, 0.7f});
  for (double t : {0.0, 0.3, 0.6, 1.0}) EXPECT_EQ(overlay_fuse(x, x, t), x);
}

TEST(RegionNormalize, HandCases) {
  const ConfidenceMap high = conf_row({0.6f, 0.9f, 1.0f});
  EXPECT_EQ(region_normalize(high), high);

  RegionNormConfig k1;
  k1.mean_filter_kernel = 1;
  const ConfidenceMap ood = region_normalize(conf_row({0.30f, 0.35f, 0.50f, 0.9f}), k1);
  EXPECT_EQ(ood.vector(), (std::vector<float>{0.30f, 0.30f, 0.30f, 0.9f}));

  const ConfidenceMap mild = conf_row({0.50f, 0.55f, 0.9f});
  EXPECT_EQ(region_normalize(mild, k1), mild);

  // exactly half below 0.4 is not "more than half"
  const ConfidenceMap even = conf_row({0.3f, 0.5f});
  EXPECT_EQ(region_normalize(even, k1), even);
}

TEST(RegionNormalize, FilterOnlyTouchesLowPixelsAndUsesShrunkenWindows) {
  // corner pixel 0.1 surrounded by 0.9: 2x2 clipped window mean = 0.7
  ConfidenceMap c(3, 3, std::vector<float>(9, 0.9f));
  c(0, 0) = 0.1f;
  const ConfidenceMap out = region_normalize(c);
  EXPECT_NEAR(out(0, 0), 0.7f, 1e-6);
  for (std::size_t i = 1; i < 9; ++i) EXPECT_EQ(out[i], 0.9f);
}

TEST(RegionNormalize, IdempotentWithoutFilter) {
  std::mt19937_64 rng(5);
  RegionNormConfig k1;
  k1.mean_filter_kernel = 1;
  for (int trial = 0; trial < 100; ++trial) {
    const ConfidenceMap c = testutil::random_confidence(rng, 8, 9);
    const ConfidenceMap once = region_normalize(c, k1);
    EXPECT_EQ(region_normalize(once, k1), once);
  }
}

TEST(RegionNormalize, RejectsBadConfig) {
  RegionNormConfig even;
  even.mean_filter_kernel = 2;
  EXPECT_THROW(region_normalize(conf_row({0.5f}), even), DataError);
  RegionNormConfig range;
  range.low_conf_threshold = 1.5;
  EXPECT_THROW(region_normalize(conf_row({0.5f}), range), DataError);
}

TEST(BiasDisagreement, TruthTable) {
  const ClassMap a = cls({3, 3, 1, 1});
  const ClassMap b = cls({4, 2, 4, 2});
  EXPECT_EQ(bias_disagreement_ood(a, b, 3, 4).vector(), (std::vector<std::uint8_t>{1, 0, 0, 0}));
  EXPECT_EQ(bias_disagreement_ood(a, b, 0, 0).vector(), std::vector<std::uint8_t>(4, 0));
}
