#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"
#include "support/test_util.hpp"
#include "uqseg/calibration.hpp"
#include "uqseg/metrics.hpp"
#include "uqseg/ood_scoring.hpp"

using namespace uqseg;

namespace {

LogitMap pixel(std::vector<float> z) {
  const std::size_t n = z.size();
  return LogitMap(n, 1, 1, std::move(z));
}

LogitMap shifted(const LogitMap& l, float c) {
  std::vector<float> v(l.vector());
  for (auto& x : v) x += c;
  return LogitMap(l.channels(), l.height(), l.width(), std::move(v));
}

}  // namespace

TEST(Argmax, PicksMaximumWithLowestIndexTies) {
  EXPECT_EQ(argmax_prediction(pixel({0.1f, 2.0f, -1.0f}))[0], 1);
  EXPECT_EQ(argmax_prediction(pixel({0.5f, 0.5f, 0.5f}))[0], 0);
  EXPECT_EQ(argmax_prediction(pixel({0.0f, 3.0f, 3.0f}))[0], 1);
  EXPECT_THROW(argmax_prediction(pixel({1.0f})), DataError);
}

TEST(Argmax, ShiftTemperatureAndSoftmaxInvariant) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> t(0.05, 20.0);
  for (int trial = 0; trial < 100; ++trial) {
    const LogitMap l = testutil::random_logits(rng, 7, 4, 5);
    const ClassMap a = argmax_prediction(l);
    EXPECT_EQ(argmax_prediction(shifted(l, 4.25f)), a);
    EXPECT_EQ(argmax_prediction(softmax(l)), a);
    EXPECT_EQ(argmax_prediction(apply_temperature(l, {t(rng)})), a);
  }
}

TEST(Msp, HandValues) {
  EXPECT_NEAR(msp_confidence(LogitMap(19, 1, 1, 0.0f))[0], 1.0 / 19.0, 1e-7);
  EXPECT_NEAR(msp_confidence(pixel({static_cast<float>(std::log(3.0)), 0.0f}))[0], 0.75, 1e-7);
}

TEST(Msp, ShiftInvariantAndBounded) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const LogitMap l = testutil::random_logits(rng, 6, 3, 3);
    const ConfidenceMap a = msp_confidence(l), b = msp_confidence(shifted(l, -3.5f));
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_NEAR(a[i], b[i], 1e-7);
      EXPECT_GE(a[i], 1.0f / 6.0f - 1e-7f);
      EXPECT_LE(a[i], 1.0f);
    }
  }
}

TEST(Energy, HandValues) {
  EXPECT_NEAR(energy_score(LogitMap(19, 1, 1, 0.0f))[0], std::log(19.0), 1e-12);
  const long double direct = std::log(std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L));
  EXPECT_NEAR(energy_score(pixel({1, 2, 3}))[0], static_cast<double>(direct), 1e-12);
  EXPECT_NEAR(energy_score(pixel({1, 2, 3}))[0], 3.40761, 1e-5);
  // max subtraction keeps large logits finite
  EXPECT_NEAR(energy_score(pixel({1000, 1000}))[0], 1000.0 + std::log(2.0), 1e-9);
}

TEST(Energy, ShiftIdentityAndStrictMonotonicity) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const LogitMap l = testutil::random_logits(rng, 5, 2, 3);
    const RealMap e = energy_score(l), e2 = energy_score(shifted(l, 2.5f));
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(e2[i], e[i] + 2.5, 1e-6);

    std::vector<float> v(l.vector());
    v[trial % v.size()] += 0.5f;
    const RealMap up = energy_score(LogitMap(5, 2, 3, v));
    EXPECT_GT(up[(trial % v.size()) % l.pixels()], e[(trial % v.size()) % l.pixels()]);
  }
}

TEST(EnergyToConfidence, MinMaxAndDegenerate) {
  const ConfidenceMap c = energy_to_confidence(RealMap(1, 3, std::vector<double>{0, 1, 2}));
  EXPECT_EQ(c.vector(), (std::vector<float>{0.0f, 0.5f, 1.0f}));
  const ConfidenceMap flat = energy_to_confidence(RealMap(2, 2, 7.0));
  EXPECT_EQ(flat.vector(), std::vector<float>(4, 0.5f));
}

TEST(EnergyToConfidence, PreservesAuroc) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d;
  std::vector<double> e(500);
  std::vector<std::uint8_t> pos(500);
  for (std::size_t i = 0; i < e.size(); ++i) {
    pos[i] = i % 4 == 0;
    e[i] = d(rng) - (pos[i] ? 1.0 : 0.0);
  }
  const ConfidenceMap c = energy_to_confidence(RealMap(1, e.size(), e));
  std::vector<double> neg_energy(e.size()), from_conf(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    neg_energy[i] = -e[i];
    from_conf[i] = 1.0 - c[i];
  }
  EXPECT_NEAR(*auroc(from_conf, pos), *oracle::pairwise_auroc(neg_energy, pos), 1e-12);
}
