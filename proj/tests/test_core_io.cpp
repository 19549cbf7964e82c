#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <png.h>

#include "support/test_util.hpp"
#include "uqseg/core.hpp"
#include "uqseg/io.hpp"

using namespace uqseg;
using testutil::TempDir;

namespace {

std::vector<unsigned char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

template <typename Fn>
std::string error_of(Fn&& fn) {
  try {
    fn();
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

void write_rgb_png(const fs::path& p) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = 2;
  img.height = 2;
  img.format = PNG_FORMAT_RGB;
  const unsigned char px[12] = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  ASSERT_NE(png_image_write_to_file(&img, p.c_str(), 0, px, 0, nullptr), 0);
}

}  // namespace

TEST(ClassMapIo, BytesRoundTripVerbatim) {
  TempDir dir;
  const ClassMap map(2, 2, 4, std::vector<std::uint8_t>{0, 1, 255, 3});
  save_class_map(dir / "a.png", map);
  const ClassMap back = load_class_map(dir / "a.png", 4);
  EXPECT_EQ(back.vector(), (std::vector<std::uint8_t>{0, 1, kIgnoreId, 3}));
  EXPECT_EQ(back.height(), 2u);
  EXPECT_EQ(back.width(), 2u);
}

TEST(ClassMapIo, RewriteIsByteIdentical) {
  TempDir dir;
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const ClassMap map = testutil::random_classes(rng, 13 + trial, 9, 19);
    save_class_map(dir / "a.png", map);
    save_class_map(dir / "b.png", load_class_map(dir / "a.png", 19));
    EXPECT_EQ(slurp(dir / "a.png"), slurp(dir / "b.png"));
  }
}

TEST(ClassMapIo, RejectsSixteenBitDepth) {
  TempDir dir;
  save_confidence_png16(dir / "c.png", ConfidenceMap(2, 2, std::vector<float>(4, 0.5f)));
  EXPECT_NE(error_of([&] { load_class_map(dir / "c.png", 19); }).find("unsupported bit depth"),
            std::string::npos);
}

TEST(ClassMapIo, RejectsMultiChannel) {
  TempDir dir;
  write_rgb_png(dir / "rgb.png");
  EXPECT_NE(error_of([&] { load_class_map(dir / "rgb.png", 19); }).find("color type"),
            std::string::npos);
}

TEST(ClassMapIo, RejectsMissingFileAndOutOfRangeIds) {
  TempDir dir;
  EXPECT_THROW(load_class_map(dir / "nope.png", 19), DataError);
  save_class_map(dir / "a.png", Raster<std::uint8_t>(1, 2, std::vector<std::uint8_t>{0, 7}));
  EXPECT_THROW(load_class_map(dir / "a.png", 5), DataError);
}

TEST(Uqt1, HeaderLayout) {
  Tensor t{{2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}};
  const auto bytes = encode_uqt1(t);
  ASSERT_EQ(bytes.size(), 4u + 1u + 3u * 8u + 8u * 4u);
  EXPECT_EQ(std::memcmp(bytes.data(), "UQT1", 4), 0);
  EXPECT_EQ(bytes[4], 3);
  EXPECT_EQ(bytes[5], 2);  // low byte of the first dim, little endian
  for (int k = 6; k < 13; ++k) EXPECT_EQ(bytes[k], 0);
  float first;
  std::memcpy(&first, bytes.data() + 29, 4);
  EXPECT_EQ(first, 1.0f);

  const LogitMap logits = to_logit_map(decode_uqt1(bytes));
  EXPECT_EQ(logits.channels(), 2u);
  EXPECT_EQ(logits.at(1, 1, 0), 7.0f);
}

TEST(Uqt1, FileRoundTripIsBitIdentical) {
  TempDir dir;
  std::mt19937_64 rng(3);
  const LogitMap logits = testutil::random_logits(rng, 3, 5, 4);
  write_uqt1(dir / "l.uqt1", to_tensor(logits));
  const auto first = slurp(dir / "l.uqt1");
  write_uqt1(dir / "m.uqt1", to_tensor(load_logits(dir / "l.uqt1")));
  EXPECT_EQ(first, slurp(dir / "m.uqt1"));
  EXPECT_EQ(load_logits(dir / "m.uqt1"), logits);
}

TEST(Uqt1, Errors) {
  auto bytes = encode_uqt1(Tensor{{2, 2}, {1, 2, 3, 4}});
  auto truncated = bytes;
  truncated.resize(truncated.size() - 1);
  EXPECT_NE(error_of([&] { decode_uqt1(truncated); }).find("truncated tensor"), std::string::npos);

  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_uqt1(longer), DataError);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(error_of([&] { decode_uqt1(bad); }).find("bad magic"), std::string::npos);

  Tensor nan{{1, 2}, {0.0f, std::nanf("")}};
  EXPECT_THROW(to_logit_map(nan), DataError);
  EXPECT_NO_THROW(to_tensor(LogitMap(1, 1, 2, std::vector<float>{0, 1})));
  EXPECT_THROW(to_confidence_map(Tensor{{1, 1}, {1.5f}}), DataError);
}

TEST(ConfidenceIo, ReadsBothEncodings) {
  TempDir dir;
  const ConfidenceMap conf(1, 3, std::vector<float>{0.0f, 0.25f, 1.0f});
  save_confidence(dir / "c.uqt1", conf);
  save_confidence_png16(dir / "c.png", conf);
  EXPECT_EQ(load_confidence(dir / "c.uqt1"), conf);
  const ConfidenceMap q = load_confidence(dir / "c.png");
  for (std::size_t i = 0; i < conf.size(); ++i)
    EXPECT_NEAR(q[i], std::round(conf[i] * 65535.0) / 65535.0, 1e-7);
}

TEST(OodMask, Definition) {
  const ClassMap gt(1, 4, 3, std::vector<std::uint8_t>{0, 1, 255, 2});
  EXPECT_EQ(ood_mask(gt, {255}).vector(), (std::vector<std::uint8_t>{0, 0, 1, 0}));
  EXPECT_EQ(ood_mask(gt, {}).vector(), (std::vector<std::uint8_t>{0, 0, 0, 0}));
  const ClassMap all(2, 2, 3, kIgnoreId);
  EXPECT_EQ(ood_mask(all, {255}).vector(), std::vector<std::uint8_t>(4, 1));
}

TEST(Softmax, SumsToOneOnRandomLogits) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const LogitMap logits = testutil::random_logits(rng, 19, 4, 4, 10.0);
    const ProbabilityMap p = softmax(logits);
    for (std::size_t px = 0; px < p.pixels(); ++px) {
      double s = 0.0;
      for (std::size_t c = 0; c < p.channels(); ++c) s += p.at(c, px);
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Manifest, ResolvesRelativePathsAndReportsMissingFiles) {
  TempDir dir;
  std::istringstream text(
      R"({"image":"i.uqt1","gt":"g.png","pred":"p.png","conf":"/abs/c.uqt1"})"
      "\n\n"
      R"({"image":"i2.uqt1","gt":"g2.png","pred":"p2.png","conf":"c2.uqt1","logits":"l2.uqt1"})");
  const auto records = parse_manifest(text, dir.path());
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0].gt, dir.path() / "g.png");
  EXPECT_EQ(records[0].conf, fs::path("/abs/c.uqt1"));
  EXPECT_FALSE(records[0].logits);
  EXPECT_EQ(*records[1].logits, dir.path() / "l2.uqt1");

  std::ofstream(dir / "m.jsonl") << R"({"image":"i.uqt1","gt":"g.png","pred":"p.png","conf":"c.uqt1"})"
                                 << "\n";
  EXPECT_NE(error_of([&] { load_manifest(dir / "m.jsonl", 19); }).find("record 0: missing file"),
            std::string::npos);

  std::istringstream missing_key(R"({"image":"i","gt":"g","pred":"p"})");
  EXPECT_THROW(parse_manifest(missing_key, dir.path()), DataError);
}
