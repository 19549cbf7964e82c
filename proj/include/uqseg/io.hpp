// File formats: UQT1 float tensors, 8/16-bit grayscale PNG, JSON-lines manifests.
//
// UQT1 layout (little-endian, no padding):
//   "UQT1" | u8 ndim | ndim x u64 dims | prod(dims) x f32 payload (row-major)
#pragma once

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uqseg/core.hpp"

namespace uqseg {

namespace fs = std::filesystem;

/// Generic dense tensor as stored in a UQT1 file.
struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "UQT1 IO assumes a little-endian host");

inline std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const fs::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write: " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// UQT1

inline constexpr char kUqt1Magic[4] = {'U', 'Q', 'T', '1'};

inline std::vector<unsigned char> encode_uqt1(const Tensor& t) {
  detail::require(t.dims.size() <= 255, "UQT1 supports at most 255 dims");
  detail::require(t.element_count() == t.data.size(),
                  "tensor payload does not match its dimensions");
  std::vector<unsigned char> out;
  out.reserve(5 + 8 * t.dims.size() + 4 * t.data.size());
  out.insert(out.end(), kUqt1Magic, kUqt1Magic + 4);
  out.push_back(static_cast<unsigned char>(t.dims.size()));
  for (std::uint64_t d : t.dims) {
    unsigned char b[8];
    std::memcpy(b, &d, 8);
    out.insert(out.end(), b, b + 8);
  }
  const auto* p = reinterpret_cast<const unsigned char*>(t.data.data());
  out.insert(out.end(), p, p + 4 * t.data.size());
  return out;
}

inline Tensor decode_uqt1(std::span<const unsigned char> bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), kUqt1Magic, 4) != 0)
    throw DataError("bad magic: not a UQT1 tensor");
  Tensor t;
  const std::size_t ndim = bytes[4];
  std::size_t off = 5;
  if (bytes.size() < off + 8 * ndim) throw DataError("truncated tensor header");
  t.dims.resize(ndim);
  for (std::size_t i = 0; i < ndim; ++i, off += 8)
    std::memcpy(&t.dims[i], bytes.data() + off, 8);
  const std::uint64_t n = t.element_count();
  const std::size_t payload = bytes.size() - off;
  if (payload < 4 * n) throw DataError("truncated tensor");
  if (payload > 4 * n) throw DataError("tensor payload longer than its dimensions");
  t.data.resize(n);
  std::memcpy(t.data.data(), bytes.data() + off, 4 * n);
  return t;
}

inline Tensor read_uqt1(const fs::path& path) {
  try {
    return decode_uqt1(detail::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void write_uqt1(const fs::path& path, const Tensor& t) {
  detail::write_file(path, encode_uqt1(t));
}

template <typename Tag>
Tensor to_tensor(const PlanarTensor<Tag>& t) {
  return Tensor{{t.channels(), t.height(), t.width()}, t.vector()};
}

template <typename T>
Tensor to_tensor(const Raster<T>& r) {
  Tensor t{{r.height(), r.width()}, {}};
  t.data.reserve(r.size());
  for (const T& v : r.values()) t.data.push_back(static_cast<float>(v));
  return t;
}

namespace detail {

template <typename Tag>
PlanarTensor<Tag> planar_from(const Tensor& t, const char* what) {
  if (t.dims.size() == 2)
    return PlanarTensor<Tag>(1, t.dims[0], t.dims[1], t.data);
  require(t.dims.size() == 3,
          std::string(what) + " must be a 3-d (C,H,W) tensor");
  return PlanarTensor<Tag>(t.dims[0], t.dims[1], t.dims[2], t.data);
}

}  // namespace detail

inline LogitMap to_logit_map(const Tensor& t) {
  return detail::planar_from<LogitTag>(t, "logit map");
}
inline ProbabilityMap to_probability_map(const Tensor& t) {
  return detail::planar_from<ProbabilityTag>(t, "probability map");
}
inline ImageTensor to_image(const Tensor& t) {
  return detail::planar_from<ImageTag>(t, "image");
}
inline FeatureMap to_feature_map(const Tensor& t) {
  return detail::planar_from<FeatureTag>(t, "feature map");
}

inline ConfidenceMap to_confidence_map(const Tensor& t) {
  if (t.dims.size() == 3 && t.dims[0] == 1)
    return ConfidenceMap(t.dims[1], t.dims[2], t.data);
  detail::require(t.dims.size() == 2,
                  "confidence map must be a 2-d (H,W) tensor");
  return ConfidenceMap(t.dims[0], t.dims[1], t.data);
}

inline RealMap to_real_map(const Tensor& t) {
  detail::require(t.dims.size() == 2, "real map must be a 2-d (H,W) tensor");
  return RealMap(t.dims[0], t.dims[1],
                 std::vector<double>(t.data.begin(), t.data.end()));
}

namespace detail {
template <typename F>
auto with_path(const fs::path& path, F&& convert) {
  try {
    return convert(read_uqt1(path));
  } catch (const DataError& e) {
    const std::string msg = e.what();
    if (msg.rfind(path.string(), 0) == 0) throw;
    throw DataError(path.string() + ": " + msg);
  }
}
}  // namespace detail

inline LogitMap load_logits(const fs::path& p) {
  return detail::with_path(p, to_logit_map);
}
inline ProbabilityMap load_probabilities(const fs::path& p) {
  return detail::with_path(p, to_probability_map);
}
inline ImageTensor load_image(const fs::path& p) {
  return detail::with_path(p, to_image);
}

// ---------------------------------------------------------------------------
// PNG

/// Decoded single-channel PNG.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> pixels;
};

namespace detail {

struct PngReadState {
  std::span<const unsigned char> bytes;
  std::size_t offset = 0;
};

inline void png_read_callback(png_structp png, png_bytep out, png_size_t n) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->offset + n > st->bytes.size()) png_error(png, "truncated png");
  std::memcpy(out, st->bytes.data() + st->offset, n);
  st->offset += n;
}

inline void png_write_callback(png_structp png, png_bytep in, png_size_t n) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), in, in + n);
}

inline void png_flush_callback(png_structp) {}

struct PngErrorSink {
  char message[256] = {};
};

inline void png_error_callback(png_structp png, png_const_charp msg) {
  if (auto* sink = static_cast<PngErrorSink*>(png_get_error_ptr(png)))
    std::snprintf(sink->message, sizeof(sink->message), "%s", msg);
  png_longjmp(png, 1);
}

inline void png_warning_callback(png_structp, png_const_charp) {}

// Everything libpng can longjmp over lives in caller-owned buffers, so the
// guarded regions below hold no objects with destructors.
struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  PngErrorSink sink;
  PngReadState state;

  explicit PngReader(std::span<const unsigned char> bytes) : state{bytes, 0} {
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &sink,
                                 png_error_callback, png_warning_callback);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) throw Error("png: out of memory");
  }
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
  PngReader(const PngReader&) = delete;
  PngReader& operator=(const PngReader&) = delete;

  bool read_header(png_uint_32& w, png_uint_32& h, int& depth, int& color) {
    if (setjmp(png_jmpbuf(png))) return false;
    png_set_read_fn(png, &state, png_read_callback);
    png_read_info(png, info);
    w = png_get_image_width(png, info);
    h = png_get_image_height(png, info);
    depth = png_get_bit_depth(png, info);
    color = png_get_color_type(png, info);
    return true;
  }
  bool read_rows(png_bytepp rows) {
    if (setjmp(png_jmpbuf(png))) return false;
    png_read_image(png, rows);
    png_read_end(png, nullptr);
    return true;
  }
  [[noreturn]] void fail() const {
    throw DataError(std::string("png: ") + sink.message);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  PngErrorSink sink;

  PngWriter() {
    png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &sink,
                                  png_error_callback, png_warning_callback);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) throw Error("png: out of memory");
  }
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
  PngWriter(const PngWriter&) = delete;
  PngWriter& operator=(const PngWriter&) = delete;

  bool write(std::vector<unsigned char>* out, png_uint_32 w, png_uint_32 h,
             int depth, png_bytepp rows) {
    if (setjmp(png_jmpbuf(png))) return false;
    png_set_write_fn(png, out, png_write_callback, png_flush_callback);
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, w, h, depth, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows);
    png_write_end(png, nullptr);
    return true;
  }
};

}  // namespace detail

/// Decodes a grayscale PNG with bit depth 8 or 16; anything else is rejected.
inline GrayImage decode_gray_png(std::span<const unsigned char> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0)
    throw DataError("not a PNG file");
  detail::PngReader reader(bytes);
  png_uint_32 w = 0, h = 0;
  int depth = 0, color = 0;
  if (!reader.read_header(w, h, depth, color)) reader.fail();
  if (color != PNG_COLOR_TYPE_GRAY)
    throw DataError("unsupported color type: expected single-channel gray");
  if (depth != 8 && depth != 16) throw DataError("unsupported bit depth");

  const std::size_t bpp = depth / 8;
  const std::size_t rowbytes = w * bpp;
  std::vector<unsigned char> raw(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = raw.data() + y * rowbytes;
  if (!reader.read_rows(rows.data())) reader.fail();

  GrayImage img{h, w, depth, std::vector<std::uint16_t>(std::size_t{w} * h)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = bpp == 1 ? raw[i]
                             : static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  }
  return img;
}

/// Deterministic encoder: fixed compression settings, no ancillary chunks.
inline std::vector<unsigned char> encode_gray_png(const GrayImage& img) {
  detail::require(img.bit_depth == 8 || img.bit_depth == 16,
                  "unsupported bit depth");
  detail::require(img.pixels.size() == img.height * img.width,
                  "png payload does not match its dimensions");
  detail::require(img.height > 0 && img.width > 0, "png must not be empty");
  const std::size_t bpp = img.bit_depth / 8;
  std::vector<unsigned char> raw(img.pixels.size() * bpp);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const std::uint16_t v = img.pixels[i];
    if (bpp == 1) {
      raw[i] = static_cast<unsigned char>(v);
    } else {
      raw[2 * i] = static_cast<unsigned char>(v >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(v & 0xff);
    }
  }
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = raw.data() + y * img.width * bpp;

  std::vector<unsigned char> out;
  out.reserve(raw.size() + 128);
  detail::PngWriter writer;
  if (!writer.write(&out, static_cast<png_uint_32>(img.width),
                    static_cast<png_uint_32>(img.height), img.bit_depth, rows.data()))
    throw Error(std::string("png: ") + writer.sink.message);
  return out;
}

inline GrayImage read_gray_png(const fs::path& path) {
  try {
    return decode_gray_png(detail::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// class maps, masks and confidence maps on disk

/// Loads an 8-bit class map. Values are copied verbatim (255 stays kIgnoreId).
inline ClassMap load_class_map(const fs::path& path, int num_classes) {
  GrayImage img = read_gray_png(path);
  if (img.bit_depth != 8)
    throw DataError(path.string() + ": unsupported bit depth");
  std::vector<std::uint8_t> data(img.pixels.begin(), img.pixels.end());
  try {
    return ClassMap(img.height, img.width, num_classes, std::move(data));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline std::vector<unsigned char> encode_class_map(const Raster<std::uint8_t>& map) {
  GrayImage img{map.height(), map.width(), 8,
                std::vector<std::uint16_t>(map.values().begin(), map.values().end())};
  return encode_gray_png(img);
}

inline void save_class_map(const fs::path& path, const Raster<std::uint8_t>& map) {
  detail::write_file(path, encode_class_map(map));
}

/// Masks are written as 0 / 255 so they are visible in image viewers.
inline void save_mask(const fs::path& path, const BinaryMask& mask) {
  BinaryMask out(mask.height(), mask.width(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? 255 : 0;
  save_class_map(path, out);
}

inline BinaryMask load_mask(const fs::path& path) {
  GrayImage img = read_gray_png(path);
  if (img.bit_depth != 8) throw DataError(path.string() + ": unsupported bit depth");
  BinaryMask mask(img.height, img.width, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = img.pixels[i] ? 1 : 0;
  return mask;
}

inline bool has_uqt1_magic(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  return in.gcount() == 4 && std::memcmp(magic, kUqt1Magic, 4) == 0;
}

/// Reads a confidence map stored either as UQT1 or as a 16-bit PNG (v * 65535).
inline ConfidenceMap load_confidence(const fs::path& path) {
  if (has_uqt1_magic(path)) return detail::with_path(path, to_confidence_map);
  GrayImage img = read_gray_png(path);
  if (img.bit_depth != 16)
    throw DataError(path.string() + ": unsupported bit depth for confidence png");
  std::vector<float> data(img.pixels.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = static_cast<float>(img.pixels[i] / 65535.0);
  return ConfidenceMap(img.height, img.width, std::move(data));
}

inline void save_confidence(const fs::path& path, const ConfidenceMap& conf) {
  write_uqt1(path, to_tensor(conf));
}

inline void save_confidence_png16(const fs::path& path, const ConfidenceMap& conf) {
  GrayImage img{conf.height(), conf.width(), 16, {}};
  img.pixels.reserve(conf.size());
  for (float v : conf.values())
    img.pixels.push_back(static_cast<std::uint16_t>(std::lround(v * 65535.0)));
  detail::write_file(path, encode_gray_png(img));
}

// ---------------------------------------------------------------------------
// manifest

struct ManifestRecord {
  fs::path image;
  fs::path gt;
  fs::path pred;
  fs::path conf;
  std::optional<fs::path> logits;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  int num_classes = 19;
  ClassIdSet ood_ids{kIgnoreId};
};

/// Parses JSON-lines text. Relative paths are resolved against base_dir.
inline std::vector<ManifestRecord> parse_manifest(std::istream& in,
                                                  const fs::path& base_dir) {
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t line_no = 0;
  auto resolve = [&](const std::string& s) {
    fs::path p(s);
    return p.is_absolute() ? p : base_dir / p;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "manifest line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    }
    if (!j.is_object()) throw DataError(where + "record must be a JSON object");
    auto field = [&](const char* key) -> std::string {
      if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty())
        throw DataError(where + "missing or empty key '" + key + "'");
      return j[key].get<std::string>();
    };
    ManifestRecord r;
    r.image = resolve(field("image"));
    r.gt = resolve(field("gt"));
    r.pred = resolve(field("pred"));
    r.conf = resolve(field("conf"));
    if (j.contains("logits") && !j["logits"].is_null()) r.logits = resolve(field("logits"));
    records.push_back(std::move(r));
  }
  return records;
}

/// Checks that every referenced file exists; reports the first missing one.
inline void check_manifest_paths(const DatasetManifest& m) {
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    std::vector<fs::path> paths{r.image, r.gt, r.pred, r.conf};
    if (r.logits) paths.push_back(*r.logits);
    for (const auto& p : paths) {
      if (!fs::exists(p))
        throw DataError("record " + std::to_string(i) + ": missing file " + p.string());
    }
  }
}

inline DatasetManifest load_manifest(const fs::path& path, int num_classes,
                                     ClassIdSet ood_ids = {kIgnoreId},
                                     bool check_paths = true) {
  detail::require(num_classes >= 2, "num_classes must be at least 2");
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  DatasetManifest m;
  m.records = parse_manifest(in, path.parent_path());
  m.num_classes = num_classes;
  m.ood_ids = std::move(ood_ids);
  if (check_paths) check_manifest_paths(m);
  return m;
}

}  // namespace uqseg
