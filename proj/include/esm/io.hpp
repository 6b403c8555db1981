#pragma once

// Artifact formats: checkpoint directories (JSON manifest + one little-endian
// float32 blob per named tensor), 8-bit PNG images and RFC-4180 CSV.

#include <zlib.h>

#include <array>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "esm/tensor.hpp"

namespace esm {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kCheckpointFormat = "esm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Tensors by name, in manifest order, plus free-form metadata.
struct Checkpoint {
  std::string kind;
  json meta = json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  bool contains(const std::string& name) const {
    for (const auto& [n, _] : tensors)
      if (n == name) return true;
    return false;
  }

  const Tensor<float>& at(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw IoError("checkpoint has no tensor '" + name + "'");
  }

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    if (contains(name)) throw IoError("checkpoint already has tensor '" + name + "'");
    tensors.emplace_back(name, t.template cast<float>());
  }

  template <typename T>
  void add_store(const ParamStore<T>& store, const std::string& prefix = "") {
    for (const auto& e : store.entries()) add(prefix + e.name, e.value);
  }

  /// Entries whose name starts with prefix, with the prefix stripped.
  template <typename T>
  ParamStore<T> store(const std::string& prefix = "") const {
    ParamStore<T> out;
    for (const auto& [n, t] : tensors)
      if (n.rfind(prefix, 0) == 0) out.add(n.substr(prefix.size()), t.template cast<T>());
    return out;
  }
};

inline std::string blob_file_name(const std::string& tensor_name) {
  std::string out;
  for (char c : tensor_name) {
    if (c == '/')
      out += "__";
    else if (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-')
      out += c;
    else
      out += '_';
  }
  return out + ".bin";
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["kind"] = ckpt.kind;
  manifest["meta"] = ckpt.meta;
  manifest["tensors"] = json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    const std::string file = blob_file_name(name);
    std::vector<unsigned char> bytes(t.size() * 4);
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, &t[i], 4);
      for (int b = 0; b < 4; ++b) bytes[4 * i + std::size_t(b)] = static_cast<unsigned char>(bits >> (8 * b));
    }
    std::ofstream os(dir / file, std::ios::binary);
    if (!os) throw IoError("cannot write blob '" + (dir / file).string() + "'");
    os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "float32-le"}, {"file", file}});
  }
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint read_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw IoError("no checkpoint manifest at '" + mpath.string() + "'");
  json manifest;
  try {
    manifest = json::parse(read_text_file(mpath));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest '" + mpath.string() + "': " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat || manifest.value("version", 0) != kCheckpointVersion)
    throw IoError("'" + mpath.string() + "' is not a version-1 esm checkpoint");
  Checkpoint ckpt;
  ckpt.kind = manifest.value("kind", "");
  ckpt.meta = manifest.value("meta", json::object());
  for (const auto& entry : manifest.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto file = entry.at("file").get<std::string>();
    const std::size_t n = shape_numel(shape);
    std::ifstream is(dir / file, std::ios::binary);
    if (!is) throw IoError("missing blob '" + (dir / file).string() + "'");
    std::vector<unsigned char> bytes(n * 4);
    is.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
    if (std::size_t(is.gcount()) != bytes.size()) throw IoError("truncated blob '" + (dir / file).string() + "'");
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t(bytes[4 * i + std::size_t(b)]) << (8 * b);
      std::memcpy(&data[i], &bits, 4);
    }
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor<float>(shape, std::move(data)));
  }
  return ckpt;
}

namespace detail {

inline void png_chunk(std::string& out, const char* type, const std::string& data) {
  auto be32 = [&out](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out += char((v >> s) & 0xFF);
  };
  be32(std::uint32_t(data.size()));
  std::string body = std::string(type, 4) + data;
  out += body;
  be32(std::uint32_t(crc32(0L, reinterpret_cast<const Bytef*>(body.data()), uInt(body.size()))));
}

}  // namespace detail

/// Encodes 8-bit grayscale (channels = 1) or RGB (channels = 3) rows.
inline std::string encode_png(const std::vector<std::uint8_t>& pixels, int width, int height, int channels) {
  require(channels == 1 || channels == 3, "encode_png: channels must be 1 or 3");
  require(pixels.size() == std::size_t(width) * std::size_t(height) * std::size_t(channels),
          "encode_png: pixel buffer size mismatch");
  std::string raw;
  raw.reserve(pixels.size() + std::size_t(height));
  for (int r = 0; r < height; ++r) {
    raw += char(0);
    raw.append(reinterpret_cast<const char*>(pixels.data()) + std::size_t(r) * width * channels,
               std::size_t(width) * channels);
  }
  uLongf zlen = compressBound(uLong(raw.size()));
  std::string z(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                uLong(raw.size()), 9) != Z_OK)
    throw IoError("encode_png: deflate failed");
  z.resize(zlen);
  std::string ihdr;
  for (std::uint32_t v : {std::uint32_t(width), std::uint32_t(height)})
    for (int s = 24; s >= 0; s -= 8) ihdr += char((v >> s) & 0xFF);
  ihdr += char(8);
  ihdr += char(channels == 1 ? 0 : 2);
  ihdr += std::string(3, '\0');
  std::string out = "\x89PNG\r\n\x1a\n";
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", "");
  return out;
}

inline std::uint8_t to_byte(double v) { return std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// Writes a [side, side] (gray) or [3, side, side] (RGB) image with values in [0, 1].
template <typename T>
void write_png(const fs::path& path, const Tensor<T>& img) {
  const auto& sh = img.shape();
  require(sh.size() == 2 || (sh.size() == 3 && sh[0] == 3), "write_png: expected [H,W] or [3,H,W]");
  const int channels = sh.size() == 2 ? 1 : 3;
  const int h = int(sh[sh.size() - 2]), w = int(sh[sh.size() - 1]);
  std::vector<std::uint8_t> px(std::size_t(h) * w * channels);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < channels; ++ch)
        px[(std::size_t(r) * w + c) * channels + ch] = to_byte(img[std::size_t(ch) * h * w + std::size_t(r) * w + c]);
  write_text_file(path, encode_png(px, w, h, channels));
}

/// Tiles equally sized grayscale images into one row-major grid with 1px gaps.
template <typename T>
Tensor<T> contact_sheet(const std::vector<Tensor<T>>& images, int columns) {
  require(!images.empty() && columns >= 1, "contact_sheet: nothing to tile");
  const auto& sh = images.front().shape();
  require(sh.size() == 2, "contact_sheet: grayscale images only");
  const std::size_t h = sh[0], w = sh[1];
  const std::size_t cols = std::min<std::size_t>(std::size_t(columns), images.size());
  const std::size_t rows = (images.size() + cols - 1) / cols;
  Tensor<T> sheet({rows * (h + 1) - 1, cols * (w + 1) - 1}, T(1));
  for (std::size_t k = 0; k < images.size(); ++k) {
    require(images[k].shape() == sh, "contact_sheet: images differ in size");
    const std::size_t r0 = (k / cols) * (h + 1), c0 = (k % cols) * (w + 1);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) sheet[(r0 + r) * sheet.shape()[1] + c0 + c] = images[k][r * w + c];
  }
  return sheet;
}

/// Shortest round-trip decimal form.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// RFC-4180 writer: header row first, CRLF line endings.
class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : os_(path, std::ios::binary) {
    if (!os_) throw IoError("cannot open '" + path.string() + "' for writing");
    row(header);
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) os_ << ',';
      os_ << csv_field(fields[i]);
    }
    os_ << "\r\n";
  }

  void flush() { os_.flush(); }

 private:
  std::ofstream os_;
};

}  // namespace esm
