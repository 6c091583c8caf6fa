#pragma once

// Planar-interleaved float images plus PNG / PFM serialization.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace senerf {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// H x W x C row-major float image.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  [[nodiscard]] std::size_t pixel_count() const noexcept {
    return static_cast<std::size_t>(width) * height;
  }
  [[nodiscard]] bool empty() const noexcept { return data.empty(); }

  float& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  [[nodiscard]] float at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  [[nodiscard]] const float* pixel(int x, int y) const {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }

  [[nodiscard]] bool same_dims(const Image& o) const noexcept {
    return width == o.width && height == o.height && channels == o.channels;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Bilinear sample at continuous index coordinates (x, y); (0, 0) is the first
/// pixel's center. Coordinates are clamped to the image.
inline void sample_bilinear(const Image& img, double x, double y, float* out) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const int x0 = std::min(static_cast<int>(std::floor(x)), std::max(img.width - 2, 0));
  const int y0 = std::min(static_cast<int>(std::floor(y)), std::max(img.height - 2, 0));
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const float fx = static_cast<float>(x - x0);
  const float fy = static_cast<float>(y - y0);
  const float w00 = (1 - fx) * (1 - fy), w10 = fx * (1 - fy), w01 = (1 - fx) * fy, w11 = fx * fy;
  const float* p00 = img.pixel(x0, y0);
  const float* p10 = img.pixel(x1, y0);
  const float* p01 = img.pixel(x0, y1);
  const float* p11 = img.pixel(x1, y1);
  for (int c = 0; c < img.channels; ++c)
    out[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
}

namespace io {

inline std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Writes a 1- or 3-channel image as 8-bit PNG (values clamped to [0, 1]).
inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError("write_png: unsupported channel count " + std::to_string(img.channels));
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("write_png: cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: libpng init failed");
  }
  std::vector<std::uint8_t> bytes(img.data.size());
  std::transform(img.data.begin(), img.data.end(), bytes.begin(), to_u8);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + y * stride;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: encoding failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads an 8-bit PNG as float in [0, 1]; alpha is dropped, palettes expanded.
inline Image read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) throw IoError("read_png: cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("read_png: not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: decoding failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color_type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int c = static_cast<int>(png_get_channels(png, info));
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * c);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + static_cast<std::size_t>(y) * w * c;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  Image img(w, h, c);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

/// Portable FloatMap, little-endian (scale -1.0), rows stored bottom-to-top.
inline void write_pfm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError("write_pfm: unsupported channel count " + std::to_string(img.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_pfm: cannot open " + path.string());
  out << (img.channels == 3 ? "PF" : "Pf") << "\n" << img.width << " " << img.height << "\n-1.0\n";
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = img.height - 1; y >= 0; --y)
    out.write(reinterpret_cast<const char*>(img.data.data() + y * stride),
              static_cast<std::streamsize>(stride * sizeof(float)));
  if (!out) throw IoError("write_pfm: write failed for " + path.string());
}

inline Image read_pfm(std::istream& in, const std::string& name) {
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  in >> magic >> w >> h >> scale;
  in.get();
  if (!in || (magic != "PF" && magic != "Pf") || w <= 0 || h <= 0)
    throw IoError("read_pfm: malformed header in " + name);
  if (scale > 0) throw IoError("read_pfm: big-endian PFM not supported: " + name);
  Image img(w, h, magic == "PF" ? 3 : 1);
  const std::size_t stride = static_cast<std::size_t>(w) * img.channels;
  for (int y = h - 1; y >= 0; --y)
    in.read(reinterpret_cast<char*>(img.data.data() + y * stride),
            static_cast<std::streamsize>(stride * sizeof(float)));
  if (!in) throw IoError("read_pfm: truncated data in " + name);
  return img;
}

inline Image read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_pfm: cannot open " + path.string());
  return read_pfm(in, path.string());
}

/// Multi-channel maps as a sequence of single-channel PFM frames plus a JSON
/// sidecar (<path>.json) carrying the channel count.
inline void write_pfm_stack(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_pfm_stack: cannot open " + path.string());
  Image plane(img.width, img.height, 1);
  for (int c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < img.pixel_count(); ++i)
      plane.data[i] = img.data[i * img.channels + c];
    out << "Pf\n" << img.width << " " << img.height << "\n-1.0\n";
    for (int y = img.height - 1; y >= 0; --y)
      out.write(reinterpret_cast<const char*>(plane.data.data() + static_cast<std::size_t>(y) * img.width),
                static_cast<std::streamsize>(img.width * sizeof(float)));
  }
  std::ofstream side(path.string() + ".json");
  side << nlohmann::json{{"channels", img.channels}, {"width", img.width}, {"height", img.height}}.dump(2);
}

inline Image read_pfm_stack(const std::filesystem::path& path) {
  std::ifstream side(path.string() + ".json");
  if (!side) throw IoError("read_pfm_stack: missing sidecar " + path.string() + ".json");
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("read_pfm_stack: malformed sidecar " + path.string() + ".json: " + e.what());
  }
  const int channels = meta.at("channels").get<int>();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_pfm_stack: cannot open " + path.string());
  Image out;
  for (int c = 0; c < channels; ++c) {
    Image plane = read_pfm(in, path.string());
    if (c == 0) out = Image(plane.width, plane.height, channels);
    if (plane.width != out.width || plane.height != out.height || plane.channels != 1)
      throw IoError("read_pfm_stack: inconsistent frame " + std::to_string(c) + " in " + path.string());
    for (std::size_t i = 0; i < plane.pixel_count(); ++i) out.data[i * channels + c] = plane.data[i];
  }
  return out;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp);
    out << text;
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace io
}  // namespace senerf
