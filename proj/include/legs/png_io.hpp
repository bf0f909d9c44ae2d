#pragma once

// 8-bit colour / grey and 16-bit depth PNG files via libpng. Depth is stored
// in millimetres with 0 meaning invalid; in memory it is metres with 0 invalid.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "legs/errors.hpp"
#include "legs/geom.hpp"

namespace legs {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open " + path);
  return f;
}

[[noreturn]] inline void png_error_handler(png_structp, png_const_charp msg) {
  throw DataError(std::string("png: ") + msg);
}
inline void png_warning_handler(png_structp, png_const_charp) {}

struct RawPng {
  int width = 0, height = 0, channels = 0, bit_depth = 0;
  std::vector<std::uint16_t> samples;  // row-major, interleaved
};

inline RawPng read_png_raw(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DataError("not a PNG file: " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) throw DataError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp& p;
    png_infop& i;
    ~Guard() { png_destroy_read_struct(&p, &i, nullptr); }
  } guard{png, info};

  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  RawPng out;
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && out.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (out.bit_depth == 16) png_set_swap(png);  // native little-endian u16 samples
  png_read_update_info(png, info);
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<unsigned char> buf(rowbytes * out.height);
  std::vector<png_bytep> rows(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);

  out.samples.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);
  if (out.bit_depth == 16) {
    for (std::size_t i = 0; i < out.samples.size(); ++i)
      out.samples[i] = static_cast<std::uint16_t>(buf[2 * i] | (buf[2 * i + 1] << 8));
  } else {
    for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i] = buf[i];
  }
  return out;
}

inline void write_png_raw(const std::string& path, int width, int height, int channels,
                          int bit_depth, const std::vector<std::uint16_t>& samples) {
  FilePtr f = open_file(path, "wb");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) throw DataError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp& p;
    png_infop& i;
    ~Guard() { png_destroy_write_struct(&p, &i); }
  } guard{png, info};

  png_init_io(png, f.get());
  const int color_type = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int bytes = bit_depth / 8;
  std::vector<unsigned char> row(static_cast<std::size_t>(width) * channels * bytes);
  for (int y = 0; y < height; ++y) {
    const std::size_t base = static_cast<std::size_t>(y) * width * channels;
    for (std::size_t i = 0; i < static_cast<std::size_t>(width) * channels; ++i) {
      const std::uint16_t s = samples[base + i];
      if (bytes == 2) {
        row[2 * i] = static_cast<unsigned char>(s >> 8);  // PNG is big-endian
        row[2 * i + 1] = static_cast<unsigned char>(s & 0xff);
      } else {
        row[i] = static_cast<unsigned char>(s);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

inline std::uint16_t quantize_unit(double v, double levels) {
  const double c = std::min(1.0, std::max(0.0, std::isfinite(v) ? v : 0.0));
  return static_cast<std::uint16_t>(std::lround(c * levels));
}

}  // namespace detail

/// Reads an 8-bit (or 16-bit) PNG as float RGB in [0, 1]. Grey images are
/// replicated into three channels.
inline Image read_png_rgb(const std::string& path) {
  const auto raw = detail::read_png_raw(path);
  const double scale = raw.bit_depth == 16 ? 65535.0 : 255.0;
  Image img(raw.width, raw.height, 3);
  for (std::size_t p = 0; p < img.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c) {
      const int src = raw.channels >= 3 ? c : 0;
      img.data[3 * p + c] = static_cast<float>(raw.samples[p * raw.channels + src] / scale);
    }
  return img;
}

/// Writes a 1- or 3-channel float image (values clamped to [0, 1]) as 8-bit PNG.
inline void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw DataError("PNG export needs 1 or 3 channels, got " + std::to_string(img.channels));
  std::vector<std::uint16_t> s(img.data.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = detail::quantize_unit(img.data[i], 255.0);
  detail::write_png_raw(path, img.width, img.height, img.channels, 8, s);
}

/// Reads a 16-bit millimetre depth PNG into metres.
inline Image read_depth_png(const std::string& path) {
  const auto raw = detail::read_png_raw(path);
  if (raw.channels != 1 || raw.bit_depth != 16)
    throw DataError("depth PNG must be 16-bit single channel: " + path);
  Image d(raw.width, raw.height, 1);
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = static_cast<float>(raw.samples[i] * 1e-3);
  return d;
}

/// Writes metric depth as 16-bit millimetres; non-finite, non-positive and
/// out-of-range (> 65.535 m) depths become 0 (invalid).
inline void write_depth_png(const std::string& path, const Image& depth) {
  if (depth.channels != 1) throw DataError("depth image must have one channel");
  std::vector<std::uint16_t> s(depth.data.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double mm = std::round(static_cast<double>(depth.data[i]) * 1000.0);
    s[i] = (std::isfinite(mm) && mm > 0 && mm <= 65535) ? static_cast<std::uint16_t>(mm) : 0;
  }
  detail::write_png_raw(path, depth.width, depth.height, 1, 16, s);
}

}  // namespace legs
