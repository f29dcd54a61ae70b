#pragma once

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "radnet/errors.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

/// Decoded raster, interleaved, values scaled to [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 gray, 2 gray+alpha, 3 rgb, 4 rgba
  std::vector<double> values;
};

namespace detail {

struct PngReadState {
  std::span<const std::uint8_t> data;
  std::size_t pos = 0;
};

inline void png_read_cb(png_structp png, png_bytep out, png_size_t n) {
  auto* s = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (s->data.size() - s->pos < n) png_error(png, "unexpected end of data");
  std::memcpy(out, s->data.data() + s->pos, n);
  s->pos += n;
}

inline void png_error_cb(png_structp png, png_const_charp) { std::longjmp(png_jmpbuf(png), 1); }
inline void png_warning_cb(png_structp, png_const_charp) {}

struct JpegErrorMgr {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

inline void jpeg_error_cb(j_common_ptr info) {
  std::longjmp(reinterpret_cast<JpegErrorMgr*>(info->err)->jump, 1);
}

inline void jpeg_silent_cb(j_common_ptr) {}

}  // namespace detail

inline Image decode_png(std::span<const std::uint8_t> bytes, const std::string& label) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_cb,
                                           detail::png_warning_cb);
  if (!png) throw IoError(label + ": libpng init failed");
  png_infop info = png_create_info_struct(png);
  detail::PngReadState state{bytes, 0};
  Image img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> raw;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(label + ": corrupt PNG");
  }
  png_set_read_fn(png, &state, detail::png_read_cb);
  png_read_info(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) png_set_swap(png);  // native little-endian u16
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  int out_depth = png_get_bit_depth(png, info);
  std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * img.height);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::size_t n = img.width * img.height * img.channels;
  img.values.resize(n);
  if (out_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint16_t v;
      std::memcpy(&v, raw.data() + 2 * i, 2);
      img.values[i] = v / 65535.0;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) img.values[i] = raw[i] / 255.0;
  }
  return img;
}

inline Image decode_jpeg(std::span<const std::uint8_t> bytes, const std::string& label) {
  jpeg_decompress_struct cinfo{};
  detail::JpegErrorMgr err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_error_cb;
  err.base.output_message = detail::jpeg_silent_cb;
  Image img;
  std::vector<std::uint8_t> raw;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError(label + ": corrupt JPEG");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.jpeg_color_space != JCS_GRAYSCALE) cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.channels = static_cast<std::size_t>(cinfo.output_components);
  std::size_t stride = img.width * img.channels;
  raw.resize(stride * img.height);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = raw.data() + cinfo.output_scanline * stride;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  img.values.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) img.values[i] = raw[i] / 255.0;
  return img;
}

/// Binary and ASCII portable graymap/pixmap (P2, P3, P5, P6), maxval up to 65535.
inline Image decode_pnm(std::span<const std::uint8_t> bytes, const std::string& label) {
  std::size_t pos = 0;
  auto fail = [&](const char* why) { return IoError(label + ": " + why); };
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_ws();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw fail("bad PNM header");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1u << 24)) throw fail("PNM value too large");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P') throw fail("not a PNM file");
  char kind = static_cast<char>(bytes[1]);
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') throw fail("unsupported PNM type");
  pos = 2;
  Image img;
  img.width = number();
  img.height = number();
  std::size_t maxval = number();
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535)
    throw fail("bad PNM dimensions");
  img.channels = (kind == '3' || kind == '6') ? 3 : 1;
  std::size_t n = img.width * img.height * img.channels;
  img.values.resize(n);
  if (kind == '2' || kind == '3') {
    for (auto& v : img.values) {
      std::size_t s = number();
      if (s > maxval) throw fail("PNM sample exceeds maxval");
      v = static_cast<double>(s) / maxval;
    }
  } else {
    ++pos;  // single whitespace after maxval
    std::size_t bpp = maxval > 255 ? 2 : 1;
    if (bytes.size() < pos + n * bpp) throw fail("truncated PNM data");
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t s = bpp == 1 ? bytes[pos + i]
                               : (static_cast<std::size_t>(bytes[pos + 2 * i]) << 8) | bytes[pos + 2 * i + 1];
      img.values[i] = std::min(1.0, static_cast<double>(s) / maxval);
    }
  }
  return img;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

/// Decodes PNG, JPEG or PNM, chosen by the file signature.
inline Image decode_image(const std::filesystem::path& path) {
  auto bytes = read_bytes(path);
  std::string label = path.string();
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png(bytes, label);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF)
    return decode_jpeg(bytes, label);
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_pnm(bytes, label);
  throw IoError(label + ": unrecognized image format");
}

/// Image as a 3 x h x w tensor: gray is replicated, alpha is dropped.
template <typename T>
Tensor<T> to_rgb_tensor(const Image& img) {
  Tensor<T> t({3, img.height, img.width});
  std::size_t color = img.channels >= 3 ? 3 : 1;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double* px = img.values.data() + (y * img.width + x) * img.channels;
      for (std::size_t c = 0; c < 3; ++c) t(c, y, x) = static_cast<T>(px[color == 3 ? c : 0]);
    }
  return t;
}

/// Writes a 1 x h x w (gray) or 3 x h x w (RGB) tensor with values in [0, 1] as an
/// 8-bit PNG. No timestamps or text chunks, so equal input gives equal bytes.
template <typename T>
void write_png(const std::filesystem::path& path, const Tensor<T>& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw ShapeError("write_png expects 1 x h x w or 3 x h x w, got " + shape_string(img.shape()));
  std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> raw(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double v = std::clamp(static_cast<double>(img(ch, y, x)), 0.0, 1.0);
        raw[(y * w + x) * c + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }

  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError(path.string() + ": cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_cb,
                                            detail::png_warning_cb);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    std::fclose(fp);
    throw IoError(path.string() + ": libpng init failed");
  }
  std::vector<png_bytep> rows(h);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError(path.string() + ": PNG encoding failed");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) rows[y] = raw.data() + y * w * c;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError(path.string() + ": write failed");
}

}  // namespace radnet
