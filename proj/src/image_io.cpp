// SPDX-License-Identifier: Apache-2.0
#include "memprop/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace memprop {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_fn(png_structp, png_const_charp msg) { throw IoError(std::string("libpng: ") + msg); }
void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

std::string frame_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d.png", index);
  return buf;
}

Tensor read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open image " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  png_init_io(png, fp.get());
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);  // little-endian samples in memory
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);
  const int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) throw IoError("unsupported channel count in " + path.string());

  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<unsigned char> buf(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());

  Tensor out({1, channels, static_cast<int>(h), static_cast<int>(w)});
  const double maxv = depth == 16 ? 65535.0 : 255.0;
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t idx = static_cast<std::size_t>(x) * channels + c;
        double v;
        if (depth == 16) {
          v = static_cast<double>(rows[y][2 * idx] | (rows[y][2 * idx + 1] << 8));
        } else {
          v = static_cast<double>(rows[y][idx]);
        }
        out.at(0, c, static_cast<int>(y), static_cast<int>(x)) = v / maxv;
      }
    }
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image, int bit_depth) {
  if (image.rank() != 4 || image.dim(0) != 1 || (image.dim(1) != 1 && image.dim(1) != 3)) {
    throw ShapeError("write_png expects [1,1|3,H,W], got " + shape_str(image.shape()));
  }
  if (bit_depth != 8 && bit_depth != 16) throw IoError("bit depth must be 8 or 16");
  const int channels = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};

  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  const std::size_t bytes = bit_depth / 8;
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * channels * bytes);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) {
        const double v = std::clamp(image.at(0, c, y, x), 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround(v * maxv));
        const std::size_t idx = (static_cast<std::size_t>(x) * channels + c) * bytes;
        if (bytes == 2) {
          row[idx] = static_cast<unsigned char>(q >> 8);  // PNG is big-endian
          row[idx + 1] = static_cast<unsigned char>(q & 0xff);
        } else {
          row[idx] = static_cast<unsigned char>(q);
        }
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

}  // namespace memprop
