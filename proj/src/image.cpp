#include "skyfill/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <sstream>
#include <fstream>

#include "skyfill/common.hpp"

namespace skyfill {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

std::pair<int, int> read_png_size(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(ErrorKind::io, "cannot open " + path);

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(ErrorKind::io, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(ErrorKind::io, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, "failed to decode " + path);
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);
  int h = static_cast<int>(png_get_image_height(png, info));
  int w = static_cast<int>(png_get_image_width(png, info));
  png_destroy_read_struct(&png, &info, nullptr);
  return {h, w};
}

ImagePlane read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(ErrorKind::io, "cannot open " + path);

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(ErrorKind::io, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(ErrorKind::io, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, "failed to decode " + path);
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int bit_depth = png_get_bit_depth(png, info);
  int color_type = png_get_color_type(png, info);

  if (bit_depth == 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, path + ": 16-bit PNGs are not supported");
  }
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  int c = png_get_channels(png, info);
  if (c != 1 && c != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, path + ": unsupported channel count");
  }

  std::vector<png_byte> row(png_get_rowbytes(png, info));
  ImagePlane out(static_cast<int>(h), static_cast<int>(w), c, 0.0,
                 PixelDomain::raw8);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        out.at(static_cast<int>(y), static_cast<int>(x), ch) = row[x * c + ch];
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::string& path, const ImagePlane& image) {
  if (image.domain != PixelDomain::raw8)
    fail(ErrorKind::invalid_spec, "write_png expects raw8 pixel values");
  if (image.channels != 1 && image.channels != 3)
    fail(ErrorKind::invalid_spec, "write_png supports 1 or 3 channels");

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail(ErrorKind::io, "cannot write " + path);

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(ErrorKind::io, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(ErrorKind::io, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::io, "failed to encode " + path);
  }

  png_init_io(png, fp.get());
  int color_type =
      image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, image.width, image.height, 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> row(static_cast<std::size_t>(image.width) *
                            image.channels);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x)
      for (int ch = 0; ch < image.channels; ++ch) {
        double v = std::lround(image.at(y, x, ch));
        row[static_cast<std::size_t>(x) * image.channels + ch] =
            static_cast<png_byte>(v < 0 ? 0 : (v > 255 ? 255 : v));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImagePlane normalize(const ImagePlane& image, const ChannelStats& stats) {
  if (image.domain != PixelDomain::raw8)
    fail(ErrorKind::invalid_spec, "normalize expects raw8 input");
  if (static_cast<int>(stats.mean.size()) != image.channels ||
      static_cast<int>(stats.std.size()) != image.channels)
    fail(ErrorKind::invalid_stats, "stats channel count mismatch");
  for (double s : stats.std)
    if (!(s > 0.0)) fail(ErrorKind::invalid_stats, "std must be positive");

  ImagePlane out = image;
  out.domain = PixelDomain::normalized;
  for (int h = 0; h < image.height; ++h)
    for (int w = 0; w < image.width; ++w)
      for (int c = 0; c < image.channels; ++c)
        out.at(h, w, c) =
            (image.at(h, w, c) / 255.0 - stats.mean[c]) / stats.std[c];
  return out;
}

ImagePlane denormalize(const ImagePlane& image, const ChannelStats& stats) {
  if (image.domain != PixelDomain::normalized)
    fail(ErrorKind::invalid_spec, "denormalize expects normalized input");
  if (static_cast<int>(stats.mean.size()) != image.channels ||
      static_cast<int>(stats.std.size()) != image.channels)
    fail(ErrorKind::invalid_stats, "stats channel count mismatch");

  ImagePlane out = image;
  out.domain = PixelDomain::raw8;
  for (int h = 0; h < image.height; ++h)
    for (int w = 0; w < image.width; ++w)
      for (int c = 0; c < image.channels; ++c)
        out.at(h, w, c) =
            (image.at(h, w, c) * stats.std[c] + stats.mean[c]) * 255.0;
  return out;
}

ChannelStats parse_stats(const std::string& text) {
  // two lines: "mean m0 m1 ..." / "std s0 s1 ..."
  ChannelStats stats;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    std::vector<double>* dst = nullptr;
    if (key == "mean") dst = &stats.mean;
    else if (key == "std") dst = &stats.std;
    else fail(ErrorKind::invalid_stats, "unknown stats key: " + key);
    double v;
    while (ls >> v) dst->push_back(v);
  }
  if (stats.mean.empty() || stats.mean.size() != stats.std.size())
    fail(ErrorKind::invalid_stats, "stats need matching mean/std rows");
  return stats;
}

std::string format_stats(const ChannelStats& stats) {
  std::ostringstream out;
  char buf[32];
  out << "mean";
  for (double m : stats.mean) {
    std::snprintf(buf, sizeof buf, " %.17g", m);
    out << buf;
  }
  out << "\nstd";
  for (double s : stats.std) {
    std::snprintf(buf, sizeof buf, " %.17g", s);
    out << buf;
  }
  out << "\n";
  return out.str();
}

ChannelStats read_stats_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open stats file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_stats(ss.str());
}

void write_stats_file(const std::string& path, const ChannelStats& stats) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write stats file " + path);
  out << format_stats(stats);
}

}  // namespace skyfill
