#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace skyfill {

// Value domain of an ImagePlane. Pixels move raw8 -> unit -> normalized
// through the data pipeline; losses operate on normalized planes.
enum class PixelDomain {
  raw8,        // [0, 255]
  unit,        // [0, 1]
  normalized,  // (x/255 - mean) / std per channel
};

// H x W x C row-major image, double precision. Small desk-scale images
// make the extra width affordable and keep the loss/gradient reference
// paths exact.
struct ImagePlane {
  int height = 0;
  int width = 0;
  int channels = 0;
  PixelDomain domain = PixelDomain::raw8;
  std::vector<double> values;  // index: (h * width + w) * channels + c

  ImagePlane() = default;
  ImagePlane(int h, int w, int c, double fill = 0.0,
             PixelDomain d = PixelDomain::raw8)
      : height(h), width(w), channels(c), domain(d),
        values(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int h, int w, int c) {
    return values[(static_cast<std::size_t>(h) * width + w) * channels + c];
  }
  double at(int h, int w, int c) const {
    return values[(static_cast<std::size_t>(h) * width + w) * channels + c];
  }
  std::size_t size() const { return values.size(); }
  bool same_shape(const ImagePlane& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

struct ChannelStats {
  std::vector<double> mean;  // per channel, unit domain
  std::vector<double> std;
};

// PNG I/O. Gray PNGs load as C=1, RGB/RGBA as C=3 (alpha dropped);
// 16-bit files are rejected. Written planes must be raw8 domain.
ImagePlane read_png(const std::string& path);
void write_png(const std::string& path, const ImagePlane& image);

// Reads only the header; returns (height, width).
std::pair<int, int> read_png_size(const std::string& path);

// (x/255 - mean) / std per channel; input must be raw8.
ImagePlane normalize(const ImagePlane& image, const ChannelStats& stats);
// Exact inverse of normalize, back to raw8 values (not re-quantized).
ImagePlane denormalize(const ImagePlane& image, const ChannelStats& stats);

ChannelStats parse_stats(const std::string& text);
std::string format_stats(const ChannelStats& stats);
ChannelStats read_stats_file(const std::string& path);
void write_stats_file(const std::string& path, const ChannelStats& stats);

}  // namespace skyfill
