#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "skyfill/data.hpp"
#include "skyfill/image.hpp"
#include "skyfill/mask.hpp"

namespace skyfill {

// Visual style of a synthetic scene. Each style has its own background
// palette and texture statistics, so a style can serve as a held-out
// "unseen city" domain.
enum class SceneStyle { a, b, c, d };

std::string to_string(SceneStyle style);
SceneStyle style_from_string(const std::string& text);

struct SyntheticSceneSpec {
  int canvas = 128;  // square edge, pixels
  int road_count = 3;
  int road_width_min = 4;  // pixels, inclusive range
  int road_width_max = 10;
  std::uint64_t background_texture_seed = 0;  // master seed for the scene
  double building_density = 0.5;              // in [0, 1]
  SceneStyle style = SceneStyle::a;

  void validate() const;
};

// A road's centerline waypoints (row, col) plus its painted width.
struct RoadPath {
  std::vector<std::pair<double, double>> points;
  int width = 1;
};

// The exact road layout a given spec will paint; exposed so tests can
// re-rasterize independently of scene rendering.
std::vector<RoadPath> sample_road_paths(const SyntheticSceneSpec& spec);

// Marks every pixel whose distance to the centerline segment is at most
// (width - 1) / 2. A horizontal width-w segment along row r0 covers
// exactly rows [r0 - (w-1)/2, r0 + (w-1)/2].
void rasterize_thick_segment(BinaryMask& mask, double r0, double c0, double r1,
                             double c1, int width);
void rasterize_road(BinaryMask& mask, const RoadPath& road);

struct SyntheticScene {
  ImagePlane image;  // raw8 RGB
  BinaryMask roads;  // 1 exactly on painted road pixels
};

// Textured background, rectangular building blobs (a fraction in
// road-like tones, so color alone cannot segment roads), then roads
// painted last. Deterministic for a fixed spec.
SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec);

struct SyntheticDatasetSpec {
  std::string out_dir;
  int canvas = 128;
  int train_count = 256;
  int val_count = 64;
  std::vector<SceneStyle> train_styles = {SceneStyle::a, SceneStyle::b,
                                          SceneStyle::c, SceneStyle::d};
  std::vector<SceneStyle> val_styles = {SceneStyle::a, SceneStyle::b,
                                        SceneStyle::c, SceneStyle::d};
  int road_count_min = 2;
  int road_count_max = 4;
  int road_width_min = 4;
  int road_width_max = 10;
  double building_density = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticDataset {
  std::string root;
  std::string manifest_path;        // combined, split-tagged
  std::string train_manifest_path;  // train records only
  std::string val_manifest_path;    // val records only
  std::string stats_path;
  DatasetManifest manifest;
  ChannelStats stats;
};

// Writes images/{train,val}/, labels/{train,val}/, manifest.tsv, and
// stats.txt (per-channel mean/std over the train images) under out_dir.
SyntheticDataset emit_synthetic_dataset(const SyntheticDatasetSpec& spec);

// Per-channel mean/std in unit domain across the given raw8 images.
ChannelStats compute_channel_stats(const std::vector<std::string>& image_paths);

}  // namespace skyfill
