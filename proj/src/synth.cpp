#include "skyfill/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "skyfill/common.hpp"

namespace fs = std::filesystem;

namespace skyfill {

std::string to_string(SceneStyle style) {
  switch (style) {
    case SceneStyle::a: return "A";
    case SceneStyle::b: return "B";
    case SceneStyle::c: return "C";
    case SceneStyle::d: return "D";
  }
  fail(ErrorKind::contract_violation, "unknown scene style");
}

SceneStyle style_from_string(const std::string& text) {
  if (text == "A" || text == "a") return SceneStyle::a;
  if (text == "B" || text == "b") return SceneStyle::b;
  if (text == "C" || text == "c") return SceneStyle::c;
  if (text == "D" || text == "d") return SceneStyle::d;
  fail(ErrorKind::config, "unknown scene style '" + text + "'");
}

void SyntheticSceneSpec::validate() const {
  if (canvas < 16) fail(ErrorKind::invalid_spec, "canvas must be >= 16");
  if (road_count < 0) fail(ErrorKind::invalid_spec, "road_count must be >= 0");
  if (road_width_min < 1)
    fail(ErrorKind::invalid_spec, "road widths must be >= 1 pixel");
  if (road_width_max < road_width_min)
    fail(ErrorKind::invalid_spec, "road width range is inverted");
  if (road_width_max > canvas / 2)
    fail(ErrorKind::invalid_spec, "road width must fit the canvas");
  if (building_density < 0.0 || building_density > 1.0)
    fail(ErrorKind::invalid_spec, "building_density must be in [0, 1]");
}

namespace {

struct StyleParams {
  std::array<double, 3> base;      // background tone
  double coarse_amp;               // low-frequency brightness variation
  double fine_amp;                 // per-pixel noise
  std::array<double, 3> building;  // default building tone
};

const StyleParams& style_params(SceneStyle style) {
  static const StyleParams table[4] = {
      {{96.0, 118.0, 78.0}, 26.0, 8.0, {150.0, 110.0, 90.0}},    // A
      {{132.0, 126.0, 104.0}, 18.0, 12.0, {172.0, 152.0, 122.0}},  // B
      {{70.0, 88.0, 96.0}, 30.0, 6.0, {122.0, 120.0, 132.0}},    // C
      {{176.0, 156.0, 128.0}, 22.0, 14.0, {196.0, 176.0, 150.0}},  // D
  };
  return table[static_cast<int>(style)];
}

double clamp255(double v) { return std::min(255.0, std::max(0.0, v)); }

// Smooth value noise: uniform grid nodes, bilinear interpolation.
void paint_background(ImagePlane& img, const StyleParams& params, Rng& rng) {
  const int step = 16;
  const int grid_h = img.height / step + 2;
  const int grid_w = img.width / step + 2;
  std::vector<double> nodes(static_cast<std::size_t>(grid_h) * grid_w);
  for (auto& n : nodes) n = rng.uniform(-1.0, 1.0);

  for (int h = 0; h < img.height; ++h) {
    const double gy = static_cast<double>(h) / step;
    const int y0 = static_cast<int>(gy);
    const double fy = gy - y0;
    for (int w = 0; w < img.width; ++w) {
      const double gx = static_cast<double>(w) / step;
      const int x0 = static_cast<int>(gx);
      const double fx = gx - x0;
      const double n00 = nodes[static_cast<std::size_t>(y0) * grid_w + x0];
      const double n01 = nodes[static_cast<std::size_t>(y0) * grid_w + x0 + 1];
      const double n10 =
          nodes[static_cast<std::size_t>(y0 + 1) * grid_w + x0];
      const double n11 =
          nodes[static_cast<std::size_t>(y0 + 1) * grid_w + x0 + 1];
      const double coarse = (n00 * (1 - fx) + n01 * fx) * (1 - fy) +
                            (n10 * (1 - fx) + n11 * fx) * fy;
      for (int c = 0; c < 3; ++c) {
        const double fine = rng.uniform(-params.fine_amp, params.fine_amp);
        img.at(h, w, c) =
            clamp255(params.base[c] + params.coarse_amp * coarse + fine);
      }
    }
  }
}

std::array<double, 3> road_tone(Rng& rng) {
  const double gray = rng.uniform(90.0, 150.0);
  std::array<double, 3> tone;
  for (auto& t : tone) t = gray + rng.uniform(-8.0, 8.0);
  return tone;
}

void paint_buildings(ImagePlane& img, const SyntheticSceneSpec& spec,
                     const StyleParams& params, Rng& rng) {
  const int slots = (spec.canvas / 32) * (spec.canvas / 32);
  const int count =
      static_cast<int>(std::lround(spec.building_density * std::max(slots, 1)));
  const int size_lo = std::max(4, spec.canvas / 12);
  const int size_hi = std::max(size_lo, spec.canvas / 4);
  for (int b = 0; b < count; ++b) {
    const int bh =
        size_lo + static_cast<int>(rng.uniform_index(size_hi - size_lo + 1));
    const int bw =
        size_lo + static_cast<int>(rng.uniform_index(size_hi - size_lo + 1));
    const int top = static_cast<int>(rng.uniform_index(img.height - bh + 1));
    const int left = static_cast<int>(rng.uniform_index(img.width - bw + 1));
    // A large distractor fraction keeps road tone from being a
    // sufficient segmentation cue.
    const bool road_toned = rng.uniform() < 0.4;
    std::array<double, 3> tone;
    if (road_toned) {
      tone = road_tone(rng);
    } else {
      for (int c = 0; c < 3; ++c)
        tone[c] = params.building[c] + rng.uniform(-15.0, 15.0);
    }
    for (int h = top; h < top + bh; ++h)
      for (int w = left; w < left + bw; ++w)
        for (int c = 0; c < 3; ++c)
          img.at(h, w, c) = clamp255(tone[c] + rng.uniform(-6.0, 6.0));
  }
}

}  // namespace

std::vector<RoadPath> sample_road_paths(const SyntheticSceneSpec& spec) {
  spec.validate();
  Rng rng = derive_rng(spec.background_texture_seed, {"synth", "roads"});
  const double extent = spec.canvas - 1;
  std::vector<RoadPath> roads;
  roads.reserve(spec.road_count);
  for (int i = 0; i < spec.road_count; ++i) {
    RoadPath road;
    road.width =
        spec.road_width_min +
        static_cast<int>(rng.uniform_index(
            spec.road_width_max - spec.road_width_min + 1));
    const bool horizontal = rng.coin();
    const int segments = 4;
    double lateral = rng.uniform(0.0, extent);
    for (int s = 0; s <= segments; ++s) {
      const double along = extent * s / segments;
      if (s > 0) {
        lateral += rng.uniform(-spec.canvas / 5.0, spec.canvas / 5.0);
        lateral = std::min(extent, std::max(0.0, lateral));
      }
      if (horizontal)
        road.points.emplace_back(lateral, along);
      else
        road.points.emplace_back(along, lateral);
    }
    roads.push_back(std::move(road));
  }
  return roads;
}

void rasterize_thick_segment(BinaryMask& mask, double r0, double c0, double r1,
                             double c1, int width) {
  if (width < 1) fail(ErrorKind::invalid_spec, "segment width must be >= 1");
  const double half = (width - 1) / 2.0 + 1e-9;
  const int row_lo =
      std::max(0, static_cast<int>(std::floor(std::min(r0, r1) - half)));
  const int row_hi = std::min(mask.height - 1,
                              static_cast<int>(std::ceil(std::max(r0, r1) + half)));
  const int col_lo =
      std::max(0, static_cast<int>(std::floor(std::min(c0, c1) - half)));
  const int col_hi = std::min(mask.width - 1,
                              static_cast<int>(std::ceil(std::max(c0, c1) + half)));
  const double dr = r1 - r0;
  const double dc = c1 - c0;
  const double len2 = dr * dr + dc * dc;
  for (int h = row_lo; h <= row_hi; ++h) {
    for (int w = col_lo; w <= col_hi; ++w) {
      double t = 0.0;
      if (len2 > 0.0)
        t = std::min(1.0, std::max(0.0, ((h - r0) * dr + (w - c0) * dc) / len2));
      const double pr = r0 + t * dr;
      const double pc = c0 + t * dc;
      const double dist = std::hypot(h - pr, w - pc);
      if (dist <= half) mask.at(h, w) = 1;
    }
  }
}

void rasterize_road(BinaryMask& mask, const RoadPath& road) {
  for (std::size_t i = 1; i < road.points.size(); ++i)
    rasterize_thick_segment(mask, road.points[i - 1].first,
                            road.points[i - 1].second, road.points[i].first,
                            road.points[i].second, road.width);
}

SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  const StyleParams& params = style_params(spec.style);
  SyntheticScene scene{
      ImagePlane(spec.canvas, spec.canvas, 3, 0.0, PixelDomain::raw8),
      BinaryMask(spec.canvas, spec.canvas, 0)};

  Rng bg_rng = derive_rng(spec.background_texture_seed, {"synth", "bg"});
  paint_background(scene.image, params, bg_rng);

  Rng building_rng =
      derive_rng(spec.background_texture_seed, {"synth", "buildings"});
  paint_buildings(scene.image, spec, params, building_rng);

  const auto roads = sample_road_paths(spec);
  Rng paint_rng =
      derive_rng(spec.background_texture_seed, {"synth", "roadpaint"});
  for (const auto& road : roads) {
    BinaryMask footprint(spec.canvas, spec.canvas, 0);
    rasterize_road(footprint, road);
    const auto tone = road_tone(paint_rng);
    for (int h = 0; h < spec.canvas; ++h) {
      for (int w = 0; w < spec.canvas; ++w) {
        if (!footprint.at(h, w)) continue;
        for (int c = 0; c < 3; ++c)
          scene.image.at(h, w, c) =
              clamp255(tone[c] + paint_rng.uniform(-8.0, 8.0));
        scene.roads.at(h, w) = 1;
      }
    }
  }
  return scene;
}

void SyntheticDatasetSpec::validate() const {
  if (out_dir.empty()) fail(ErrorKind::config, "out_dir must be set");
  if (train_count < 1 || val_count < 1)
    fail(ErrorKind::invalid_spec, "train and val counts must be positive");
  if (train_styles.empty() || val_styles.empty())
    fail(ErrorKind::invalid_spec, "style lists must be non-empty");
  SyntheticSceneSpec probe;
  probe.canvas = canvas;
  probe.road_count = road_count_min;
  probe.road_width_min = road_width_min;
  probe.road_width_max = road_width_max;
  probe.building_density = building_density;
  probe.validate();
  if (road_count_min < 0 || road_count_max < road_count_min)
    fail(ErrorKind::invalid_spec, "road count range is invalid");
}

namespace {

std::string scene_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04d", index);
  return buf;
}

std::vector<SourceEntry> emit_split(const SyntheticDatasetSpec& spec,
                                    Split split,
                                    const std::vector<SceneStyle>& styles,
                                    int count) {
  const std::string split_name = to_string(split);
  const fs::path root(spec.out_dir);
  fs::create_directories(root / "images" / split_name);
  fs::create_directories(root / "labels" / split_name);

  std::vector<SourceEntry> sources;
  sources.reserve(count);
  for (int i = 0; i < count; ++i) {
    const SceneStyle style = styles[i % styles.size()];
    const std::uint64_t scene_seed =
        derive_seed(spec.seed, {"scene", split_name, std::to_string(i)});
    Rng meta = derive_rng(scene_seed, {"meta"});

    SyntheticSceneSpec scene_spec;
    scene_spec.canvas = spec.canvas;
    scene_spec.road_count =
        spec.road_count_min +
        static_cast<int>(
            meta.uniform_index(spec.road_count_max - spec.road_count_min + 1));
    scene_spec.road_width_min = spec.road_width_min;
    scene_spec.road_width_max = spec.road_width_max;
    scene_spec.background_texture_seed = scene_seed;
    scene_spec.building_density = spec.building_density;
    scene_spec.style = style;

    const SyntheticScene scene = generate_synthetic_scene(scene_spec);
    const std::string name = scene_name(i);
    const fs::path image_rel = fs::path("images") / split_name / (name + ".png");
    const fs::path label_rel = fs::path("labels") / split_name / (name + ".png");
    write_png((root / image_rel).string(), scene.image);
    write_mask_png((root / label_rel).string(), scene.roads);

    SourceEntry src;
    src.image_path = image_rel.generic_string();
    src.label_path = label_rel.generic_string();
    src.source_id = split_name + "/" + name;
    src.city = to_string(style);
    sources.push_back(std::move(src));
  }
  return sources;
}

}  // namespace

ChannelStats compute_channel_stats(const std::vector<std::string>& image_paths) {
  if (image_paths.empty())
    fail(ErrorKind::empty_input, "cannot compute stats over zero images");
  std::vector<double> sum, sumsq;
  std::size_t count = 0;
  int channels = -1;
  for (const auto& path : image_paths) {
    const ImagePlane img = read_png(path);
    if (channels < 0) {
      channels = img.channels;
      sum.assign(channels, 0.0);
      sumsq.assign(channels, 0.0);
    } else if (img.channels != channels) {
      fail(ErrorKind::heterogeneous_input,
           path + " has " + std::to_string(img.channels) +
               " channels, expected " + std::to_string(channels));
    }
    for (int h = 0; h < img.height; ++h)
      for (int w = 0; w < img.width; ++w)
        for (int c = 0; c < channels; ++c) {
          const double v = img.at(h, w, c) / 255.0;
          sum[c] += v;
          sumsq[c] += v * v;
        }
    count += static_cast<std::size_t>(img.height) * img.width;
  }
  ChannelStats stats;
  stats.mean.resize(channels);
  stats.std.resize(channels);
  for (int c = 0; c < channels; ++c) {
    stats.mean[c] = sum[c] / count;
    const double var = sumsq[c] / count - stats.mean[c] * stats.mean[c];
    stats.std[c] = std::sqrt(std::max(var, 0.0));
  }
  return stats;
}

SyntheticDataset emit_synthetic_dataset(const SyntheticDatasetSpec& spec) {
  spec.validate();
  const fs::path root(spec.out_dir);
  fs::create_directories(root);

  const auto train_sources =
      emit_split(spec, Split::train, spec.train_styles, spec.train_count);
  const auto val_sources =
      emit_split(spec, Split::val, spec.val_styles, spec.val_count);

  DatasetManifest manifest = build_manifest(train_sources, spec.canvas,
                                            spec.canvas, spec.canvas, 0,
                                            Split::train);
  DatasetManifest val_manifest = build_manifest(
      val_sources, spec.canvas, spec.canvas, spec.canvas, 0, Split::val);
  manifest.records.insert(manifest.records.end(), val_manifest.records.begin(),
                          val_manifest.records.end());

  std::vector<std::string> train_paths;
  train_paths.reserve(train_sources.size());
  for (const auto& src : train_sources)
    train_paths.push_back((root / src.image_path).string());
  const ChannelStats stats = compute_channel_stats(train_paths);

  SyntheticDataset out;
  out.root = root.string();
  out.manifest_path = (root / "manifest.tsv").string();
  out.train_manifest_path = (root / "train.tsv").string();
  out.val_manifest_path = (root / "val.tsv").string();
  out.stats_path = (root / "stats.txt").string();
  out.stats = stats;
  write_manifest(manifest, out.manifest_path);
  write_manifest(filter_split(manifest, Split::train),
                 out.train_manifest_path);
  write_manifest(filter_split(manifest, Split::val), out.val_manifest_path);
  write_stats_file(out.stats_path, stats);
  resolve_manifest_paths(manifest, out.root);
  out.manifest = std::move(manifest);
  return out;
}

}  // namespace skyfill
