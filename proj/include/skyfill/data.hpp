#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "skyfill/image.hpp"
#include "skyfill/mask.hpp"
#include "skyfill/rng.hpp"

namespace skyfill {

enum class Split { train, val, test };

std::string to_string(Split split);
Split split_from_string(const std::string& text);

// One source image (plus optional label) before tiling.
struct SourceEntry {
  std::string image_path;
  std::string label_path;  // empty = unlabeled
  std::string source_id;
  std::string city;  // city / style tag; empty = untagged
};

// One training/eval sample: a crop window into a source image.
struct SampleRecord {
  std::string image_path;
  std::string label_path;  // empty = unlabeled
  Split split = Split::train;
  std::string source_id;
  int row = 0;
  int col = 0;
  std::string city;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  int crop_size = 0;  // 0 = records cover whole source images
  int overlap = 0;
  std::vector<std::string> class_names;
  double ground_sampling_distance = 0.0;  // cm/pixel, informational

  void validate() const;
};

// Regular grid of crop offsets with stride (crop - overlap). When the
// stride does not divide (S - crop), one extra offset flush to the far
// edge is appended so the grid always covers the source.
std::vector<int> tile_offsets_1d(int extent, int crop, int overlap);
std::vector<std::pair<int, int>> crop_tiles(int source_h, int source_w,
                                            int crop, int overlap);

// One record per (source, offset). All sources must share source_size.
DatasetManifest build_manifest(const std::vector<SourceEntry>& sources,
                               int source_h, int source_w, int crop,
                               int overlap, Split split);

// Same, probing each image's size from its PNG header.
DatasetManifest build_manifest_from_files(
    const std::vector<SourceEntry>& sources, int crop, int overlap,
    Split split);

enum class SubsetLevel { full, half, quarter };

std::string to_string(SubsetLevel level);
SubsetLevel subset_level_from_string(const std::string& text);

// Keeps ceil(n/2) (half) or ceil(n/4) (quarter) of the SOURCE images —
// a seeded permutation prefix, so quarter ⊂ half ⊂ full for one seed —
// then keeps every record belonging to a kept source.
DatasetManifest subset_halving(const DatasetManifest& manifest,
                               SubsetLevel level, std::uint64_t seed);

// Keep records whose city tag matches (or, with exclude, differs).
DatasetManifest filter_city(const DatasetManifest& manifest,
                            const std::string& city, bool exclude = false);
DatasetManifest filter_split(const DatasetManifest& manifest, Split split);

// Four corner crops plus the centered crop, in that order.
std::array<ImagePlane, 5> five_crop(const ImagePlane& image, int crop);

ImagePlane crop_image(const ImagePlane& image, int row, int col, int size);
BinaryMask crop_mask(const BinaryMask& mask, int row, int col, int size);

// Horizontal mirror, vertical flip, then k quarter-turns
// counter-clockwise — applied in that order.
struct AugmentOps {
  bool mirror = false;
  bool flip = false;
  int rot_quarter = 0;  // 0..3

  bool operator==(const AugmentOps&) const = default;
};

AugmentOps sample_augment(Rng& rng);
ImagePlane apply_augment(const ImagePlane& image, const AugmentOps& ops);
BinaryMask apply_augment(const BinaryMask& mask, const AugmentOps& ops);

std::pair<ImagePlane, std::optional<BinaryMask>> augment(
    const ImagePlane& image, const std::optional<BinaryMask>& label,
    std::uint64_t seed);

// Values >= threshold become 1. Input must be single-channel.
BinaryMask threshold_mask(const ImagePlane& plane, double threshold = 128.0);

struct LoadedSample {
  ImagePlane image;
  std::optional<BinaryMask> label;
};

// Reads the record's image (and label, if any) and applies its crop
// window. crop_size 0, or a window covering the whole image, skips the
// crop.
LoadedSample load_sample(const SampleRecord& record, int crop_size);

// Tab-separated, one record per line, "-" for empty fields; header
// lines carry crop/overlap/classes/gsd. Byte-stable for fixed inputs.
// Record paths may be relative; read_manifest resolves them against the
// manifest's own directory.
void write_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest read_manifest(const std::string& path);
void resolve_manifest_paths(DatasetManifest& manifest,
                            const std::string& base_dir);
std::string serialize_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(const std::string& text);

// Flat folder holding <id>.png images and <id>_mask.png labels.
std::vector<SourceEntry> scan_pair_folder(const std::string& dir);
// Root of per-city folders, each laid out like scan_pair_folder;
// records are tagged with their folder name.
std::vector<SourceEntry> scan_city_folders(const std::string& root);

}  // namespace skyfill
