#include "skyfill/data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "skyfill/common.hpp"

namespace fs = std::filesystem;

namespace skyfill {

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  fail(ErrorKind::contract_violation, "unknown split value");
}

Split split_from_string(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  fail(ErrorKind::config, "unknown split '" + text + "'");
}

std::string to_string(SubsetLevel level) {
  switch (level) {
    case SubsetLevel::full: return "full";
    case SubsetLevel::half: return "half";
    case SubsetLevel::quarter: return "quarter";
  }
  fail(ErrorKind::contract_violation, "unknown subset level");
}

SubsetLevel subset_level_from_string(const std::string& text) {
  if (text == "full") return SubsetLevel::full;
  if (text == "half") return SubsetLevel::half;
  if (text == "quarter") return SubsetLevel::quarter;
  fail(ErrorKind::config, "unknown subset level '" + text + "'");
}

void DatasetManifest::validate() const {
  if (class_names.empty())
    fail(ErrorKind::invalid_spec, "manifest needs at least one class name");
  for (const auto& name : class_names) {
    if (name.empty() || name.find(',') != std::string::npos ||
        name.find('\t') != std::string::npos ||
        name.find('\n') != std::string::npos)
      fail(ErrorKind::invalid_spec, "bad class name '" + name + "'");
  }
  if (crop_size < 0 || overlap < 0)
    fail(ErrorKind::invalid_spec, "negative crop geometry");
  if (crop_size > 0 && overlap >= crop_size)
    fail(ErrorKind::invalid_stride, "overlap must be smaller than crop");
  for (const auto& r : records) {
    if (r.row < 0 || r.col < 0)
      fail(ErrorKind::invalid_spec, "negative crop offset in record for " +
                                        r.source_id);
  }
}

std::vector<int> tile_offsets_1d(int extent, int crop, int overlap) {
  if (crop < 1) fail(ErrorKind::invalid_spec, "crop must be positive");
  if (overlap < 0) fail(ErrorKind::invalid_spec, "overlap must be >= 0");
  if (overlap >= crop)
    fail(ErrorKind::invalid_stride,
         "overlap " + std::to_string(overlap) + " must be smaller than crop " +
             std::to_string(crop));
  if (crop > extent)
    fail(ErrorKind::shape_mismatch,
         "crop " + std::to_string(crop) + " exceeds source extent " +
             std::to_string(extent));
  const int stride = crop - overlap;
  std::vector<int> offsets;
  for (int off = 0; off + crop <= extent; off += stride) offsets.push_back(off);
  if (offsets.back() != extent - crop) offsets.push_back(extent - crop);
  return offsets;
}

std::vector<std::pair<int, int>> crop_tiles(int source_h, int source_w,
                                            int crop, int overlap) {
  const auto rows = tile_offsets_1d(source_h, crop, overlap);
  const auto cols = tile_offsets_1d(source_w, crop, overlap);
  std::vector<std::pair<int, int>> tiles;
  tiles.reserve(rows.size() * cols.size());
  for (int r : rows)
    for (int c : cols) tiles.emplace_back(r, c);
  return tiles;
}

DatasetManifest build_manifest(const std::vector<SourceEntry>& sources,
                               int source_h, int source_w, int crop,
                               int overlap, Split split) {
  if (sources.empty())
    fail(ErrorKind::empty_input, "cannot build a manifest from zero sources");
  const auto tiles = crop_tiles(source_h, source_w, crop, overlap);
  DatasetManifest manifest;
  manifest.crop_size = crop;
  manifest.overlap = overlap;
  manifest.class_names = {"background", "road"};
  manifest.records.reserve(sources.size() * tiles.size());
  for (const auto& src : sources) {
    for (const auto& [row, col] : tiles) {
      SampleRecord rec;
      rec.image_path = src.image_path;
      rec.label_path = src.label_path;
      rec.split = split;
      rec.source_id = src.source_id;
      rec.row = row;
      rec.col = col;
      rec.city = src.city;
      manifest.records.push_back(std::move(rec));
    }
  }
  return manifest;
}

DatasetManifest build_manifest_from_files(
    const std::vector<SourceEntry>& sources, int crop, int overlap,
    Split split) {
  if (sources.empty())
    fail(ErrorKind::empty_input, "cannot build a manifest from zero sources");
  const auto [h0, w0] = read_png_size(sources.front().image_path);
  for (const auto& src : sources) {
    const auto [h, w] = read_png_size(src.image_path);
    if (h != h0 || w != w0)
      fail(ErrorKind::heterogeneous_input,
           src.image_path + " is " + std::to_string(h) + "x" +
               std::to_string(w) + " but " + sources.front().image_path +
               " is " + std::to_string(h0) + "x" + std::to_string(w0));
  }
  return build_manifest(sources, h0, w0, crop, overlap, split);
}

DatasetManifest subset_halving(const DatasetManifest& manifest,
                               SubsetLevel level, std::uint64_t seed) {
  if (manifest.records.empty())
    fail(ErrorKind::empty_input, "cannot subset an empty manifest");
  if (level == SubsetLevel::full) return manifest;

  std::vector<std::string> sources;
  std::unordered_set<std::string> seen;
  for (const auto& r : manifest.records)
    if (seen.insert(r.source_id).second) sources.push_back(r.source_id);

  Rng rng = derive_rng(seed, {"subset"});
  for (std::size_t i = sources.size(); i > 1; --i)
    std::swap(sources[i - 1], sources[rng.uniform_index(i)]);

  const std::size_t n = sources.size();
  const std::size_t keep =
      level == SubsetLevel::half ? (n + 1) / 2 : (n + 3) / 4;
  std::unordered_set<std::string> kept(sources.begin(),
                                       sources.begin() + keep);

  DatasetManifest out = manifest;
  out.records.clear();
  for (const auto& r : manifest.records)
    if (kept.count(r.source_id)) out.records.push_back(r);
  return out;
}

DatasetManifest filter_city(const DatasetManifest& manifest,
                            const std::string& city, bool exclude) {
  DatasetManifest out = manifest;
  out.records.clear();
  for (const auto& r : manifest.records)
    if ((r.city == city) != exclude) out.records.push_back(r);
  return out;
}

DatasetManifest filter_split(const DatasetManifest& manifest, Split split) {
  DatasetManifest out = manifest;
  out.records.clear();
  for (const auto& r : manifest.records)
    if (r.split == split) out.records.push_back(r);
  return out;
}

ImagePlane crop_image(const ImagePlane& image, int row, int col, int size) {
  if (size < 1) fail(ErrorKind::invalid_spec, "crop size must be positive");
  if (row < 0 || col < 0 || row + size > image.height ||
      col + size > image.width)
    fail(ErrorKind::shape_mismatch,
         "crop window (" + std::to_string(row) + "," + std::to_string(col) +
             ")+" + std::to_string(size) + " exceeds image " +
             std::to_string(image.height) + "x" + std::to_string(image.width));
  ImagePlane out(size, size, image.channels, 0.0, image.domain);
  for (int h = 0; h < size; ++h)
    for (int w = 0; w < size; ++w)
      for (int c = 0; c < image.channels; ++c)
        out.at(h, w, c) = image.at(row + h, col + w, c);
  return out;
}

BinaryMask crop_mask(const BinaryMask& mask, int row, int col, int size) {
  if (size < 1) fail(ErrorKind::invalid_spec, "crop size must be positive");
  if (row < 0 || col < 0 || row + size > mask.height || col + size > mask.width)
    fail(ErrorKind::shape_mismatch, "crop window exceeds mask bounds");
  BinaryMask out(size, size);
  for (int h = 0; h < size; ++h)
    for (int w = 0; w < size; ++w)
      out.at(h, w) = mask.at(row + h, col + w);
  return out;
}

std::array<ImagePlane, 5> five_crop(const ImagePlane& image, int crop) {
  if (crop > image.height || crop > image.width)
    fail(ErrorKind::shape_mismatch,
         "five-crop size " + std::to_string(crop) + " exceeds image " +
             std::to_string(image.height) + "x" + std::to_string(image.width));
  const int bottom = image.height - crop;
  const int right = image.width - crop;
  return {crop_image(image, 0, 0, crop),
          crop_image(image, 0, right, crop),
          crop_image(image, bottom, 0, crop),
          crop_image(image, bottom, right, crop),
          crop_image(image, bottom / 2, right / 2, crop)};
}

AugmentOps sample_augment(Rng& rng) {
  AugmentOps ops;
  ops.mirror = rng.coin();
  ops.flip = rng.coin();
  ops.rot_quarter = static_cast<int>(rng.uniform_index(4));
  return ops;
}

namespace {

// dst(r,c) = src(c, W-1-r): one quarter-turn counter-clockwise.
ImagePlane rotate_ccw_once(const ImagePlane& src) {
  ImagePlane dst(src.width, src.height, src.channels, 0.0, src.domain);
  for (int r = 0; r < dst.height; ++r)
    for (int c = 0; c < dst.width; ++c)
      for (int ch = 0; ch < src.channels; ++ch)
        dst.at(r, c, ch) = src.at(c, src.width - 1 - r, ch);
  return dst;
}

BinaryMask rotate_ccw_once(const BinaryMask& src) {
  BinaryMask dst(src.width, src.height);
  for (int r = 0; r < dst.height; ++r)
    for (int c = 0; c < dst.width; ++c)
      dst.at(r, c) = src.at(c, src.width - 1 - r);
  return dst;
}

}  // namespace

ImagePlane apply_augment(const ImagePlane& image, const AugmentOps& ops) {
  ImagePlane out = image;
  if (ops.mirror) {
    for (int h = 0; h < out.height; ++h)
      for (int w = 0; w < out.width; ++w)
        for (int c = 0; c < out.channels; ++c)
          out.at(h, w, c) = image.at(h, image.width - 1 - w, c);
  }
  if (ops.flip) {
    ImagePlane tmp = out;
    for (int h = 0; h < out.height; ++h)
      for (int w = 0; w < out.width; ++w)
        for (int c = 0; c < out.channels; ++c)
          out.at(h, w, c) = tmp.at(out.height - 1 - h, w, c);
  }
  for (int k = 0; k < (ops.rot_quarter & 3); ++k) out = rotate_ccw_once(out);
  return out;
}

BinaryMask apply_augment(const BinaryMask& mask, const AugmentOps& ops) {
  BinaryMask out = mask;
  if (ops.mirror) {
    for (int h = 0; h < out.height; ++h)
      for (int w = 0; w < out.width; ++w)
        out.at(h, w) = mask.at(h, mask.width - 1 - w);
  }
  if (ops.flip) {
    BinaryMask tmp = out;
    for (int h = 0; h < out.height; ++h)
      for (int w = 0; w < out.width; ++w)
        out.at(h, w) = tmp.at(out.height - 1 - h, w);
  }
  for (int k = 0; k < (ops.rot_quarter & 3); ++k) out = rotate_ccw_once(out);
  return out;
}

std::pair<ImagePlane, std::optional<BinaryMask>> augment(
    const ImagePlane& image, const std::optional<BinaryMask>& label,
    std::uint64_t seed) {
  if (label && (label->height != image.height || label->width != image.width))
    fail(ErrorKind::shape_mismatch, "label dims do not match image dims");
  Rng rng = derive_rng(seed, {"augment"});
  const AugmentOps ops = sample_augment(rng);
  std::optional<BinaryMask> out_label;
  if (label) out_label = apply_augment(*label, ops);
  return {apply_augment(image, ops), std::move(out_label)};
}

BinaryMask threshold_mask(const ImagePlane& plane, double threshold) {
  if (plane.channels != 1)
    fail(ErrorKind::shape_mismatch,
         "threshold_mask expects a single-channel plane, got " +
             std::to_string(plane.channels));
  BinaryMask mask(plane.height, plane.width);
  for (int h = 0; h < plane.height; ++h)
    for (int w = 0; w < plane.width; ++w)
      mask.at(h, w) = plane.at(h, w, 0) >= threshold ? 1 : 0;
  return mask;
}

LoadedSample load_sample(const SampleRecord& record, int crop_size) {
  LoadedSample sample{read_png(record.image_path), std::nullopt};
  const bool crop_needed =
      crop_size > 0 && (sample.image.height != crop_size ||
                        sample.image.width != crop_size || record.row != 0 ||
                        record.col != 0);
  if (crop_needed)
    sample.image = crop_image(sample.image, record.row, record.col, crop_size);
  if (!record.label_path.empty()) {
    ImagePlane label = read_png(record.label_path);
    if (label.channels == 3) {
      ImagePlane gray(label.height, label.width, 1, 0.0, label.domain);
      for (int h = 0; h < label.height; ++h)
        for (int w = 0; w < label.width; ++w)
          gray.at(h, w, 0) = label.at(h, w, 0);
      label = std::move(gray);
    }
    BinaryMask mask = threshold_mask(label);
    if (crop_needed) mask = crop_mask(mask, record.row, record.col, crop_size);
    sample.label = std::move(mask);
  }
  return sample;
}

namespace {

std::string field_or_dash(const std::string& value) {
  return value.empty() ? "-" : value;
}

std::string dash_to_empty(const std::string& value) {
  return value == "-" ? "" : value;
}

std::string format_double(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

}  // namespace

std::string serialize_manifest(const DatasetManifest& manifest) {
  manifest.validate();
  std::string out;
  out += "# skyfill-manifest 1\n";
  out += "# crop " + std::to_string(manifest.crop_size) + "\n";
  out += "# overlap " + std::to_string(manifest.overlap) + "\n";
  out += "# classes ";
  for (std::size_t i = 0; i < manifest.class_names.size(); ++i) {
    if (i) out += ',';
    out += manifest.class_names[i];
  }
  out += "\n";
  out += "# gsd " + format_double(manifest.ground_sampling_distance) + "\n";
  for (const auto& r : manifest.records) {
    out += r.image_path;
    out += '\t';
    out += field_or_dash(r.label_path);
    out += '\t';
    out += to_string(r.split);
    out += '\t';
    out += r.source_id;
    out += '\t';
    out += std::to_string(r.row);
    out += '\t';
    out += std::to_string(r.col);
    out += '\t';
    out += field_or_dash(r.city);
    out += '\n';
  }
  return out;
}

DatasetManifest parse_manifest(const std::string& text) {
  DatasetManifest manifest;
  manifest.class_names = {"background", "road"};
  std::istringstream in(text);
  std::string line;
  bool saw_magic = false;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream header(line.substr(1));
      std::string key;
      header >> key;
      if (key == "skyfill-manifest") {
        saw_magic = true;
      } else if (key == "crop") {
        header >> manifest.crop_size;
      } else if (key == "overlap") {
        header >> manifest.overlap;
      } else if (key == "classes") {
        std::string joined;
        header >> joined;
        manifest.class_names.clear();
        std::istringstream names(joined);
        std::string name;
        while (std::getline(names, name, ','))
          manifest.class_names.push_back(name);
      } else if (key == "gsd") {
        header >> manifest.ground_sampling_distance;
      }
      if (!header && !header.eof())
        fail(ErrorKind::corrupt_state,
             "manifest line " + std::to_string(line_no) + ": bad header");
      continue;
    }
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 7)
      fail(ErrorKind::corrupt_state,
           "manifest line " + std::to_string(line_no) + ": expected 7 fields, got " +
               std::to_string(fields.size()));
    SampleRecord rec;
    rec.image_path = fields[0];
    rec.label_path = dash_to_empty(fields[1]);
    rec.split = split_from_string(fields[2]);
    rec.source_id = fields[3];
    try {
      rec.row = std::stoi(fields[4]);
      rec.col = std::stoi(fields[5]);
    } catch (const std::exception&) {
      fail(ErrorKind::corrupt_state,
           "manifest line " + std::to_string(line_no) + ": bad crop offset");
    }
    rec.city = dash_to_empty(fields[6]);
    manifest.records.push_back(std::move(rec));
  }
  if (!saw_magic)
    fail(ErrorKind::corrupt_state, "not a manifest file (missing magic line)");
  manifest.validate();
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  out << serialize_manifest(manifest);
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

void resolve_manifest_paths(DatasetManifest& manifest,
                            const std::string& base_dir) {
  const fs::path base(base_dir);
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).string();
  };
  for (auto& r : manifest.records) {
    resolve(r.image_path);
    resolve(r.label_path);
  }
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  DatasetManifest manifest = parse_manifest(buffer.str());
  resolve_manifest_paths(manifest, fs::path(path).parent_path().string());
  return manifest;
}

std::vector<SourceEntry> scan_pair_folder(const std::string& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::io, dir + " is not a directory");
  const std::string mask_suffix = "_mask";
  std::vector<SourceEntry> sources;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    const std::string stem = path.stem().string();
    if (stem.size() >= mask_suffix.size() &&
        stem.compare(stem.size() - mask_suffix.size(), mask_suffix.size(),
                     mask_suffix) == 0)
      continue;  // label file, paired below
    SourceEntry src;
    src.image_path = path.string();
    src.source_id = stem;
    const fs::path label = path.parent_path() / (stem + "_mask.png");
    if (fs::exists(label)) src.label_path = label.string();
    sources.push_back(std::move(src));
  }
  if (sources.empty()) fail(ErrorKind::empty_input, "no images found in " + dir);
  return sources;
}

std::vector<SourceEntry> scan_city_folders(const std::string& root) {
  if (!fs::is_directory(root))
    fail(ErrorKind::io, root + " is not a directory");
  std::vector<fs::path> cities;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) cities.push_back(entry.path());
  std::sort(cities.begin(), cities.end());
  if (cities.empty())
    fail(ErrorKind::empty_input, "no city folders found in " + root);
  std::vector<SourceEntry> sources;
  for (const auto& city_dir : cities) {
    auto city_sources = scan_pair_folder(city_dir.string());
    const std::string city = city_dir.filename().string();
    for (auto& src : city_sources) {
      src.city = city;
      src.source_id = city + "/" + src.source_id;
      sources.push_back(std::move(src));
    }
  }
  return sources;
}

}  // namespace skyfill
