#include "skyfill/mask.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "skyfill/common.hpp"
#include "skyfill/rng.hpp"

namespace skyfill {

MaskSchedule::MaskSchedule(std::vector<ScheduleMilestone> milestones)
    : milestones_(std::move(milestones)) {
  if (milestones_.empty())
    fail(ErrorKind::invalid_spec, "mask schedule needs at least one milestone");
  if (milestones_.front().epoch != 0)
    fail(ErrorKind::invalid_spec, "mask schedule must start at epoch 0");
  for (std::size_t i = 0; i < milestones_.size(); ++i) {
    const auto& m = milestones_[i];
    if (m.cluster_count < 1 || m.cluster_size < 1)
      fail(ErrorKind::invalid_spec, "schedule counts and sizes must be >= 1");
    if (i > 0) {
      const auto& prev = milestones_[i - 1];
      if (m.epoch <= prev.epoch)
        fail(ErrorKind::invalid_spec, "schedule epochs must strictly increase");
      if (m.cluster_size < prev.cluster_size)
        fail(ErrorKind::invalid_spec, "cluster size must be non-decreasing");
      if (m.cluster_count > prev.cluster_count)
        fail(ErrorKind::invalid_spec, "cluster count must be non-increasing");
    }
  }
}

MaskSchedule MaskSchedule::parse(const std::string& text) {
  std::vector<ScheduleMilestone> ms;
  std::string normalized = text;
  for (char& ch : normalized)
    if (ch == ':' || ch == ',' || ch == ';') ch = ' ';
  std::istringstream in(normalized);
  std::string line;
  while (std::getline(in, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    ScheduleMilestone m{};
    while (ls >> m.epoch) {
      if (!(ls >> m.cluster_count >> m.cluster_size))
        fail(ErrorKind::invalid_spec,
             "schedule entries need epoch, count, size triples");
      ms.push_back(m);
    }
  }
  return MaskSchedule(std::move(ms));
}

std::string MaskSchedule::serialize() const {
  std::ostringstream out;
  for (std::size_t i = 0; i < milestones_.size(); ++i) {
    if (i) out << ",";
    out << milestones_[i].epoch << ":" << milestones_[i].cluster_count << ":"
        << milestones_[i].cluster_size;
  }
  return out.str();
}

MaskSchedule MaskSchedule::scaled_epochs(double factor) const {
  std::vector<ScheduleMilestone> ms = milestones_;
  for (std::size_t i = 1; i < ms.size(); ++i) {
    int scaled = static_cast<int>(std::floor(ms[i].epoch * factor));
    ms[i].epoch = std::max(scaled, 1);
  }
  // collapse milestones that landed on the same epoch, keeping the later one
  std::vector<ScheduleMilestone> packed;
  for (const auto& m : ms) {
    if (!packed.empty() && packed.back().epoch == m.epoch)
      packed.back() = m;
    else
      packed.push_back(m);
  }
  return MaskSchedule(std::move(packed));
}

const MaskSchedule& default_mask_schedule() {
  static const MaskSchedule schedule(std::vector<ScheduleMilestone>{
      {0, 100, 10},
      {10, 70, 12},
      {20, 52, 14},
      {30, 50, 15},
      {40, 25, 20},
      {50, 11, 30},
  });
  return schedule;
}

std::pair<int, int> schedule_at(const MaskSchedule& schedule, int epoch) {
  if (epoch < 0) fail(ErrorKind::invalid_spec, "epoch must be non-negative");
  const auto& ms = schedule.milestones();
  const ScheduleMilestone* current = &ms.front();
  for (const auto& m : ms) {
    if (m.epoch > epoch) break;
    current = &m;
  }
  return {current->cluster_count, current->cluster_size};
}

std::vector<std::pair<int, int>> sample_corners(int height, int width,
                                                const MaskSpec& spec) {
  if (spec.cluster_size < 1)
    fail(ErrorKind::invalid_spec, "cluster size must be >= 1");
  if (spec.cluster_size > std::min(height, width))
    fail(ErrorKind::invalid_spec, "cluster size exceeds image dimensions");
  if (spec.cluster_count < 0)
    fail(ErrorKind::invalid_spec, "cluster count must be >= 0");

  Rng rng(spec.seed);
  std::vector<std::pair<int, int>> corners;
  corners.reserve(spec.cluster_count);
  const std::uint64_t row_range = height - spec.cluster_size + 1;
  const std::uint64_t col_range = width - spec.cluster_size + 1;
  for (int i = 0; i < spec.cluster_count; ++i) {
    int r = static_cast<int>(rng.uniform_index(row_range));
    int c = static_cast<int>(rng.uniform_index(col_range));
    corners.emplace_back(r, c);
  }
  return corners;
}

BinaryMask generate_mask(int height, int width, const MaskSpec& spec) {
  BinaryMask mask(height, width, 1);
  for (const auto& [r, c] : sample_corners(height, width, spec))
    for (int dr = 0; dr < spec.cluster_size; ++dr)
      for (int dc = 0; dc < spec.cluster_size; ++dc)
        mask.at(r + dr, c + dc) = 0;
  return mask;
}

double masked_fraction(const BinaryMask& mask) {
  if (mask.size() == 0)
    fail(ErrorKind::empty_input, "masked_fraction over empty mask");
  std::size_t zeros = 0;
  for (auto v : mask.values) zeros += (v == 0);
  return static_cast<double>(zeros) / static_cast<double>(mask.size());
}

ImagePlane apply_mask(const ImagePlane& image, const BinaryMask& mask) {
  if (image.height != mask.height || image.width != mask.width)
    fail(ErrorKind::shape_mismatch, "mask dimensions do not match image");
  ImagePlane out = image;
  for (int h = 0; h < image.height; ++h)
    for (int w = 0; w < image.width; ++w)
      if (mask.at(h, w) == 0)
        for (int c = 0; c < image.channels; ++c) out.at(h, w, c) = 0.0;
  return out;
}

void write_mask_png(const std::string& path, const BinaryMask& mask) {
  ImagePlane img(mask.height, mask.width, 1, 0.0, PixelDomain::raw8);
  for (int h = 0; h < mask.height; ++h)
    for (int w = 0; w < mask.width; ++w)
      img.at(h, w, 0) = mask.at(h, w) ? 255.0 : 0.0;
  write_png(path, img);
}

BinaryMask read_mask_png(const std::string& path) {
  ImagePlane img = read_png(path);
  if (img.channels != 1)
    fail(ErrorKind::io, path + ": mask PNGs must be single-channel");
  BinaryMask mask(img.height, img.width, 0);
  for (int h = 0; h < img.height; ++h)
    for (int w = 0; w < img.width; ++w)
      mask.at(h, w) = img.at(h, w, 0) >= 128.0 ? 1 : 0;
  return mask;
}

}  // namespace skyfill
