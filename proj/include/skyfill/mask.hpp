#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "skyfill/image.hpp"

namespace skyfill {

// Per-pixel {0,1} grid. Doubles as the inpainting mask (0 = removed
// input pixel) and the road mask (1 = road).
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;  // row-major, each exactly 0 or 1

  BinaryMask() = default;
  BinaryMask(int h, int w, std::uint8_t fill = 1)
      : height(h), width(w),
        values(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int h, int w) {
    return values[static_cast<std::size_t>(h) * width + w];
  }
  std::uint8_t at(int h, int w) const {
    return values[static_cast<std::size_t>(h) * width + w];
  }
  std::size_t size() const { return values.size(); }
};

struct MaskSpec {
  int cluster_count = 0;  // squares to place; 0 leaves the mask all ones
  int cluster_size = 1;   // square side, pixels
  std::uint64_t seed = 0;
};

struct ScheduleMilestone {
  int epoch;
  int cluster_count;
  int cluster_size;
};

// Ordered epoch milestones; values hold between milestones and stay at
// the last milestone forever after.
class MaskSchedule {
 public:
  MaskSchedule() = default;
  explicit MaskSchedule(std::vector<ScheduleMilestone> milestones);

  const std::vector<ScheduleMilestone>& milestones() const {
    return milestones_;
  }
  const ScheduleMilestone& final_milestone() const {
    return milestones_.back();
  }

  // Parse "epoch:count:size,epoch:count:size,..." or the whitespace
  // layout of schedule config files (one "epoch count size" per line,
  // '#' comments).
  static MaskSchedule parse(const std::string& text);
  std::string serialize() const;

  // Multiplies every milestone epoch by factor (floor, min 1 except
  // the epoch-0 milestone). Used by the desk profile.
  MaskSchedule scaled_epochs(double factor) const;

 private:
  std::vector<ScheduleMilestone> milestones_;
};

// Default pretraining schedule: (0,100,10) (10,70,12) (20,52,14)
// (30,50,15) (40,25,20) (50,11,30).
const MaskSchedule& default_mask_schedule();

// Step lookup: milestone with the largest epoch <= the query epoch.
std::pair<int, int> schedule_at(const MaskSchedule& schedule, int epoch);

// The seeded top-left corners generate_mask paints. Corners are drawn
// uniformly from [0, H-size] x [0, W-size] with replacement, so squares
// never clip and overlaps are allowed.
std::vector<std::pair<int, int>> sample_corners(int height, int width,
                                                const MaskSpec& spec);

// All-ones mask with cluster_count seeded squares of zeros.
BinaryMask generate_mask(int height, int width, const MaskSpec& spec);

// zeros / (H*W)
double masked_fraction(const BinaryMask& mask);

// output[h][w][c] = image[h][w][c] * mask[h][w]
ImagePlane apply_mask(const ImagePlane& image, const BinaryMask& mask);

// 8-bit gray PNG, 0 <-> 0 and 255 <-> 1.
void write_mask_png(const std::string& path, const BinaryMask& mask);
BinaryMask read_mask_png(const std::string& path);

}  // namespace skyfill
