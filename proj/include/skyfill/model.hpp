#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "skyfill/nn.hpp"
#include "skyfill/rng.hpp"
#include "skyfill/tensor.hpp"

namespace skyfill {

// How a model adapts its final layer for RGB reconstruction.
//   replace: the final layer is swapped for a fresh 3-channel one.
//   extend:  3 fresh filters are appended after the existing K, which
//            stay in place; reconstruction reads the appended channels.
enum class HeadMode { replace, extend };

std::string to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& s);

// Contract every trainable segmentation network satisfies: same-resolution
// dense output, enumerable named parameters, and an identifiable final
// layer that the head swaps may touch. Everything else must survive a
// head swap bit-exact.
class SegmentationModel {
 public:
  virtual ~SegmentationModel() = default;

  virtual Tensor forward(const Tensor& input, bool training) = 0;
  virtual Tensor backward(const Tensor& grad_output) = 0;
  virtual std::vector<nn::ParamRef> parameters() = 0;

  virtual int in_channels() const = 0;
  virtual int out_channels() const = 0;
  // Name prefix of the final-layer parameters, e.g. "head."
  virtual std::string final_layer_prefix() const = 0;

  virtual bool inpainting_config() const = 0;
  virtual HeadMode head_mode() const = 0;
  // First output channel carrying RGB while in inpainting config
  // (0 in replace mode, K in extend mode).
  virtual int rgb_channel_offset() const = 0;

  virtual void set_inpainting_head(HeadMode mode, Rng& rng) = 0;
  virtual void set_segmentation_head(int num_classes, Rng& rng) = 0;
};

// Head adaptation entry points. Both touch only final-layer parameters;
// freshly created filters are Kaiming-initialized from rng.
void to_inpainting_head(SegmentationModel& model, HeadMode mode, Rng& rng);
void to_segmentation_head(SegmentationModel& model, int num_classes, Rng& rng);

struct CheckpointBundle {
  std::map<std::string, Tensor> parameters;  // model params + "opt.*" state
  std::string step_tag = "none";             // step1 | step2 | step3 | none
  int head_channels = 0;
  HeadMode head_mode = HeadMode::replace;
  std::string config_digest;
  int epoch = -1;  // last completed epoch within the step, -1 = finished
};

CheckpointBundle snapshot(SegmentationModel& model, const std::string& step_tag,
                          const std::string& config_digest);

// Writes the bundle (versioned text header + named float32 tensors) and
// returns the file digest. Refuses to write non-finite parameters.
std::string save_checkpoint(const std::string& path,
                            const CheckpointBundle& bundle);
CheckpointBundle read_checkpoint(const std::string& path);
std::string checkpoint_digest(const std::string& path);

struct LoadReport {
  std::vector<std::string> matched;
  std::vector<std::string> reinitialized;  // unmatched target params
  std::vector<std::string> warnings;
};

// Copies name-matched parameters into the model. Unmatched target
// parameters (a swapped head, typically) are freshly initialized and
// reported. A shape conflict outside the final layer is a hard error;
// zero overlap means the checkpoint is incompatible.
LoadReport load_checkpoint(const CheckpointBundle& bundle,
                           SegmentationModel& model, Rng& reinit_rng);
LoadReport load_checkpoint_file(const std::string& path,
                                SegmentationModel& model, Rng& reinit_rng);

// Human-readable parameter/head listing for `model describe`.
std::string describe_checkpoint(const CheckpointBundle& bundle);

}  // namespace skyfill
