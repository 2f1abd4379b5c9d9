#pragma once

#include "skyfill/model.hpp"

namespace skyfill {

// Integration surface for external segmentation networks. The trainer
// only ever talks to SegmentationModel, so wiring in a third-party
// network means implementing forward/backward/parameters against that
// codebase and declaring its head layout here. The two adapters below
// document the expected configuration; their compute hooks are
// unimplemented because the external weights and kernels are not
// bundled with this project.
class ExternalModelAdapter : public SegmentationModel {
 public:
  ExternalModelAdapter(std::string name, int num_classes, HeadMode mode)
      : name_(std::move(name)), num_classes_(num_classes), mode_(mode) {}

  Tensor forward(const Tensor&, bool) override { unavailable("forward"); }
  Tensor backward(const Tensor&) override { unavailable("backward"); }
  std::vector<nn::ParamRef> parameters() override { unavailable("parameters"); }

  int in_channels() const override { return 3; }
  int out_channels() const override {
    return inpainting_ && mode_ == HeadMode::replace ? 3
           : inpainting_                             ? num_classes_ + 3
                                                     : num_classes_;
  }
  std::string final_layer_prefix() const override { return "head."; }
  bool inpainting_config() const override { return inpainting_; }
  HeadMode head_mode() const override { return mode_; }
  int rgb_channel_offset() const override {
    return mode_ == HeadMode::replace ? 0 : num_classes_;
  }
  void set_inpainting_head(HeadMode mode, Rng&) override {
    mode_ = mode;
    inpainting_ = true;
  }
  void set_segmentation_head(int num_classes, Rng&) override {
    num_classes_ = num_classes;
    inpainting_ = false;
  }

  const std::string& adapter_name() const { return name_; }

 protected:
  [[noreturn]] void unavailable(const char* hook) const;

  std::string name_;
  int num_classes_;
  HeadMode mode_;
  bool inpainting_ = false;
};

// SPIN RoadMapper: binary road head (K=1); inpainting adds an extra RGB
// filter to the last layer of the segmentation branch, removed again for
// fine-tuning (extend mode).
class SpinRoadMapperAdapter final : public ExternalModelAdapter {
 public:
  SpinRoadMapperAdapter() : ExternalModelAdapter("spin", 1, HeadMode::extend) {}
};

// EmekU-Net: three-class head (roads, buildings, background). The K=3
// head is already RGB-shaped, so inpainting reuses it (replace mode is a
// no-op on the shapes).
class EmekUNetAdapter final : public ExternalModelAdapter {
 public:
  EmekUNetAdapter() : ExternalModelAdapter("emek-unet", 3, HeadMode::replace) {}
};

}  // namespace skyfill
