#pragma once

#include "skyfill/model.hpp"

namespace skyfill {

// Reference trainable network: 3-level U-Net, base 16 channels, skip
// connections at every level, configurable K via a 1x1 head. Input
// dimensions must be divisible by 4 (two pooling stages).
class ToyUNet final : public SegmentationModel {
 public:
  static constexpr int kBaseChannels = 16;

  // Fresh segmentation-configured network with num_classes outputs.
  ToyUNet(int num_classes, std::uint64_t init_seed);

  Tensor forward(const Tensor& input, bool training) override;
  Tensor backward(const Tensor& grad_output) override;
  std::vector<nn::ParamRef> parameters() override;

  int in_channels() const override { return 3; }
  int out_channels() const override { return head_.out_channels(); }
  std::string final_layer_prefix() const override { return "head."; }

  bool inpainting_config() const override { return inpainting_; }
  HeadMode head_mode() const override { return head_mode_; }
  int rgb_channel_offset() const override;

  void set_inpainting_head(HeadMode mode, Rng& rng) override;
  void set_segmentation_head(int num_classes, Rng& rng) override;

  long long parameter_count();

 private:
  nn::Conv2d enc1a_, enc1b_, enc2a_, enc2b_, bott_a_, bott_b_;
  nn::Conv2d dec2a_, dec2b_, dec1a_, dec1b_;
  nn::Conv2d head_;
  nn::ReLU r1a_, r1b_, r2a_, r2b_, rba_, rbb_, r4a_, r4b_, r5a_, r5b_;
  nn::MaxPool2 pool1_, pool2_;
  nn::UpsampleNearest2 up1_, up2_;

  bool inpainting_ = false;
  HeadMode head_mode_ = HeadMode::replace;
  int rgb_offset_ = 0;
};

}  // namespace skyfill
