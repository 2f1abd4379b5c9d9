#include "skyfill/unet.hpp"

#include "skyfill/common.hpp"

namespace skyfill {

namespace {
constexpr int kB = ToyUNet::kBaseChannels;
}

ToyUNet::ToyUNet(int num_classes, std::uint64_t init_seed)
    : enc1a_("enc1a", 3, kB, 3, 1),
      enc1b_("enc1b", kB, kB, 3, 1),
      enc2a_("enc2a", kB, 2 * kB, 3, 1),
      enc2b_("enc2b", 2 * kB, 2 * kB, 3, 1),
      bott_a_("bott_a", 2 * kB, 4 * kB, 3, 1),
      bott_b_("bott_b", 4 * kB, 4 * kB, 3, 1),
      dec2a_("dec2a", 6 * kB, 2 * kB, 3, 1),
      dec2b_("dec2b", 2 * kB, 2 * kB, 3, 1),
      dec1a_("dec1a", 3 * kB, kB, 3, 1),
      dec1b_("dec1b", kB, kB, 3, 1),
      head_("head", kB, num_classes, 1, 0) {
  if (num_classes < 1)
    fail(ErrorKind::invalid_class_count, "ToyUNet needs at least one class");
  Rng rng(init_seed);
  for (nn::Conv2d* conv : {&enc1a_, &enc1b_, &enc2a_, &enc2b_, &bott_a_,
                           &bott_b_, &dec2a_, &dec2b_, &dec1a_, &dec1b_, &head_})
    conv->init(rng);
}

Tensor ToyUNet::forward(const Tensor& input, bool training) {
  if (input.c != 3)
    fail(ErrorKind::shape_mismatch, "ToyUNet expects 3 input channels");
  if (input.h % 4 || input.w % 4)
    fail(ErrorKind::shape_mismatch,
         "ToyUNet input dimensions must be divisible by 4");

  Tensor s1 = r1b_.forward(enc1b_.forward(r1a_.forward(enc1a_.forward(input, training), training), training), training);
  Tensor p1 = pool1_.forward(s1, training);
  Tensor s2 = r2b_.forward(enc2b_.forward(r2a_.forward(enc2a_.forward(p1, training), training), training), training);
  Tensor p2 = pool2_.forward(s2, training);
  Tensor b = rbb_.forward(bott_b_.forward(rba_.forward(bott_a_.forward(p2, training), training), training), training);

  Tensor u2 = nn::concat_channels(up2_.forward(b), s2);
  Tensor d2 = r4b_.forward(dec2b_.forward(r4a_.forward(dec2a_.forward(u2, training), training), training), training);
  Tensor u1 = nn::concat_channels(up1_.forward(d2), s1);
  Tensor d1 = r5b_.forward(dec1b_.forward(r5a_.forward(dec1a_.forward(u1, training), training), training), training);
  return head_.forward(d1, training);
}

Tensor ToyUNet::backward(const Tensor& grad_output) {
  Tensor d = head_.backward(grad_output);
  d = dec1a_.backward(r5a_.backward(dec1b_.backward(r5b_.backward(d))));

  Tensor d_up1, d_s1;
  nn::split_channels(d, 2 * kB, d_up1, d_s1);
  d = up1_.backward(d_up1);

  d = dec2a_.backward(r4a_.backward(dec2b_.backward(r4b_.backward(d))));
  Tensor d_up2, d_s2;
  nn::split_channels(d, 4 * kB, d_up2, d_s2);
  d = up2_.backward(d_up2);

  d = bott_a_.backward(rba_.backward(bott_b_.backward(rbb_.backward(d))));
  d = pool2_.backward(d);
  if (!d.same_shape(d_s2))
    fail(ErrorKind::shape_mismatch, "skip gradient shape mismatch (level 2)");
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] += d_s2.data[i];

  d = enc2a_.backward(r2a_.backward(enc2b_.backward(r2b_.backward(d))));
  d = pool1_.backward(d);
  if (!d.same_shape(d_s1))
    fail(ErrorKind::shape_mismatch, "skip gradient shape mismatch (level 1)");
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] += d_s1.data[i];

  return enc1a_.backward(r1a_.backward(enc1b_.backward(r1b_.backward(d))));
}

std::vector<nn::ParamRef> ToyUNet::parameters() {
  std::vector<nn::ParamRef> out;
  for (nn::Conv2d* conv : {&enc1a_, &enc1b_, &enc2a_, &enc2b_, &bott_a_,
                           &bott_b_, &dec2a_, &dec2b_, &dec1a_, &dec1b_, &head_})
    conv->collect(out);
  return out;
}

int ToyUNet::rgb_channel_offset() const {
  if (!inpainting_)
    fail(ErrorKind::contract_violation,
         "rgb_channel_offset queried outside inpainting configuration");
  return rgb_offset_;
}

void ToyUNet::set_inpainting_head(HeadMode mode, Rng& rng) {
  if (inpainting_) return;  // already adapted
  head_mode_ = mode;
  const int k_prev = head_.out_channels();
  if (mode == HeadMode::replace) {
    // K=3 segmentation heads are already RGB-compatible; keep them.
    if (k_prev != 3) {
      head_ = nn::Conv2d("head", kB, 3, 1, 0);
      head_.init(rng);
    }
    rgb_offset_ = 0;
  } else {
    nn::Conv2d extended("head", kB, k_prev + 3, 1, 0);
    extended.init(rng);
    // keep the original K filters in place, appended 3 stay fresh
    std::copy(head_.weight().data.begin(), head_.weight().data.end(),
              extended.weight().data.begin());
    std::copy(head_.bias().data.begin(), head_.bias().data.end(),
              extended.bias().data.begin());
    head_ = std::move(extended);
    rgb_offset_ = k_prev;
  }
  inpainting_ = true;
}

void ToyUNet::set_segmentation_head(int num_classes, Rng& rng) {
  if (num_classes < 1)
    fail(ErrorKind::invalid_class_count, "num_classes must be >= 1");
  // Always a fresh final layer: there are no pre-inpainting segmentation
  // weights to restore.
  head_ = nn::Conv2d("head", kB, num_classes, 1, 0);
  head_.init(rng);
  inpainting_ = false;
  rgb_offset_ = 0;
}

long long ToyUNet::parameter_count() {
  long long total = 0;
  for (const auto& p : parameters()) total += static_cast<long long>(p.value->size());
  return total;
}

}  // namespace skyfill
