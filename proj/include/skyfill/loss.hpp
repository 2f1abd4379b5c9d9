#pragma once

#include <optional>

#include "skyfill/image.hpp"
#include "skyfill/mask.hpp"
#include "skyfill/tensor.hpp"

namespace skyfill {

struct LossWeights {
  double w_id = 0.2;
  double w_fill = 0.8;
};

void validate(const LossWeights& weights);

struct LossReport {
  double l_id = 0.0;
  double l_fill = 0.0;
  double l_total = 0.0;
  long long masked_pixel_count = 0;           // zeros of the inpainting mask
  std::optional<long long> road_pixel_count;  // ones of the road mask
};

// Reconstruction losses over a single image, double precision. The mean
// runs over all H*W*C elements of the masked tensors, zeros included;
// masked_pixel_count in LossReport is provided so callers can
// renormalize for logging.
double identity_loss(const ImagePlane& output, const ImagePlane& input,
                     const BinaryMask& mask);
double fill_loss(const ImagePlane& output, const ImagePlane& input,
                 const BinaryMask& mask);
LossReport total_inpaint_loss(const ImagePlane& output, const ImagePlane& input,
                              const BinaryMask& mask,
                              const LossWeights& weights);

// Guided variants: the road mask gates both terms, so only road pixels
// produce loss.
double guided_identity_loss(const ImagePlane& output, const ImagePlane& input,
                            const BinaryMask& mask, const BinaryMask& road);
double guided_fill_loss(const ImagePlane& output, const ImagePlane& input,
                        const BinaryMask& mask, const BinaryMask& road);
LossReport total_guided_loss(const ImagePlane& output, const ImagePlane& input,
                             const BinaryMask& mask, const BinaryMask& road,
                             const LossWeights& weights);

// Analytic d(loss)/d(output), same shape as output. With N = H*W*C:
//   d l_id / dO    = (2/N) * M * (O - X)
//   d l_fill / dO  = (2/N) * (1-M) * (O - X)
// and the guided forms carry an extra S factor. Used by the gradient
// checks; the training path has its own fused batched version below.
ImagePlane identity_loss_grad(const ImagePlane& output, const ImagePlane& input,
                              const BinaryMask& mask);
ImagePlane fill_loss_grad(const ImagePlane& output, const ImagePlane& input,
                          const BinaryMask& mask);
ImagePlane total_inpaint_loss_grad(const ImagePlane& output,
                                   const ImagePlane& input,
                                   const BinaryMask& mask,
                                   const LossWeights& weights);
ImagePlane guided_identity_loss_grad(const ImagePlane& output,
                                     const ImagePlane& input,
                                     const BinaryMask& mask,
                                     const BinaryMask& road);
ImagePlane guided_fill_loss_grad(const ImagePlane& output,
                                 const ImagePlane& input,
                                 const BinaryMask& mask,
                                 const BinaryMask& road);
ImagePlane total_guided_loss_grad(const ImagePlane& output,
                                  const ImagePlane& input,
                                  const BinaryMask& mask,
                                  const BinaryMask& road,
                                  const LossWeights& weights);

// Batched training-path loss. Masks arrive as N x 1 x H x W tensors of
// exact zeros and ones; road may be empty (n == 0) for the unguided
// step. Reduction is the mean over all N*C*H*W elements. Returns the
// report and writes d l_total / d output into grad.
LossReport inpaint_loss_batch(const Tensor& output, const Tensor& input,
                              const Tensor& mask, const Tensor& road,
                              const LossWeights& weights, Tensor& grad);

}  // namespace skyfill
