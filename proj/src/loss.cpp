#include "skyfill/loss.hpp"

#include <cmath>

#include "skyfill/common.hpp"

namespace skyfill {

namespace {

void check_shapes(const ImagePlane& output, const ImagePlane& input,
                  const BinaryMask& mask) {
  if (!output.same_shape(input))
    fail(ErrorKind::shape_mismatch, "output and input shapes differ");
  if (output.height != mask.height || output.width != mask.width)
    fail(ErrorKind::shape_mismatch, "mask does not match image dimensions");
}

void check_road(const ImagePlane& output, const BinaryMask& road) {
  if (output.height != road.height || output.width != road.width)
    fail(ErrorKind::shape_mismatch, "road mask does not match image dimensions");
}

// MSE(O*g, X*g) where g is the per-pixel gate, mean over all elements.
// complement selects 1-M for the fill task; road (optional) adds the S
// factor of the guided losses.
double gated_mse(const ImagePlane& output, const ImagePlane& input,
                 const BinaryMask& mask, bool complement,
                 const BinaryMask* road) {
  double sum = 0.0;
  for (int h = 0; h < output.height; ++h)
    for (int w = 0; w < output.width; ++w) {
      double gate = complement ? 1.0 - mask.at(h, w) : mask.at(h, w);
      if (road) gate *= road->at(h, w);
      for (int c = 0; c < output.channels; ++c) {
        double d = gate * (output.at(h, w, c) - input.at(h, w, c));
        sum += d * d;
      }
    }
  return sum / static_cast<double>(output.size());
}

ImagePlane gated_mse_grad(const ImagePlane& output, const ImagePlane& input,
                          const BinaryMask& mask, bool complement,
                          const BinaryMask* road) {
  ImagePlane grad(output.height, output.width, output.channels, 0.0,
                  output.domain);
  const double scale = 2.0 / static_cast<double>(output.size());
  for (int h = 0; h < output.height; ++h)
    for (int w = 0; w < output.width; ++w) {
      double gate = complement ? 1.0 - mask.at(h, w) : mask.at(h, w);
      if (road) gate *= road->at(h, w);
      if (gate == 0.0) continue;
      for (int c = 0; c < output.channels; ++c)
        grad.at(h, w, c) =
            scale * gate * (output.at(h, w, c) - input.at(h, w, c));
    }
  return grad;
}

long long count_zeros(const BinaryMask& mask) {
  long long zeros = 0;
  for (auto v : mask.values) zeros += (v == 0);
  return zeros;
}

long long count_ones(const BinaryMask& mask) {
  return static_cast<long long>(mask.size()) - count_zeros(mask);
}

}  // namespace

void validate(const LossWeights& weights) {
  if (!std::isfinite(weights.w_id) || !std::isfinite(weights.w_fill) ||
      weights.w_id < 0.0 || weights.w_fill < 0.0 ||
      (weights.w_id == 0.0 && weights.w_fill == 0.0))
    fail(ErrorKind::invalid_spec,
         "loss weights must be finite, non-negative, not both zero");
}

double identity_loss(const ImagePlane& output, const ImagePlane& input,
                     const BinaryMask& mask) {
  check_shapes(output, input, mask);
  return gated_mse(output, input, mask, false, nullptr);
}

double fill_loss(const ImagePlane& output, const ImagePlane& input,
                 const BinaryMask& mask) {
  check_shapes(output, input, mask);
  return gated_mse(output, input, mask, true, nullptr);
}

LossReport total_inpaint_loss(const ImagePlane& output, const ImagePlane& input,
                              const BinaryMask& mask,
                              const LossWeights& weights) {
  validate(weights);
  LossReport report;
  report.l_id = identity_loss(output, input, mask);
  report.l_fill = fill_loss(output, input, mask);
  report.l_total = weights.w_id * report.l_id + weights.w_fill * report.l_fill;
  report.masked_pixel_count = count_zeros(mask);
  return report;
}

double guided_identity_loss(const ImagePlane& output, const ImagePlane& input,
                            const BinaryMask& mask, const BinaryMask& road) {
  check_shapes(output, input, mask);
  check_road(output, road);
  return gated_mse(output, input, mask, false, &road);
}

double guided_fill_loss(const ImagePlane& output, const ImagePlane& input,
                        const BinaryMask& mask, const BinaryMask& road) {
  check_shapes(output, input, mask);
  check_road(output, road);
  return gated_mse(output, input, mask, true, &road);
}

LossReport total_guided_loss(const ImagePlane& output, const ImagePlane& input,
                             const BinaryMask& mask, const BinaryMask& road,
                             const LossWeights& weights) {
  validate(weights);
  LossReport report;
  report.l_id = guided_identity_loss(output, input, mask, road);
  report.l_fill = guided_fill_loss(output, input, mask, road);
  report.l_total = weights.w_id * report.l_id + weights.w_fill * report.l_fill;
  report.masked_pixel_count = count_zeros(mask);
  report.road_pixel_count = count_ones(road);
  return report;
}

ImagePlane identity_loss_grad(const ImagePlane& output, const ImagePlane& input,
                              const BinaryMask& mask) {
  check_shapes(output, input, mask);
  return gated_mse_grad(output, input, mask, false, nullptr);
}

ImagePlane fill_loss_grad(const ImagePlane& output, const ImagePlane& input,
                          const BinaryMask& mask) {
  check_shapes(output, input, mask);
  return gated_mse_grad(output, input, mask, true, nullptr);
}

ImagePlane total_inpaint_loss_grad(const ImagePlane& output,
                                   const ImagePlane& input,
                                   const BinaryMask& mask,
                                   const LossWeights& weights) {
  validate(weights);
  ImagePlane g_id = identity_loss_grad(output, input, mask);
  ImagePlane g_fill = fill_loss_grad(output, input, mask);
  for (std::size_t i = 0; i < g_id.values.size(); ++i)
    g_id.values[i] =
        weights.w_id * g_id.values[i] + weights.w_fill * g_fill.values[i];
  return g_id;
}

ImagePlane guided_identity_loss_grad(const ImagePlane& output,
                                     const ImagePlane& input,
                                     const BinaryMask& mask,
                                     const BinaryMask& road) {
  check_shapes(output, input, mask);
  check_road(output, road);
  return gated_mse_grad(output, input, mask, false, &road);
}

ImagePlane guided_fill_loss_grad(const ImagePlane& output,
                                 const ImagePlane& input,
                                 const BinaryMask& mask,
                                 const BinaryMask& road) {
  check_shapes(output, input, mask);
  check_road(output, road);
  return gated_mse_grad(output, input, mask, true, &road);
}

ImagePlane total_guided_loss_grad(const ImagePlane& output,
                                  const ImagePlane& input,
                                  const BinaryMask& mask,
                                  const BinaryMask& road,
                                  const LossWeights& weights) {
  validate(weights);
  ImagePlane g_id = guided_identity_loss_grad(output, input, mask, road);
  ImagePlane g_fill = guided_fill_loss_grad(output, input, mask, road);
  for (std::size_t i = 0; i < g_id.values.size(); ++i)
    g_id.values[i] =
        weights.w_id * g_id.values[i] + weights.w_fill * g_fill.values[i];
  return g_id;
}

LossReport inpaint_loss_batch(const Tensor& output, const Tensor& input,
                              const Tensor& mask, const Tensor& road,
                              const LossWeights& weights, Tensor& grad) {
  validate(weights);
  if (!output.same_shape(input))
    fail(ErrorKind::shape_mismatch, "batch output/input shapes differ");
  if (mask.n != output.n || mask.c != 1 || mask.h != output.h ||
      mask.w != output.w)
    fail(ErrorKind::shape_mismatch, "batch mask shape mismatch");
  const bool guided = road.n != 0;
  if (guided && (road.n != output.n || road.c != 1 || road.h != output.h ||
                 road.w != output.w))
    fail(ErrorKind::shape_mismatch, "batch road mask shape mismatch");

  if (!grad.same_shape(output)) grad = Tensor(output.n, output.c, output.h, output.w);

  const double inv_n = 1.0 / static_cast<double>(output.size());
  const std::size_t plane = output.plane();
  double sum_id = 0.0, sum_fill = 0.0;
  long long masked = 0, road_px = 0;

  for (int in = 0; in < output.n; ++in) {
    const float* m = mask.data.data() + in * plane;
    const float* s = guided ? road.data.data() + in * plane : nullptr;
    for (std::size_t p = 0; p < plane; ++p) {
      masked += (m[p] == 0.f);
      if (s) road_px += (s[p] != 0.f);
    }
    for (int ic = 0; ic < output.c; ++ic) {
      const float* o =
          output.data.data() + (static_cast<std::size_t>(in) * output.c + ic) * plane;
      const float* x =
          input.data.data() + (static_cast<std::size_t>(in) * output.c + ic) * plane;
      float* g =
          grad.data.data() + (static_cast<std::size_t>(in) * output.c + ic) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const double mm = m[p];
        const double gate = s ? s[p] : 1.0;
        const double diff = static_cast<double>(o[p]) - static_cast<double>(x[p]);
        const double d_id = gate * mm * diff;
        const double d_fill = gate * (1.0 - mm) * diff;
        sum_id += d_id * d_id;
        sum_fill += d_fill * d_fill;
        // both gates are 0/1 and disjoint, so the combined gradient is
        // 2/N * gate * (w_id*M + w_fill*(1-M)) * diff
        const double wgate =
            gate * (weights.w_id * mm + weights.w_fill * (1.0 - mm));
        g[p] = static_cast<float>(2.0 * inv_n * wgate * diff);
      }
    }
  }

  LossReport report;
  report.l_id = sum_id * inv_n;
  report.l_fill = sum_fill * inv_n;
  report.l_total = weights.w_id * report.l_id + weights.w_fill * report.l_fill;
  report.masked_pixel_count = masked;
  if (guided) report.road_pixel_count = road_px;
  return report;
}

}  // namespace skyfill
