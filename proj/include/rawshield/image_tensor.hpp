#pragma once

#include "rawshield/isp.hpp"
#include "rawshield/tensor.hpp"

namespace rawshield {

/// HWC image → [1, C, H, W] tensor (planar).
template <typename S>
ad::Tensor<S> image_to_tensor(const ImagePlane& img, bool requires_grad = false) {
  const Index h = img.height(), w = img.width(), c = img.channels();
  typename ad::Tensor<S>::Array v(h * w * c);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) v[(ch * h + y) * w + x] = static_cast<S>(img(y, x, ch));
  return ad::Tensor<S>(ad::Shape{1, c, h, w}, std::move(v), requires_grad);
}

/// Batch item `b` of a [B, C, H, W] tensor → HWC image tagged `domain`.
template <typename S>
ImagePlane tensor_to_image(const ad::Tensor<S>& t, ColorDomain domain, Index b = 0) {
  if (t.rank() != 4 || b < 0 || b >= t.dim(0)) throw ShapeError("tensor_to_image: expected [B,C,H,W]");
  const Index c = t.dim(1), h = t.dim(2), w = t.dim(3);
  ImagePlane img(h, w, c, domain);
  const S* src = t.value().data() + b * c * h * w;
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) img(y, x, ch) = static_cast<double>(src[(ch * h + y) * w + x]);
  return img;
}

}  // namespace rawshield
