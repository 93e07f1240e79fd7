#include "rawshield/isp.hpp"

#include <cmath>
#include <utility>

namespace rawshield {

namespace {

void require_finite(const ImagePlane& img, const char* op) {
  if (!img.all_finite()) throw InputError(std::string(op) + ": non-finite sample");
}

void require_rgb(const ImagePlane& img, const char* op) {
  if (img.channels() != 3) throw ShapeError(std::string(op) + ": expected 3 channels");
}

bool is_linear(ColorDomain d) { return d != ColorDomain::SrgbNonlinear; }

[[noreturn]] void domain_mismatch(const char* op, ColorDomain got) {
  throw DomainMismatchError(std::string(op) + ": unexpected domain " + to_string(got));
}

}  // namespace

const char* to_string(ColorDomain domain) {
  switch (domain) {
    case ColorDomain::SrgbNonlinear: return "srgb_nonlinear";
    case ColorDomain::LinearSrgb: return "linear_srgb";
    case ColorDomain::LinearCameraRgb: return "linear_camera_rgb";
  }
  return "unknown";
}

ImagePlane::ImagePlane(Index height, Index width, Index channels, ColorDomain domain)
    : ImagePlane(height, width, channels, domain, Eigen::ArrayXd::Zero(height * width * channels)) {}

ImagePlane::ImagePlane(Index height, Index width, Index channels, ColorDomain domain,
                       Eigen::ArrayXd data)
    : height_(height), width_(width), channels_(channels), domain_(domain), data_(std::move(data)) {
  if (height < 0 || width < 0 || (channels != 1 && channels != 3))
    throw ShapeError("ImagePlane: invalid dimensions");
  if (data_.size() != height * width * channels)
    throw ShapeError("ImagePlane: data length does not match height*width*channels");
}

ImagePlane ImagePlane::constant(Index height, Index width, const Eigen::Vector3d& rgb,
                                ColorDomain domain) {
  ImagePlane img(height, width, 3, domain);
  img.pixels().colwise() = rgb;
  return img;
}

Eigen::Map<Eigen::Matrix3Xd> ImagePlane::pixels() {
  require_rgb(*this, "pixels");
  return {data_.data(), 3, pixel_count()};
}

Eigen::Map<const Eigen::Matrix3Xd> ImagePlane::pixels() const {
  require_rgb(*this, "pixels");
  return {data_.data(), 3, pixel_count()};
}

BayerPlane::BayerPlane(Index height, Index width) : BayerPlane(PlaneArray::Zero(height, width)) {}

BayerPlane::BayerPlane(PlaneArray data) : data_(std::move(data)) {
  if (data_.rows() % 2 != 0 || data_.cols() % 2 != 0)
    throw ShapeError("BayerPlane: height and width must be even");
}

CameraProfile CameraProfile::make(std::string name, const Eigen::Matrix3d& ccm,
                                  const Eigen::Vector3d& wb_gains, double gamma) {
  CameraProfile p;
  p.name = std::move(name);
  p.ccm = ccm;
  p.wb_gains = wb_gains;
  p.gamma = gamma;
  if (!ccm.allFinite() || std::abs(ccm.determinant()) < 1e-8)
    throw ProfileError("camera profile '" + p.name + "': singular color correction matrix");
  p.ccm_inv = ccm.inverse();
  validate(p);
  return p;
}

void validate(const CameraProfile& profile) {
  const std::string who = "camera profile '" + profile.name + "': ";
  if (!profile.ccm.allFinite() || std::abs(profile.ccm.determinant()) < 1e-8)
    throw ProfileError(who + "singular color correction matrix");
  if (!profile.wb_gains.allFinite() || (profile.wb_gains.array() <= 0.0).any())
    throw ProfileError(who + "white-balance gains must be strictly positive");
  if (!std::isfinite(profile.gamma) || profile.gamma <= 0.0)
    throw ProfileError(who + "gamma must be positive");
  const double residual =
      (profile.ccm * profile.ccm_inv - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (!(residual <= 1e-9)) throw ProfileError(who + "ccm_inv is not the inverse of ccm");
}

ImagePlane gamma_transfer(const ImagePlane& img, double gamma, GammaDirection direction) {
  require_finite(img, "gamma_transfer");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw DomainError("gamma_transfer: gamma must be > 0");
  ImagePlane out = img;
  if (direction == GammaDirection::Expand) {
    if (img.domain() != ColorDomain::SrgbNonlinear) domain_mismatch("gamma_transfer(expand)", img.domain());
    out.data() = img.data().cwiseMax(0.0).cwiseMin(1.0).pow(gamma);
    out.set_domain(ColorDomain::LinearSrgb);
  } else {
    if (!is_linear(img.domain())) domain_mismatch("gamma_transfer(compress)", img.domain());
    out.data() = img.data().cwiseMax(0.0).cwiseMin(1.0).pow(1.0 / gamma);
    out.set_domain(ColorDomain::SrgbNonlinear);
  }
  return out;
}

ImagePlane white_balance(const ImagePlane& img, const CameraProfile& profile,
                         TransformDirection direction, ClampPolicy clamp) {
  require_rgb(img, "white_balance");
  require_finite(img, "white_balance");
  if (!is_linear(img.domain())) domain_mismatch("white_balance", img.domain());
  if (!profile.wb_gains.allFinite() || (profile.wb_gains.array() <= 0.0).any())
    throw ProfileError("white_balance: gains must be strictly positive");
  ImagePlane out = img;
  auto px = out.pixels();
  if (direction == TransformDirection::Invert) {
    px.array().colwise() /= profile.wb_gains.array();
  } else {
    px.array().colwise() *= profile.wb_gains.array();
    if (clamp == ClampPolicy::Default) px = px.cwiseMax(0.0).cwiseMin(1.0);
  }
  return out;
}

ImagePlane color_correct(const ImagePlane& img, const CameraProfile& profile,
                         TransformDirection direction, ClampPolicy clamp) {
  require_rgb(img, "color_correct");
  require_finite(img, "color_correct");
  if (std::abs(profile.ccm.determinant()) < 1e-8)
    throw ProfileError("color_correct: singular color correction matrix");
  ImagePlane out = img;
  if (direction == TransformDirection::Apply) {
    if (img.domain() != ColorDomain::LinearCameraRgb) domain_mismatch("color_correct(apply)", img.domain());
    out.pixels() = profile.ccm * img.pixels();
    if (clamp == ClampPolicy::Default) out.pixels() = out.pixels().cwiseMax(0.0).cwiseMin(1.0);
    out.set_domain(ColorDomain::LinearSrgb);
  } else {
    if (img.domain() != ColorDomain::LinearSrgb) domain_mismatch("color_correct(invert)", img.domain());
    out.pixels() = profile.ccm_inv * img.pixels();
    out.set_domain(ColorDomain::LinearCameraRgb);
  }
  return out;
}

BayerPlane mosaic_rggb(const ImagePlane& img) {
  require_rgb(img, "mosaic_rggb");
  if (img.domain() != ColorDomain::LinearCameraRgb) domain_mismatch("mosaic_rggb", img.domain());
  if (img.height() % 2 != 0 || img.width() % 2 != 0)
    throw ShapeError("mosaic_rggb: height and width must be even");
  BayerPlane raw(img.height(), img.width());
  for (Index y = 0; y < img.height(); ++y)
    for (Index x = 0; x < img.width(); ++x)
      raw(y, x) = img(y, x, static_cast<Index>(BayerPlane::color_at(y, x)));
  return raw;
}

ImagePlane demosaic_bilinear(const BayerPlane& raw) {
  const Index h = raw.height();
  const Index w = raw.width();
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("demosaic_bilinear: height and width must be even");
  ImagePlane out(h, w, 3, ColorDomain::LinearCameraRgb);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      double sum[3] = {0.0, 0.0, 0.0};
      int count[3] = {0, 0, 0};
      for (Index dy = -1; dy <= 1; ++dy) {
        const Index yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (Index dx = -1; dx <= 1; ++dx) {
          const Index xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          const auto c = static_cast<int>(BayerPlane::color_at(yy, xx));
          sum[c] += raw(yy, xx);
          ++count[c];
        }
      }
      const auto own = static_cast<int>(BayerPlane::color_at(y, x));
      for (int c = 0; c < 3; ++c)
        out(y, x, c) = c == own ? raw(y, x) : sum[c] / count[c];
    }
  }
  return out;
}

ImagePlane crop_to_even(const ImagePlane& img) {
  const Index h = img.height() - img.height() % 2;
  const Index w = img.width() - img.width() % 2;
  if (h == img.height() && w == img.width()) return img;
  const Index y0 = (img.height() - h) / 2;
  const Index x0 = (img.width() - w) / 2;
  ImagePlane out(h, w, img.channels(), img.domain());
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < img.channels(); ++c) out(y, x, c) = img(y + y0, x + x0, c);
  return out;
}

}  // namespace rawshield
