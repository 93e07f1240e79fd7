#pragma once

#include <Eigen/Dense>

#include <string>

#include "rawshield/errors.hpp"

namespace rawshield {

using Eigen::Index;

/// Color domain carried by an ImagePlane so that pipeline stages can refuse
/// inputs from the wrong side of the ISP.
enum class ColorDomain { SrgbNonlinear, LinearSrgb, LinearCameraRgb };

const char* to_string(ColorDomain domain);

/// Interleaved (HWC, row-major) floating point image.
class ImagePlane {
 public:
  ImagePlane() = default;
  ImagePlane(Index height, Index width, Index channels, ColorDomain domain);
  ImagePlane(Index height, Index width, Index channels, ColorDomain domain, Eigen::ArrayXd data);

  static ImagePlane constant(Index height, Index width, const Eigen::Vector3d& rgb,
                             ColorDomain domain);

  Index height() const { return height_; }
  Index width() const { return width_; }
  Index channels() const { return channels_; }
  Index pixel_count() const { return height_ * width_; }
  ColorDomain domain() const { return domain_; }
  void set_domain(ColorDomain domain) { domain_ = domain; }

  const Eigen::ArrayXd& data() const { return data_; }
  Eigen::ArrayXd& data() { return data_; }

  double operator()(Index y, Index x, Index c) const {
    return data_[(y * width_ + x) * channels_ + c];
  }
  double& operator()(Index y, Index x, Index c) { return data_[(y * width_ + x) * channels_ + c]; }

  /// 3×N view with one column per pixel; requires channels() == 3.
  Eigen::Map<Eigen::Matrix3Xd> pixels();
  Eigen::Map<const Eigen::Matrix3Xd> pixels() const;

  bool all_finite() const { return data_.allFinite(); }

 private:
  Index height_ = 0;
  Index width_ = 0;
  Index channels_ = 0;
  ColorDomain domain_ = ColorDomain::SrgbNonlinear;
  Eigen::ArrayXd data_;
};

using PlaneArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class BayerColor { Red = 0, Green = 1, Blue = 2 };

/// Single-plane RGGB mosaic at full sensor resolution.
class BayerPlane {
 public:
  BayerPlane() = default;
  BayerPlane(Index height, Index width);
  explicit BayerPlane(PlaneArray data);

  Index height() const { return data_.rows(); }
  Index width() const { return data_.cols(); }
  Index size() const { return data_.size(); }

  const PlaneArray& data() const { return data_; }
  PlaneArray& data() { return data_; }
  double operator()(Index y, Index x) const { return data_(y, x); }
  double& operator()(Index y, Index x) { return data_(y, x); }

  /// Filter color at a site: (0,0) R, (0,1) G, (1,0) G, (1,1) B.
  static BayerColor color_at(Index y, Index x) {
    const int parity = static_cast<int>((y & 1) * 2 + (x & 1));
    return parity == 0 ? BayerColor::Red : parity == 3 ? BayerColor::Blue : BayerColor::Green;
  }

 private:
  PlaneArray data_;
};

/// One simulated sensor: color correction (camera RGB → linear sRGB),
/// white-balance gains and the display gamma.
struct CameraProfile {
  std::string name;
  Eigen::Matrix3d ccm = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d ccm_inv = Eigen::Matrix3d::Identity();
  Eigen::Vector3d wb_gains = Eigen::Vector3d::Ones();
  double gamma = 2.2;

  /// Validates the inputs and precomputes ccm_inv.
  static CameraProfile make(std::string name, const Eigen::Matrix3d& ccm,
                            const Eigen::Vector3d& wb_gains, double gamma = 2.2);

  static CameraProfile identity() { return make("identity", Eigen::Matrix3d::Identity(), Eigen::Vector3d::Ones()); }
};

/// Throws ProfileError on singular ccm, non-positive gains, bad gamma or a
/// stale inverse.
void validate(const CameraProfile& profile);

enum class GammaDirection { Expand, Compress };
enum class TransformDirection { Apply, Invert };

/// Clamp behaviour for the operations whose default clamps.
enum class ClampPolicy { Default, None };

/// Power-law transfer: Expand maps x ↦ x^gamma (sRGB → linear sRGB),
/// Compress maps x ↦ x^(1/gamma) (any linear domain → sRGB). Inputs are
/// clamped to [0, 1] before the power so linear headroom never yields NaN.
ImagePlane gamma_transfer(const ImagePlane& img, double gamma, GammaDirection direction);

/// Invert divides channel c by wb_gains[c] without clamping; Apply multiplies
/// and clamps to [0, 1] unless `clamp` is None.
ImagePlane white_balance(const ImagePlane& img, const CameraProfile& profile,
                         TransformDirection direction, ClampPolicy clamp = ClampPolicy::Default);

/// Apply: camera RGB → linear sRGB through ccm (clamped by default).
/// Invert: linear sRGB → camera RGB through ccm_inv (never clamped).
ImagePlane color_correct(const ImagePlane& img, const CameraProfile& profile,
                         TransformDirection direction, ClampPolicy clamp = ClampPolicy::Default);

BayerPlane mosaic_rggb(const ImagePlane& img);

/// Bilinear RGGB demosaic. Each missing color is the mean of the same-color
/// sites inside the 3×3 window that fall within the image, which reduces to
/// the standard bilinear kernel in the interior and keeps constant fields
/// fixed at the borders. Output is linear camera RGB, unclamped.
ImagePlane demosaic_bilinear(const BayerPlane& raw);

/// Center crop to even height and width (no-op when already even).
ImagePlane crop_to_even(const ImagePlane& img);

}  // namespace rawshield
