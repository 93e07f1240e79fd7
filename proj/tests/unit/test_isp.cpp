#include <gtest/gtest.h>

#include <cmath>

#include "rawshield/isp.hpp"
#include "rawshield/profiles.hpp"
#include "rawshield/rng.hpp"

using namespace rawshield;

namespace {

ImagePlane random_image(Index h, Index w, ColorDomain domain, std::uint64_t seed,
                        double lo = 0.0, double hi = 1.0) {
  CounterRng rng(seed);
  ImagePlane img(h, w, 3, domain);
  for (Index i = 0; i < img.data().size(); ++i) img.data()(i) = rng.uniform(lo, hi);
  return img;
}

CameraProfile test_profile(const Eigen::Vector3d& gains) {
  CameraProfile p = bundled_profile("canon_5d_like");
  return CameraProfile::make("test", p.ccm, gains);
}

}  // namespace

TEST(GammaTransfer, Endpoints) {
  ImagePlane one = ImagePlane::constant(2, 2, Eigen::Vector3d::Ones(), ColorDomain::SrgbNonlinear);
  EXPECT_EQ(gamma_transfer(one, 2.2, GammaDirection::Expand).data()(0), 1.0);
  ImagePlane zero(2, 2, 3, ColorDomain::LinearSrgb);
  EXPECT_EQ(gamma_transfer(zero, 2.2, GammaDirection::Compress).data()(0), 0.0);
}

TEST(GammaTransfer, ExpandMidGray) {
  ImagePlane half = ImagePlane::constant(1, 1, Eigen::Vector3d::Constant(0.5), ColorDomain::SrgbNonlinear);
  const ImagePlane lin = gamma_transfer(half, 2.2, GammaDirection::Expand);
  EXPECT_NEAR(lin.data()(0), 0.21763764082403103, 1e-15);
  EXPECT_EQ(lin.domain(), ColorDomain::LinearSrgb);
}

TEST(GammaTransfer, RoundTripProperty) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ImagePlane img = random_image(4, 6, ColorDomain::SrgbNonlinear, seed);
    const ImagePlane back = gamma_transfer(gamma_transfer(img, 2.2, GammaDirection::Expand), 2.2,
                                           GammaDirection::Compress);
    EXPECT_LT((back.data() - img.data()).abs().maxCoeff(), 1e-9);
  }
}

TEST(GammaTransfer, Errors) {
  ImagePlane lin(2, 2, 3, ColorDomain::LinearSrgb);
  EXPECT_THROW(gamma_transfer(lin, 2.2, GammaDirection::Expand), DomainMismatchError);
  ImagePlane srgb(2, 2, 3, ColorDomain::SrgbNonlinear);
  EXPECT_THROW(gamma_transfer(srgb, 2.2, GammaDirection::Compress), DomainMismatchError);
  srgb.data()(3) = std::nan("");
  EXPECT_THROW(gamma_transfer(srgb, 2.2, GammaDirection::Expand), InputError);
}

TEST(WhiteBalance, IdentityGains) {
  const ImagePlane img = random_image(3, 4, ColorDomain::LinearCameraRgb, 7);
  const CameraProfile p = CameraProfile::identity();
  EXPECT_TRUE((white_balance(img, p, TransformDirection::Apply).data() == img.data()).all());
}

TEST(WhiteBalance, InvertDivides) {
  const ImagePlane img = ImagePlane::constant(1, 1, Eigen::Vector3d::Constant(0.2), ColorDomain::LinearSrgb);
  const ImagePlane out = white_balance(img, test_profile({2.0, 1.0, 1.6}), TransformDirection::Invert);
  EXPECT_NEAR(out(0, 0, 0), 0.1, 1e-15);
  EXPECT_NEAR(out(0, 0, 1), 0.2, 1e-15);
  EXPECT_NEAR(out(0, 0, 2), 0.125, 1e-15);
}

TEST(WhiteBalance, RoundTrip) {
  const CameraProfile p = test_profile({1.9, 1.0, 1.7});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ImagePlane img = random_image(4, 4, ColorDomain::LinearCameraRgb, seed);
    const ImagePlane back = white_balance(white_balance(img, p, TransformDirection::Invert), p,
                                          TransformDirection::Apply);
    EXPECT_LT((back.data() - img.data()).abs().maxCoeff(), 1e-12);
  }
}

TEST(WhiteBalance, InvertDoesNotClampAboveOne) {
  const ImagePlane img = ImagePlane::constant(1, 1, Eigen::Vector3d::Constant(0.9), ColorDomain::LinearSrgb);
  const ImagePlane out = white_balance(img, test_profile({0.5, 1.0, 1.0}), TransformDirection::Invert);
  EXPECT_NEAR(out(0, 0, 0), 1.8, 1e-15);
}

TEST(WhiteBalance, RejectsNonPositiveGain) {
  CameraProfile p = CameraProfile::identity();
  p.wb_gains = {1.0, 0.0, 1.0};
  const ImagePlane img(1, 1, 3, ColorDomain::LinearSrgb);
  EXPECT_THROW(white_balance(img, p, TransformDirection::Apply), ProfileError);
  EXPECT_THROW(CameraProfile::make("bad", Eigen::Matrix3d::Identity(), {1.0, -1.0, 1.0}), ProfileError);
}

TEST(ColorCorrect, IdentityMatrix) {
  const ImagePlane img = random_image(2, 3, ColorDomain::LinearCameraRgb, 3);
  const ImagePlane out = color_correct(img, CameraProfile::identity(), TransformDirection::Apply);
  EXPECT_TRUE((out.data() == img.data()).all());
  EXPECT_EQ(out.domain(), ColorDomain::LinearSrgb);
}

TEST(ColorCorrect, MatrixVectorProductPreClamp) {
  Eigen::Matrix3d ccm;
  ccm << 2, -1, 0, -0.5, 1.5, 0, 0, -0.5, 1.5;
  const CameraProfile p = CameraProfile::make("m", ccm, Eigen::Vector3d::Ones());
  const ImagePlane red = ImagePlane::constant(1, 1, {1.0, 0.0, 0.0}, ColorDomain::LinearCameraRgb);
  const ImagePlane out = color_correct(red, p, TransformDirection::Apply, ClampPolicy::None);
  EXPECT_DOUBLE_EQ(out(0, 0, 0), 2.0);
  EXPECT_DOUBLE_EQ(out(0, 0, 1), -0.5);
  EXPECT_DOUBLE_EQ(out(0, 0, 2), 0.0);
  const ImagePlane clamped = color_correct(red, p, TransformDirection::Apply);
  EXPECT_DOUBLE_EQ(clamped(0, 0, 0), 1.0);
  EXPECT_DOUBLE_EQ(clamped(0, 0, 1), 0.0);
}

TEST(ColorCorrect, RoundTripBundled) {
  for (const auto& p : bundled_profiles()) {
    const ImagePlane img = random_image(4, 4, ColorDomain::LinearSrgb, 11);
    const ImagePlane back = color_correct(color_correct(img, p, TransformDirection::Invert), p,
                                          TransformDirection::Apply, ClampPolicy::None);
    EXPECT_LT((back.data() - img.data()).abs().maxCoeff(), 1e-9) << p.name;
  }
}

TEST(ColorCorrect, SingularMatrixRejected) {
  Eigen::Matrix3d singular;
  singular << 1, 2, 3, 2, 4, 6, 0, 0, 1;
  EXPECT_THROW(CameraProfile::make("s", singular, Eigen::Vector3d::Ones()), ProfileError);
}

TEST(Mosaic, ConstantImage) {
  const ImagePlane img = ImagePlane::constant(4, 4, {0.3, 0.5, 0.7}, ColorDomain::LinearCameraRgb);
  const BayerPlane raw = mosaic_rggb(img);
  for (Index y = 0; y < 4; y += 2)
    for (Index x = 0; x < 4; x += 2) {
      EXPECT_EQ(raw(y, x), 0.3);
      EXPECT_EQ(raw(y, x + 1), 0.5);
      EXPECT_EQ(raw(y + 1, x), 0.5);
      EXPECT_EQ(raw(y + 1, x + 1), 0.7);
    }
}

TEST(Mosaic, ReadsCorrectChannelPerSite) {
  ImagePlane img(2, 2, 3, ColorDomain::LinearCameraRgb);
  for (Index y = 0; y < 2; ++y)
    for (Index x = 0; x < 2; ++x)
      for (Index c = 0; c < 3; ++c) img(y, x, c) = 100 * y + 10 * x + c;
  const BayerPlane raw = mosaic_rggb(img);
  EXPECT_EQ(raw(0, 0), 0.0);    // R at (0,0)
  EXPECT_EQ(raw(0, 1), 11.0);   // G at (0,1)
  EXPECT_EQ(raw(1, 0), 101.0);  // G at (1,0)
  EXPECT_EQ(raw(1, 1), 112.0);  // B at (1,1)
}

TEST(Mosaic, GrayImageIsGrayChannel) {
  const ImagePlane gray = random_image(6, 6, ColorDomain::LinearCameraRgb, 5);
  ImagePlane img = gray;
  for (Index i = 0; i < img.pixel_count(); ++i) img.pixels().col(i).setConstant(gray.pixels()(0, i));
  const BayerPlane raw = mosaic_rggb(img);
  for (Index y = 0; y < 6; ++y)
    for (Index x = 0; x < 6; ++x) EXPECT_EQ(raw(y, x), img(y, x, 0));
}

TEST(Mosaic, OddDimensionsRejected) {
  const ImagePlane img(3, 4, 3, ColorDomain::LinearCameraRgb);
  EXPECT_THROW(mosaic_rggb(img), ShapeError);
  EXPECT_THROW(mosaic_rggb(ImagePlane(4, 4, 3, ColorDomain::LinearSrgb)), DomainMismatchError);
}

TEST(Demosaic, ConstantFieldIsFixedPoint) {
  const ImagePlane img = ImagePlane::constant(6, 8, {0.3, 0.5, 0.7}, ColorDomain::LinearCameraRgb);
  const ImagePlane out = demosaic_bilinear(mosaic_rggb(img));
  EXPECT_LT((out.data() - img.data()).abs().maxCoeff(), 1e-15);
}

TEST(Demosaic, LinearRampInterior) {
  // Bilinear interpolation is exact on affine fields away from the border.
  const Index n = 16;
  ImagePlane ramp(n, n, 3, ColorDomain::LinearCameraRgb);
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) {
      ramp(y, x, 0) = 0.1 + 0.03 * x + 0.01 * y;
      ramp(y, x, 1) = 0.2 + 0.02 * y;
      ramp(y, x, 2) = 0.8 - 0.02 * x - 0.015 * y;
    }
  const ImagePlane out = demosaic_bilinear(mosaic_rggb(ramp));
  double worst = 0.0;
  for (Index y = 2; y < n - 2; ++y)
    for (Index x = 2; x < n - 2; ++x)
      for (Index c = 0; c < 3; ++c) worst = std::max(worst, std::abs(out(y, x, c) - ramp(y, x, c)));
  EXPECT_LT(worst, 2.0 / 255.0);
  EXPECT_LT(worst, 1e-12);
}

TEST(Demosaic, HotPixelAtRedSite) {
  BayerPlane raw(6, 6);
  raw(2, 2) = 1.0;
  const ImagePlane out = demosaic_bilinear(raw);
  EXPECT_EQ(out(2, 2, 0), 1.0);
  EXPECT_EQ(out(2, 2, 1), 0.0);
  EXPECT_EQ(out(2, 2, 2), 0.0);
  // Horizontal green neighbor sees the red sample as one of two red neighbors.
  EXPECT_DOUBLE_EQ(out(2, 3, 0), 0.5);
  // Diagonal blue neighbor sees it as one of four.
  EXPECT_DOUBLE_EQ(out(3, 3, 0), 0.25);
}

TEST(Demosaic, SampledSitesReproduceRaw) {
  CounterRng rng(9);
  BayerPlane raw(8, 10);
  for (Index i = 0; i < raw.size(); ++i) raw.data().data()[i] = rng.uniform();
  const ImagePlane out = demosaic_bilinear(raw);
  const BayerPlane back = mosaic_rggb(out);
  EXPECT_TRUE((back.data() == raw.data()).all());
}

TEST(Demosaic, IsLinear) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CounterRng rng(seed);
    BayerPlane a(6, 8), b(6, 8);
    for (Index i = 0; i < a.size(); ++i) {
      a.data().data()[i] = rng.uniform(-1, 1);
      b.data().data()[i] = rng.uniform(-1, 1);
    }
    const double s = rng.uniform(-2, 2), t = rng.uniform(-2, 2);
    const BayerPlane mix(s * a.data() + t * b.data());
    const Eigen::ArrayXd lhs = demosaic_bilinear(mix).data();
    const Eigen::ArrayXd rhs = s * demosaic_bilinear(a).data() + t * demosaic_bilinear(b).data();
    EXPECT_LT((lhs - rhs).abs().maxCoeff(), 1e-9);
  }
}

TEST(Demosaic, Pure) {
  CounterRng rng(1);
  BayerPlane raw(4, 4);
  for (Index i = 0; i < raw.size(); ++i) raw.data().data()[i] = rng.uniform();
  EXPECT_TRUE((demosaic_bilinear(raw).data() == demosaic_bilinear(raw).data()).all());
}

TEST(Profiles, BundledInvariants) {
  ASSERT_GE(bundled_profiles().size(), 3u);
  for (const auto& p : bundled_profiles()) {
    EXPECT_LT((p.ccm * p.ccm_inv - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_TRUE((p.wb_gains.array() > 0).all());
    EXPECT_TRUE(preserves_white_point(p)) << p.name;
    EXPECT_DOUBLE_EQ(p.gamma, 2.2);
  }
}

TEST(Profiles, DataFilesMatchBundled) {
  for (const auto& p : bundled_profiles()) {
    const CameraProfile loaded =
        load_profile(std::filesystem::path(RAWSHIELD_DATA_DIR) / "profiles" / (p.name + ".json"));
    EXPECT_EQ(loaded.ccm, p.ccm) << p.name;
    EXPECT_EQ(loaded.wb_gains, p.wb_gains) << p.name;
  }
}

TEST(Profiles, JsonRoundTripAndValidation) {
  const CameraProfile& p = bundled_profile("nikon_d700_like");
  const CameraProfile back = profile_from_json(profile_to_json(p));
  EXPECT_EQ(back.ccm, p.ccm);
  auto bad = profile_to_json(p);
  bad["wb_gains"][2] = 0.0;
  EXPECT_THROW(profile_from_json(bad), ProfileError);
  bad = profile_to_json(p);
  bad["ccm"] = {{1, 0, 0}, {0, 1, 0}};
  EXPECT_THROW(profile_from_json(bad), ProfileError);
  EXPECT_THROW(bundled_profile("leica"), ProfileError);
}

TEST(Profiles, SampledGainsInRange) {
  CounterRng rng(4);
  for (int i = 0; i < 200; ++i) {
    const CameraProfile p = sample_profile(rng);
    EXPECT_GE(p.wb_gains[0], 1.2);
    EXPECT_LE(p.wb_gains[0], 2.4);
    EXPECT_EQ(p.wb_gains[1], 1.0);
    EXPECT_GE(p.wb_gains[2], 1.2);
    EXPECT_LE(p.wb_gains[2], 2.4);
    EXPECT_NO_THROW(validate(p));
  }
}
