#include <gtest/gtest.h>

#include <cmath>

#include "rawshield/attack.hpp"
#include "rawshield/stats.hpp"
#include "rawshield/synthetic.hpp"

using namespace rawshield;

namespace {

ImagePlane gray(Index n, double v) {
  return ImagePlane::constant(n, n, Eigen::Vector3d::Constant(v), ColorDomain::SrgbNonlinear);
}

double variance(const Eigen::ArrayXd& a) {
  return (a - a.mean()).square().sum() / static_cast<double>(a.size() - 1);
}

}  // namespace

TEST(InverseIsp, IdentityProfileReducesToGamma) {
  const BayerPlane raw = inverse_isp(gray(4, 0.6), CameraProfile::identity());
  EXPECT_LT((raw.data() - std::pow(0.6, 2.2)).abs().maxCoeff(), 1e-15);
}

TEST(InverseIsp, WhiteThroughBundledProfile) {
  const CameraProfile& p = bundled_profile("sony_alpha_like");
  const BayerPlane raw = inverse_isp(gray(4, 1.0), p);
  const Eigen::Vector3d expected = (p.ccm_inv * Eigen::Vector3d::Ones()).array() / p.wb_gains.array();
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 4; ++x)
      EXPECT_NEAR(raw(y, x), expected[static_cast<int>(BayerPlane::color_at(y, x))], 1e-12);
}

TEST(InverseIsp, PureRedEndpoint) {
  const ImagePlane red = ImagePlane::constant(4, 4, {1.0, 0.0, 0.0}, ColorDomain::SrgbNonlinear);
  const BayerPlane raw = inverse_isp(red, CameraProfile::identity());
  EXPECT_EQ(raw(0, 0), 1.0);
  EXPECT_EQ(raw(2, 2), 1.0);
  EXPECT_EQ(raw(0, 1), 0.0);
}

TEST(ForwardIsp, RoundTripConstant) {
  for (const auto& p : bundled_profiles()) {
    for (double v : {0.0, 0.1, 0.5, 0.93, 1.0}) {
      const ImagePlane img = ImagePlane::constant(6, 8, {v, 0.8 * v, 0.6 * v}, ColorDomain::SrgbNonlinear);
      const ImagePlane back = forward_isp(inverse_isp(img, p), p);
      EXPECT_LT((back.data() - img.data()).abs().maxCoeff(), 1e-12) << p.name << " v=" << v;
      EXPECT_EQ(back.domain(), ColorDomain::SrgbNonlinear);
    }
  }
}

TEST(ForwardIsp, RoundTripSmoothChartPsnr) {
  const ImagePlane chart = smooth_chart(128, 128);
  for (const auto& p : bundled_profiles()) {
    const ImagePlane back = forward_isp(inverse_isp(chart, p), p);
    EXPECT_GE(psnr(back.data(), chart.data()), 45.0) << p.name;
  }
}

TEST(ForwardIsp, ZeroRaw) {
  const ImagePlane out = forward_isp(BayerPlane(4, 6), bundled_profile("canon_5d_like"));
  EXPECT_EQ(out.data().abs().maxCoeff(), 0.0);
}

TEST(SynthesizeAttack, NoOpAttack) {
  AttackOptions opt;
  opt.profile = bundled_profile("canon_5d_like");
  opt.params = NoiseParams{0.0, 0.0};
  const ImagePlane img = ImagePlane::constant(8, 8, {0.4, 0.5, 0.3}, ColorDomain::SrgbNonlinear);
  const DegradedSample s = synthesize_attack(img, opt, 42);
  EXPECT_LT((s.image.data() - img.data()).abs().maxCoeff(), 1e-12);
  EXPECT_EQ(s.attack, (NoiseParams{0.0, 0.0}));
  EXPECT_EQ(s.seed, 42u);
}

TEST(SynthesizeAttack, NoHiddenScaling) {
  AttackOptions opt;
  opt.profile = bundled_profile("nikon_d700_like");
  opt.params = NoiseParams{0.0, 0.0};
  const ImagePlane chart = smooth_chart(32, 32);
  const DegradedSample s = synthesize_attack(chart, opt, 1);
  const ImagePlane direct = forward_isp(inverse_isp(chart, *opt.profile), *opt.profile);
  EXPECT_TRUE((s.image.data() == direct.data()).all());
}

TEST(SynthesizeAttack, StrongerParamsGiveLargerVariance) {
  AttackOptions strong, weak;
  strong.profile = weak.profile = bundled_profile("canon_5d_like");
  strong.params = NoiseParams{0.01, 0.005};
  weak.params = NoiseParams{1e-3, 1e-4};
  const ImagePlane img = gray(64, 0.5);
  const double vs = variance(synthesize_attack(img, strong, 7).image.data());
  const double vw = variance(synthesize_attack(img, weak, 7).image.data());
  EXPECT_GT(vs, vw);
}

TEST(SynthesizeAttack, RandomDrawsRecordedAndRegenerable) {
  const ImagePlane chart = smooth_chart(32, 32);
  const DegradedSample random = synthesize_attack(chart, AttackOptions{}, 314);
  EXPECT_GE(random.attack.k, 1e-3);
  EXPECT_LE(random.attack.k, 1e-2);
  EXPECT_GE(random.attack.sigma, 1e-4);
  EXPECT_LE(random.attack.sigma, 5e-3);

  AttackOptions explicit_opt;
  explicit_opt.profile = random.profile;
  explicit_opt.params = random.attack;
  const DegradedSample again = synthesize_attack(chart, explicit_opt, random.seed);
  EXPECT_TRUE((again.image.data() == random.image.data()).all());
}

TEST(SynthesizeAttack, OddInputCenterCropped) {
  const ImagePlane img = ImagePlane::constant(7, 9, {0.5, 0.5, 0.5}, ColorDomain::SrgbNonlinear);
  AttackOptions opt;
  opt.params = NoiseParams{0.0, 0.0};
  const DegradedSample s = synthesize_attack(img, opt, 0);
  EXPECT_TRUE(s.cropped);
  EXPECT_EQ(s.image.height(), 6);
  EXPECT_EQ(s.image.width(), 8);
}

TEST(PerturbLowlight, RawReferredVarianceIncrease) {
  const CameraProfile& p = bundled_profile("canon_5d_like");
  const ImagePlane dark = gray(128, 0.3);
  const PerturbedPair pair = perturb_lowlight(dark, 4e-3, p, 17);
  EXPECT_EQ(pair.k_per, 0.0);
  EXPECT_EQ(pair.sigma_per, 4e-3);
  const BayerPlane a = inverse_isp(pair.original, p);
  const BayerPlane b = inverse_isp(pair.perturbed, p);
  const Eigen::ArrayXd diff = Eigen::Map<const Eigen::ArrayXd>(b.data().data(), b.size()) -
                              Eigen::Map<const Eigen::ArrayXd>(a.data().data(), a.size());
  EXPECT_NEAR(variance(diff), 16e-6, 0.05 * 16e-6);
}

TEST(PerturbLowlight, VanishingSigma) {
  const CameraProfile& p = bundled_profile("sony_alpha_like");
  const PerturbedPair pair = perturb_lowlight(gray(16, 0.2), 1e-12, p, 3);
  EXPECT_LT((pair.perturbed.data() - pair.original.data()).abs().maxCoeff(), 1e-6);
}

TEST(PerturbLowlight, DeterministicAndValidated) {
  const CameraProfile& p = bundled_profile("canon_5d_like");
  const ImagePlane img = smooth_chart(32, 32);
  const PerturbedPair a = perturb_lowlight(img, std::nullopt, p, 5);
  const PerturbedPair b = perturb_lowlight(img, std::nullopt, p, 5);
  EXPECT_TRUE((a.perturbed.data() == b.perturbed.data()).all());
  EXPECT_GE(a.sigma_per, kSigmaPerMin);
  EXPECT_LE(a.sigma_per, kSigmaPerMax);
  EXPECT_THROW(perturb_lowlight(img, 0.0, p, 5), DomainError);
  EXPECT_THROW(perturb_lowlight(img, -1e-3, p, 5), DomainError);
}

TEST(SrgbGaussian, ClampedAndDeterministic) {
  const ImagePlane img = gray(32, 0.5);
  const ImagePlane a = inject_srgb_gaussian(img, 0.05, 9);
  const ImagePlane b = inject_srgb_gaussian(img, 0.05, 9);
  EXPECT_TRUE((a.data() == b.data()).all());
  EXPECT_GE(a.data().minCoeff(), 0.0);
  EXPECT_LE(a.data().maxCoeff(), 1.0);
  EXPECT_NEAR(variance(a.data()), 0.0025, 0.0025 * 0.1);
}
