#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include "rawshield/isp.hpp"
#include "rawshield/noise.hpp"
#include "rawshield/profiles.hpp"

namespace rawshield {

/// sRGB image degraded by the RAW-domain attack, with everything needed to
/// regenerate it bit-exactly.
struct DegradedSample {
  ImagePlane image;
  NoiseParams attack;
  CameraProfile profile;
  std::uint64_t seed = 0;
  InjectionMode mode = InjectionMode::GaussApprox;
  bool cropped = false;  ///< source had odd dimensions and was center-cropped
};

/// Low-light input and its self-perturbed copy (read noise only, k_per = 0).
struct PerturbedPair {
  ImagePlane original;
  ImagePlane perturbed;
  double sigma_per = 0.0;
  double k_per = 0.0;
  std::uint64_t seed = 0;
};

using Demosaicer = std::function<ImagePlane(const BayerPlane&)>;

/// sRGB → RAW: gamma expand, inverse CCM, inverse white balance, RGGB mosaic.
BayerPlane inverse_isp(const ImagePlane& img, const CameraProfile& profile);

/// RAW → sRGB: demosaic, white balance, CCM, gamma compress. Only the CCM
/// and gamma stages clamp, so a noiseless round trip is exact on constants.
ImagePlane forward_isp(const BayerPlane& raw, const CameraProfile& profile,
                       const Demosaicer& demosaic = demosaic_bilinear);

struct AttackOptions {
  std::optional<CameraProfile> profile;  ///< nullopt: draw from the bundled pool
  std::optional<NoiseParams> params;     ///< nullopt: sample_noise_params
  InjectionMode mode = InjectionMode::GaussApprox;
  WhiteBalanceRange wb_range;
};

/// Independent random streams derived from a sample seed, so that an explicit
/// profile/params reproduce the noise field of a RANDOM draw with the same seed.
namespace attack_stream {
inline constexpr std::uint64_t profile = 1;
inline constexpr std::uint64_t params = 2;
inline constexpr std::uint64_t noise = 3;
inline constexpr std::uint64_t sigma_per = 4;
}  // namespace attack_stream

DegradedSample synthesize_attack(const ImagePlane& img_normal, const AttackOptions& options,
                                 std::uint64_t seed);

/// Range used when sigma_per is drawn at random.
inline constexpr double kSigmaPerMin = 1e-3;
inline constexpr double kSigmaPerMax = 5e-3;

/// Adds read noise sigma_per (shot coefficient exactly 0) through the full
/// RAW-domain pipeline. Throws DomainError when sigma_per <= 0.
PerturbedPair perturb_lowlight(const ImagePlane& img_input, std::optional<double> sigma_per,
                               const CameraProfile& profile, std::uint64_t seed,
                               InjectionMode mode = InjectionMode::GaussApprox);

/// Direct sRGB-domain additive Gaussian noise, clamped to [0, 1]. The naive
/// baseline the RAW-domain attack is contrasted with.
ImagePlane inject_srgb_gaussian(const ImagePlane& img, double stddev, std::uint64_t seed);

}  // namespace rawshield
