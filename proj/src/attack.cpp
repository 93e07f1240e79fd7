#include "rawshield/attack.hpp"

#include <algorithm>
#include <random>

namespace rawshield {

BayerPlane inverse_isp(const ImagePlane& img, const CameraProfile& profile) {
  if (img.domain() != ColorDomain::SrgbNonlinear)
    throw DomainMismatchError("inverse_isp: expected an sRGB image");
  ImagePlane linear = gamma_transfer(img, profile.gamma, GammaDirection::Expand);
  ImagePlane camera = color_correct(linear, profile, TransformDirection::Invert);
  ImagePlane balanced = white_balance(camera, profile, TransformDirection::Invert);
  return mosaic_rggb(balanced);
}

ImagePlane forward_isp(const BayerPlane& raw, const CameraProfile& profile,
                       const Demosaicer& demosaic) {
  ImagePlane camera = demosaic(raw);
  ImagePlane balanced = white_balance(camera, profile, TransformDirection::Apply, ClampPolicy::None);
  ImagePlane linear = color_correct(balanced, profile, TransformDirection::Apply);
  return gamma_transfer(linear, profile.gamma, GammaDirection::Compress);
}

DegradedSample synthesize_attack(const ImagePlane& img_normal, const AttackOptions& options,
                                 std::uint64_t seed) {
  const CounterRng root(seed);
  DegradedSample sample;
  sample.seed = seed;
  sample.mode = options.mode;
  if (options.profile) {
    validate(*options.profile);
    sample.profile = *options.profile;
  } else {
    CounterRng rng = root.fork(attack_stream::profile);
    sample.profile = sample_profile(rng, options.wb_range);
  }
  if (options.params) {
    sample.attack = *options.params;
  } else {
    CounterRng rng = root.fork(attack_stream::params);
    sample.attack = sample_noise_params(rng);
  }

  ImagePlane source = crop_to_even(img_normal);
  sample.cropped = source.height() != img_normal.height() || source.width() != img_normal.width();

  const BayerPlane clean = inverse_isp(source, sample.profile);
  CounterRng noise_rng = root.fork(attack_stream::noise);
  const BayerPlane attacked = inject_noise(clean, sample.attack, options.mode, noise_rng);
  sample.image = forward_isp(attacked, sample.profile);
  return sample;
}

PerturbedPair perturb_lowlight(const ImagePlane& img_input, std::optional<double> sigma_per,
                               const CameraProfile& profile, std::uint64_t seed,
                               InjectionMode mode) {
  double sp;
  if (sigma_per) {
    sp = *sigma_per;
  } else {
    CounterRng rng = CounterRng(seed).fork(attack_stream::sigma_per);
    sp = rng.uniform(kSigmaPerMin, kSigmaPerMax);
  }
  if (!(sp > 0.0) || !std::isfinite(sp)) throw DomainError("perturb_lowlight: sigma_per must be > 0");

  AttackOptions options;
  options.profile = profile;
  options.params = NoiseParams{0.0, sp};
  options.mode = mode;
  DegradedSample attacked = synthesize_attack(img_input, options, seed);

  PerturbedPair pair;
  pair.original = crop_to_even(img_input);
  pair.perturbed = std::move(attacked.image);
  pair.sigma_per = sp;
  pair.k_per = 0.0;
  pair.seed = seed;
  return pair;
}

ImagePlane inject_srgb_gaussian(const ImagePlane& img, double stddev, std::uint64_t seed) {
  if (!(stddev >= 0.0)) throw DomainError("inject_srgb_gaussian: stddev must be >= 0");
  ImagePlane out = img;
  if (stddev == 0.0) {
    out.data() = out.data().cwiseMax(0.0).cwiseMin(1.0);
    return out;
  }
  CounterRng rng = CounterRng(seed).fork(attack_stream::noise);
  std::normal_distribution<double> normal(0.0, stddev);
  for (Index i = 0; i < out.data().size(); ++i)
    out.data()(i) = std::clamp(out.data()(i) + normal(rng), 0.0, 1.0);
  return out;
}

}  // namespace rawshield
