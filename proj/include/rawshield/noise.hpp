#pragma once

#include <cmath>
#include <string>

#include "rawshield/isp.hpp"
#include "rawshield/rng.hpp"

namespace rawshield {

/// Physical Poisson–Gaussian parameters in normalized RAW units:
/// variance at signal x is k·x + sigma².
struct NoiseParams {
  double k = 0.0;
  double sigma = 0.0;

  friend bool operator==(const NoiseParams&, const NoiseParams&) = default;
};

/// Log-linear encoding of NoiseParams onto [0,1]², the target space of the
/// noise predictor's sigmoid outputs.
struct NormalizedNoiseParams {
  double k_n = 0.0;
  double sigma_n = 0.0;

  friend bool operator==(const NormalizedNoiseParams&, const NormalizedNoiseParams&) = default;
};

/// Sampling ranges for attack parameters.
namespace noise_range {
inline constexpr double k_min = 1e-3;
inline constexpr double k_max = 1e-2;
inline constexpr double sigma_min = 1e-4;
inline constexpr double sigma_max = 5e-3;
}  // namespace noise_range

enum class InjectionMode { GaussApprox, ExactPoissonGaussian };

const char* to_string(InjectionMode mode);  // "gauss" | "pg"
InjectionMode injection_mode_from_string(const std::string& name);

/// log10(k) ~ U[-3, -2], log10(sigma) ~ U[-4, log10(5e-3)].
NoiseParams sample_noise_params(CounterRng& rng);

/// k·intensity + sigma². Throws DomainError for negative or non-finite intensity.
double noise_variance(double intensity, const NoiseParams& params);

/// Heteroscedastic RAW noise. Negative inputs are clamped to 0 first; the
/// output is not clamped.
///  GaussApprox:           x̂ ~ N(x, k·x + sigma²)
///  ExactPoissonGaussian:  x̂ = k·Poisson(x/k) + N(0, sigma²)   (Poisson skipped when k = 0)
BayerPlane inject_noise(const BayerPlane& raw, const NoiseParams& params, InjectionMode mode,
                        CounterRng& rng);

struct EncodedNoiseParams {
  NormalizedNoiseParams value;
  bool clamped = false;  ///< input was outside the sampling ranges
};

EncodedNoiseParams normalize(const NoiseParams& params);
NoiseParams denormalize(const NormalizedNoiseParams& params);

}  // namespace rawshield
