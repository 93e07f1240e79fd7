#include "rawshield/noise.hpp"

#include <algorithm>
#include <random>

namespace rawshield {

namespace {

const double kLogKLo = std::log10(noise_range::k_min);
const double kLogKHi = std::log10(noise_range::k_max);
const double kLogSigmaLo = std::log10(noise_range::sigma_min);
const double kLogSigmaHi = std::log10(noise_range::sigma_max);

void check_params(const NoiseParams& p) {
  if (!std::isfinite(p.k) || !std::isfinite(p.sigma) || p.k < 0.0 || p.sigma < 0.0)
    throw DomainError("noise params must be finite and non-negative");
}

double encode_log(double value, double lo, double hi, bool& clamped) {
  const double t = value > 0.0 ? (std::log10(value) - lo) / (hi - lo) : 0.0;
  if (!(t >= 0.0 && t <= 1.0)) clamped = true;
  if (value <= 0.0) clamped = true;
  return std::clamp(t, 0.0, 1.0);
}

}  // namespace

const char* to_string(InjectionMode mode) {
  return mode == InjectionMode::GaussApprox ? "gauss" : "pg";
}

InjectionMode injection_mode_from_string(const std::string& name) {
  if (name == "gauss") return InjectionMode::GaussApprox;
  if (name == "pg") return InjectionMode::ExactPoissonGaussian;
  throw DomainError("unknown injection mode '" + name + "' (expected gauss|pg)");
}

NoiseParams sample_noise_params(CounterRng& rng) {
  const double log_k = rng.uniform(kLogKLo, kLogKHi);
  const double log_sigma = rng.uniform(kLogSigmaLo, kLogSigmaHi);
  return {std::pow(10.0, log_k), std::pow(10.0, log_sigma)};
}

double noise_variance(double intensity, const NoiseParams& params) {
  if (!std::isfinite(intensity) || intensity < 0.0)
    throw DomainError("noise_variance: intensity must be finite and >= 0");
  return params.k * intensity + params.sigma * params.sigma;
}

BayerPlane inject_noise(const BayerPlane& raw, const NoiseParams& params, InjectionMode mode,
                        CounterRng& rng) {
  if (!raw.data().allFinite()) throw InputError("inject_noise: non-finite sample");
  check_params(params);
  BayerPlane out(raw.data().cwiseMax(0.0));
  if (params.k == 0.0 && params.sigma == 0.0) return out;

  std::normal_distribution<double> normal(0.0, 1.0);
  auto& d = out.data();
  if (mode == InjectionMode::GaussApprox) {
    for (Index i = 0; i < d.size(); ++i) {
      const double x = d(i);
      d(i) = x + std::sqrt(params.k * x + params.sigma * params.sigma) * normal(rng);
    }
  } else {
    for (Index i = 0; i < d.size(); ++i) {
      double x = d(i);
      if (params.k > 0.0) {
        if (x > 0.0) {
          std::poisson_distribution<long long> shot(x / params.k);
          x = params.k * static_cast<double>(shot(rng));
        } else {
          x = 0.0;
        }
      }
      d(i) = x + params.sigma * normal(rng);
    }
  }
  return out;
}

EncodedNoiseParams normalize(const NoiseParams& params) {
  EncodedNoiseParams out;
  out.value.k_n = encode_log(params.k, kLogKLo, kLogKHi, out.clamped);
  out.value.sigma_n = encode_log(params.sigma, kLogSigmaLo, kLogSigmaHi, out.clamped);
  return out;
}

NoiseParams denormalize(const NormalizedNoiseParams& params) {
  const double kn = std::clamp(params.k_n, 0.0, 1.0);
  const double sn = std::clamp(params.sigma_n, 0.0, 1.0);
  return {std::pow(10.0, kLogKLo + kn * (kLogKHi - kLogKLo)),
          std::pow(10.0, kLogSigmaLo + sn * (kLogSigmaHi - kLogSigmaLo))};
}

}  // namespace rawshield
