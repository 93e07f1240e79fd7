#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rawshield/nets.hpp"
#include "rawshield/noise.hpp"

namespace rawshield::obj {

using ad::Index;
template <typename S>
using T = ad::Tensor<S>;

inline constexpr int kStages = 5;
inline constexpr std::uint64_t kSurrogateSeed = 0x5EED0F1A7ULL;
inline constexpr double kAmdEpsilon = 1e-7;

/// Frozen five-stage feature pyramid standing in for a pretrained
/// classifier. Stage i: 3×3 conv → LeakyReLU(0.2) → 2×2 average pool, with
/// channels 3→8→16→32→64→64. Each conv's filters are orthonormal (rows of a
/// QR factor of a seeded Gaussian matrix) and none of them require grad.
template <typename S>
class SurrogateFeatureExtractor {
 public:
  explicit SurrogateFeatureExtractor(std::uint64_t seed = kSurrogateSeed);

  /// img [B,3,H,W] with H, W divisible by 32.
  std::vector<T<S>> features(const T<S>& img) const;
  const std::vector<T<S>>& weights() const { return weights_; }

 private:
  std::vector<T<S>> weights_;
};

/// Mean absolute difference of two same-shape feature maps.
template <typename S>
T<S> feature_distance(const T<S>& fx, const T<S>& fy);

/// d_i(X, Y) on the extractor's stage `stage` ∈ [0, 5).
template <typename S>
T<S> perceptual_distance(const SurrogateFeatureExtractor<S>& ex, const T<S>& x, const T<S>& y, int stage);

/// eta·‖(k_n, sigma_n)‖₂ on normalized parameters.
double dynamic_margin(const NormalizedNoiseParams& attack, double eta);
/// Normalizes (with clamping) and applies the normalized-space margin.
double dynamic_margin(const NoiseParams& attack, double eta);

/// Σ_i d_normal[i] / (max(d_att[i] − margin, 0) + 1e-7) over scalar distances.
template <typename S>
T<S> amd_ratio(const std::vector<T<S>>& d_normal, const std::vector<T<S>>& d_att, double margin);

/// Adaptive metric loss for one image. `normal` and `att` are treated as
/// constants; gradients reach `output` through numerator and denominator.
template <typename S>
T<S> amd_loss(const SurrogateFeatureExtractor<S>& ex, const T<S>& output, const T<S>& normal, const T<S>& att,
              double margin);

/// Predictor terms for one degraded sample and one perturbed pair.
template <typename S>
struct DualDomainTerms {
  T<S> np_normal;
  T<S> np_low;
};

/// ‖pred − target‖² with a constant target.
template <typename S>
T<S> squared_error(const T<S>& pred, const NormalizedNoiseParams& target);

/// Self-perturbation target in normalized space: decode `original_pred`,
/// add sigma_per in quadrature to sigma, keep k, re-encode (clamped).
NormalizedNoiseParams perturbed_target(const NormalizedNoiseParams& original_pred, double sigma_per);

/// np_low from explicit predictions; `original_pred` carries no gradient.
template <typename S>
T<S> np_low_from_predictions(const NormalizedNoiseParams& original_pred, const T<S>& perturbed_pred,
                             double sigma_per);

/// Runs the predictor on the three images ([1,3,H,W] each). The prediction on
/// `original` is evaluated without recording.
template <typename S>
DualDomainTerms<S> dual_domain_loss(const nets::NoisePredictorNet<S>& net, const T<S>& att,
                                    const NormalizedNoiseParams& att_target, const T<S>& original,
                                    const T<S>& perturbed, double sigma_per, bool use_normal = true,
                                    bool use_low = true);

template <typename S>
T<S> consist_loss(const T<S>& np_normal, const T<S>& np_low);

/// mean |output − normal|.
template <typename S>
T<S> reconstruction_loss(const T<S>& output, const T<S>& normal);

struct LossWeights {
  double lambda_con = 0.5;
  double lambda_met = 0.01;
};

struct LossReport {
  double total = 0.0;
  double rec = 0.0;
  double consist = 0.0;
  double np_normal = 0.0;
  double np_low = 0.0;
  double metric = 0.0;
  double margin_used = 0.0;
};

template <typename S>
struct TotalLoss {
  T<S> total;
  LossReport report;
};

/// total = rec + lambda_con·consist + lambda_met·metric. Undefined inputs
/// count as zero (ablations drop whole terms).
template <typename S>
TotalLoss<S> total_loss(const T<S>& rec, const T<S>& consist, const T<S>& metric, const LossWeights& weights = {});

}  // namespace rawshield::obj
