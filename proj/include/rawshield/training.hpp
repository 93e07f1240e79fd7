#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rawshield/attack.hpp"
#include "rawshield/nets.hpp"
#include "rawshield/objectives.hpp"

namespace rawshield::train {

using ad::Index;

// ---- optimizer -----------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list. Moments are stored in
/// the parameter scalar type so a checkpoint restores them exactly.
template <typename S>
class Adam {
 public:
  using Array = typename ad::Tensor<S>::Array;

  Adam(nets::ParamList<S> params, const AdamConfig& config = {});

  /// Applies one update from the accumulated grads times `grad_scale`, then
  /// zeroes them. Throws NumericFault naming the parameter on NaN/Inf.
  void step(double grad_scale = 1.0);
  void zero_grad();

  std::int64_t step_count() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  const nets::ParamList<S>& params() const { return params_; }
  std::vector<Array>& first_moments() { return m_; }
  std::vector<Array>& second_moments() { return v_; }
  const std::vector<Array>& first_moments() const { return m_; }
  const std::vector<Array>& second_moments() const { return v_; }
  void set_step_count(std::int64_t n) { steps_ = n; }
  /// Throws DomainError unless lr > 0.
  void set_lr(double lr);

 private:
  nets::ParamList<S> params_;
  AdamConfig config_;
  std::vector<Array> m_, v_;
  std::int64_t steps_ = 0;
};

/// Parameters (and optionally Adam moments) as ADT1 + JSON index. Moments
/// are stored as "<name>#m" / "<name>#v" with the step count in the meta.
template <typename S>
void save_checkpoint(const std::filesystem::path& path, const nets::ParamList<S>& params, const Adam<S>* adam = nullptr,
                     const nlohmann::json& meta = {});
/// Loads by name; every parameter must be present with a matching shape.
/// Returns the stored meta.
template <typename S>
nlohmann::json load_checkpoint(const std::filesystem::path& path, const nets::ParamList<S>& params,
                               Adam<S>* adam = nullptr);

// ---- data ------------------------------------------------------------------------

enum class Synthesis { Pds, SrgbGaussian };

struct ToyDataOptions {
  Index patch_size = 64;
  InjectionMode mode = InjectionMode::ExactPoissonGaussian;
  double brightness_min = 0.05;
  double brightness_max = 0.3;
  /// SrgbGaussian replaces every RAW-domain degradation by direct sRGB
  /// Gaussian noise of the same per-image RMS (the "no PDS" ablation). The
  /// parameter labels are kept.
  Synthesis synthesis = Synthesis::Pds;
};

struct ToySample {
  ImagePlane clean;
  ImagePlane lowlight_clean;  ///< darkened, noiseless
  double brightness = 1.0;
  DegradedSample degraded;     ///< attack on `clean`
  DegradedSample lowlight;     ///< attack on `lowlight_clean`
  PerturbedPair pair;          ///< self-perturbation of lowlight.image
  std::uint64_t seed = 0;
};

struct ToyDataset {
  std::vector<ToySample> samples;
  std::uint64_t seed = 0;
  ToyDataOptions options;
};

/// Sample i is generated from derive_seed(seed, i) alone, so datasets of
/// different sizes share their prefixes. Throws Error for n = 0.
ToyDataset synth_toy_dataset(Index n, std::uint64_t seed, const ToyDataOptions& options = {});

/// FNV-1a over every sample's pixels and labels.
std::uint64_t dataset_digest(const ToyDataset& data);

// ---- predictor training -------------------------------------------------------

struct PredictorTrainConfig {
  int epochs = 200;
  double lr = 1e-3;
  Index batch = 1;
  /// Random square crop per sample and step (0 = full patch).
  Index crop = 32;
  bool use_normal = true;
  bool use_low = true;
  /// Random flip/transpose of every crop.
  bool augment = false;
  /// Cosine decay from lr to lr·lr_final_ratio over the run (1 = constant).
  double lr_final_ratio = 1.0;
  std::uint64_t seed = 0;
};

/// Learning rate for a 0-based epoch under cosine decay.
double cosine_lr(double lr, double final_ratio, int epoch, int epochs);

struct PredictorEval {
  double spearman_sigma = 0.0;
  double spearman_k = 0.0;
  double mse = 0.0;  ///< normalized-space squared error, averaged over samples
  std::vector<NormalizedNoiseParams> predicted;
};

struct PredictorTrainResult {
  std::vector<double> epoch_loss;
  std::vector<std::string> dead_parameters;  ///< never received a nonzero grad in epoch 1
  PredictorEval heldout;
};

/// Predicts on the full degraded images of `data`.
PredictorEval evaluate_predictor(const nets::NoisePredictorNet<float>& net, const ToyDataset& data);

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Minimizes the dual-domain consistency loss. Throws NumericFault on
/// divergence (parameters are restored to the end of the last good epoch).
PredictorTrainResult train_noise_predictor(nets::NoisePredictorNet<float>& net, const ToyDataset& train,
                                           const ToyDataset& heldout, const PredictorTrainConfig& config,
                                           const EpochCallback& on_epoch = {});

// ---- defense training --------------------------------------------------------

struct DefenseTrainConfig {
  int epochs = 20;
  double lr = 1e-3;
  Index batch = 4;
  Index crop = 32;  ///< must be a multiple of 32
  obj::LossWeights weights;
  double eta = 0.05;
  bool use_consist = true;
  bool use_metric = true;
  bool freeze_predictor = false;
  double lr_final_ratio = 1.0;
  /// Rescales a step's averaged gradient to at most this global L2 norm
  /// (0 = off).
  double clip_norm = 0.0;
  std::uint64_t seed = 0;
};

struct DefenseSystem {
  nets::NoisePredictorNet<float> predictor;
  nets::ToyBackbone<float> backbone;

  DefenseSystem(const nets::PredictorConfig& p, const nets::BackboneConfig& b, std::uint64_t seed)
      : predictor(p, derive_seed(seed, 1)), backbone(b, derive_seed(seed, 2)) {}

  /// Restored image for a [1,3,H,W] degraded input.
  ad::TensorF restore(const ad::TensorF& degraded) const;
  nets::ParamList<float> parameters(bool include_predictor = true) const;
};

struct DefenseEval {
  double mae = 0.0;        ///< mean |restored − clean| over the held-out degraded images
  double input_mae = 0.0;  ///< same for the unrestored inputs
  double gate_delta = 0.0; ///< mean |w_g(high sigma) − w_g(low sigma)| over decoder gates
};

struct DefenseTrainResult {
  std::vector<obj::LossReport> steps;
  std::vector<double> epoch_loss;
  std::vector<std::string> dead_parameters;
  DefenseEval heldout;
};

/// `test` must be PDS-degraded regardless of how `train` was synthesized.
DefenseEval evaluate_defense(const DefenseSystem& system, const ToyDataset& test);

using StepCallback = std::function<void(const obj::LossReport&)>;

DefenseTrainResult train_defense_toy(DefenseSystem& system, const ToyDataset& train, const ToyDataset& test,
                                     const DefenseTrainConfig& config, const StepCallback& on_step = {},
                                     const EpochCallback& on_epoch = {});

nlohmann::json to_json(const obj::LossReport& r);

}  // namespace rawshield::train
