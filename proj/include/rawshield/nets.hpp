#pragma once

#include <string>
#include <vector>

#include "rawshield/rng.hpp"
#include "rawshield/tensor.hpp"

/// The defense networks: the noise predictor, SFT modulation and the
/// degradation-aware mixture-of-experts block, plus the toy encoder-decoder
/// they are inserted into. Noise parameters travel as [B, 2] tensors of
/// normalized (k, sigma) in [0, 1].
namespace rawshield::nets {

using ad::Index;
using ad::Shape;

template <typename S>
using T = ad::Tensor<S>;

template <typename S>
struct Param {
  std::string name;
  T<S> tensor;
};
template <typename S>
using ParamList = std::vector<Param<S>>;

template <typename S>
Index parameter_count(const ParamList<S>& params);

enum class Init { HeUniform, Zero };

/// Same-size 3×3 (padding 1) or 1×1 convolution with bias.
template <typename S>
struct Conv {
  T<S> weight;
  T<S> bias;
  int padding = 0;

  Conv() = default;
  Conv(Index cin, Index cout, int kernel, CounterRng& rng, Init init = Init::HeUniform, double gain = 1.0);
  T<S> operator()(const T<S>& x) const { return ad::conv2d(x, weight, bias, 1, padding); }
  void collect(ParamList<S>& out, const std::string& prefix) const;
};

template <typename S>
struct Linear {
  T<S> weight;
  T<S> bias;

  Linear() = default;
  Linear(Index din, Index dout, CounterRng& rng, Init init = Init::HeUniform);
  T<S> operator()(const T<S>& x) const { return ad::affine(x, weight, bias); }
  void collect(ParamList<S>& out, const std::string& prefix) const;
};

struct PredictorConfig {
  std::vector<Index> widths{16, 32, 64};
  Index hidden = 32;
  double leaky_slope = 0.2;
};

/// conv3×3–LeakyReLU stack → global average pool → 2-layer MLP → sigmoid.
template <typename S>
class NoisePredictorNet {
 public:
  NoisePredictorNet(const PredictorConfig& config, std::uint64_t seed);

  /// img [B,3,H,W] → [B,2] normalized (k, sigma), strictly inside (0,1).
  T<S> forward(const T<S>& img) const;
  ParamList<S> parameters(const std::string& prefix = "predictor") const;
  const PredictorConfig& config() const { return config_; }

 private:
  PredictorConfig config_;
  std::vector<Conv<S>> convs_;
  Linear<S> fc1_, fc2_;
};

struct SftConfig {
  Index latent = 16;
  double leaky_slope = 0.2;
};

/// (1 + scale) ⊙ F + shift, scale and shift predicted from the features and
/// a latent code of the noise parameters. Heads start at zero, so a fresh
/// layer is the identity.
template <typename S>
class SftLayer {
 public:
  SftLayer(Index channels, const SftConfig& config, CounterRng& rng);

  T<S> forward(const T<S>& features, const T<S>& params) const;
  /// The scale and shift maps, each shaped like `features`.
  std::pair<T<S>, T<S>> modulation(const T<S>& features, const T<S>& params) const;
  void collect(ParamList<S>& out, const std::string& prefix) const;

  Conv<S>& scale_head() { return scale_; }
  Conv<S>& shift_head() { return shift_; }

 private:
  SftConfig config_;
  Linear<S> cond1_, cond2_;
  Conv<S> fuse_, scale_, shift_;
};

/// x + conv(LeakyReLU(conv(x))).
template <typename S>
struct ResidualUnit {
  Conv<S> first, second;
  S slope = S(0.2);

  ResidualUnit() = default;
  ResidualUnit(Index channels, double slope, CounterRng& rng);
  T<S> operator()(const T<S>& x) const { return x + second(ad::leaky_relu(first(x), slope)); }
  void collect(ParamList<S>& out, const std::string& prefix) const;
};

enum class MoeMode { Dual, GaussianOnly };
enum class Expert { Gaussian, Poisson };

const char* to_string(MoeMode mode);
MoeMode moe_mode_from_string(const std::string& name);

struct MoeConfig {
  Index gaussian_units = 2;
  Index gate_hidden = 16;
  double leaky_slope = 0.2;
  SftConfig sft;
};

/// Two experts blended by a softmax gate on the noise parameters. The
/// Gaussian expert never sees the parameters; the Poisson expert is a
/// residual unit followed by SFT. The last gate layer starts at zero, giving
/// (0.5, 0.5) at initialization.
template <typename S>
class DaMoeBlock {
 public:
  DaMoeBlock(Index channels, MoeMode mode, const MoeConfig& config, CounterRng& rng);

  /// [B,2] → [B,2] weights (w_g, w_p). GAUSSIAN_ONLY returns constant (1, 0).
  T<S> gate(const T<S>& params) const;
  T<S> expert(Expert which, const T<S>& features, const T<S>& params) const;
  T<S> forward(const T<S>& features, const T<S>& params) const;

  void collect(ParamList<S>& out, const std::string& prefix) const;
  MoeMode mode() const { return mode_; }
  Index channels() const { return channels_; }

  std::vector<ResidualUnit<S>>& gaussian_units() { return gaussian_; }
  ResidualUnit<S>& poisson_unit() { return poisson_; }
  SftLayer<S>& sft() { return sft_; }

 private:
  Index channels_;
  MoeMode mode_;
  MoeConfig config_;
  std::vector<ResidualUnit<S>> gaussian_;
  ResidualUnit<S> poisson_;
  SftLayer<S> sft_;
  Linear<S> gate1_, gate2_;
};

struct BackboneConfig {
  Index width = 16;
  double leaky_slope = 0.2;
  MoeMode bottleneck_mode = MoeMode::GaussianOnly;
  MoeMode decoder_mode = MoeMode::Dual;
  /// Without insertions the backbone is a plain encoder-decoder (the
  /// blocks are skipped and the parameters are ignored).
  bool insert_moe = true;
  MoeConfig moe;
};

/// Two-level encoder-decoder with skip connections and a global input
/// residual. DA-MoE blocks sit at the bottleneck and after each decoder
/// upsampling.
template <typename S>
class ToyBackbone {
 public:
  ToyBackbone(const BackboneConfig& config, std::uint64_t seed);

  /// img [B,3,H,W] (H, W divisible by 4), params [B,2].
  T<S> forward(const T<S>& img, const T<S>& params) const;
  ParamList<S> parameters(const std::string& prefix = "backbone") const;

  /// Gate weights of every DUAL insertion for the given parameters.
  std::vector<T<S>> decoder_gates(const T<S>& params) const;
  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  Conv<S> head_, enc1_, enc2_, dec1_, dec2_, tail_;
  std::vector<DaMoeBlock<S>> moe_;  ///< bottleneck, after up1, after up2
};

}  // namespace rawshield::nets
