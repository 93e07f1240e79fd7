#include "rawshield/nets.hpp"

#include <cmath>

namespace rawshield::nets {

namespace {

template <typename S>
typename T<S>::Array init_values(Index n, Index fan_in, Init init, double gain, CounterRng& rng) {
  typename T<S>::Array v = T<S>::Array::Zero(n);
  if (init == Init::Zero) return v;
  // He-uniform for LeakyReLU(0.2) successors.
  const double bound = gain * std::sqrt(6.0 / ((1.0 + 0.04) * static_cast<double>(fan_in)));
  for (Index i = 0; i < n; ++i) v[i] = static_cast<S>(rng.uniform(-bound, bound));
  return v;
}

template <typename S>
T<S> leaky(const T<S>& x, double slope) {
  return ad::leaky_relu(x, static_cast<S>(slope));
}

}  // namespace

template <typename S>
Index parameter_count(const ParamList<S>& params) {
  Index n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

const char* to_string(MoeMode mode) { return mode == MoeMode::Dual ? "dual" : "gaussian_only"; }

MoeMode moe_mode_from_string(const std::string& name) {
  if (name == "dual") return MoeMode::Dual;
  if (name == "gaussian_only") return MoeMode::GaussianOnly;
  throw Error("unknown DA-MoE mode '" + name + "' (expected dual or gaussian_only)");
}

// ---- layers -------------------------------------------------------------------

template <typename S>
Conv<S>::Conv(Index cin, Index cout, int kernel, CounterRng& rng, Init init, double gain)
    : weight(Shape{cout, cin, kernel, kernel}, init_values<S>(cout * cin * kernel * kernel, cin * kernel * kernel, init, gain, rng),
             true),
      bias(Shape{cout}, T<S>::Array::Zero(cout), true),
      padding(kernel / 2) {}

template <typename S>
void Conv<S>::collect(ParamList<S>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

template <typename S>
Linear<S>::Linear(Index din, Index dout, CounterRng& rng, Init init)
    : weight(Shape{dout, din}, init_values<S>(dout * din, din, init, 1.0, rng), true),
      bias(Shape{dout}, T<S>::Array::Zero(dout), true) {}

template <typename S>
void Linear<S>::collect(ParamList<S>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

// ---- noise predictor ------------------------------------------------------------

template <typename S>
NoisePredictorNet<S>::NoisePredictorNet(const PredictorConfig& config, std::uint64_t seed) : config_(config) {
  if (config.widths.empty() || config.hidden < 1) throw Error("predictor config: widths and hidden must be non-empty");
  CounterRng rng(seed, 0x70726564ULL);
  Index cin = 3;
  for (Index w : config.widths) {
    convs_.emplace_back(cin, w, 3, rng);
    cin = w;
  }
  fc1_ = Linear<S>(cin, config.hidden, rng);
  fc2_ = Linear<S>(config.hidden, 2, rng);
}

template <typename S>
T<S> NoisePredictorNet<S>::forward(const T<S>& img) const {
  if (img.rank() != 4 || img.dim(1) != 3) throw ShapeError("noise predictor expects [B,3,H,W], got " + ad::to_string(img.shape()));
  T<S> h = img;
  for (const auto& c : convs_) h = leaky(c(h), config_.leaky_slope);
  h = ad::reshape(ad::global_avg_pool(h), Shape{img.dim(0), h.dim(1)});
  h = leaky(fc1_(h), config_.leaky_slope);
  return ad::sigmoid(fc2_(h));
}

template <typename S>
ParamList<S> NoisePredictorNet<S>::parameters(const std::string& prefix) const {
  ParamList<S> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, prefix + ".conv" + std::to_string(i + 1));
  fc1_.collect(out, prefix + ".fc1");
  fc2_.collect(out, prefix + ".fc2");
  return out;
}

// ---- SFT ------------------------------------------------------------------------

template <typename S>
SftLayer<S>::SftLayer(Index channels, const SftConfig& config, CounterRng& rng)
    : config_(config),
      cond1_(2, config.latent, rng),
      cond2_(config.latent, config.latent, rng),
      fuse_(channels + config.latent, channels, 3, rng),
      scale_(channels, channels, 1, rng, Init::Zero),
      shift_(channels, channels, 1, rng, Init::Zero) {}

template <typename S>
std::pair<T<S>, T<S>> SftLayer<S>::modulation(const T<S>& features, const T<S>& params) const {
  if (features.rank() != 4) throw ShapeError("sft: features must be [B,C,H,W]");
  if (params.rank() != 2 || params.dim(1) != 2 || params.dim(0) != features.dim(0))
    throw ShapeError("sft: params must be [B,2] matching the feature batch");
  const Index b = features.dim(0), h = features.dim(2), w = features.dim(3);
  T<S> latent = leaky(cond2_(leaky(cond1_(params), config_.leaky_slope)), config_.leaky_slope);
  latent = ad::expand(ad::reshape(latent, Shape{b, config_.latent, 1, 1}), Shape{b, config_.latent, h, w});
  const T<S> fused = leaky(fuse_(ad::concat_channels(features, latent)), config_.leaky_slope);
  return {scale_(fused), shift_(fused)};
}

template <typename S>
T<S> SftLayer<S>::forward(const T<S>& features, const T<S>& params) const {
  auto [scale, shift] = modulation(features, params);
  return features * ad::scale_shift(scale, S(1), S(1)) + shift;
}

template <typename S>
void SftLayer<S>::collect(ParamList<S>& out, const std::string& prefix) const {
  cond1_.collect(out, prefix + ".cond1");
  cond2_.collect(out, prefix + ".cond2");
  fuse_.collect(out, prefix + ".fuse");
  scale_.collect(out, prefix + ".scale");
  shift_.collect(out, prefix + ".shift");
}

// ---- DA-MoE ---------------------------------------------------------------------

template <typename S>
ResidualUnit<S>::ResidualUnit(Index channels, double slope_, CounterRng& rng)
    : first(channels, channels, 3, rng), second(channels, channels, 3, rng, Init::HeUniform, 0.1),
      slope(static_cast<S>(slope_)) {}

template <typename S>
void ResidualUnit<S>::collect(ParamList<S>& out, const std::string& prefix) const {
  first.collect(out, prefix + ".conv1");
  second.collect(out, prefix + ".conv2");
}

template <typename S>
DaMoeBlock<S>::DaMoeBlock(Index channels, MoeMode mode, const MoeConfig& config, CounterRng& rng)
    : channels_(channels), mode_(mode), config_(config), sft_(channels, config.sft, rng) {
  for (Index i = 0; i < config.gaussian_units; ++i) gaussian_.emplace_back(channels, config.leaky_slope, rng);
  poisson_ = ResidualUnit<S>(channels, config.leaky_slope, rng);
  gate1_ = Linear<S>(2, config.gate_hidden, rng);
  gate2_ = Linear<S>(config.gate_hidden, 2, rng, Init::Zero);
}

template <typename S>
T<S> DaMoeBlock<S>::gate(const T<S>& params) const {
  if (params.rank() != 2 || params.dim(1) != 2) throw ShapeError("gate: params must be [B,2]");
  if (mode_ == MoeMode::GaussianOnly) {
    typename T<S>::Array w(params.numel());
    for (Index i = 0; i < params.dim(0); ++i) {
      w[2 * i] = S(1);
      w[2 * i + 1] = S(0);
    }
    return T<S>(params.shape(), std::move(w));
  }
  return ad::softmax(gate2_(leaky(gate1_(params), config_.leaky_slope)));
}

template <typename S>
T<S> DaMoeBlock<S>::expert(Expert which, const T<S>& features, const T<S>& params) const {
  if (features.rank() != 4 || features.dim(1) != channels_)
    throw ShapeError("da-moe: expected " + std::to_string(channels_) + " channels, got " +
                     ad::to_string(features.shape()));
  if (which == Expert::Gaussian) {
    T<S> h = features;
    for (const auto& u : gaussian_) h = u(h);
    return h;
  }
  return sft_.forward(poisson_(features), params);
}

template <typename S>
T<S> DaMoeBlock<S>::forward(const T<S>& features, const T<S>& params) const {
  if (mode_ == MoeMode::GaussianOnly) return expert(Expert::Gaussian, features, params);
  const T<S> w = gate(params);
  const Shape per_item{features.dim(0), 1, 1, 1};
  const T<S> wg = ad::reshape(ad::slice_channels(w, 0, 1), per_item);
  const T<S> wp = ad::reshape(ad::slice_channels(w, 1, 1), per_item);
  return expert(Expert::Gaussian, features, params) * wg + expert(Expert::Poisson, features, params) * wp;
}

template <typename S>
void DaMoeBlock<S>::collect(ParamList<S>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < gaussian_.size(); ++i) gaussian_[i].collect(out, prefix + ".gauss" + std::to_string(i));
  if (mode_ == MoeMode::GaussianOnly) return;  // the rest never runs
  poisson_.collect(out, prefix + ".poisson");
  sft_.collect(out, prefix + ".sft");
  gate1_.collect(out, prefix + ".gate1");
  gate2_.collect(out, prefix + ".gate2");
}

// ---- toy backbone -----------------------------------------------------------

template <typename S>
ToyBackbone<S>::ToyBackbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  if (config.width < 1) throw Error("backbone config: width must be >= 1");
  CounterRng rng(seed, 0x6261636bULL);
  const Index c = config.width;
  head_ = Conv<S>(3, c, 3, rng);
  enc1_ = Conv<S>(c, 2 * c, 3, rng);
  enc2_ = Conv<S>(2 * c, 2 * c, 3, rng);
  dec1_ = Conv<S>(4 * c, 2 * c, 3, rng);
  dec2_ = Conv<S>(3 * c, c, 3, rng);
  tail_ = Conv<S>(c, 3, 3, rng, Init::HeUniform, 0.1);
  moe_.emplace_back(2 * c, config.bottleneck_mode, config.moe, rng);
  moe_.emplace_back(2 * c, config.decoder_mode, config.moe, rng);
  moe_.emplace_back(c, config.decoder_mode, config.moe, rng);
}

template <typename S>
T<S> ToyBackbone<S>::forward(const T<S>& img, const T<S>& params) const {
  if (img.rank() != 4 || img.dim(1) != 3 || img.dim(2) % 4 != 0 || img.dim(3) % 4 != 0)
    throw ShapeError("toy backbone expects [B,3,H,W] with H, W divisible by 4, got " + ad::to_string(img.shape()));
  const double s = config_.leaky_slope;
  auto moe = [&](std::size_t i, const T<S>& x) { return config_.insert_moe ? moe_[i].forward(x, params) : x; };
  const T<S> e1 = leaky(head_(img), s);
  const T<S> e2 = leaky(enc1_(ad::avg_pool(e1, 2)), s);
  T<S> b = moe(0, leaky(enc2_(ad::avg_pool(e2, 2)), s));
  T<S> d1 = moe(1, leaky(dec1_(ad::concat_channels(ad::upsample_nearest(b, 2), e2)), s));
  T<S> d2 = moe(2, leaky(dec2_(ad::concat_channels(ad::upsample_nearest(d1, 2), e1)), s));
  return img + tail_(d2);
}

template <typename S>
std::vector<T<S>> ToyBackbone<S>::decoder_gates(const T<S>& params) const {
  std::vector<T<S>> out;
  for (const auto& m : moe_)
    if (m.mode() == MoeMode::Dual) out.push_back(m.gate(params));
  return out;
}

template <typename S>
ParamList<S> ToyBackbone<S>::parameters(const std::string& prefix) const {
  ParamList<S> out;
  head_.collect(out, prefix + ".head");
  enc1_.collect(out, prefix + ".enc1");
  enc2_.collect(out, prefix + ".enc2");
  dec1_.collect(out, prefix + ".dec1");
  dec2_.collect(out, prefix + ".dec2");
  tail_.collect(out, prefix + ".tail");
  if (config_.insert_moe) {
    moe_[0].collect(out, prefix + ".moe_bottleneck");
    moe_[1].collect(out, prefix + ".moe_up1");
    moe_[2].collect(out, prefix + ".moe_up2");
  }
  return out;
}

#define RAWSHIELD_INSTANTIATE(S)                          \
  template Index parameter_count<S>(const ParamList<S>&); \
  template struct Conv<S>;                                \
  template struct Linear<S>;                              \
  template class NoisePredictorNet<S>;                    \
  template class SftLayer<S>;                             \
  template struct ResidualUnit<S>;                        \
  template class DaMoeBlock<S>;                           \
  template class ToyBackbone<S>;

RAWSHIELD_INSTANTIATE(float)
RAWSHIELD_INSTANTIATE(double)

#undef RAWSHIELD_INSTANTIATE

}  // namespace rawshield::nets
