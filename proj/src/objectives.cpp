#include "rawshield/objectives.hpp"

#include <cmath>
#include <random>

namespace rawshield::obj {

namespace {

constexpr std::array<Index, kStages + 1> kChannels{3, 8, 16, 32, 64, 64};

template <typename S>
bool defined(const T<S>& t) {
  return t.defined();
}

}  // namespace

template <typename S>
SurrogateFeatureExtractor<S>::SurrogateFeatureExtractor(std::uint64_t seed) {
  CounterRng rng(seed, 0x7375727267ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int s = 0; s < kStages; ++s) {
    const Index cin = kChannels[s], cout = kChannels[s + 1], k = cin * 9;
    Eigen::MatrixXd g(k, cout);
    for (Index j = 0; j < cout; ++j)
      for (Index i = 0; i < k; ++i) g(i, j) = normal(rng);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() * Eigen::MatrixXd::Identity(k, cout);
    typename T<S>::Array w(cout * k);
    for (Index o = 0; o < cout; ++o)
      for (Index i = 0; i < k; ++i) w[o * k + i] = static_cast<S>(q(i, o));
    weights_.emplace_back(ad::Shape{cout, cin, 3, 3}, std::move(w), false);
  }
}

template <typename S>
std::vector<T<S>> SurrogateFeatureExtractor<S>::features(const T<S>& img) const {
  if (img.rank() != 4 || img.dim(1) != 3 || img.dim(2) % 32 != 0 || img.dim(3) % 32 != 0)
    throw ShapeError("surrogate features need [B,3,H,W] with H, W divisible by 32, got " + ad::to_string(img.shape()));
  std::vector<T<S>> out;
  T<S> h = img;
  for (const auto& w : weights_) {
    h = ad::avg_pool(ad::leaky_relu(ad::conv2d(h, w, T<S>(), 1, 1), S(0.2)), 2);
    out.push_back(h);
  }
  return out;
}

template <typename S>
T<S> feature_distance(const T<S>& fx, const T<S>& fy) {
  if (fx.shape() != fy.shape()) throw ShapeError("feature_distance: shapes differ");
  return ad::scale_shift(ad::reduce(fx - fy, ad::Reduction::L1), S(1) / static_cast<S>(fx.numel()));
}

template <typename S>
T<S> perceptual_distance(const SurrogateFeatureExtractor<S>& ex, const T<S>& x, const T<S>& y, int stage) {
  if (stage < 0 || stage >= kStages) throw IndexError("perceptual_distance: stage " + std::to_string(stage) + " outside [0,5)");
  if (x.shape() != y.shape()) throw ShapeError("perceptual_distance: image shapes differ");
  return feature_distance(ex.features(x)[stage], ex.features(y)[stage]);
}

double dynamic_margin(const NormalizedNoiseParams& attack, double eta) {
  if (!(eta >= 0.0)) throw DomainError("dynamic_margin: eta must be >= 0");
  return eta * std::hypot(attack.k_n, attack.sigma_n);
}

double dynamic_margin(const NoiseParams& attack, double eta) {
  if (attack.k == 0.0 && attack.sigma == 0.0) return 0.0;
  return dynamic_margin(normalize(attack).value, eta);
}

template <typename S>
T<S> amd_ratio(const std::vector<T<S>>& d_normal, const std::vector<T<S>>& d_att, double margin) {
  if (d_normal.size() != d_att.size() || d_normal.empty()) throw ShapeError("amd_ratio: stage lists differ");
  T<S> total;
  for (std::size_t i = 0; i < d_normal.size(); ++i) {
    const T<S> hinge = ad::leaky_relu(ad::scale_shift(d_att[i], S(1), static_cast<S>(-margin)), S(0));
    const T<S> term = d_normal[i] / ad::scale_shift(hinge, S(1), static_cast<S>(kAmdEpsilon));
    total = total.defined() ? total + term : term;
  }
  return total;
}

template <typename S>
T<S> amd_loss(const SurrogateFeatureExtractor<S>& ex, const T<S>& output, const T<S>& normal, const T<S>& att,
              double margin) {
  if (output.shape() != normal.shape() || output.shape() != att.shape())
    throw ShapeError("amd_loss: output, normal and att must share a shape");
  std::vector<T<S>> fn, fa;
  {
    ad::NoGradGuard guard;
    fn = ex.features(normal.detach());
    fa = ex.features(att.detach());
  }
  const auto fo = ex.features(output);
  std::vector<T<S>> dn, da;
  for (int i = 0; i < kStages; ++i) {
    dn.push_back(feature_distance(fo[i], fn[i]));
    da.push_back(feature_distance(fo[i], fa[i]));
  }
  return amd_ratio(dn, da, margin);
}

template <typename S>
T<S> squared_error(const T<S>& pred, const NormalizedNoiseParams& target) {
  if (pred.numel() != 2) throw ShapeError("squared_error: prediction must hold exactly (k_n, sigma_n)");
  typename T<S>::Array t(2);
  t << static_cast<S>(target.k_n), static_cast<S>(target.sigma_n);
  const T<S> diff = pred - T<S>(pred.shape(), std::move(t));
  return ad::sum(diff * diff);
}

NormalizedNoiseParams perturbed_target(const NormalizedNoiseParams& original_pred, double sigma_per) {
  const NoiseParams p = denormalize(original_pred);
  return normalize(NoiseParams{p.k, std::sqrt(p.sigma * p.sigma + sigma_per * sigma_per)}).value;
}

template <typename S>
T<S> np_low_from_predictions(const NormalizedNoiseParams& original_pred, const T<S>& perturbed_pred,
                             double sigma_per) {
  return squared_error(perturbed_pred, perturbed_target(original_pred, sigma_per));
}

template <typename S>
DualDomainTerms<S> dual_domain_loss(const nets::NoisePredictorNet<S>& net, const T<S>& att,
                                    const NormalizedNoiseParams& att_target, const T<S>& original,
                                    const T<S>& perturbed, double sigma_per, bool use_normal, bool use_low) {
  DualDomainTerms<S> out;
  if (use_normal) out.np_normal = squared_error(net.forward(att), att_target);
  if (use_low) {
    NormalizedNoiseParams base;
    {
      ad::NoGradGuard guard;
      const T<S> p = net.forward(original);
      base = {static_cast<double>(p.value()[0]), static_cast<double>(p.value()[1])};
    }
    out.np_low = np_low_from_predictions(base, net.forward(perturbed), sigma_per);
  }
  return out;
}

template <typename S>
T<S> consist_loss(const T<S>& np_normal, const T<S>& np_low) {
  if (defined(np_normal) && defined(np_low)) return np_normal + np_low;
  if (defined(np_normal)) return np_normal;
  if (defined(np_low)) return np_low;
  return T<S>::scalar(S(0));
}

template <typename S>
T<S> reconstruction_loss(const T<S>& output, const T<S>& normal) {
  if (output.shape() != normal.shape()) throw ShapeError("reconstruction_loss: shapes differ");
  return ad::scale_shift(ad::reduce(output - normal, ad::Reduction::L1), S(1) / static_cast<S>(output.numel()));
}

template <typename S>
TotalLoss<S> total_loss(const T<S>& rec, const T<S>& consist, const T<S>& metric, const LossWeights& weights) {
  TotalLoss<S> out;
  auto add_term = [&](const T<S>& term, double weight) {
    if (!defined(term) || weight == 0.0) return;
    const T<S> scaled = weight == 1.0 ? term : ad::scale_shift(term, static_cast<S>(weight));
    out.total = out.total.defined() ? out.total + scaled : scaled;
  };
  add_term(rec, 1.0);
  add_term(consist, weights.lambda_con);
  add_term(metric, weights.lambda_met);
  if (!out.total.defined()) out.total = T<S>::scalar(S(0));
  out.report.total = out.total.item();
  out.report.rec = defined(rec) ? rec.item() : 0.0;
  out.report.consist = defined(consist) ? consist.item() : 0.0;
  out.report.metric = defined(metric) ? metric.item() : 0.0;
  return out;
}

#define RAWSHIELD_INSTANTIATE(S)                                                                                  \
  template class SurrogateFeatureExtractor<S>;                                                                    \
  template T<S> feature_distance<S>(const T<S>&, const T<S>&);                                                    \
  template T<S> perceptual_distance<S>(const SurrogateFeatureExtractor<S>&, const T<S>&, const T<S>&, int);       \
  template T<S> amd_ratio<S>(const std::vector<T<S>>&, const std::vector<T<S>>&, double);                         \
  template T<S> amd_loss<S>(const SurrogateFeatureExtractor<S>&, const T<S>&, const T<S>&, const T<S>&, double);  \
  template T<S> squared_error<S>(const T<S>&, const NormalizedNoiseParams&);                                      \
  template T<S> np_low_from_predictions<S>(const NormalizedNoiseParams&, const T<S>&, double);                    \
  template DualDomainTerms<S> dual_domain_loss<S>(const nets::NoisePredictorNet<S>&, const T<S>&,                 \
                                                  const NormalizedNoiseParams&, const T<S>&, const T<S>&, double, \
                                                  bool, bool);                                                    \
  template T<S> consist_loss<S>(const T<S>&, const T<S>&);                                                        \
  template T<S> reconstruction_loss<S>(const T<S>&, const T<S>&);                                                 \
  template TotalLoss<S> total_loss<S>(const T<S>&, const T<S>&, const T<S>&, const LossWeights&);

RAWSHIELD_INSTANTIATE(float)
RAWSHIELD_INSTANTIATE(double)

#undef RAWSHIELD_INSTANTIATE

}  // namespace rawshield::obj
