#include "rawshield/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <map>
#include <numeric>

#include "rawshield/errors.hpp"
#include "rawshield/image_tensor.hpp"
#include "rawshield/io.hpp"
#include "rawshield/profiles.hpp"
#include "rawshield/stats.hpp"
#include "rawshield/synthetic.hpp"

namespace rawshield::train {

namespace {

using TF = ad::TensorF;

constexpr std::uint64_t kToyStream = 0x746f79ULL;
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kCropStream = 0x63726f70ULL;
constexpr std::uint64_t kOrientStream = 0x6f7269ULL;

// Fisher-Yates with plain modulo; the bias is irrelevant at these sizes and
// the result does not depend on the standard library.
std::vector<std::size_t> shuffled(std::size_t n, CounterRng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

// orient: bit 0 flips x, bit 1 flips y, bit 2 transposes (applied first).
TF crop_tensor(const ImagePlane& img, Index y0, Index x0, Index size, int orient = 0) {
  const Index c = img.channels();
  TF::Array v(c * size * size);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        Index sy = (orient & 4) ? x : y, sx = (orient & 4) ? y : x;
        if (orient & 1) sx = size - 1 - sx;
        if (orient & 2) sy = size - 1 - sy;
        v[(ch * size + y) * size + x] = static_cast<float>(img(y0 + sy, x0 + sx, ch));
      }
  return TF(ad::Shape{1, c, size, size}, std::move(v));
}

struct Crop {
  Index y = 0, x = 0, size = 0;
  int orient = 0;
  TF operator()(const ImagePlane& img) const {
    if (size == 0 && orient == 0) return image_to_tensor<float>(img);
    return crop_tensor(img, y, x, size == 0 ? img.height() : size, orient);
  }
};

// One of the eight flips/transposes of a square crop.
Crop oriented(Crop c, const ImagePlane& img, CounterRng& rng) {
  if (img.height() != img.width()) throw ShapeError("orientation augmentation needs square patches");
  c.orient = static_cast<int>(rng() % 8);
  return c;
}

Crop draw_crop(const ImagePlane& img, Index size, CounterRng& rng) {
  if (size == 0 || (size == img.height() && size == img.width())) return {0, 0, 0};
  if (size > img.height() || size > img.width()) throw ShapeError("crop larger than the patch");
  const auto y = static_cast<Index>(rng() % static_cast<std::uint64_t>(img.height() - size + 1));
  const auto x = static_cast<Index>(rng() % static_cast<std::uint64_t>(img.width() - size + 1));
  return {y, x, size};
}

double rms_difference(const ImagePlane& a, const ImagePlane& b) {
  return std::sqrt((a.data() - b.data()).square().mean());
}

NormalizedNoiseParams prediction_of(const TF& p, Index b = 0) {
  return {static_cast<double>(p.value()[2 * b]), static_cast<double>(p.value()[2 * b + 1])};
}

double grad_norm(const nets::ParamList<float>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    const auto& g = p.tensor.node()->grad;
    if (g.size() != 0) sq += g.template cast<double>().square().sum();
  }
  return std::sqrt(sq);
}

void mark_live(const nets::ParamList<float>& params, std::vector<bool>& live) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (live[i]) continue;
    const auto& g = params[i].tensor.node()->grad;
    live[i] = g.size() != 0 && (g != 0.0f).any();
  }
}

std::vector<std::string> dead_names(const nets::ParamList<float>& params, const std::vector<bool>& live) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!live[i]) out.push_back(params[i].name);
  return out;
}

/// Parameter values and optimizer state at the end of the last good epoch.
struct Snapshot {
  std::vector<TF::Array> values, m, v;
  std::int64_t steps = 0;

  void take(Adam<float>& adam) {
    values.clear();
    for (const auto& p : adam.params()) values.push_back(p.tensor.value());
    m = adam.first_moments();
    v = adam.second_moments();
    steps = adam.step_count();
  }
  void restore(Adam<float>& adam) const {
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto t = adam.params()[i].tensor;
      t.mutable_value() = values[i];
      t.zero_grad();
    }
    adam.first_moments() = m;
    adam.second_moments() = v;
    adam.set_step_count(steps);
  }
};

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
}

void fnv_image(std::uint64_t& h, const ImagePlane& img) {
  fnv(h, img.data().data(), static_cast<std::size_t>(img.data().size()) * sizeof(double));
}

void fnv_double(std::uint64_t& h, double x) { fnv(h, &x, sizeof x); }

}  // namespace

// ---- Adam --------------------------------------------------------------------------

template <typename S>
Adam<S>::Adam(nets::ParamList<S> params, const AdamConfig& config) : params_(std::move(params)), config_(config) {
  if (!(config.lr > 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) || !(config.beta2 >= 0.0 && config.beta2 < 1.0) ||
      !(config.eps > 0.0))
    throw DomainError("adam: lr and eps must be > 0, betas in [0, 1)");
  for (const auto& p : params_) {
    if (!p.tensor.requires_grad()) throw Error("adam: parameter " + p.name + " does not require grad");
    m_.push_back(Array::Zero(p.tensor.numel()));
    v_.push_back(Array::Zero(p.tensor.numel()));
  }
}

template <typename S>
void Adam<S>::set_lr(double lr) {
  if (!(lr > 0.0)) throw DomainError("adam: lr must be > 0");
  config_.lr = lr;
}

template <typename S>
void Adam<S>::zero_grad() {
  for (auto& p : params_) {
    auto t = p.tensor;
    t.zero_grad();
  }
}

template <typename S>
void Adam<S>::step(double grad_scale) {
  for (const auto& p : params_) {
    const auto& g = p.tensor.node()->grad;
    if (g.size() != 0 && !g.allFinite()) throw NumericFault("adam: non-finite gradient in " + p.name);
  }
  ++steps_;
  const S b1 = static_cast<S>(config_.beta1), b2 = static_cast<S>(config_.beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(config_.beta1, static_cast<double>(steps_)));
  const S c2 = static_cast<S>(1.0 - std::pow(config_.beta2, static_cast<double>(steps_)));
  const S lr = static_cast<S>(config_.lr), eps = static_cast<S>(config_.eps), scale = static_cast<S>(grad_scale);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto t = params_[i].tensor;
    auto& node = *t.node();
    const Array g = node.grad.size() == 0 ? Array(Array::Zero(t.numel())) : Array(node.grad * scale);
    m_[i] = b1 * m_[i] + (S(1) - b1) * g;
    v_[i] = b2 * v_[i] + (S(1) - b2) * g.square();
    t.mutable_value() -= lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps);
    if (!t.value().allFinite()) throw NumericFault("adam: parameter " + params_[i].name + " became non-finite");
    t.zero_grad();
  }
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const nets::ParamList<S>& params, const Adam<S>* adam,
                     const nlohmann::json& meta) {
  std::vector<io::NamedArray> arrays;
  auto push = [&](const std::string& name, const ad::Shape& shape, const typename ad::Tensor<S>::Array& data) {
    io::NamedArray a{name, std::vector<std::int64_t>(shape.begin(), shape.end()), {}};
    a.data.resize(static_cast<std::size_t>(data.size()));
    for (Index i = 0; i < data.size(); ++i) a.data[static_cast<std::size_t>(i)] = static_cast<float>(data[i]);
    arrays.push_back(std::move(a));
  };
  for (const auto& p : params) push(p.name, p.tensor.shape(), p.tensor.value());
  nlohmann::json m = meta.is_null() ? nlohmann::json::object() : meta;
  if (adam) {
    const auto& a = *adam;
    if (a.params().size() != params.size()) throw Error("save_checkpoint: optimizer tracks a different parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
      push(params[i].name + "#m", params[i].tensor.shape(), a.first_moments()[i]);
      push(params[i].name + "#v", params[i].tensor.shape(), a.second_moments()[i]);
    }
    m["adam"] = {{"step", a.step_count()},
                 {"lr", a.config().lr},
                 {"beta1", a.config().beta1},
                 {"beta2", a.config().beta2},
                 {"eps", a.config().eps}};
  }
  io::save_adt1(path, arrays, m);
}

template <typename S>
nlohmann::json load_checkpoint(const std::filesystem::path& path, const nets::ParamList<S>& params, Adam<S>* adam) {
  const auto contents = io::load_adt1(path);
  std::map<std::string, const io::NamedArray*> by_name;
  for (const auto& a : contents.tensors) by_name[a.name] = &a;
  auto fetch = [&](const std::string& name, const ad::Shape& shape) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint " + path.string() + " has no tensor " + name);
    const auto& a = *it->second;
    if (a.shape != std::vector<std::int64_t>(shape.begin(), shape.end()))
      throw ShapeError("checkpoint tensor " + name + " has shape " + ad::to_string(ad::Shape(a.shape.begin(), a.shape.end())) +
                       ", expected " + ad::to_string(shape));
    typename ad::Tensor<S>::Array out(static_cast<Index>(a.data.size()));
    for (std::size_t i = 0; i < a.data.size(); ++i) out[static_cast<Index>(i)] = static_cast<S>(a.data[i]);
    return out;
  };
  // Validate everything before touching the parameters.
  std::vector<typename ad::Tensor<S>::Array> values, ms, vs;
  for (const auto& p : params) values.push_back(fetch(p.name, p.tensor.shape()));
  if (adam) {
    if (!contents.meta.contains("adam")) throw FormatError("checkpoint " + path.string() + " has no optimizer state");
    for (const auto& p : params) {
      ms.push_back(fetch(p.name + "#m", p.tensor.shape()));
      vs.push_back(fetch(p.name + "#v", p.tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    t.mutable_value() = values[i];
    t.zero_grad();
  }
  if (adam) {
    adam->first_moments() = ms;
    adam->second_moments() = vs;
    adam->set_step_count(contents.meta["adam"].at("step").template get<std::int64_t>());
  }
  return contents.meta;
}

template class Adam<float>;
template class Adam<double>;
template void save_checkpoint<float>(const std::filesystem::path&, const nets::ParamList<float>&, const Adam<float>*,
                                     const nlohmann::json&);
template void save_checkpoint<double>(const std::filesystem::path&, const nets::ParamList<double>&, const Adam<double>*,
                                      const nlohmann::json&);
template nlohmann::json load_checkpoint<float>(const std::filesystem::path&, const nets::ParamList<float>&, Adam<float>*);
template nlohmann::json load_checkpoint<double>(const std::filesystem::path&, const nets::ParamList<double>&,
                                                Adam<double>*);

// ---- data ----------------------------------------------------------------------------

ToyDataset synth_toy_dataset(Index n, std::uint64_t seed, const ToyDataOptions& options) {
  if (n < 1) throw Error("synth_toy_dataset: need at least one sample");
  if (options.patch_size < 2 || options.patch_size % 2 != 0) throw DomainError("synth_toy_dataset: patch size must be even and >= 2");
  if (!(options.brightness_min > 0.0 && options.brightness_min <= options.brightness_max && options.brightness_max <= 1.0))
    throw DomainError("synth_toy_dataset: brightness range must satisfy 0 < min <= max <= 1");
  ToyDataset data;
  data.seed = seed;
  data.options = options;
  data.samples.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    ToySample s;
    s.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    CounterRng rng(s.seed, kToyStream);
    s.clean = procedural_patch(options.patch_size, rng);
    s.brightness = rng.uniform(options.brightness_min, options.brightness_max);

    AttackOptions attack;
    attack.mode = options.mode;
    s.degraded = synthesize_attack(s.clean, attack, derive_seed(s.seed, 1));
    // Darken in linear light with the gamma of the profile that will attack it.
    CounterRng profile_rng(s.seed, kToyStream + 1);
    const CameraProfile profile = sample_profile(profile_rng);
    ImagePlane linear = gamma_transfer(s.clean, profile.gamma, GammaDirection::Expand);
    linear.data() *= s.brightness;
    s.lowlight_clean = gamma_transfer(linear, profile.gamma, GammaDirection::Compress);
    attack.profile = profile;
    s.lowlight = synthesize_attack(s.lowlight_clean, attack, derive_seed(s.seed, 2));
    s.pair = perturb_lowlight(s.lowlight.image, std::nullopt, s.lowlight.profile, derive_seed(s.seed, 3), options.mode);

    if (options.synthesis == Synthesis::SrgbGaussian) {
      s.degraded.image = inject_srgb_gaussian(s.clean, rms_difference(s.degraded.image, s.clean), derive_seed(s.seed, 4));
      const double low_rms = rms_difference(s.lowlight.image, s.lowlight_clean);
      const double per_rms = rms_difference(s.pair.perturbed, s.pair.original);
      s.lowlight.image = inject_srgb_gaussian(s.lowlight_clean, low_rms, derive_seed(s.seed, 5));
      s.pair.original = s.lowlight.image;
      s.pair.perturbed = inject_srgb_gaussian(s.pair.original, per_rms, derive_seed(s.seed, 6));
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

std::uint64_t dataset_digest(const ToyDataset& data) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& s : data.samples) {
    fnv(h, &s.seed, sizeof s.seed);
    fnv_image(h, s.clean);
    fnv_image(h, s.lowlight_clean);
    fnv_image(h, s.degraded.image);
    fnv_image(h, s.lowlight.image);
    fnv_image(h, s.pair.original);
    fnv_image(h, s.pair.perturbed);
    for (double x : {s.brightness, s.degraded.attack.k, s.degraded.attack.sigma, s.lowlight.attack.k,
                     s.lowlight.attack.sigma, s.pair.sigma_per})
      fnv_double(h, x);
  }
  return h;
}

// ---- predictor ----------------------------------------------------------------------

PredictorEval evaluate_predictor(const nets::NoisePredictorNet<float>& net, const ToyDataset& data) {
  ad::NoGradGuard guard;
  PredictorEval out;
  std::vector<double> ps, pk, ts, tk;
  for (const auto& s : data.samples) {
    const auto pred = prediction_of(net.forward(image_to_tensor<float>(s.degraded.image)));
    const auto truth = normalize(s.degraded.attack).value;
    out.predicted.push_back(pred);
    ps.push_back(pred.sigma_n);
    pk.push_back(pred.k_n);
    ts.push_back(truth.sigma_n);
    tk.push_back(truth.k_n);
    out.mse += (pred.k_n - truth.k_n) * (pred.k_n - truth.k_n) + (pred.sigma_n - truth.sigma_n) * (pred.sigma_n - truth.sigma_n);
  }
  out.mse /= static_cast<double>(data.samples.size());
  if (data.samples.size() >= 2) {
    out.spearman_sigma = spearman(ps, ts);
    out.spearman_k = spearman(pk, tk);
  }
  return out;
}

double cosine_lr(double lr, double final_ratio, int epoch, int epochs) {
  if (!(final_ratio > 0.0 && final_ratio <= 1.0)) throw DomainError("cosine_lr: final ratio must be in (0, 1]");
  if (epochs <= 1) return lr;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return lr * (final_ratio + 0.5 * (1.0 - final_ratio) * (1.0 + std::cos(std::numbers::pi * t)));
}

PredictorTrainResult train_noise_predictor(nets::NoisePredictorNet<float>& net, const ToyDataset& train,
                                           const ToyDataset& heldout, const PredictorTrainConfig& config,
                                           const EpochCallback& on_epoch) {
  if (train.samples.empty()) throw Error("train_noise_predictor: empty dataset");
  if (config.epochs < 1 || config.batch < 1) throw DomainError("train_noise_predictor: epochs and batch must be >= 1");
  if (!config.use_normal && !config.use_low) throw DomainError("train_noise_predictor: both loss terms disabled");
  const auto params = net.parameters();
  Adam<float> adam(params, {config.lr});
  PredictorTrainResult result;
  std::vector<bool> live(params.size(), false);
  Snapshot good;
  good.take(adam);
  const std::size_t n = train.samples.size();
  const auto batch = static_cast<std::size_t>(config.batch);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    adam.set_lr(cosine_lr(config.lr, config.lr_final_ratio, epoch, config.epochs));
    const auto order = shuffled(n, CounterRng(config.seed, kShuffleStream).fork(static_cast<std::uint64_t>(epoch)));
    CounterRng crop_rng = CounterRng(config.seed, kCropStream).fork(static_cast<std::uint64_t>(epoch));
    CounterRng orient_rng = CounterRng(config.seed, kOrientStream).fork(static_cast<std::uint64_t>(epoch));
    double epoch_loss = 0.0;
    try {
      for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t end = std::min(n, start + batch);
        for (std::size_t j = start; j < end; ++j) {
          const ToySample& s = train.samples[order[j]];
          Crop ca = draw_crop(s.degraded.image, config.crop, crop_rng);
          Crop cl = draw_crop(s.pair.original, config.crop, crop_rng);
          if (config.augment) {
            ca = oriented(ca, s.degraded.image, orient_rng);
            cl = oriented(cl, s.pair.original, orient_rng);
          }
          const auto terms = obj::dual_domain_loss(net, ca(s.degraded.image), normalize(s.degraded.attack).value,
                                                   cl(s.pair.original), cl(s.pair.perturbed), s.pair.sigma_per,
                                                   config.use_normal, config.use_low);
          const TF loss = obj::consist_loss(terms.np_normal, terms.np_low);
          if (!std::isfinite(loss.item())) throw NumericFault("predictor loss is not finite");
          ad::backward(loss);
          epoch_loss += loss.item();
        }
        if (epoch == 0) mark_live(params, live);
        adam.step(1.0 / static_cast<double>(end - start));
      }
    } catch (const NumericFault& e) {
      good.restore(adam);
      throw NumericFault(std::string("predictor training diverged in epoch ") + std::to_string(epoch + 1) + ": " + e.what() +
                         " (parameters restored to the last good epoch)");
    }
    epoch_loss /= static_cast<double>(n);
    result.epoch_loss.push_back(epoch_loss);
    if (epoch == 0) result.dead_parameters = dead_names(params, live);
    good.take(adam);
    if (on_epoch) on_epoch(epoch + 1, epoch_loss);
  }
  if (!heldout.samples.empty()) result.heldout = evaluate_predictor(net, heldout);
  return result;
}

// ---- defense ------------------------------------------------------------------------

TF DefenseSystem::restore(const TF& degraded) const {
  return backbone.forward(degraded, predictor.forward(degraded));
}

nets::ParamList<float> DefenseSystem::parameters(bool include_predictor) const {
  auto out = backbone.parameters();
  if (include_predictor) {
    auto p = predictor.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

DefenseEval evaluate_defense(const DefenseSystem& system, const ToyDataset& test) {
  ad::NoGradGuard guard;
  DefenseEval out;
  if (test.samples.empty()) return out;
  std::vector<std::pair<double, std::vector<double>>> gates;  // (true sigma, w_g per DUAL insertion)
  for (const auto& s : test.samples) {
    const TF att = image_to_tensor<float>(s.degraded.image);
    const TF clean = image_to_tensor<float>(s.clean);
    const TF p = system.predictor.forward(att);
    const TF restored = system.backbone.forward(att, p);
    out.mae += (restored.value() - clean.value()).abs().template cast<double>().mean();
    out.input_mae += (att.value() - clean.value()).abs().template cast<double>().mean();
    std::vector<double> wg;
    for (const auto& g : system.backbone.decoder_gates(p)) wg.push_back(static_cast<double>(g.value()[0]));
    gates.emplace_back(s.degraded.attack.sigma, std::move(wg));
  }
  const auto count = static_cast<double>(test.samples.size());
  out.mae /= count;
  out.input_mae /= count;
  // Mean gate weight of the upper half of true sigma minus the lower half.
  std::sort(gates.begin(), gates.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const std::size_t half = gates.size() / 2, n_gates = gates.front().second.size();
  if (half > 0 && n_gates > 0) {
    double delta = 0.0;
    for (std::size_t g = 0; g < n_gates; ++g) {
      double lo = 0.0, hi = 0.0;
      for (std::size_t i = 0; i < half; ++i) lo += gates[i].second[g];
      for (std::size_t i = gates.size() - half; i < gates.size(); ++i) hi += gates[i].second[g];
      delta += std::abs(hi - lo) / static_cast<double>(half);
    }
    out.gate_delta = delta / static_cast<double>(n_gates);
  }
  return out;
}

DefenseTrainResult train_defense_toy(DefenseSystem& system, const ToyDataset& train, const ToyDataset& test,
                                     const DefenseTrainConfig& config, const StepCallback& on_step,
                                     const EpochCallback& on_epoch) {
  if (train.samples.empty()) throw Error("train_defense_toy: empty dataset");
  if (config.epochs < 1 || config.batch < 1) throw DomainError("train_defense_toy: epochs and batch must be >= 1");
  const Index size = config.crop == 0 ? train.options.patch_size : config.crop;
  if (size % 32 != 0) throw ShapeError("train_defense_toy: spatial size must be a multiple of 32, got " + std::to_string(size));
  if (config.clip_norm < 0.0) throw DomainError("train_defense_toy: clip_norm must be >= 0");

  const bool joint = !config.freeze_predictor;
  const auto params = system.parameters(joint);
  Adam<float> adam(params, {config.lr});
  const obj::SurrogateFeatureExtractor<float> extractor;
  obj::LossWeights weights = config.weights;
  if (!config.use_consist) weights.lambda_con = 0.0;
  if (!config.use_metric) weights.lambda_met = 0.0;

  DefenseTrainResult result;
  std::vector<bool> live(params.size(), false);
  Snapshot good;
  good.take(adam);
  const std::size_t n = train.samples.size();
  const auto batch = static_cast<std::size_t>(config.batch);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    adam.set_lr(cosine_lr(config.lr, config.lr_final_ratio, epoch, config.epochs));
    const auto order = shuffled(n, CounterRng(config.seed, kShuffleStream).fork(static_cast<std::uint64_t>(epoch)));
    CounterRng crop_rng = CounterRng(config.seed, kCropStream).fork(static_cast<std::uint64_t>(epoch));
    double epoch_loss = 0.0;
    try {
      for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t end = std::min(n, start + batch);
        for (std::size_t j = start; j < end; ++j) {
          const ToySample& s = train.samples[order[j]];
          const Crop c = draw_crop(s.degraded.image, config.crop, crop_rng);
          const TF att = c(s.degraded.image);
          const TF normal = c(s.clean);
          const auto target = normalize(s.degraded.attack).value;

          TF p;
          if (joint) {
            p = system.predictor.forward(att);
          } else {
            ad::NoGradGuard guard;
            p = system.predictor.forward(att);
          }
          const TF out = system.backbone.forward(att, p);
          const TF rec = obj::reconstruction_loss(out, normal);

          TF consist;
          double np_normal = 0.0, np_low = 0.0;
          if (joint && weights.lambda_con != 0.0) {
            const Crop cl = draw_crop(s.pair.original, config.crop, crop_rng);
            const TF normal_term = obj::squared_error(p, target);
            const auto low = obj::dual_domain_loss(system.predictor, TF(), target, cl(s.pair.original),
                                                   cl(s.pair.perturbed), s.pair.sigma_per, false, true);
            consist = obj::consist_loss(normal_term, low.np_low);
            np_normal = normal_term.item();
            np_low = low.np_low.item();
          }

          TF metric;
          double margin = 0.0;
          if (weights.lambda_met != 0.0) {
            margin = obj::dynamic_margin(target, config.eta);
            metric = obj::amd_loss(extractor, out, normal, att, margin);
          }

          auto total = obj::total_loss(rec, consist, metric, weights);
          total.report.np_normal = np_normal;
          total.report.np_low = np_low;
          total.report.margin_used = margin;
          if (!std::isfinite(total.report.total)) throw NumericFault("defense loss is not finite");
          ad::backward(total.total);
          epoch_loss += total.report.total;
          result.steps.push_back(total.report);
          if (on_step) on_step(total.report);
        }
        if (epoch == 0) mark_live(params, live);
        double scale = 1.0 / static_cast<double>(end - start);
        if (config.clip_norm > 0.0) {
          const double norm = grad_norm(params) * scale;
          if (norm > config.clip_norm) scale *= config.clip_norm / norm;
        }
        adam.step(scale);
      }
    } catch (const NumericFault& e) {
      good.restore(adam);
      throw NumericFault(std::string("defense training diverged in epoch ") + std::to_string(epoch + 1) + ": " + e.what() +
                         " (parameters restored to the last good epoch)");
    }
    epoch_loss /= static_cast<double>(n);
    result.epoch_loss.push_back(epoch_loss);
    if (epoch == 0) result.dead_parameters = dead_names(params, live);
    good.take(adam);
    if (on_epoch) on_epoch(epoch + 1, epoch_loss);
  }
  result.heldout = evaluate_defense(system, test);
  return result;
}

nlohmann::json to_json(const obj::LossReport& r) {
  return {{"total", r.total},         {"rec", r.rec},       {"consist", r.consist},
          {"np_normal", r.np_normal}, {"np_low", r.np_low}, {"metric", r.metric},
          {"margin_used", r.margin_used}};
}

}  // namespace rawshield::train
