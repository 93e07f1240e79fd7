#include <gtest/gtest.h>

#include <cmath>

#include "rawshield/errors.hpp"
#include "rawshield/image_tensor.hpp"
#include "rawshield/training.hpp"

using namespace rawshield;
using ad::TensorD;
using ad::TensorF;

namespace {

nets::PredictorConfig tiny_predictor() {
  nets::PredictorConfig c;
  c.widths = {4, 8};
  c.hidden = 8;
  return c;
}

nets::BackboneConfig tiny_backbone() {
  nets::BackboneConfig c;
  c.width = 4;
  c.moe.gate_hidden = 4;
  c.moe.sft.latent = 4;
  return c;
}

std::vector<TensorF::Array> values_of(const nets::ParamList<float>& ps) {
  std::vector<TensorF::Array> out;
  for (const auto& p : ps) out.push_back(p.tensor.value());
  return out;
}

bool same_values(const std::vector<TensorF::Array>& a, const std::vector<TensorF::Array>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].size() != b[i].size() || (a[i] != b[i]).any()) return false;
  return true;
}

const train::ToyDataset& small_data() {
  static const train::ToyDataset d = [] {
    train::ToyDataOptions o;
    o.patch_size = 32;
    return train::synth_toy_dataset(12, 21, o);
  }();
  return d;
}

}  // namespace

TEST(Adam, ZeroGradLeavesParameters) {
  nets::ParamList<double> ps{{"w", TensorD(ad::Shape{3}, (TensorD::Array(3) << 1, -2, 3).finished(), true)}};
  train::Adam<double> adam(ps);
  for (int i = 0; i < 5; ++i) adam.step();
  EXPECT_EQ(adam.step_count(), 5);
  EXPECT_EQ(ps[0].tensor.value()[0], 1.0);
  EXPECT_EQ(ps[0].tensor.value()[1], -2.0);
  EXPECT_EQ(adam.first_moments()[0].abs().maxCoeff(), 0.0);
}

TEST(Adam, FirstStepMatchesHandComputation) {
  nets::ParamList<double> ps{{"w", TensorD(ad::Shape{2}, (TensorD::Array(2) << 0.5, -0.5).finished(), true)}};
  train::Adam<double> adam(ps, {0.01, 0.8, 0.99, 1e-8});
  auto t = ps[0].tensor;
  t.node()->grad_buffer() << 0.3, -4.0;
  adam.step();
  // m = 0.2 g, v = 0.01 g^2; bias-corrected m/(1-0.8) = g, v/(1-0.99) = g^2.
  EXPECT_NEAR(t.value()[0], 0.5 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(t.value()[1], -0.5 + 0.01 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_EQ(t.grad().abs().maxCoeff(), 0.0);
}

TEST(Adam, ConstantGradientStepsAtLearningRate) {
  for (double g : {1e-3, 0.7, -250.0}) {
    nets::ParamList<double> ps{{"w", TensorD::scalar(0.0, true)}};
    train::Adam<double> adam(ps, {1e-3});
    double prev = 0.0;
    for (int i = 0; i < 300; ++i) {
      ps[0].tensor.node()->grad_buffer()[0] = g;
      adam.step();
      const double now = ps[0].tensor.item();
      EXPECT_NEAR(now - prev, -std::copysign(1e-3, g), 1e-3 * 1e-4) << "g " << g << " step " << i;
      prev = now;
    }
  }
}

TEST(Adam, GradScaleAveragesAccumulatedGrads) {
  nets::ParamList<double> a{{"w", TensorD::scalar(1.0, true)}}, b{{"w", TensorD::scalar(1.0, true)}};
  train::Adam<double> oa(a), ob(b);
  a[0].tensor.node()->grad_buffer()[0] = 6.0;
  b[0].tensor.node()->grad_buffer()[0] = 2.0;
  oa.step(1.0 / 3.0);
  ob.step();
  EXPECT_EQ(a[0].tensor.item(), b[0].tensor.item());
}

TEST(Adam, NonFiniteGradNamesParameter) {
  nets::ParamList<double> ps{{"encoder.w", TensorD::scalar(1.0, true)}};
  train::Adam<double> adam(ps);
  ps[0].tensor.node()->grad_buffer()[0] = std::nan("");
  try {
    adam.step();
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.w"), std::string::npos);
  }
  EXPECT_EQ(ps[0].tensor.item(), 1.0);
  EXPECT_EQ(adam.step_count(), 0);
}

TEST(Adam, RejectsBadConfig) {
  nets::ParamList<double> ps{{"w", TensorD::scalar(1.0, true)}};
  EXPECT_THROW(train::Adam<double>(ps, {0.0}), DomainError);
  EXPECT_THROW(train::Adam<double>(ps, {1e-3, 1.0}), DomainError);
  nets::ParamList<double> frozen{{"w", TensorD::scalar(1.0, false)}};
  EXPECT_THROW(train::Adam<double>{frozen}, Error);
}

TEST(Checkpoint, ResumeMatchesUninterruptedTrajectory) {
  const auto& data = small_data();
  auto run_step = [&](const nets::NoisePredictorNet<float>& net, train::Adam<float>& adam, std::size_t i) {
    const auto& s = data.samples[i % data.samples.size()];
    const auto terms = obj::dual_domain_loss(net, image_to_tensor<float>(s.degraded.image), normalize(s.degraded.attack).value,
                                             image_to_tensor<float>(s.pair.original),
                                             image_to_tensor<float>(s.pair.perturbed), s.pair.sigma_per);
    ad::backward(obj::consist_loss(terms.np_normal, terms.np_low));
    adam.step();
  };
  nets::NoisePredictorNet<float> a(tiny_predictor(), 3);
  train::Adam<float> adam_a(a.parameters());
  for (std::size_t i = 0; i < 4; ++i) run_step(a, adam_a, i);
  const auto path = std::filesystem::path(testing::TempDir()) / "resume.adt1";
  train::save_checkpoint(path, a.parameters(), &adam_a, {{"epoch", 4}});
  run_step(a, adam_a, 4);
  run_step(a, adam_a, 5);

  nets::NoisePredictorNet<float> b(tiny_predictor(), 99);
  train::Adam<float> adam_b(b.parameters());
  const auto meta = train::load_checkpoint(path, b.parameters(), &adam_b);
  EXPECT_EQ(meta.at("epoch"), 4);
  EXPECT_EQ(adam_b.step_count(), 4);
  run_step(b, adam_b, 4);
  run_step(b, adam_b, 5);
  EXPECT_TRUE(same_values(values_of(a.parameters()), values_of(b.parameters())));
  for (std::size_t i = 0; i < adam_a.first_moments().size(); ++i) {
    EXPECT_TRUE((adam_a.first_moments()[i] == adam_b.first_moments()[i]).all());
    EXPECT_TRUE((adam_a.second_moments()[i] == adam_b.second_moments()[i]).all());
  }
}

TEST(Checkpoint, ShapeAndNameMismatch) {
  nets::NoisePredictorNet<float> a(tiny_predictor(), 3);
  const auto path = std::filesystem::path(testing::TempDir()) / "mismatch.adt1";
  train::save_checkpoint(path, a.parameters());
  auto other = tiny_predictor();
  other.hidden = 6;
  nets::NoisePredictorNet<float> b(other, 3);
  const auto before = values_of(b.parameters());
  EXPECT_THROW(train::load_checkpoint(path, b.parameters()), ShapeError);
  EXPECT_TRUE(same_values(before, values_of(b.parameters())));
  EXPECT_THROW(train::load_checkpoint(path, a.parameters("renamed")), FormatError);
  train::Adam<float> adam(a.parameters());
  EXPECT_THROW(train::load_checkpoint(path, a.parameters(), &adam), FormatError);
}

TEST(ToyData, EmptyIsAnError) { EXPECT_THROW(train::synth_toy_dataset(0, 1), Error); }

TEST(ToyData, DeterministicAndPrefixStable) {
  train::ToyDataOptions o;
  o.patch_size = 16;
  const auto a = train::synth_toy_dataset(5, 77, o);
  const auto b = train::synth_toy_dataset(5, 77, o);
  const auto c = train::synth_toy_dataset(3, 77, o);
  const auto d = train::synth_toy_dataset(5, 78, o);
  EXPECT_EQ(train::dataset_digest(a), train::dataset_digest(b));
  EXPECT_NE(train::dataset_digest(a), train::dataset_digest(d));
  train::ToyDataset prefix = a;
  prefix.samples.resize(3);
  EXPECT_EQ(train::dataset_digest(prefix), train::dataset_digest(c));
}

TEST(ToyData, SamplesAreInRangeAndDarkened) {
  const auto& data = small_data();
  for (const auto& s : data.samples) {
    for (const ImagePlane* img : {&s.clean, &s.lowlight_clean, &s.degraded.image, &s.lowlight.image, &s.pair.perturbed}) {
      EXPECT_GE(img->data().minCoeff(), 0.0);
      EXPECT_LE(img->data().maxCoeff(), 1.0);
    }
    EXPECT_GE(s.brightness, 0.05);
    EXPECT_LE(s.brightness, 0.3);
    EXPECT_TRUE((s.lowlight_clean.data() <= s.clean.data() + 1e-12).all());
    EXPECT_LT(s.lowlight_clean.data().mean(), s.clean.data().mean());
    EXPECT_GE(s.pair.sigma_per, kSigmaPerMin);
    EXPECT_LE(s.pair.sigma_per, kSigmaPerMax);
    EXPECT_EQ(s.pair.k_per, 0.0);
    EXPECT_EQ(s.pair.original.data().matrix(), s.lowlight.image.data().matrix());
  }
}

TEST(ToyData, RecordedParametersRegenerateTheImages) {
  const auto& data = small_data();
  for (const auto& s : data.samples) {
    for (const auto* rec : {&s.degraded, &s.lowlight}) {
      AttackOptions o;
      o.profile = rec->profile;
      o.params = rec->attack;
      o.mode = rec->mode;
      const ImagePlane& source = rec == &s.degraded ? s.clean : s.lowlight_clean;
      const auto again = synthesize_attack(source, o, rec->seed);
      EXPECT_EQ(again.image.data().matrix(), rec->image.data().matrix());
      EXPECT_GE(rec->attack.k, noise_range::k_min);
      EXPECT_LE(rec->attack.k, noise_range::k_max);
    }
    const auto pair = perturb_lowlight(s.lowlight.image, s.pair.sigma_per, s.lowlight.profile, s.pair.seed, s.lowlight.mode);
    EXPECT_EQ(pair.perturbed.data().matrix(), s.pair.perturbed.data().matrix());
  }
}

TEST(ToyData, SrgbVariantKeepsLabelsAndEnergy) {
  train::ToyDataOptions o;
  o.patch_size = 32;
  const auto& pds = small_data();
  o.synthesis = train::Synthesis::SrgbGaussian;
  const auto srgb = train::synth_toy_dataset(12, 21, o);
  double rms_pds = 0, rms_srgb = 0;
  for (std::size_t i = 0; i < pds.samples.size(); ++i) {
    const auto& a = pds.samples[i];
    const auto& b = srgb.samples[i];
    EXPECT_EQ(a.clean.data().matrix(), b.clean.data().matrix());
    EXPECT_EQ(a.degraded.attack, b.degraded.attack);
    EXPECT_EQ(a.pair.sigma_per, b.pair.sigma_per);
    EXPECT_NE(a.degraded.image.data().matrix(), b.degraded.image.data().matrix());
    rms_pds += std::sqrt((a.degraded.image.data() - a.clean.data()).square().mean());
    rms_srgb += std::sqrt((b.degraded.image.data() - b.clean.data()).square().mean());
  }
  // Clamping at 0 and 1 removes some of the injected energy.
  EXPECT_NEAR(rms_srgb / rms_pds, 1.0, 0.25);
}

TEST(PredictorTraining, DeterministicLiveAndDescending) {
  const auto& data = small_data();
  train::PredictorTrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch = 4;
  cfg.crop = 16;
  cfg.lr = 3e-3;
  nets::NoisePredictorNet<float> a(tiny_predictor(), 5), b(tiny_predictor(), 5);
  const auto ra = train::train_noise_predictor(a, data, data, cfg);
  const auto rb = train::train_noise_predictor(b, data, data, cfg);
  EXPECT_TRUE(same_values(values_of(a.parameters()), values_of(b.parameters())));
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
  EXPECT_TRUE(ra.dead_parameters.empty());
  ASSERT_EQ(ra.epoch_loss.size(), 12u);
  EXPECT_LT(ra.epoch_loss[11], ra.epoch_loss[0]);
  EXPECT_EQ(ra.heldout.predicted.size(), data.samples.size());
}

TEST(PredictorTraining, DivergenceRestoresLastGoodEpoch) {
  auto data = small_data();
  train::PredictorTrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 4;
  cfg.crop = 0;
  nets::NoisePredictorNet<float> net(tiny_predictor(), 5);
  const auto before = values_of(net.parameters());
  data.samples[7].degraded.image(3, 3, 1) = std::nan("");
  EXPECT_THROW(train::train_noise_predictor(net, data, {}, cfg), NumericFault);
  EXPECT_TRUE(same_values(before, values_of(net.parameters())));
}

TEST(PredictorTraining, LowLightTermAloneIsWorseThanBoth) {
  train::ToyDataOptions o;
  o.patch_size = 32;
  const auto data = train::synth_toy_dataset(40, 31, o);
  const auto heldout = train::synth_toy_dataset(20, 32, o);
  train::PredictorTrainConfig cfg;
  cfg.epochs = 8;
  cfg.crop = 0;
  nets::NoisePredictorNet<float> both(tiny_predictor(), 6), low_only(tiny_predictor(), 6);
  const auto rb = train::train_noise_predictor(both, data, heldout, cfg);
  cfg.use_normal = false;
  const auto rl = train::train_noise_predictor(low_only, data, heldout, cfg);
  EXPECT_GT(rl.heldout.mse, rb.heldout.mse);
}

TEST(PredictorTraining, AugmentationIsDeterministicAndChangesTheRun) {
  const auto& data = small_data();
  train::PredictorTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.crop = 16;
  nets::NoisePredictorNet<float> plain(tiny_predictor(), 5), a(tiny_predictor(), 5), b(tiny_predictor(), 5);
  train::train_noise_predictor(plain, data, {}, cfg);
  cfg.augment = true;
  const auto ra = train::train_noise_predictor(a, data, {}, cfg);
  const auto rb = train::train_noise_predictor(b, data, {}, cfg);
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
  EXPECT_TRUE(same_values(values_of(a.parameters()), values_of(b.parameters())));
  EXPECT_FALSE(same_values(values_of(a.parameters()), values_of(plain.parameters())));
}

TEST(PredictorTraining, RejectsEmptyData) {
  nets::NoisePredictorNet<float> net(tiny_predictor(), 5);
  EXPECT_THROW(train::train_noise_predictor(net, {}, {}, {}), Error);
}

TEST(DefenseTraining, JointRunReportsWeightedTotal) {
  const auto& data = small_data();
  train::DefenseSystem sys(tiny_predictor(), tiny_backbone(), 4);
  train::DefenseTrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 3;
  cfg.crop = 32;
  std::vector<obj::LossReport> seen;
  const auto r = train::train_defense_toy(sys, data, data, cfg, [&](const obj::LossReport& l) { seen.push_back(l); });
  ASSERT_EQ(seen.size(), data.samples.size());
  for (const auto& l : seen) {
    EXPECT_NEAR(l.total, l.rec + 0.5 * l.consist + 0.01 * l.metric, 1e-4 * l.total);
    EXPECT_NEAR(l.consist, l.np_normal + l.np_low, 1e-6);
    EXPECT_GT(l.margin_used, 0.0);
    EXPECT_GT(l.metric, 0.0);
  }
  EXPECT_TRUE(r.dead_parameters.empty()) << r.dead_parameters.front();
  EXPECT_GT(r.heldout.input_mae, 0.0);
  const auto j = train::to_json(seen.front());
  EXPECT_EQ(j.size(), 7u);
}

TEST(DefenseTraining, FrozenPredictorIsUntouched) {
  const auto& data = small_data();
  train::DefenseSystem sys(tiny_predictor(), tiny_backbone(), 4);
  const auto before = values_of(sys.predictor.parameters());
  const auto backbone_before = values_of(sys.backbone.parameters());
  train::DefenseTrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 4;
  cfg.freeze_predictor = true;
  cfg.use_metric = false;
  std::vector<obj::LossReport> seen;
  train::train_defense_toy(sys, data, data, cfg, [&](const obj::LossReport& l) { seen.push_back(l); });
  EXPECT_TRUE(same_values(before, values_of(sys.predictor.parameters())));
  EXPECT_FALSE(same_values(backbone_before, values_of(sys.backbone.parameters())));
  for (const auto& l : seen) {
    EXPECT_EQ(l.consist, 0.0);
    EXPECT_EQ(l.metric, 0.0);
    EXPECT_DOUBLE_EQ(l.total, l.rec);
  }
}

TEST(DefenseTraining, LooseClipIsANoOpAndNegativeClipIsRejected) {
  const auto& data = small_data();
  train::DefenseTrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 4;
  train::DefenseSystem off(tiny_predictor(), tiny_backbone(), 4), loose(tiny_predictor(), tiny_backbone(), 4),
      tight(tiny_predictor(), tiny_backbone(), 4);
  train::train_defense_toy(off, data, {}, cfg);
  cfg.clip_norm = 1e30;
  train::train_defense_toy(loose, data, {}, cfg);
  cfg.clip_norm = 1e-3;
  train::train_defense_toy(tight, data, {}, cfg);
  EXPECT_TRUE(same_values(values_of(off.parameters(true)), values_of(loose.parameters(true))));
  EXPECT_FALSE(same_values(values_of(off.parameters(true)), values_of(tight.parameters(true))));
  cfg.clip_norm = -1.0;
  EXPECT_THROW(train::train_defense_toy(off, data, {}, cfg), DomainError);
}

TEST(DefenseTraining, SizeMustBeMultipleOf32) {
  train::DefenseSystem sys(tiny_predictor(), tiny_backbone(), 4);
  train::DefenseTrainConfig cfg;
  cfg.crop = 16;
  EXPECT_THROW(train::train_defense_toy(sys, small_data(), {}, cfg), ShapeError);
}
