#include "rawshield/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>

#include "rawshield/attack.hpp"
#include "rawshield/errors.hpp"
#include "rawshield/grad_check.hpp"
#include "rawshield/image_tensor.hpp"
#include "rawshield/objectives.hpp"
#include "rawshield/profiles.hpp"
#include "rawshield/stats.hpp"
#include "rawshield/synthetic.hpp"

namespace rawshield::verify {

bool SuiteReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

void SuiteReport::add(std::string name, bool ok, double observed, double threshold, std::string detail) {
  checks.push_back({std::move(name), ok, observed, threshold, std::move(detail)});
}

namespace {

std::string fmt(double x) {
  std::ostringstream s;
  s << std::setprecision(6) << x;
  return s.str();
}

double channel_variance(const ImagePlane& img, int c, Index border) {
  MomentAccumulator acc;
  for (Index y = border; y < img.height() - border; ++y)
    for (Index x = border; x < img.width() - border; ++x) acc.add(img(y, x, c));
  return acc.variance();
}

double mean_channel_variance(const ImagePlane& img, Index border) {
  double v = 0.0;
  for (int c = 0; c < img.channels(); ++c) v += channel_variance(img, c, border);
  return v / static_cast<double>(img.channels());
}

}  // namespace

// ---- RAW noise --------------------------------------------------------------------

SuiteReport verify_variance_linearity(const LinearityOptions& o) {
  SuiteReport report{"LINEARITY", {}, {}};
  if (o.intensities.size() < 2) throw DomainError("variance linearity needs at least two intensities");
  std::vector<double> x, v, w;
  for (std::size_t i = 0; i < o.intensities.size(); ++i) {
    BayerPlane plane(o.side, o.side);
    plane.data().setConstant(o.intensities[i]);
    CounterRng rng(o.seed, i);
    const BayerPlane noisy = inject_noise(plane, o.params, o.mode, rng);
    MomentAccumulator acc;
    for (Index q = 0; q < noisy.size(); ++q) acc.add(noisy.data().data()[q]);
    x.push_back(o.intensities[i]);
    v.push_back(acc.variance());
    w.push_back(1.0 / (acc.variance() * acc.variance()));
  }
  const LineFit fit = fit_line(x, v, w);
  const double k = o.params.k, s2 = o.params.sigma * o.params.sigma;
  const double slope_err = std::abs(fit.slope - k) / k;
  const double icpt_err = std::abs(fit.intercept - s2) / s2;
  report.add("slope", slope_err <= o.slope_tol, slope_err, o.slope_tol,
             "slope " + fmt(fit.slope) + " vs k " + fmt(k) + " (relative error)");
  report.add("intercept", icpt_err <= o.intercept_tol, icpt_err, o.intercept_tol,
             "intercept " + fmt(fit.intercept) + " vs sigma^2 " + fmt(s2) + " (relative error)");
  return report;
}

SuiteReport verify_clt(const CltOptions& o, CltMeasurement* measurement) {
  SuiteReport report{"CLT", {}, {}};
  if (o.tile % o.block != 0) throw DomainError("clt: tile must be a multiple of the block size");
  MomentAccumulator full, blocked;
  const double inv = 1.0 / static_cast<double>(o.block * o.block);
  for (int t = 0; t < o.tiles; ++t) {
    BayerPlane plane(o.tile, o.tile);
    plane.data().setConstant(o.intensity);
    CounterRng rng(o.seed, static_cast<std::uint64_t>(t));
    const BayerPlane noisy = inject_noise(plane, o.params, o.mode, rng);
    const auto& d = noisy.data();
    for (Index q = 0; q < d.size(); ++q) full.add(d.data()[q]);
    for (Index by = 0; by < o.tile; by += o.block)
      for (Index bx = 0; bx < o.tile; bx += o.block) blocked.add(d.block(by, bx, o.block, o.block).sum() * inv);
  }
  CltMeasurement m{full.excess_kurtosis(), blocked.excess_kurtosis(), full.count(), blocked.count()};
  if (measurement) *measurement = m;
  const double se_full = std::sqrt(24.0 / static_cast<double>(m.samples_full));
  if (o.mode == InjectionMode::GaussApprox) {
    report.note = "degenerate (gaussian mode)";
    report.add("full_resolution_gaussian", std::abs(m.kurtosis_full) <= 5.0 * se_full, std::abs(m.kurtosis_full),
               5.0 * se_full, "field is Gaussian by construction; excess kurtosis should vanish");
    return report;
  }
  const double expected = o.params.k > 0.0
                              ? std::pow(o.params.k, 3) * o.intensity /
                                    std::pow(o.params.k * o.intensity + o.params.sigma * o.params.sigma, 2)
                              : 0.0;
  const double ratio = std::abs(m.kurtosis_block) > 0.0 ? std::abs(m.kurtosis_full) / std::abs(m.kurtosis_block)
                                                        : std::numeric_limits<double>::infinity();
  report.add("kurtosis_reduction", ratio >= o.reduction, ratio, o.reduction,
             "|kurt| full " + fmt(m.kurtosis_full) + " (theory " + fmt(expected) + ", n=" + std::to_string(m.samples_full) +
                 ") vs " + std::to_string(o.block) + "x" + std::to_string(o.block) + " " + fmt(m.kurtosis_block) +
                 " (n=" + std::to_string(m.samples_block) + ")");
  return report;
}

// ---- ISP ----------------------------------------------------------------------------

SuiteReport verify_roundtrip(const RoundTripOptions& o) {
  SuiteReport report{"ROUNDTRIP", {}, {}};
  Demosaicer demosaic = demosaic_bilinear;
  if (o.corrupt_demosaic) {
    // Green kernel weights summing to 0.9 instead of 1.
    demosaic = [](const BayerPlane& raw) {
      ImagePlane img = demosaic_bilinear(raw);
      for (Index y = 0; y < img.height(); ++y)
        for (Index x = 0; x < img.width(); ++x) img(y, x, 1) *= 0.9;
      return img;
    };
  }
  const ImagePlane chart = smooth_chart(o.size, o.size);
  for (const auto& p : bundled_profiles()) {
    double worst = 0.0;
    for (double v : {0.0, 0.1, 0.5, 0.93, 1.0}) {
      const ImagePlane img = ImagePlane::constant(o.size, o.size, {v, 0.8 * v, 0.6 * v}, ColorDomain::SrgbNonlinear);
      const ImagePlane back = forward_isp(inverse_isp(img, p), p, demosaic);
      worst = std::max(worst, (back.data() - img.data()).abs().maxCoeff());
    }
    report.add("constant/" + p.name, worst <= 1e-12, worst, 1e-12, "max |error| over constant images");
    const double db = psnr(forward_isp(inverse_isp(chart, p), p, demosaic).data(), chart.data());
    report.add("chart_psnr/" + p.name, db >= o.min_psnr, db, o.min_psnr, "dB on a smooth chart");
  }
  return report;
}

// ---- autodiff -----------------------------------------------------------------------

namespace {

using ad::Shape;
using ad::TensorD;

TensorD random_tensor(const Shape& shape, CounterRng& rng, double lo, double hi, bool rg = true) {
  TensorD::Array v(ad::numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(lo, hi);
  return TensorD(shape, v, rg);
}

TensorD weighted_sum(const TensorD& y, std::uint64_t seed) {
  CounterRng rng(seed, 99);
  return ad::sum(y * random_tensor(y.shape(), rng, -1.0, 1.0, false));
}

std::vector<TensorD> tensors(const nets::ParamList<double>& params) {
  std::vector<TensorD> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

void randomize(const nets::ParamList<double>& params, CounterRng& rng, double scale = 0.3) {
  for (auto p : params) {
    auto& v = p.tensor.mutable_value();
    for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-scale, scale);
  }
}

const obj::SurrogateFeatureExtractor<double>& surrogate() {
  static const obj::SurrogateFeatureExtractor<double> ex;
  return ex;
}

using Case = std::function<std::vector<ad::GradCheckReport>(std::uint64_t)>;

ad::GradCheckReport check(const std::function<TensorD()>& f, const std::vector<TensorD>& params,
                          ad::GradCheckOptions opt = {}) {
  return ad::grad_check(f, params, opt);
}

// Image-sized losses: the distances at deep surrogate stages are ~1e-4, so
// the probe step stays far below them, and the negative is an unrelated
// image so the hinge sits well away from the margin.
ad::GradCheckOptions image_options(std::uint64_t seed) {
  ad::GradCheckOptions opt;
  opt.step = 1e-8;
  opt.max_coordinates = 512;
  opt.seed = seed;
  return opt;
}

std::vector<std::pair<std::string, Case>> gradient_cases() {
  std::vector<std::pair<std::string, Case>> cases;
  cases.emplace_back("conv2d", [](std::uint64_t s) {
    CounterRng rng(s);
    const int stride = 1 + static_cast<int>(s % 2);
    const Index h = stride == 1 ? 5 : 7;
    auto x = random_tensor({2, 2, h, h}, rng, -1, 1);
    auto w = random_tensor({3, 2, 3, 3}, rng, -1, 1);
    auto b = random_tensor({3}, rng, -1, 1);
    auto w1 = random_tensor({4, 2, 1, 1}, rng, -1, 1);
    return std::vector{check([&] { return weighted_sum(ad::conv2d(x, w, b, stride, 1), s); }, {x, w, b}),
                       check([&] { return weighted_sum(ad::conv2d(x, w1, TensorD()), s); }, {x, w1})};
  });
  cases.emplace_back("leaky_relu", [](std::uint64_t s) {
    CounterRng rng(s);
    auto x = random_tensor({3, 7}, rng, -3, 3);
    return std::vector{check([&] { return weighted_sum(ad::leaky_relu(x, 0.2), s); }, {x})};
  });
  cases.emplace_back("sigmoid", [](std::uint64_t s) {
    CounterRng rng(s);
    auto x = random_tensor({3, 7}, rng, -3, 3);
    return std::vector{check([&] { return weighted_sum(ad::sigmoid(x), s); }, {x})};
  });
  cases.emplace_back("pooling", [](std::uint64_t s) {
    CounterRng rng(s);
    auto x = random_tensor({2, 3, 4, 4}, rng, -1, 1);
    return std::vector{check([&] { return weighted_sum(ad::global_avg_pool(x), s); }, {x}),
                       check([&] { return weighted_sum(ad::avg_pool(x, 2), s); }, {x}),
                       check([&] { return weighted_sum(ad::upsample_nearest(x, 2), s); }, {x})};
  });
  cases.emplace_back("affine_softmax", [](std::uint64_t s) {
    CounterRng rng(s);
    auto x = random_tensor({3, 4}, rng, -1, 1);
    auto w = random_tensor({5, 4}, rng, -1, 1);
    auto b = random_tensor({5}, rng, -1, 1);
    return std::vector{check([&] { return weighted_sum(ad::affine(x, w, b), s); }, {x, w, b}),
                       check([&] { return weighted_sum(ad::softmax(ad::affine(x, w, b)), s); }, {x, w, b})};
  });
  cases.emplace_back("broadcast_arithmetic", [](std::uint64_t s) {
    CounterRng rng(s);
    auto a = random_tensor({2, 3, 2, 2}, rng, -1, 1);
    auto c = random_tensor({1, 3, 1, 1}, rng, -1, 1);
    auto k = random_tensor({1}, rng, -1, 1);
    auto d = random_tensor({2, 3, 2, 2}, rng, 2, 3);
    return std::vector{check([&] { return weighted_sum(a * c + k - a / d, s); }, {a, c, k, d}),
                       check([&] { return weighted_sum(c / d + k * a, s); }, {a, c, k, d}),
                       check([&] { return weighted_sum(ad::scale_shift(a, 2.5, -0.5), s); }, {a})};
  });
  cases.emplace_back("layout", [](std::uint64_t s) {
    CounterRng rng(s);
    auto a = random_tensor({2, 3, 2, 2}, rng, -1, 1);
    auto b = random_tensor({2, 2, 2, 2}, rng, -1, 1);
    auto v = random_tensor({2, 1, 1, 1}, rng, -1, 1);
    return std::vector{check([&] { return weighted_sum(ad::concat_channels(a, b), s); }, {a, b}),
                       check([&] { return weighted_sum(ad::slice_channels(a, 1, 2), s); }, {a}),
                       check([&] { return weighted_sum(ad::reshape(a, {4, 6}), s); }, {a}),
                       check([&] { return weighted_sum(ad::expand(v, {2, 3, 2, 2}), s); }, {v})};
  });
  cases.emplace_back("reductions", [](std::uint64_t s) {
    CounterRng rng(s);
    auto x = random_tensor({2, 5}, rng, -1, 1);
    std::vector<ad::GradCheckReport> out;
    for (auto kind : {ad::Reduction::Sum, ad::Reduction::Mean, ad::Reduction::L1, ad::Reduction::L2})
      out.push_back(check([&] { return ad::reduce(x * x + x, kind); }, {x}));
    return out;
  });
  cases.emplace_back("noise_predictor", [](std::uint64_t s) {
    nets::PredictorConfig cfg;
    cfg.widths = {4, 6, 8};
    cfg.hidden = 5;
    nets::NoisePredictorNet<double> net(cfg, s);
    CounterRng rng(s);
    auto x = random_tensor({1, 3, 6, 6}, rng, 0, 1, false);
    return std::vector{check([&] { return weighted_sum(net.forward(x), s); }, tensors(net.parameters()))};
  });
  cases.emplace_back("sft", [](std::uint64_t s) {
    CounterRng rng(s);
    nets::SftConfig cfg;
    cfg.latent = 4;
    nets::SftLayer<double> sft(3, cfg, rng);
    nets::ParamList<double> params;
    sft.collect(params, "sft");
    randomize(params, rng);
    auto f = random_tensor({1, 3, 4, 4}, rng, -1, 1, false);
    auto p = random_tensor({1, 2}, rng, 0, 1);
    return std::vector{check([&] { return weighted_sum(sft.forward(f, p), s); }, tensors(params)),
                       check([&] { return weighted_sum(sft.forward(f, p), s); }, {p})};
  });
  cases.emplace_back("da_moe", [](std::uint64_t s) {
    CounterRng rng(s);
    nets::MoeConfig cfg;
    cfg.gate_hidden = 4;
    cfg.sft.latent = 4;
    nets::DaMoeBlock<double> block(3, nets::MoeMode::Dual, cfg, rng);
    nets::ParamList<double> params;
    block.collect(params, "moe");
    randomize(params, rng);
    auto f = random_tensor({1, 3, 4, 4}, rng, -1, 1);
    auto p = random_tensor({1, 2}, rng, 0, 1);
    auto all = tensors(params);
    all.push_back(f);
    all.push_back(p);
    return std::vector{check([&] { return ad::sum(block.forward(f, p)); }, all)};
  });
  cases.emplace_back("amd_loss", [](std::uint64_t s) {
    CounterRng rng(s);
    auto normal = random_tensor({1, 3, 32, 32}, rng, 0.2, 0.8, false);
    auto att = random_tensor({1, 3, 32, 32}, rng, 0, 1, false);
    auto out = TensorD(normal.shape(), normal.value() + random_tensor(normal.shape(), rng, -0.2, 0.2, false).value(), true);
    return std::vector{
        check([&] { return obj::amd_loss(surrogate(), out, normal, att, 1e-3); }, {out}, image_options(s))};
  });
  cases.emplace_back("dual_domain_loss", [](std::uint64_t s) {
    nets::PredictorConfig cfg;
    cfg.widths = {3, 4, 5};
    cfg.hidden = 4;
    nets::NoisePredictorNet<double> net(cfg, s);
    CounterRng rng(s);
    auto att = random_tensor({1, 3, 8, 8}, rng, 0, 1, false);
    auto orig = random_tensor({1, 3, 8, 8}, rng, 0, 0.3, false);
    auto pert = TensorD(orig.shape(), orig.value() + random_tensor(orig.shape(), rng, -0.01, 0.01, false).value());
    const auto target = normalize(NoiseParams{3e-3, 1e-3}).value;
    const auto params = tensors(net.parameters());
    // The prediction on the original image is a stop-gradient target, so the
    // finite-difference program holds it at the current parameters.
    NormalizedNoiseParams base;
    {
      ad::NoGradGuard guard;
      const auto p = net.forward(orig);
      base = {p.value()[0], p.value()[1]};
    }
    auto frozen = [&] {
      return obj::consist_loss(obj::squared_error(net.forward(att), target),
                               obj::np_low_from_predictions(base, net.forward(pert), 2e-3));
    };
    auto report = check(frozen, params);
    // backward of the real loss must equal backward of the frozen program.
    for (auto p : params) p.zero_grad();
    const auto terms = obj::dual_domain_loss(net, att, target, orig, pert, 2e-3);
    ad::backward(obj::consist_loss(terms.np_normal, terms.np_low));
    std::vector<TensorD::Array> full;
    for (auto p : params) {
      full.push_back(p.grad());
      p.zero_grad();
    }
    ad::backward(frozen());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i];
      if (!(p.grad() == full[i]).all()) {
        report.passed = false;
        report.worst = "backward differs from the stop-gradient program";
      }
      p.zero_grad();
    }
    return std::vector{report};
  });
  cases.emplace_back("total_loss", [](std::uint64_t s) {
    CounterRng rng(s);
    auto normal = random_tensor({1, 3, 32, 32}, rng, 0.2, 0.8, false);
    auto att = random_tensor({1, 3, 32, 32}, rng, 0, 1, false);
    auto out = TensorD(normal.shape(), normal.value() + random_tensor(normal.shape(), rng, -0.2, 0.2, false).value(), true);
    auto c = TensorD::scalar(0.2, true);
    return std::vector{check(
        [&] {
          return obj::total_loss(obj::reconstruction_loss(out, normal), c * c,
                                 obj::amd_loss(surrogate(), out, normal, att, 1e-3))
              .total;
        },
        {out, c}, image_options(s))};
  });
  return cases;
}

}  // namespace

SuiteReport verify_gradients(const GradOptions& o) {
  SuiteReport report{"GRAD", {}, {}};
  for (const auto& [name, run] : gradient_cases()) {
    int failures = 0;
    double worst_rel = 0.0, worst_abs = 0.0;
    Index coordinates = 0;
    std::string worst;
    for (int i = 0; i < o.seeds; ++i) {
      const std::uint64_t seed = o.first_seed + static_cast<std::uint64_t>(i);
      for (const auto& r : run(seed)) {
        worst_rel = std::max(worst_rel, r.max_rel_error);
        worst_abs = std::max(worst_abs, r.max_abs_error);
        coordinates += r.checks;
        if (!r.passed) {
          ++failures;
          if (worst.empty()) worst = "seed " + std::to_string(seed) + ": " + r.worst;
        }
      }
    }
    report.add(name, failures == 0, failures, 0,
               std::to_string(o.seeds) + " seeds, " + std::to_string(coordinates) + " probes, max abs error " +
                   fmt(worst_abs) + ", max relative error above the floor " + fmt(worst_rel) +
                   (worst.empty() ? "" : "; " + worst));
  }
  return report;
}

// ---- objectives ---------------------------------------------------------------------

SuiteReport verify_margin() {
  SuiteReport report{"MARGIN", {}, {}};
  auto scalars = [](const std::vector<double>& v) {
    std::vector<TensorD> out;
    for (double x : v) out.push_back(TensorD::scalar(x));
    return out;
  };
  const std::vector<double> dn{0.3, 0.2, 0.1, 0.05, 0.02};
  const auto n = scalars(dn);

  // (a) nonincreasing in d(out, att), margin fixed.
  {
    double prev = std::numeric_limits<double>::infinity();
    int violations = 0;
    for (int i = 0; i <= 200; ++i) {
      const double t = 0.0025 * i;
      const double v = obj::amd_ratio(n, scalars(std::vector<double>(dn.size(), t)), 0.1).item();
      if (v > prev) ++violations;
      prev = v;
    }
    report.add("nonincreasing_in_d_att", violations == 0, violations, 0, "201-point sweep of d(out, att) in [0, 0.5], m=0.1");
  }
  // (b) nondecreasing in the margin.
  {
    const auto da = scalars({0.25, 0.2, 0.15, 0.1, 0.05});
    double prev = -1.0;
    int violations = 0;
    for (int i = 0; i <= 200; ++i) {
      const double v = obj::amd_ratio(n, da, 0.0015 * i).item();
      if (v < prev) ++violations;
      prev = v;
    }
    report.add("nondecreasing_in_margin", violations == 0, violations, 0, "201-point sweep of m in [0, 0.3]");
  }
  // (c) saturated regime: every stage d(out, att) <= m.
  {
    double expected = 0.0;
    for (double d : dn) expected += d / obj::kAmdEpsilon;
    double worst = 0.0;
    for (double m : {0.05, 0.1, 0.5}) {
      std::vector<double> da;
      for (std::size_t i = 0; i < dn.size(); ++i) da.push_back(m * (0.1 + 0.2 * static_cast<double>(i)));
      const double v = obj::amd_ratio(n, scalars(da), m).item();
      worst = std::max(worst, std::abs(v - expected) / expected);
    }
    report.add("saturated_equals_sum_over_eps", worst <= 1e-15, worst, 1e-15, "relative difference to sum d_i/1e-7");
  }
  // Surrogate features of real images: margin sweep and saturation.
  {
    const ImagePlane chart = smooth_chart(32, 32);
    const TensorD normal = image_to_tensor<double>(chart);
    const TensorD att = image_to_tensor<double>(inject_srgb_gaussian(chart, 0.05, 3));
    const TensorD out = image_to_tensor<double>(inject_srgb_gaussian(chart, 0.01, 4));
    double prev = -1.0;
    int violations = 0;
    for (int i = 0; i <= 50; ++i) {
      const double v = obj::amd_loss(surrogate(), out, normal, att, 0.002 * i).item();
      if (v < prev) ++violations;
      prev = v;
    }
    report.add("image_nondecreasing_in_margin", violations == 0, violations, 0, "51-point sweep of m in [0, 0.1]");
    double expected = 0.0;
    for (int s = 0; s < obj::kStages; ++s)
      expected += obj::perceptual_distance(surrogate(), out, normal, s).item() / obj::kAmdEpsilon;
    const double v = obj::amd_loss(surrogate(), out, normal, att, 10.0).item();
    const double rel = std::abs(v - expected) / expected;
    report.add("image_saturated_equals_sum_over_eps", rel <= 1e-12, rel, 1e-12, "m=10 saturates every stage");
  }
  return report;
}

SuiteReport verify_additive_variance() {
  SuiteReport report{"ADDITIVE", {}, {}};
  double worst_on = 0.0;
  int violations = 0;
  double smallest_off = std::numeric_limits<double>::infinity();
  for (double k : {2e-3, 6e-3})
    for (double sigma : {2e-4, 1e-3, 3e-3})
      for (double sigma_per : {1e-3, 3e-3}) {
        const NormalizedNoiseParams orig = normalize(NoiseParams{k, sigma}).value;
        const NoiseParams decoded = denormalize(orig);
        const double on = std::sqrt(decoded.sigma * decoded.sigma + sigma_per * sigma_per);
        auto np_low = [&](double s) {
          const auto p = normalize(NoiseParams{decoded.k, s}).value;
          TensorD::Array v(2);
          v << p.k_n, p.sigma_n;
          return obj::np_low_from_predictions(orig, TensorD(Shape{1, 2}, v), sigma_per).item();
        };
        worst_on = std::max(worst_on, np_low(on));
        for (double sign : {-1.0, 1.0}) {
          double prev = 0.0;
          for (double d : {1e-6, 1e-5, 3e-5, 1e-4, 3e-4}) {
            const double v = np_low(on + sign * d);
            if (!(v > prev)) ++violations;
            smallest_off = std::min(smallest_off, v);
            prev = v;
          }
        }
      }
  report.add("on_manifold_zero", worst_on <= 1e-10, worst_on, 1e-10, "max np_low with sigma' = sqrt(sigma^2 + sigma_per^2)");
  report.add("off_manifold_monotone", violations == 0, violations, 0,
             "np_low strictly increasing in |delta sigma| for both signs; smallest off-manifold value " + fmt(smallest_off));
  return report;
}

// ---- stats-variance -----------------------------------------------------------------

namespace {

/// Mean squared row norm of the linear RAW→linear-sRGB map (demosaic, white
/// balance, CCM) per output channel, from impulse responses at the four
/// Bayer phases. Equal to the mean squared column norm by symmetry.
Eigen::Vector3d isp_noise_gain(const CameraProfile& profile) {
  Eigen::Vector3d gain = Eigen::Vector3d::Zero();
  for (Index py = 0; py < 2; ++py)
    for (Index px = 0; px < 2; ++px) {
      BayerPlane impulse(12, 12);
      impulse(6 + py, 6 + px) = 1.0;
      const ImagePlane cam = demosaic_bilinear(impulse);
      for (Index y = 0; y < cam.height(); ++y)
        for (Index x = 0; x < cam.width(); ++x) {
          Eigen::Vector3d v(cam(y, x, 0), cam(y, x, 1), cam(y, x, 2));
          v = profile.ccm * profile.wb_gains.cwiseProduct(v);
          gain += v.cwiseAbs2();
        }
    }
  return gain / 4.0;
}

}  // namespace

StatsVarianceResult run_stats_variance(const StatsVarianceConfig& c) {
  if (c.intensities.size() < 2 || c.repeats < 1 || c.patch < 8) throw DomainError("stats-variance: bad configuration");
  const CameraProfile& profile = bundled_profile(c.profile);
  StatsVarianceResult result;
  result.report.suite = "STATS_VARIANCE";
  constexpr Index border = 2;

  auto attacked_variance = [&](double intensity, const NoiseParams& params, std::uint64_t stream) {
    const ImagePlane img = ImagePlane::constant(c.patch, c.patch, {intensity, intensity, intensity}, ColorDomain::SrgbNonlinear);
    AttackOptions options;
    options.profile = profile;
    options.params = params;
    options.mode = c.mode;
    double v = 0.0;
    for (int r = 0; r < c.repeats; ++r)
      v += mean_channel_variance(synthesize_attack(img, options, derive_seed(c.seed, stream * 1000 + r)).image, border);
    return v / c.repeats;
  };

  double mean_pds = 0.0;
  for (std::size_t i = 0; i < c.intensities.size(); ++i) {
    VarianceRow row;
    row.intensity = c.intensities[i];
    row.var_pds = attacked_variance(row.intensity, c.params, 2 * i);
    row.var_k0 = attacked_variance(row.intensity, NoiseParams{0.0, c.k0_sigma}, 2 * i + 1);
    mean_pds += row.var_pds;
    result.rows.push_back(row);
  }
  mean_pds /= static_cast<double>(result.rows.size());
  result.srgb_stddev = std::sqrt(mean_pds);

  const Eigen::Vector3d gain = isp_noise_gain(profile);
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    auto& row = result.rows[i];
    const ImagePlane img =
        ImagePlane::constant(c.patch, c.patch, {row.intensity, row.intensity, row.intensity}, ColorDomain::SrgbNonlinear);
    double v = 0.0;
    for (int r = 0; r < c.repeats; ++r)
      v += mean_channel_variance(inject_srgb_gaussian(img, result.srgb_stddev, derive_seed(c.seed, 7000 + i * 100 + r)), border);
    row.var_srgb = v / c.repeats;
    // Delta method through the gamma: var ≈ Γ'(μ)² · σ² · gain, μ = x^γ.
    const double mu = std::pow(row.intensity, profile.gamma);
    const double slope = std::pow(mu, 1.0 / profile.gamma - 1.0) / profile.gamma;
    row.var_k0_predicted = slope * slope * c.k0_sigma * c.k0_sigma * gain.mean();
  }

  // sRGB injection: flat across bins.
  double srgb_mean = 0.0;
  for (const auto& r : result.rows) srgb_mean += r.var_srgb;
  srgb_mean /= static_cast<double>(result.rows.size());
  double srgb_dev = 0.0;
  std::size_t worst_bin = 0;
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const double d = std::abs(result.rows[i].var_srgb - srgb_mean) / srgb_mean;
    if (d > srgb_dev) {
      srgb_dev = d;
      worst_bin = i;
    }
  }
  result.report.add("srgb_flat", srgb_dev <= c.flat_tol, srgb_dev, c.flat_tol,
                    "max relative deviation from the mean, worst bin " + fmt(result.rows[worst_bin].intensity));

  // PDS: signal dependent.
  MomentAccumulator pds;
  for (const auto& r : result.rows) pds.add(r.var_pds);
  const double cv = std::sqrt(pds.variance()) / pds.mean();
  result.report.add("pds_signal_dependent", cv > c.min_cv, cv, c.min_cv, "coefficient of variation across bins");

  // Shot-free run follows the gamma derivative.
  double k0_err = 0.0;
  std::size_t k0_bin = 0;
  int order_violations = 0;
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const auto& r = result.rows[i];
    const double e = std::abs(r.var_k0 - r.var_k0_predicted) / r.var_k0_predicted;
    if (e > k0_err) {
      k0_err = e;
      k0_bin = i;
    }
    if (i > 0 && r.var_k0 > result.rows[i - 1].var_k0) ++order_violations;
  }
  result.report.add("k0_matches_gamma_derivative", k0_err <= c.k0_tol, k0_err, c.k0_tol,
                    "max relative error against the propagated sigma^2, worst bin " + fmt(result.rows[k0_bin].intensity));
  result.report.add("k0_monotone", order_violations == 0, order_violations, 0, "variance nonincreasing in intensity");
  return result;
}

std::string to_csv(const StatsVarianceResult& r) {
  std::ostringstream s;
  s << std::setprecision(10);
  s << "intensity,var_pds,var_srgb,var_k0,var_k0_predicted\n";
  for (const auto& row : r.rows)
    s << row.intensity << ',' << row.var_pds << ',' << row.var_srgb << ',' << row.var_k0 << ',' << row.var_k0_predicted << '\n';
  return s.str();
}

std::string to_svg(const StatsVarianceResult& r) {
  constexpr double w = 640, h = 400, left = 80, right = 20, top = 30, bottom = 50;
  double ymax = 0.0;
  for (const auto& row : r.rows) ymax = std::max({ymax, row.var_pds, row.var_srgb});
  ymax *= 1.1;
  auto px = [&](double x) { return left + x * (w - left - right); };
  auto py = [&](double y) { return h - bottom - y / ymax * (h - top - bottom); };
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double x = 0.25 * i;
    s << "<text x=\"" << px(x) << "\" y=\"" << h - bottom + 18 << "\" text-anchor=\"middle\">" << x << "</text>\n";
    std::ostringstream label;
    label << std::scientific << std::setprecision(1) << ymax * i / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << py(ymax * i / 4.0) + 4 << "\" text-anchor=\"end\">" << label.str() << "</text>\n";
  }
  s << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">signal intensity</text>\n";
  s << "<text x=\"16\" y=\"" << (top + h - bottom) / 2 << "\" transform=\"rotate(-90 16 " << (top + h - bottom) / 2
    << ")\" text-anchor=\"middle\">noise variance</text>\n";
  auto series = [&](auto get, const char* color, const char* name, double ly) {
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& row : r.rows) s << px(row.intensity) << ',' << py(get(row)) << ' ';
    s << "\"/>\n";
    for (const auto& row : r.rows) s << "<circle cx=\"" << px(row.intensity) << "\" cy=\"" << py(get(row)) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    s << "<line x1=\"" << w - 200 << "\" y1=\"" << ly << "\" x2=\"" << w - 175 << "\" y2=\"" << ly << "\" stroke=\"" << color
      << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << w - 170 << "\" y=\"" << ly + 4 << "\">" << name << "</text>\n";
  };
  series([](const VarianceRow& row) { return row.var_pds; }, "#c0392b", "RAW-domain attack", top + 10);
  series([](const VarianceRow& row) { return row.var_srgb; }, "#2471a3", "sRGB Gaussian", top + 28);
  s << "</svg>\n";
  return s.str();
}

}  // namespace rawshield::verify
