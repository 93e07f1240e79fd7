#include "rawshield/grad_check.hpp"

#include <cmath>
#include <sstream>

#include "rawshield/rng.hpp"

namespace rawshield::ad {

namespace {

struct Judge {
  const GradCheckOptions& opt;
  GradCheckReport& report;

  void operator()(double analytic, double numeric, const std::string& where) {
    const double err = std::abs(analytic - numeric);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double rel = scale > 0.0 ? err / scale : 0.0;
    const bool ok = err <= std::max(opt.tol_rel * scale, opt.abs_floor);
    ++report.checks;
    report.max_abs_error = std::max(report.max_abs_error, err);
    // Relative error is only meaningful above the absolute floor.
    if (err > opt.abs_floor && rel > report.max_rel_error) {
      report.max_rel_error = rel;
      std::ostringstream os;
      os.precision(10);
      os << where << " analytic=" << analytic << " numeric=" << numeric;
      report.worst = os.str();
    }
    if (!ok) report.passed = false;
  }
};

double eval(const std::function<TensorD()>& f) {
  NoGradGuard guard;
  return f().item();
}

}  // namespace

GradCheckReport grad_check(const std::function<TensorD()>& f, const std::vector<TensorD>& params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  std::vector<TensorD> leaves = params;
  for (auto& p : leaves) p.zero_grad();
  backward(f());
  std::vector<TensorD::Array> analytic;
  Index total = 0;
  for (const auto& p : leaves) {
    analytic.push_back(p.grad());
    total += p.numel();
  }
  Judge judge{options, report};
  const double h = options.step;

  if (total <= options.max_coordinates) {
    for (std::size_t t = 0; t < leaves.size(); ++t) {
      auto& v = leaves[t].mutable_value();
      for (Index i = 0; i < v.size(); ++i) {
        const double saved = v[i];
        v[i] = saved + h;
        const double fp = eval(f);
        v[i] = saved - h;
        const double fm = eval(f);
        v[i] = saved;
        judge(analytic[t][i], (fp - fm) / (2.0 * h),
              "param" + std::to_string(t) + "[" + std::to_string(i) + "]");
      }
    }
    return report;
  }

  report.directional = true;
  CounterRng rng(options.seed, 0x6772616443ULL);
  for (int probe = 0; probe < options.probes; ++probe) {
    std::vector<TensorD::Array> dir;
    double along = 0.0;
    for (std::size_t t = 0; t < leaves.size(); ++t) {
      TensorD::Array d(leaves[t].numel());
      for (Index i = 0; i < d.size(); ++i) d[i] = (rng() >> 63) ? 1.0 : -1.0;
      along += (d * analytic[t]).sum();
      dir.push_back(std::move(d));
    }
    std::vector<TensorD::Array> saved;
    for (auto& p : leaves) saved.push_back(p.value());
    for (std::size_t t = 0; t < leaves.size(); ++t) leaves[t].mutable_value() = saved[t] + h * dir[t];
    const double fp = eval(f);
    for (std::size_t t = 0; t < leaves.size(); ++t) leaves[t].mutable_value() = saved[t] - h * dir[t];
    const double fm = eval(f);
    for (std::size_t t = 0; t < leaves.size(); ++t) leaves[t].mutable_value() = saved[t];
    judge(along, (fp - fm) / (2.0 * h), "probe" + std::to_string(probe));
  }
  return report;
}

}  // namespace rawshield::ad
