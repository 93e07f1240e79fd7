#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rawshield/noise.hpp"

/// Self-contained verification experiments. Each suite returns a report of
/// named checks with the observed value and the threshold it was held to.
namespace rawshield::verify {

struct Check {
  std::string name;
  bool passed = false;
  double observed = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<Check> checks;
  /// Set when the suite's premise does not apply (Gaussian field in CLT).
  std::string note;

  bool passed() const;
  void add(std::string name, bool passed, double observed, double threshold, std::string detail = {});
};

// ---- RAW noise --------------------------------------------------------------------

struct LinearityOptions {
  std::vector<double> intensities{0.0, 1e-3, 3e-3, 0.01, 0.03, 0.1, 0.3, 0.6, 0.9};
  NoiseParams params{5e-3, 2e-3};
  InjectionMode mode = InjectionMode::ExactPoissonGaussian;
  Index side = 1000;  ///< side² draws per level
  double slope_tol = 0.05;
  double intercept_tol = 0.10;
  std::uint64_t seed = 1;
};

/// Sample variance of constant RAW planes against intensity, fitted by
/// weighted least squares (weights 1/var²): slope ≈ k, intercept ≈ sigma².
SuiteReport verify_variance_linearity(const LinearityOptions& options = {});

struct CltOptions {
  InjectionMode mode = InjectionMode::ExactPoissonGaussian;
  double intensity = 0.5;
  NoiseParams params{1e-2, 1e-4};
  Index tile = 1024;
  int tiles = 64;
  Index block = 4;
  double reduction = 2.0;
  std::uint64_t seed = 1;
};

struct CltMeasurement {
  double kurtosis_full = 0.0;
  double kurtosis_block = 0.0;
  long long samples_full = 0;
  long long samples_block = 0;
};

/// Excess kurtosis of the noise field at full resolution and after
/// block×block averaging. In GaussApprox mode the suite reports itself as
/// degenerate and checks only that the full-resolution kurtosis is ≈ 0.
SuiteReport verify_clt(const CltOptions& options = {}, CltMeasurement* measurement = nullptr);

// ---- ISP ----------------------------------------------------------------------------

struct RoundTripOptions {
  Index size = 64;
  double min_psnr = 45.0;
  /// Negative control: swap in a demosaic with a deliberately wrong kernel.
  bool corrupt_demosaic = false;
};

/// Noiseless forward∘inverse ISP on every bundled profile: exact on
/// constants, PSNR ≥ min_psnr on smooth charts.
SuiteReport verify_roundtrip(const RoundTripOptions& options = {});

// ---- autodiff -----------------------------------------------------------------------

struct GradOptions {
  int seeds = 20;
  std::uint64_t first_seed = 1;
};

/// Central finite differences against backward for every op and every
/// composed network and loss, over `seeds` random draws each.
SuiteReport verify_gradients(const GradOptions& options = {});

// ---- objectives ---------------------------------------------------------------------

/// Adaptive metric loss sweeps: nonincreasing in d(out, att), nondecreasing
/// in the margin, Σd/ε when saturated. Checked on synthetic distances and on
/// surrogate features of real images.
SuiteReport verify_margin();

/// Perturbed predictions on sigma' = sqrt(sigma² + sigma_per²) give a zero
/// low-light term; off-manifold by δσ it grows monotonically in |δσ|.
SuiteReport verify_additive_variance();

// ---- stats-variance experiment ----------------------------------------------------

struct StatsVarianceConfig {
  std::vector<double> intensities{0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95};
  Index patch = 128;
  int repeats = 4;
  NoiseParams params{1e-3, 1e-3};
  std::string profile = "canon_5d_like";
  InjectionMode mode = InjectionMode::ExactPoissonGaussian;
  /// Read noise for the shot-free run compared with the analytic propagation.
  double k0_sigma = 1e-4;
  double flat_tol = 0.10;
  double min_cv = 0.20;
  double k0_tol = 0.10;
  std::uint64_t seed = 1;
};

struct VarianceRow {
  double intensity = 0.0;
  double var_pds = 0.0;
  double var_srgb = 0.0;
  double var_k0 = 0.0;
  double var_k0_predicted = 0.0;
};

struct StatsVarianceResult {
  std::vector<VarianceRow> rows;
  double srgb_stddev = 0.0;  ///< matched-energy stddev used for direct injection
  SuiteReport report;
};

/// Per-intensity output variance of constant sRGB patches under the RAW
/// attack and under direct sRGB Gaussian noise of matched mean energy.
StatsVarianceResult run_stats_variance(const StatsVarianceConfig& config = {});

std::string to_csv(const StatsVarianceResult& result);
std::string to_svg(const StatsVarianceResult& result);

}  // namespace rawshield::verify
