#pragma once

#include <Eigen/Dense>

#include <span>

namespace rawshield {

/// Streaming central moments up to order four (Welford/Terriberry update).
class MomentAccumulator {
 public:
  void add(double x);
  void merge(const MomentAccumulator& other);

  long long count() const { return n_; }
  double mean() const { return mean_; }
  /// Unbiased sample variance.
  double variance() const;
  double skewness() const;
  /// Excess kurtosis (0 for a Gaussian).
  double excess_kurtosis() const;

 private:
  long long n_ = 0;
  double mean_ = 0.0, m2_ = 0.0, m3_ = 0.0, m4_ = 0.0;
};

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

/// PSNR in dB for signals with peak 1; +inf when identical.
double psnr(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b);

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
};

/// Ordinary least squares y ≈ slope·x + intercept.
LineFit fit_line(std::span<const double> x, std::span<const double> y);
/// Weighted least squares; w[i] is typically 1/Var(y[i]).
LineFit fit_line(std::span<const double> x, std::span<const double> y, std::span<const double> w);

}  // namespace rawshield
