#include "rawshield/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "rawshield/errors.hpp"

namespace rawshield {

void MomentAccumulator::add(double x) {
  const long long n1 = n_;
  ++n_;
  const double n = static_cast<double>(n_);
  const double delta = x - mean_;
  const double delta_n = delta / n;
  const double delta_n2 = delta_n * delta_n;
  const double term1 = delta * delta_n * static_cast<double>(n1);
  mean_ += delta_n;
  m4_ += term1 * delta_n2 * (n * n - 3 * n + 3) + 6 * delta_n2 * m2_ - 4 * delta_n * m3_;
  m3_ += term1 * delta_n * (n - 2) - 3 * delta_n * m2_;
  m2_ += term1;
}

void MomentAccumulator::merge(const MomentAccumulator& o) {
  if (o.n_ == 0) return;
  if (n_ == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(n_), nb = static_cast<double>(o.n_);
  const double n = na + nb;
  const double delta = o.mean_ - mean_;
  const double d2 = delta * delta, d3 = d2 * delta, d4 = d2 * d2;
  const double m2 = m2_ + o.m2_ + d2 * na * nb / n;
  const double m3 = m3_ + o.m3_ + d3 * na * nb * (na - nb) / (n * n) +
                    3.0 * delta * (na * o.m2_ - nb * m2_) / n;
  const double m4 = m4_ + o.m4_ + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n) +
                    6.0 * d2 * (na * na * o.m2_ + nb * nb * m2_) / (n * n) +
                    4.0 * delta * (na * o.m3_ - nb * m3_) / n;
  mean_ += delta * nb / n;
  m2_ = m2;
  m3_ = m3;
  m4_ = m4;
  n_ += o.n_;
}

double MomentAccumulator::variance() const {
  return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0;
}

double MomentAccumulator::skewness() const {
  if (n_ < 2 || m2_ == 0.0) return 0.0;
  const double n = static_cast<double>(n_);
  return std::sqrt(n) * m3_ / std::pow(m2_, 1.5);
}

double MomentAccumulator::excess_kurtosis() const {
  if (n_ < 2 || m2_ == 0.0) return 0.0;
  const double n = static_cast<double>(n_);
  return n * m4_ / (m2_ * m2_) - 3.0;
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman: need two equal-length samples");
  const auto ra = ranks(a), rb = ranks(b);
  const Eigen::Map<const Eigen::ArrayXd> x(ra.data(), static_cast<Eigen::Index>(ra.size()));
  const Eigen::Map<const Eigen::ArrayXd> y(rb.data(), static_cast<Eigen::Index>(rb.size()));
  const Eigen::ArrayXd xc = x - x.mean(), yc = y - y.mean();
  const double denom = std::sqrt((xc * xc).sum() * (yc * yc).sum());
  return denom > 0.0 ? (xc * yc).sum() / denom : 0.0;
}

double psnr(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
  if (a.size() != b.size() || a.size() == 0) throw ShapeError("psnr: size mismatch");
  const double mse = (a - b).square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

LineFit fit_line(std::span<const double> x, std::span<const double> y) {
  return fit_line(x, y, std::vector<double>(x.size(), 1.0));
}

LineFit fit_line(std::span<const double> x, std::span<const double> y, std::span<const double> w) {
  if (x.size() != y.size() || x.size() != w.size() || x.size() < 2) throw ShapeError("fit_line: need >= 2 points");
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixX2d design(n, 2);
  Eigen::VectorXd rhs(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(i);
    if (!(w[j] >= 0.0)) throw DomainError("fit_line: weights must be >= 0");
    const double r = std::sqrt(w[j]);
    design(i, 0) = r * x[j];
    design(i, 1) = r;
    rhs(i) = r * y[j];
  }
  const Eigen::Vector2d beta = design.colPivHouseholderQr().solve(rhs);
  return {beta(0), beta(1)};
}

}  // namespace rawshield
