#include "rawshield/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace rawshield {

ImagePlane smooth_chart(Index height, Index width) {
  ImagePlane img(height, width, 3, ColorDomain::SrgbNonlinear);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (Index y = 0; y < height; ++y) {
    const double v = static_cast<double>(y) / static_cast<double>(std::max<Index>(height, 1));
    for (Index x = 0; x < width; ++x) {
      const double u = static_cast<double>(x) / static_cast<double>(std::max<Index>(width, 1));
      img(y, x, 0) = 0.5 + 0.35 * std::sin(two_pi * (0.7 * u + 0.2 * v));
      img(y, x, 1) = 0.5 + 0.35 * std::cos(two_pi * (0.5 * v - 0.3 * u));
      img(y, x, 2) = 0.5 + 0.35 * std::sin(two_pi * (0.4 * u + 0.6 * v) + 1.0);
    }
  }
  return img;
}

namespace {

Eigen::Vector3d random_color(CounterRng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

ImagePlane gradient_patch(Index size, CounterRng& rng) {
  const Eigen::Vector3d dark = random_color(rng, 0.0, 0.12);
  const Eigen::Vector3d bright = random_color(rng, 0.55, 1.0);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double cx = std::cos(angle), cy = std::sin(angle);
  ImagePlane img(size, size, 3, ColorDomain::SrgbNonlinear);
  const double half = 0.5 * static_cast<double>(size - 1);
  const double extent = half * (std::abs(cx) + std::abs(cy));
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      const double t = 0.5 + 0.5 * ((x - half) * cx + (y - half) * cy) / std::max(extent, 1.0);
      for (int c = 0; c < 3; ++c) img(y, x, c) = dark[c] + (bright[c] - dark[c]) * t;
    }
  return img;
}

ImagePlane checker_patch(Index size, CounterRng& rng) {
  const Eigen::Vector3d a = random_color(rng, 0.0, 0.15);
  const Eigen::Vector3d b = random_color(rng, 0.4, 0.95);
  const Index cell = Index{4} << (rng() % 3);
  ImagePlane img(size, size, 3, ColorDomain::SrgbNonlinear);
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      const bool on = ((y / cell) + (x / cell)) % 2 == 0;
      for (int c = 0; c < 3; ++c) img(y, x, c) = on ? a[c] : b[c];
    }
  return img;
}

ImagePlane texture_patch(Index size, CounterRng& rng) {
  // White noise, separable box blur, then stretched to span dark and bright.
  const Index radius = 2 + static_cast<Index>(rng() % 4);
  PlaneArray noise(size, size);
  for (Index i = 0; i < noise.size(); ++i) noise.data()[i] = rng.uniform();
  PlaneArray tmp = PlaneArray::Zero(size, size), blurred = PlaneArray::Zero(size, size);
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      double s = 0.0;
      int n = 0;
      for (Index d = -radius; d <= radius; ++d) {
        const Index xx = std::clamp<Index>(x + d, 0, size - 1);
        s += noise(y, xx);
        ++n;
      }
      tmp(y, x) = s / n;
    }
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      double s = 0.0;
      int n = 0;
      for (Index d = -radius; d <= radius; ++d) {
        const Index yy = std::clamp<Index>(y + d, 0, size - 1);
        s += tmp(yy, x);
        ++n;
      }
      blurred(y, x) = s / n;
    }
  const double lo = blurred.minCoeff(), hi = blurred.maxCoeff();
  const Eigen::Vector3d tint = random_color(rng, 0.6, 1.0);
  const double floor = rng.uniform(0.0, 0.08);
  ImagePlane img(size, size, 3, ColorDomain::SrgbNonlinear);
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      const double t = hi > lo ? (blurred(y, x) - lo) / (hi - lo) : 0.5;
      for (int c = 0; c < 3; ++c) img(y, x, c) = floor + (tint[c] - floor) * t;
    }
  return img;
}

}  // namespace

ImagePlane procedural_patch(Index size, PatchKind kind, CounterRng& rng) {
  ImagePlane img = [&] {
    switch (kind) {
      case PatchKind::Checkerboard: return checker_patch(size, rng);
      case PatchKind::Texture: return texture_patch(size, rng);
      case PatchKind::Gradient: break;
    }
    return gradient_patch(size, rng);
  }();
  // Crushed shadows: the darkest 15-40% of pixels (by brightest channel)
  // become black and the rest is stretched from that black point.
  std::vector<double> peaks(static_cast<std::size_t>(size * size));
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x)
      peaks[static_cast<std::size_t>(y * size + x)] = std::max({img(y, x, 0), img(y, x, 1), img(y, x, 2)});
  std::vector<double> sorted = peaks;
  const auto rank = static_cast<std::ptrdiff_t>(rng.uniform(0.15, 0.4) * static_cast<double>(sorted.size()));
  std::nth_element(sorted.begin(), sorted.begin() + rank, sorted.end());
  const double black = std::min(sorted[static_cast<std::size_t>(rank)], 0.9);
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        img(y, x, c) = peaks[static_cast<std::size_t>(y * size + x)] <= black
                           ? 0.0
                           : std::max(0.0, img(y, x, c) - black) / (1.0 - black);
  return img;
}

ImagePlane procedural_patch(Index size, CounterRng& rng) {
  const auto kind = static_cast<PatchKind>(rng() % 3);
  return procedural_patch(size, kind, rng);
}

}  // namespace rawshield
