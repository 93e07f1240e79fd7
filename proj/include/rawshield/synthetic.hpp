#pragma once

#include "rawshield/isp.hpp"
#include "rawshield/rng.hpp"

namespace rawshield {

/// Deterministic low-frequency sRGB test chart with samples in [0.15, 0.85].
ImagePlane smooth_chart(Index height, Index width);

enum class PatchKind { Gradient, Checkerboard, Texture };

/// Procedural sRGB patch in [0, 1]: linear color gradients, soft-edged
/// checkerboards, or box-filtered noise textures. The darkest 15-40% of
/// pixels are crushed to exact black; read noise is only distinguishable from
/// shot noise where the signal is near zero.
ImagePlane procedural_patch(Index size, CounterRng& rng);
ImagePlane procedural_patch(Index size, PatchKind kind, CounterRng& rng);

}  // namespace rawshield
