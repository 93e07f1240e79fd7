#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "rawshield/isp.hpp"

namespace rawshield::io {

namespace fs = std::filesystem;

/// 8-bit PNG → sRGB image in [0, 1]. Gray, palette, alpha and 16-bit inputs
/// are converted to 8-bit RGB. Throws IoError/FormatError.
ImagePlane read_png(const fs::path& path);

/// round(255·clamp(x, 0, 1)) per sample; no colour chunk written.
void write_png(const fs::path& path, const ImagePlane& img);

/// The 8-bit value a sample lands on at the file boundary.
std::uint8_t quantize(double x);
ImagePlane quantize_image(const ImagePlane& img);

/// One tensor of an ADT1 file. Payload is f32 on disk.
struct NamedArray {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;
};

/// Binary layout (little-endian): "ADT1", u32 count, then per tensor u8 rank,
/// rank × u32 extents, f32 payload. Names live in `<path>.json` next to it,
/// together with any extra `meta`.
void save_adt1(const fs::path& path, const std::vector<NamedArray>& tensors, const nlohmann::json& meta = {});

struct Adt1Contents {
  std::vector<NamedArray> tensors;
  nlohmann::json meta;
};

/// Reads the binary and, when present, the JSON index (names and meta).
/// Throws FormatError on bad magic, truncation, trailing bytes, or extents
/// that overflow the file.
Adt1Contents load_adt1(const fs::path& path);

fs::path index_path(const fs::path& path);

/// BayerPlane as a rank-2 ADT1 tensor. Bit-exact for f32-representable samples.
void save_bayer(const fs::path& path, const BayerPlane& raw);
BayerPlane load_bayer(const fs::path& path);

/// Writes `contents` to `path` atomically enough for our purposes (temp file
/// then rename). Throws IoError.
void write_text(const fs::path& path, const std::string& contents);
std::string read_text(const fs::path& path);

}  // namespace rawshield::io
