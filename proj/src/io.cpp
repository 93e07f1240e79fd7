#include "rawshield/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace rawshield::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string() + ": " + std::strerror(errno));
  return f;
}

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& bytes, const fs::path& path) : bytes_(bytes), path_(path) {}

  const char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError(path_.string() + ": truncated ADT1 file");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(*take(1)); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  const fs::path& path_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint8_t quantize(double x) {
  return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0)));
}

ImagePlane quantize_image(const ImagePlane& img) {
  ImagePlane out = img;
  for (Index i = 0; i < out.data().size(); ++i) out.data()[i] = quantize(img.data()[i]) / 255.0;
  return out;
}

ImagePlane read_png(const fs::path& path) {
  FilePtr f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw FormatError(path.string() + ": not a PNG file");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) throw IoError("libpng: cannot allocate read struct");
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": " + (err.empty() ? "corrupt PNG" : err));
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": unsupported PNG layout");
  }
  pixels.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  ImagePlane img(height, width, 3, ColorDomain::SrgbNonlinear);
  for (std::size_t i = 0; i < pixels.size(); ++i) img.data()[static_cast<Index>(i)] = pixels[i] / 255.0;
  return img;
}

void write_png(const fs::path& path, const ImagePlane& img) {
  if (img.channels() != 3) throw ShapeError("write_png: expected 3 channels");
  if (!img.all_finite()) throw InputError("write_png: non-finite sample");
  std::vector<unsigned char> pixels(static_cast<std::size_t>(img.data().size()));
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = quantize(img.data()[static_cast<Index>(i)]);

  FilePtr f = open_file(path, "wb");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) throw IoError("libpng: cannot allocate write struct");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path.string() + ": " + (err.empty() ? "PNG write failed" : err));
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t rowbytes = static_cast<std::size_t>(img.width()) * 3;
  for (Index y = 0; y < img.height(); ++y) png_write_row(png, pixels.data() + y * rowbytes);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

fs::path index_path(const fs::path& path) {
  fs::path p = path;
  p += ".json";
  return p;
}

void save_adt1(const fs::path& path, const std::vector<NamedArray>& tensors, const nlohmann::json& meta) {
  std::string out = "ADT1";
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  nlohmann::json index;
  index["format"] = "ADT1";
  index["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    if (t.shape.size() > 255) throw ShapeError("save_adt1: rank above 255");
    std::int64_t n = 1;
    out.push_back(static_cast<char>(t.shape.size()));
    for (auto e : t.shape) {
      if (e < 0 || e > 0xFFFFFFFFLL) throw ShapeError("save_adt1: extent out of u32 range");
      put_u32(out, static_cast<std::uint32_t>(e));
      n *= e;
    }
    if (static_cast<std::size_t>(n) != t.data.size())
      throw ShapeError("save_adt1: tensor '" + t.name + "' payload does not match its shape");
    for (float v : t.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
    index["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
  }
  if (!meta.is_null()) index["meta"] = meta;
  write_text(path, out);
  write_text(index_path(path), index.dump(2) + "\n");
}

Adt1Contents load_adt1(const fs::path& path) {
  const std::string bytes = read_text(path);
  Reader r(bytes, path);
  if (std::memcmp(r.take(4), "ADT1", 4) != 0) throw FormatError(path.string() + ": bad magic (expected ADT1)");
  const std::uint32_t count = r.u32();
  Adt1Contents out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray t;
    t.name = "tensor" + std::to_string(i);
    const std::uint8_t rank = r.u8();
    std::uint64_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t e = r.u32();
      t.shape.push_back(e);
      n *= e;
      if (n > r.remaining() / 4 + 1) throw FormatError(path.string() + ": tensor extents exceed the file size");
    }
    if (n * 4 > r.remaining()) throw FormatError(path.string() + ": truncated ADT1 payload");
    const char* p = r.take(n * 4);
    t.data.resize(n);
    for (std::uint64_t k = 0; k < n; ++k) {
      const auto* b = reinterpret_cast<const unsigned char*>(p + 4 * k);
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      std::memcpy(&t.data[k], &bits, 4);
    }
    out.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after ADT1 payload");

  const fs::path idx = index_path(path);
  if (fs::exists(idx)) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text(idx));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(idx.string() + ": " + e.what());
    }
    const auto& list = j.at("tensors");
    if (list.size() != out.tensors.size()) throw FormatError(idx.string() + ": tensor count disagrees with binary");
    for (std::size_t i = 0; i < list.size(); ++i) {
      out.tensors[i].name = list[i].at("name").get<std::string>();
      if (list[i].at("shape").get<std::vector<std::int64_t>>() != out.tensors[i].shape)
        throw FormatError(idx.string() + ": shape of '" + out.tensors[i].name + "' disagrees with binary");
    }
    if (j.contains("meta")) out.meta = j["meta"];
  }
  return out;
}

void save_bayer(const fs::path& path, const BayerPlane& raw) {
  NamedArray t{"bayer_rggb", {raw.height(), raw.width()}, {}};
  t.data.reserve(static_cast<std::size_t>(raw.size()));
  for (Index y = 0; y < raw.height(); ++y)
    for (Index x = 0; x < raw.width(); ++x) t.data.push_back(static_cast<float>(raw(y, x)));
  save_adt1(path, {t}, {{"kind", "bayer_rggb"}});
}

BayerPlane load_bayer(const fs::path& path) {
  const auto c = load_adt1(path);
  if (c.tensors.size() != 1 || c.tensors[0].shape.size() != 2)
    throw FormatError(path.string() + ": expected a single rank-2 tensor");
  const auto& t = c.tensors[0];
  PlaneArray data(t.shape[0], t.shape[1]);
  for (Index i = 0; i < data.size(); ++i) data(i / t.shape[1], i % t.shape[1]) = t.data[static_cast<std::size_t>(i)];
  try {
    return BayerPlane(std::move(data));
  } catch (const ShapeError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace rawshield::io
